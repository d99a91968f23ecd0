#pragma once
// Grid coordinates, the packed hash index shared by sparse tensors and
// rulebooks, and the metric grid configuration.

#include <array>
#include <memory>
#include <optional>
#include <unordered_map>

#include "pnx/core.hpp"

namespace pnx {

// Coordinate order is (batch, y, x[, z]); z is the vertical axis. Rank-2
// coordinates keep z == 0 so both ranks share one layout.
struct Coord {
  int32_t b = 0;
  int32_t y = 0;
  int32_t x = 0;
  int32_t z = 0;
};

inline bool operator==(const Coord& a, const Coord& b) {
  return a.b == b.b && a.y == b.y && a.x == b.x && a.z == b.z;
}

// Packed key: b:8 | y:16 | x:16 | z:16 bits. 16-bit spatial axes leave room
// for grids past 1504 cells per side.
constexpr int kMaxBatch = 1 << 8;
constexpr int kMaxAxis = 1 << 16;

inline uint64_t pack_coord(const Coord& c) {
  return (uint64_t(uint8_t(c.b)) << 48) | (uint64_t(uint16_t(c.y)) << 32) |
         (uint64_t(uint16_t(c.x)) << 16) | uint64_t(uint16_t(c.z));
}

inline Coord unpack_coord(uint64_t k) {
  Coord c;
  c.b = int32_t((k >> 48) & 0xFF);
  c.y = int32_t((k >> 32) & 0xFFFF);
  c.x = int32_t((k >> 16) & 0xFFFF);
  c.z = int32_t(k & 0xFFFF);
  return c;
}

// Immutable coordinate set with a hash index mapping Coord -> feature row.
// Shared between a sparse tensor and every rulebook built on it; submanifold
// outputs reuse the input's map outright.
struct CoordMap {
  int rank = 2;
  std::array<int, 3> shape{0, 0, 1};  // (y, x, z) extents; z == 1 for rank 2
  int batch_size = 1;
  std::vector<Coord> coords;
  std::unordered_map<uint64_t, int32_t> index;

  int n() const { return int(coords.size()); }

  int64_t cell_count() const {
    return int64_t(batch_size) * shape[0] * shape[1] * shape[2];
  }

  bool in_bounds(const Coord& c) const {
    return c.b >= 0 && c.b < batch_size && c.y >= 0 && c.y < shape[0] &&
           c.x >= 0 && c.x < shape[1] && c.z >= 0 && c.z < shape[2];
  }

  // No bounds check; out-of-shape coords simply miss.
  std::optional<int32_t> find(const Coord& c) const {
    auto it = index.find(pack_coord(c));
    if (it == index.end()) return std::nullopt;
    return it->second;
  }
};

using CoordMapPtr = std::shared_ptr<const CoordMap>;

inline void validate_shape(int rank, const std::array<int, 3>& shape,
                           int batch_size) {
  require(rank == 2 || rank == 3, Err::InvalidSpec, "rank must be 2 or 3");
  require(batch_size >= 1 && batch_size <= kMaxBatch, Err::InvalidSpec,
          "batch size outside packed range");
  for (int a = 0; a < 3; ++a) {
    int extent = shape[a];
    if (rank == 2 && a == 2) {
      require(extent == 1, Err::InvalidSpec, "rank-2 shape must have z == 1");
      continue;
    }
    require(extent >= 1 && extent <= kMaxAxis, Err::InvalidSpec,
            "axis extent outside packed range");
  }
}

inline CoordMapPtr make_coord_map(int rank, std::array<int, 3> shape,
                                  int batch_size, std::vector<Coord> coords) {
  if (rank == 2) shape[2] = 1;
  validate_shape(rank, shape, batch_size);
  auto cm = std::make_shared<CoordMap>();
  cm->rank = rank;
  cm->shape = shape;
  cm->batch_size = batch_size;
  cm->coords = std::move(coords);
  cm->index.reserve(cm->coords.size() * 2);
  for (int32_t i = 0; i < int32_t(cm->coords.size()); ++i) {
    const Coord& c = cm->coords[i];
    require(cm->in_bounds(c), Err::OutOfBounds,
            "coord (" + std::to_string(c.b) + "," + std::to_string(c.y) + "," +
                std::to_string(c.x) + "," + std::to_string(c.z) +
                ") outside shape");
    auto [it, inserted] = cm->index.emplace(pack_coord(c), i);
    require(inserted, Err::DuplicateCoord,
            "coord (" + std::to_string(c.b) + "," + std::to_string(c.y) + "," +
                std::to_string(c.x) + "," + std::to_string(c.z) +
                ") appears twice");
  }
  return cm;
}

// ---------------------------------------------------------------------------
// Metric grid

struct GridConfig {
  std::array<double, 2> x_range{-75.2, 75.2};
  std::array<double, 2> y_range{-75.2, 75.2};
  std::array<double, 2> z_range{-2.0, 4.0};
  std::array<double, 3> voxel_size{0.1, 0.1, 0.2};
  int max_points_per_voxel = 32;

  int cells(int axis) const {
    const std::array<double, 2>& r =
        axis == 0 ? x_range : (axis == 1 ? y_range : z_range);
    return int(std::llround((r[1] - r[0]) / voxel_size[axis]));
  }
  int W() const { return cells(0); }
  int H() const { return cells(1); }
  int D() const { return cells(2); }

  void validate() const {
    auto check_axis = [&](const char* name, const std::array<double, 2>& r,
                          double vs) {
      require(std::isfinite(r[0]) && std::isfinite(r[1]) && r[1] > r[0],
              Err::InvalidConfig, std::string(name) + "_range must have max > min");
      require(std::isfinite(vs) && vs > 0.0, Err::InvalidConfig,
              std::string("voxel size on ") + name + " must be > 0");
      double extent = r[1] - r[0];
      double count = std::llround(extent / vs);
      require(count >= 1, Err::InvalidConfig,
              std::string(name) + " range shorter than one cell");
      require(std::abs(count * vs - extent) <= 1e-6, Err::InvalidConfig,
              std::string(name) + " extent is not a whole number of cells");
    };
    check_axis("x", x_range, voxel_size[0]);
    check_axis("y", y_range, voxel_size[1]);
    check_axis("z", z_range, voxel_size[2]);
    require(max_points_per_voxel >= 1, Err::InvalidConfig,
            "max_points_per_voxel must be >= 1");
    require(W() <= kMaxAxis && H() <= kMaxAxis && D() <= kMaxAxis,
            Err::InvalidConfig, "grid exceeds packed coordinate range");
  }
};

}  // namespace pnx
