#pragma once
// Sparse tensor data model: coordinate-indexed feature rows over a batched
// 2D/3D grid, plus dense conversions used by the test oracles.

#include "pnx/coords.hpp"
#include "pnx/core.hpp"

namespace pnx {

template <class S>
struct SparseTensor {
  CoordMapPtr cm;
  Matrix<S> feats;  // n x C, row i belongs to cm->coords[i]

  int n() const { return cm ? cm->n() : 0; }
  int channels() const { return feats.cols; }
  int rank() const { return cm->rank; }
  const std::array<int, 3>& shape() const { return cm->shape; }
  int batch_size() const { return cm->batch_size; }
};

template <class S>
inline SparseTensor<S> make_sparse(std::vector<Coord> coords, Matrix<S> feats,
                                   int rank, std::array<int, 3> shape,
                                   int batch_size) {
  require(int(coords.size()) == feats.rows, Err::ShapeMismatch,
          "coords count " + std::to_string(coords.size()) +
              " != feature rows " + std::to_string(feats.rows));
  require(feats.all_finite(), Err::NonFinite, "feature matrix has NaN/Inf");
  SparseTensor<S> t;
  t.cm = make_coord_map(rank, shape, batch_size, std::move(coords));
  t.feats = std::move(feats);
  return t;
}

// 2D convenience overload.
template <class S>
inline SparseTensor<S> make_sparse2d(std::vector<Coord> coords, Matrix<S> feats,
                                     int H, int W, int batch_size = 1) {
  return make_sparse<S>(std::move(coords), std::move(feats), 2, {H, W, 1},
                        batch_size);
}

template <class S>
inline int32_t lookup(const SparseTensor<S>& t, const Coord& c) {
  require(t.cm->in_bounds(c), Err::OutOfBounds, "lookup coord outside shape");
  auto r = t.cm->find(c);
  return r ? *r : -1;
}

// ---------------------------------------------------------------------------
// Dense counterpart, [batch][channel][y][x][z], used by oracles only.

template <class S>
struct DenseGrid {
  int batch = 1;
  int channels = 0;
  int rank = 2;
  std::array<int, 3> shape{0, 0, 1};
  std::vector<S> data;

  DenseGrid() = default;
  DenseGrid(int b, int c, int rank_, std::array<int, 3> sh)
      : batch(b), channels(c), rank(rank_), shape(sh) {
    if (rank == 2) shape[2] = 1;
    data.assign(size_t(b) * c * shape[0] * shape[1] * shape[2], S(0));
  }

  size_t idx(int b, int c, int y, int x, int z = 0) const {
    return (((size_t(b) * channels + c) * shape[0] + y) * shape[1] + x) *
               shape[2] +
           z;
  }
  S& at(int b, int c, int y, int x, int z = 0) { return data[idx(b, c, y, x, z)]; }
  S at(int b, int c, int y, int x, int z = 0) const {
    return data[idx(b, c, y, x, z)];
  }
};

struct BoolGrid {
  int batch = 1;
  int rank = 2;
  std::array<int, 3> shape{0, 0, 1};
  std::vector<uint8_t> data;

  BoolGrid() = default;
  BoolGrid(int b, int rank_, std::array<int, 3> sh)
      : batch(b), rank(rank_), shape(sh) {
    if (rank == 2) shape[2] = 1;
    data.assign(size_t(b) * shape[0] * shape[1] * shape[2], 0);
  }

  size_t idx(int b, int y, int x, int z = 0) const {
    return ((size_t(b) * shape[0] + y) * shape[1] + x) * shape[2] + z;
  }
  uint8_t& at(int b, int y, int x, int z = 0) { return data[idx(b, y, x, z)]; }
  uint8_t at(int b, int y, int x, int z = 0) const {
    return data[idx(b, y, x, z)];
  }
};

template <class S>
inline DenseGrid<S> to_dense(const SparseTensor<S>& t) {
  DenseGrid<S> d(t.batch_size(), t.channels(), t.rank(), t.shape());
  for (int i = 0; i < t.n(); ++i) {
    const Coord& c = t.cm->coords[i];
    for (int ch = 0; ch < t.channels(); ++ch)
      d.at(c.b, ch, c.y, c.x, c.z) = t.feats.at(i, ch);
  }
  return d;
}

template <class S>
inline BoolGrid active_mask(const SparseTensor<S>& t) {
  BoolGrid m(t.batch_size(), t.rank(), t.shape());
  for (const Coord& c : t.cm->coords) m.at(c.b, c.y, c.x, c.z) = 1;
  return m;
}

// Coords are emitted in (b, y, x, z) scan order.
template <class S>
inline SparseTensor<S> from_dense(const DenseGrid<S>& d, const BoolGrid& mask) {
  require(mask.batch == d.batch && mask.rank == d.rank && mask.shape == d.shape,
          Err::ShapeMismatch, "mask shape does not match dense grid");
  std::vector<Coord> coords;
  for (int b = 0; b < d.batch; ++b)
    for (int y = 0; y < d.shape[0]; ++y)
      for (int x = 0; x < d.shape[1]; ++x)
        for (int z = 0; z < d.shape[2]; ++z)
          if (mask.at(b, y, x, z)) coords.push_back({b, y, x, z});
  Matrix<S> feats(int(coords.size()), d.channels);
  for (int i = 0; i < int(coords.size()); ++i) {
    const Coord& c = coords[i];
    for (int ch = 0; ch < d.channels; ++ch)
      feats.at(i, ch) = d.at(c.b, ch, c.y, c.x, c.z);
  }
  return make_sparse<S>(std::move(coords), std::move(feats), d.rank, d.shape,
                        d.batch);
}

// ---------------------------------------------------------------------------
// Comparisons (row order is not part of a tensor's identity)

inline bool same_coord_set(const CoordMap& a, const CoordMap& b) {
  if (a.n() != b.n()) return false;
  for (const Coord& c : a.coords)
    if (!b.find(c)) return false;
  return true;
}

template <class S>
inline bool tensors_equal(const SparseTensor<S>& a, const SparseTensor<S>& b,
                          double tol = 0.0) {
  if (a.rank() != b.rank() || a.shape() != b.shape() ||
      a.batch_size() != b.batch_size() || a.channels() != b.channels())
    return false;
  if (!same_coord_set(*a.cm, *b.cm)) return false;
  for (int i = 0; i < a.n(); ++i) {
    auto j = b.cm->find(a.cm->coords[i]);
    for (int ch = 0; ch < a.channels(); ++ch) {
      double d = std::abs(double(a.feats.at(i, ch)) - double(b.feats.at(*j, ch)));
      if (d > tol) return false;
    }
  }
  return true;
}

}  // namespace pnx
