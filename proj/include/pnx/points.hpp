#pragma once
// Point-cloud container and the raw binary file format: little-endian 32-bit
// reals, four per point (x, y, z, intensity), no header.

#include <cstring>
#include <fstream>

#include "pnx/core.hpp"

namespace pnx {

template <class S>
struct PointCloud {
  Matrix<S> pts;  // n x F, columns (x, y, z, intensity, ...)

  int n() const { return pts.rows; }
  int f() const { return pts.cols; }
};

template <class S>
inline PointCloud<S> make_cloud(Matrix<S> pts) {
  require(pts.cols >= 4, Err::MalformedInput,
          "points need at least (x, y, z, intensity) columns");
  require(pts.all_finite(), Err::NonFinite, "point cloud has NaN/Inf values");
  return PointCloud<S>{std::move(pts)};
}

template <class S>
inline PointCloud<S> decode_points(const std::vector<uint8_t>& bytes) {
  require(bytes.size() % 16 == 0, Err::MalformedLength,
          "point file length is not a multiple of 16 bytes");
  int n = int(bytes.size() / 16);
  Matrix<S> pts(n, 4);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 4; ++c) {
      uint32_t u = 0;
      // Little-endian byte order regardless of host.
      for (int b = 3; b >= 0; --b)
        u = (u << 8) | bytes[size_t(i) * 16 + size_t(c) * 4 + size_t(b)];
      float v;
      std::memcpy(&v, &u, 4);
      pts.at(i, c) = S(v);
    }
  require(pts.all_finite(), Err::NonFinite, "point file has NaN/Inf values");
  return PointCloud<S>{std::move(pts)};
}

template <class S>
inline std::vector<uint8_t> encode_points(const PointCloud<S>& pc) {
  std::vector<uint8_t> bytes;
  bytes.reserve(size_t(pc.n()) * 16);
  for (int i = 0; i < pc.n(); ++i)
    for (int c = 0; c < 4; ++c) {
      float v = float(pc.pts.at(i, c));
      uint32_t u;
      std::memcpy(&u, &v, 4);
      for (int b = 0; b < 4; ++b) bytes.push_back(uint8_t((u >> (8 * b)) & 0xFF));
    }
  return bytes;
}

template <class S>
inline PointCloud<S> load_points(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), Err::IoError, "cannot open point file: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  return decode_points<S>(bytes);
}

template <class S>
inline void save_points(const PointCloud<S>& pc, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), Err::IoError, "cannot open point file for write: " + path);
  auto bytes = encode_points(pc);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          std::streamsize(bytes.size()));
  require(f.good(), Err::IoError, "short write to point file: " + path);
}

}  // namespace pnx
