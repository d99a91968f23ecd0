#pragma once
// Scalar/matrix primitives, error codes, and seeded RNG streams shared by
// the whole engine.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pnx {

// ---------------------------------------------------------------------------
// Errors

enum class Err {
  DuplicateCoord,
  OutOfBounds,
  NonFinite,
  ShapeMismatch,
  InvalidSpec,
  ChannelMismatch,
  TooFewRows,
  EmptyGroup,
  MalformedLength,
  MalformedInput,
  ConfigMismatch,
  StrideMismatch,
  NoActiveSites,
  NonDifferentiablePoint,
  ManifestMismatch,
  InvalidConfig,
  IoError,
};

inline const char* err_name(Err e) {
  switch (e) {
    case Err::DuplicateCoord: return "DuplicateCoord";
    case Err::OutOfBounds: return "OutOfBounds";
    case Err::NonFinite: return "NonFinite";
    case Err::ShapeMismatch: return "ShapeMismatch";
    case Err::InvalidSpec: return "InvalidSpec";
    case Err::ChannelMismatch: return "ChannelMismatch";
    case Err::TooFewRows: return "TooFewRows";
    case Err::EmptyGroup: return "EmptyGroup";
    case Err::MalformedLength: return "MalformedLength";
    case Err::MalformedInput: return "MalformedInput";
    case Err::ConfigMismatch: return "ConfigMismatch";
    case Err::StrideMismatch: return "StrideMismatch";
    case Err::NoActiveSites: return "NoActiveSites";
    case Err::NonDifferentiablePoint: return "NonDifferentiablePoint";
    case Err::ManifestMismatch: return "ManifestMismatch";
    case Err::InvalidConfig: return "InvalidConfig";
    case Err::IoError: return "IoError";
  }
  return "UnknownError";
}

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& msg)
      : std::runtime_error(std::string(err_name(code)) + ": " + msg),
        code_(code) {}
  Err code() const { return code_; }

 private:
  Err code_;
};

[[noreturn]] inline void fail(Err code, const std::string& msg) {
  throw Error(code, msg);
}

inline void require(bool ok, Err code, const std::string& msg) {
  if (!ok) fail(code, msg);
}

// ---------------------------------------------------------------------------
// Deterministic RNG
//
// splitmix64 core. Every consumer pulls a named stream (or an integer-keyed
// substream) off a single root seed, so adding or reordering call sites does
// not shift anyone else's sequence.

class Rng {
 public:
  explicit Rng(uint64_t state) : state_(state) {}

  static Rng stream(uint64_t seed, std::string_view name) {
    uint64_t h = 1469598103934665603ULL;  // FNV-1a over the stream name
    for (char c : name) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ULL;
    }
    return Rng(mix(seed ^ mix(h)));
  }

  static Rng keyed(uint64_t seed, uint64_t key) {
    return Rng(mix(seed ^ mix(key ^ 0x6A09E667F3BCC909ULL)));
  }

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix(state_);
  }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n), n > 0
  int64_t uniform_int(int64_t n) {
    return int64_t((static_cast<__uint128_t>(next_u64()) *
                    static_cast<__uint128_t>(n)) >>
                   64);
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(uniform_int(int64_t(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static uint64_t mix(uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }

  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Row-major matrix

template <class S>
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<S> data;

  Matrix() = default;
  Matrix(int r, int c, S fill = S(0))
      : rows(r), cols(c), data(size_t(r) * size_t(c), fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<S>> rs) {
    Matrix m(int(rs.size()), rs.size() ? int(rs.begin()->size()) : 0);
    int r = 0;
    for (const auto& row : rs) {
      int c = 0;
      for (S v : row) m.at(r, c++) = v;
      ++r;
    }
    return m;
  }

  S& at(int r, int c) { return data[size_t(r) * cols + c]; }
  S at(int r, int c) const { return data[size_t(r) * cols + c]; }
  S* row(int r) { return data.data() + size_t(r) * cols; }
  const S* row(int r) const { return data.data() + size_t(r) * cols; }

  size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const {
    return rows == o.rows && cols == o.cols;
  }
  void zero() { std::fill(data.begin(), data.end(), S(0)); }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  void fill_uniform(Rng& rng, double lo, double hi) {
    for (S& v : data) v = S(rng.uniform(lo, hi));
  }
  void fill_normal(Rng& rng, double mu = 0.0, double sigma = 1.0) {
    for (S& v : data) v = S(mu + sigma * rng.normal());
  }
};

template <class S>
inline double max_abs_diff(const Matrix<S>& a, const Matrix<S>& b) {
  if (!a.same_shape(b)) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(double(a.data[i]) - double(b.data[i])));
  return m;
}

// Relative error with an absolute floor, used by all numeric comparisons.
inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({floor, std::abs(a), std::abs(b)});
}

template <class S>
inline double max_rel_err(const Matrix<S>& a, const Matrix<S>& b) {
  if (!a.same_shape(b)) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, rel_err(double(a.data[i]), double(b.data[i])));
  return m;
}

}  // namespace pnx
