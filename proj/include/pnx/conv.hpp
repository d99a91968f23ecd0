#pragma once
// Sparse convolution: kernel specs, rulebook construction, and the
// gather / per-offset matmul / scatter-add execution path with tape-recorded
// backward rules. A dense nested-loop oracle lives at the bottom for tests.

#include <cmath>

#include "pnx/coords.hpp"
#include "pnx/core.hpp"
#include "pnx/sparse.hpp"
#include "pnx/tape.hpp"

namespace pnx {

enum class ConvMode { Submanifold, Spatial };

// Per-axis order is (y, x, z); rank-2 specs pin the z axis to kernel 1,
// stride 1, dilation 1, padding 0.
struct KernelSpec {
  int rank = 2;
  std::array<int, 3> kernel{1, 1, 1};
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> dilation{1, 1, 1};
  std::array<int, 3> padding{0, 0, 0};
  ConvMode mode = ConvMode::Submanifold;

  int k_total() const { return kernel[0] * kernel[1] * kernel[2]; }

  // Offset index -> per-axis kernel positions, y-major.
  std::array<int, 3> unravel(int k) const {
    return {k / (kernel[1] * kernel[2]), (k / kernel[2]) % kernel[1],
            k % kernel[2]};
  }

  void validate() const {
    require(rank == 2 || rank == 3, Err::InvalidSpec, "rank must be 2 or 3");
    int axes = rank == 2 ? 2 : 3;
    for (int a = 0; a < 3; ++a) {
      if (a >= axes) {
        require(kernel[a] == 1 && stride[a] == 1 && dilation[a] == 1 &&
                    padding[a] == 0,
                Err::InvalidSpec, "rank-2 spec must leave the z axis trivial");
        continue;
      }
      require(kernel[a] >= 1, Err::InvalidSpec, "kernel size must be >= 1");
      require(stride[a] >= 1, Err::InvalidSpec, "stride must be >= 1");
      require(dilation[a] >= 1, Err::InvalidSpec, "dilation must be >= 1");
      require(padding[a] >= 0, Err::InvalidSpec, "padding must be >= 0");
    }
    if (mode == ConvMode::Submanifold) {
      for (int a = 0; a < axes; ++a) {
        require(stride[a] == 1, Err::InvalidSpec,
                "submanifold convolution requires stride 1");
        require(kernel[a] % 2 == 1, Err::InvalidSpec,
                "submanifold convolution requires odd kernels");
      }
    }
  }
};

inline int same_padding(int kernel, int dilation) {
  return kernel % 2 == 1 ? dilation * (kernel - 1) / 2 : 0;
}

// Submanifold spec with "same" padding on each axis.
inline KernelSpec subm_spec(int rank, std::array<int, 3> kernel,
                            std::array<int, 3> dilation = {1, 1, 1}) {
  KernelSpec s;
  s.rank = rank;
  s.kernel = kernel;
  s.dilation = dilation;
  s.mode = ConvMode::Submanifold;
  int axes = rank == 2 ? 2 : 3;
  for (int a = 0; a < axes; ++a)
    s.padding[a] = same_padding(kernel[a], dilation[a]);
  if (rank == 2) {
    s.kernel[2] = s.stride[2] = s.dilation[2] = 1;
    s.padding[2] = 0;
  }
  s.validate();
  return s;
}

inline KernelSpec subm2d(int ky, int kx, int dilation = 1) {
  return subm_spec(2, {ky, kx, 1}, {dilation, dilation, 1});
}

// Spatially sparse spec; padding defaults to "same" for odd kernels and 0
// for even ones unless given explicitly.
inline KernelSpec spatial_spec(int rank, std::array<int, 3> kernel,
                               std::array<int, 3> stride,
                               std::array<int, 3> padding = {-1, -1, -1},
                               std::array<int, 3> dilation = {1, 1, 1}) {
  KernelSpec s;
  s.rank = rank;
  s.kernel = kernel;
  s.stride = stride;
  s.dilation = dilation;
  s.mode = ConvMode::Spatial;
  int axes = rank == 2 ? 2 : 3;
  for (int a = 0; a < axes; ++a)
    s.padding[a] =
        padding[a] >= 0 ? padding[a] : same_padding(kernel[a], dilation[a]);
  if (rank == 2) {
    s.kernel[2] = s.stride[2] = s.dilation[2] = 1;
    s.padding[2] = 0;
  }
  s.validate();
  return s;
}

inline KernelSpec spatial2d(int ky, int kx, int sy, int sx, int py = -1,
                            int px = -1) {
  return spatial_spec(2, {ky, kx, 1}, {sy, sx, 1}, {py, px, 0});
}

// Vertical-collapse kernel: 1x1xD, stride D on z, no padding. One output
// layer absorbs the whole column.
inline KernelSpec column_collapse_spec(int depth) {
  return spatial_spec(3, {1, 1, depth}, {1, 1, depth}, {0, 0, 0});
}

inline int conv_out_extent(int in, int kernel, int stride, int dilation,
                           int padding) {
  int numer = in + 2 * padding - dilation * (kernel - 1) - 1;
  require(numer >= 0, Err::InvalidSpec,
          "kernel footprint exceeds the padded input extent");
  return numer / stride + 1;
}

// ---------------------------------------------------------------------------
// Rulebook

// Parallel in/out row lists for one kernel offset.
struct OffsetPairs {
  std::vector<int32_t> in_rows;
  std::vector<int32_t> out_rows;
  size_t size() const { return in_rows.size(); }
};

struct Rulebook {
  CoordMapPtr in_cm;
  CoordMapPtr out_cm;
  KernelSpec spec;
  std::vector<OffsetPairs> pairs;  // one entry per kernel offset, y-major

  int64_t pair_count() const {
    int64_t n = 0;
    for (const OffsetPairs& p : pairs) n += int64_t(p.size());
    return n;
  }
};

using RulebookPtr = std::shared_ptr<const Rulebook>;

inline RulebookPtr build_rulebook(const CoordMapPtr& in_cm,
                                  const KernelSpec& spec) {
  spec.validate();
  require(spec.rank == in_cm->rank, Err::InvalidSpec,
          "kernel rank differs from tensor rank");
  auto rb = std::make_shared<Rulebook>();
  rb->in_cm = in_cm;
  rb->spec = spec;
  int kt = spec.k_total();
  rb->pairs.resize(size_t(kt));
  int n = in_cm->n();

  if (spec.mode == ConvMode::Submanifold) {
    rb->out_cm = in_cm;  // same active set, same row order
    std::array<int, 3> center{(spec.kernel[0] - 1) / 2,
                              (spec.kernel[1] - 1) / 2,
                              (spec.kernel[2] - 1) / 2};
    for (int k = 0; k < kt; ++k) {
      std::array<int, 3> kp = spec.unravel(k);
      int dy = spec.dilation[0] * (kp[0] - center[0]);
      int dx = spec.dilation[1] * (kp[1] - center[1]);
      int dz = spec.dilation[2] * (kp[2] - center[2]);
      OffsetPairs& op = rb->pairs[size_t(k)];
      if (dy == 0 && dx == 0 && dz == 0) {
        op.in_rows.resize(size_t(n));
        op.out_rows.resize(size_t(n));
        for (int32_t r = 0; r < n; ++r) op.in_rows[size_t(r)] = op.out_rows[size_t(r)] = r;
        continue;
      }
      for (int32_t r = 0; r < n; ++r) {
        const Coord& c = in_cm->coords[size_t(r)];
        auto src = in_cm->find(Coord{c.b, c.y + dy, c.x + dx, c.z + dz});
        if (src) {
          op.in_rows.push_back(*src);
          op.out_rows.push_back(r);
        }
      }
    }
    return rb;
  }

  // Spatial mode: outputs are generated from inputs, offset-major, and
  // deduplicated in first-touch order.
  std::array<int, 3> out_shape{1, 1, 1};
  int axes = spec.rank == 2 ? 2 : 3;
  for (int a = 0; a < axes; ++a)
    out_shape[a] = conv_out_extent(in_cm->shape[a], spec.kernel[a],
                                   spec.stride[a], spec.dilation[a],
                                   spec.padding[a]);

  std::vector<Coord> out_coords;
  std::unordered_map<uint64_t, int32_t> out_index;
  out_index.reserve(size_t(n) * 2);
  auto out_row_of = [&](const Coord& o) -> int32_t {
    auto [it, inserted] =
        out_index.emplace(pack_coord(o), int32_t(out_coords.size()));
    if (inserted) out_coords.push_back(o);
    return it->second;
  };
  // Output coord from input coord along one axis, or nullopt if the offset
  // does not land on the stride lattice or falls outside the output shape.
  auto solve_axis = [&](int c, int a, int kp) -> std::optional<int> {
    int numer = c + spec.padding[a] - spec.dilation[a] * kp;
    if (numer < 0 || numer % spec.stride[a] != 0) return std::nullopt;
    int o = numer / spec.stride[a];
    if (o >= out_shape[a]) return std::nullopt;
    return o;
  };
  for (int k = 0; k < kt; ++k) {
    std::array<int, 3> kp = spec.unravel(k);
    OffsetPairs& op = rb->pairs[size_t(k)];
    for (int32_t r = 0; r < n; ++r) {
      const Coord& c = in_cm->coords[size_t(r)];
      auto oy = solve_axis(c.y, 0, kp[0]);
      if (!oy) continue;
      auto ox = solve_axis(c.x, 1, kp[1]);
      if (!ox) continue;
      auto oz = solve_axis(c.z, 2, kp[2]);
      if (!oz) continue;
      op.in_rows.push_back(r);
      op.out_rows.push_back(out_row_of(Coord{c.b, *oy, *ox, *oz}));
    }
  }
  rb->out_cm = make_coord_map(spec.rank, out_shape, in_cm->batch_size,
                              std::move(out_coords));
  return rb;
}

template <class S>
inline RulebookPtr build_rulebook(const SparseTensor<S>& in,
                                  const KernelSpec& spec) {
  return build_rulebook(in.cm, spec);
}

// ---------------------------------------------------------------------------
// Parameters

// weight row k holds the C_in x C_out matrix for kernel offset k, row-major.
template <class S>
struct ConvParams {
  int c_in = 0;
  int c_out = 0;
  Param<S> weight;
  Param<S> bias;  // 1 x c_out; unused when has_bias is false
  bool has_bias = false;
};

template <class S>
inline ConvParams<S> init_conv_params(const KernelSpec& spec, int c_in,
                                      int c_out, uint64_t seed,
                                      bool has_bias = false) {
  ConvParams<S> p;
  p.c_in = c_in;
  p.c_out = c_out;
  p.weight = Param<S>(spec.k_total(), c_in * c_out);
  p.bias = Param<S>(1, c_out);
  p.has_bias = has_bias;
  double bound = std::sqrt(6.0 / (double(c_in) * spec.k_total()));
  Rng rng = Rng::stream(seed, "conv_init");
  p.weight.v.fill_uniform(rng, -bound, bound);
  return p;
}

// Depthwise: weight row k holds one multiplier per channel. No bias (every
// use here feeds a normalization layer next).
template <class S>
struct DepthwiseParams {
  int channels = 0;
  Param<S> weight;
};

template <class S>
inline DepthwiseParams<S> init_depthwise_params(const KernelSpec& spec,
                                                int channels, uint64_t seed) {
  DepthwiseParams<S> p;
  p.channels = channels;
  p.weight = Param<S>(spec.k_total(), channels);
  double bound = std::sqrt(6.0 / double(spec.k_total()));
  Rng rng = Rng::stream(seed, "depthwise_init");
  p.weight.v.fill_uniform(rng, -bound, bound);
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

// Accumulates the three gradient terms for one rulebook application.
// Null destinations are skipped (constant input, frozen bias).
template <class S>
inline void conv_backward(const Rulebook& rb, const Matrix<S>& in_feats,
                          const Matrix<S>& weight, const Matrix<S>& grad_out,
                          Matrix<S>* grad_in, Matrix<S>* grad_weight,
                          Matrix<S>* grad_bias) {
  int c_in = in_feats.cols;
  int c_out = grad_out.cols;
  require(grad_out.rows == rb.out_cm->n(), Err::ShapeMismatch,
          "grad_out row count differs from rulebook output");
  require(weight.rows == rb.spec.k_total() && weight.cols == c_in * c_out,
          Err::ShapeMismatch, "weight shape does not match rulebook");
  if (grad_bias) {
    require(grad_bias->cols == c_out, Err::ShapeMismatch,
            "grad_bias width differs from grad_out");
    for (int r = 0; r < grad_out.rows; ++r) {
      const S* g = grad_out.row(r);
      for (int c = 0; c < c_out; ++c) grad_bias->data[size_t(c)] += g[c];
    }
  }
  for (int k = 0; k < rb.spec.k_total(); ++k) {
    const OffsetPairs& op = rb.pairs[size_t(k)];
    const S* wk = weight.row(k);
    S* gwk = grad_weight ? grad_weight->row(k) : nullptr;
    for (size_t t = 0; t < op.size(); ++t) {
      const S* xi = in_feats.row(op.in_rows[t]);
      const S* go = grad_out.row(op.out_rows[t]);
      if (gwk) {
        for (int ci = 0; ci < c_in; ++ci) {
          S xv = xi[ci];
          S* grow = gwk + size_t(ci) * c_out;
          for (int co = 0; co < c_out; ++co) grow[co] += xv * go[co];
        }
      }
      if (grad_in) {
        S* gi = grad_in->row(op.in_rows[t]);
        for (int ci = 0; ci < c_in; ++ci) {
          const S* wrow = wk + size_t(ci) * c_out;
          S acc = S(0);
          for (int co = 0; co < c_out; ++co) acc += wrow[co] * go[co];
          gi[ci] += acc;
        }
      }
    }
  }
}

template <class S>
inline TracedSt<S> conv_forward(Tape<S>* tape, const TracedSt<S>& in,
                                const RulebookPtr& rb, ConvParams<S>& p) {
  require(rb->in_cm == in.cm, Err::ShapeMismatch,
          "rulebook was built for a different coordinate map");
  require(in.channels() == p.c_in, Err::ChannelMismatch,
          "input channels differ from conv parameters");
  int n_out = rb->out_cm->n();
  Matrix<S> out(n_out, p.c_out);
  if (p.has_bias) {
    for (int r = 0; r < n_out; ++r) {
      S* o = out.row(r);
      for (int c = 0; c < p.c_out; ++c) o[c] = p.bias.v.data[size_t(c)];
    }
  }
  const Matrix<S>& x = in.feats.val();
  // Gather rows per offset, multiply by that offset's weight block, then
  // scatter-add; sequential offset-major order keeps results reproducible.
  Matrix<S> gathered, product;
  for (int k = 0; k < p.weight.v.rows; ++k) {
    const OffsetPairs& op = rb->pairs[size_t(k)];
    int nk = int(op.size());
    if (nk == 0) continue;
    gathered = Matrix<S>(nk, p.c_in);
    for (int t = 0; t < nk; ++t) {
      const S* src = x.row(op.in_rows[size_t(t)]);
      std::copy(src, src + p.c_in, gathered.row(t));
    }
    product = Matrix<S>(nk, p.c_out);
    const S* wk = p.weight.v.row(k);
    for (int t = 0; t < nk; ++t) {
      const S* g = gathered.row(t);
      S* pr = product.row(t);
      for (int ci = 0; ci < p.c_in; ++ci) {
        S gv = g[ci];
        const S* wrow = wk + size_t(ci) * p.c_out;
        for (int co = 0; co < p.c_out; ++co) pr[co] += gv * wrow[co];
      }
    }
    for (int t = 0; t < nk; ++t) {
      const S* pr = product.row(t);
      S* o = out.row(op.out_rows[size_t(t)]);
      for (int co = 0; co < p.c_out; ++co) o[co] += pr[co];
    }
  }
  TracedSt<S> r{rb->out_cm, trace(tape, std::move(out))};
  if (tape) {
    auto in_m = in.feats.m;
    ConvParams<S>* pp = &p;
    int in_id = in.feats.id, out_id = r.feats.id;
    tape->record([rb, in_m, pp, in_id, out_id](Tape<S>& tp) {
      const Matrix<S>& go = tp.grad(out_id);
      Matrix<S>* gin = in_id >= 0 ? &tp.grad(in_id) : nullptr;
      conv_backward(*rb, *in_m, pp->weight.v, go, gin, &pp->weight.g,
                    pp->has_bias ? &pp->bias.g : nullptr);
    });
  }
  return r;
}

template <class S>
inline SparseTensor<S> conv_forward(const SparseTensor<S>& in,
                                    const RulebookPtr& rb, ConvParams<S>& p) {
  TracedSt<S> t{in.cm, constant(in.feats)};
  return conv_forward<S>(nullptr, t, rb, p).tensor();
}

template <class S>
inline TracedSt<S> depthwise_forward(Tape<S>* tape, const TracedSt<S>& in,
                                     const RulebookPtr& rb,
                                     DepthwiseParams<S>& p) {
  require(rb->in_cm == in.cm, Err::ShapeMismatch,
          "rulebook was built for a different coordinate map");
  require(in.channels() == p.channels, Err::ChannelMismatch,
          "input channels differ from depthwise parameters");
  int c = p.channels;
  const Matrix<S>& x = in.feats.val();
  Matrix<S> out(rb->out_cm->n(), c);
  for (int k = 0; k < p.weight.v.rows; ++k) {
    const OffsetPairs& op = rb->pairs[size_t(k)];
    const S* wk = p.weight.v.row(k);
    for (size_t t = 0; t < op.size(); ++t) {
      const S* xi = x.row(op.in_rows[t]);
      S* o = out.row(op.out_rows[t]);
      for (int j = 0; j < c; ++j) o[j] += wk[j] * xi[j];
    }
  }
  TracedSt<S> r{rb->out_cm, trace(tape, std::move(out))};
  if (tape) {
    auto in_m = in.feats.m;
    DepthwiseParams<S>* pp = &p;
    int in_id = in.feats.id, out_id = r.feats.id;
    tape->record([rb, in_m, pp, in_id, out_id](Tape<S>& tp) {
      const Matrix<S>& go = tp.grad(out_id);
      Matrix<S>* gin = in_id >= 0 ? &tp.grad(in_id) : nullptr;
      int c = pp->channels;
      for (int k = 0; k < pp->weight.v.rows; ++k) {
        const OffsetPairs& op = rb->pairs[size_t(k)];
        const S* wk = pp->weight.v.row(k);
        S* gwk = pp->weight.g.row(k);
        for (size_t t = 0; t < op.size(); ++t) {
          const S* xi = in_m->row(op.in_rows[t]);
          const S* g = go.row(op.out_rows[t]);
          for (int j = 0; j < c; ++j) gwk[j] += xi[j] * g[j];
          if (gin) {
            S* gi = gin->row(op.in_rows[t]);
            for (int j = 0; j < c; ++j) gi[j] += wk[j] * g[j];
          }
        }
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Dense oracle: direct nested-loop convolution over the zero-padded dense
// input. Small shapes only; no sparsity logic anywhere.

template <class S>
inline DenseGrid<S> dense_conv_oracle(const DenseGrid<S>& in,
                                      const KernelSpec& spec,
                                      const Matrix<S>& weight,
                                      const Matrix<S>* bias = nullptr) {
  spec.validate();
  require(spec.rank == in.rank, Err::InvalidSpec,
          "kernel rank differs from grid rank");
  int c_in = in.channels;
  require(weight.rows == spec.k_total() && weight.cols % c_in == 0,
          Err::ShapeMismatch, "weight shape does not match kernel and input");
  int c_out = weight.cols / c_in;
  std::array<int, 3> osh{1, 1, 1};
  for (int a = 0; a < (spec.rank == 2 ? 2 : 3); ++a) {
    int numer = in.shape[a] + 2 * spec.padding[a] -
                spec.dilation[a] * (spec.kernel[a] - 1) - 1;
    require(numer >= 0, Err::InvalidSpec,
            "kernel footprint exceeds the padded input extent");
    osh[a] = numer / spec.stride[a] + 1;
  }
  DenseGrid<S> out(in.batch, c_out, in.rank, osh);
  for (int b = 0; b < in.batch; ++b)
    for (int oy = 0; oy < osh[0]; ++oy)
      for (int ox = 0; ox < osh[1]; ++ox)
        for (int oz = 0; oz < osh[2]; ++oz)
          for (int co = 0; co < c_out; ++co) {
            S acc = bias ? bias->data[size_t(co)] : S(0);
            for (int ky = 0; ky < spec.kernel[0]; ++ky)
              for (int kx = 0; kx < spec.kernel[1]; ++kx)
                for (int kz = 0; kz < spec.kernel[2]; ++kz) {
                  int iy = oy * spec.stride[0] + spec.dilation[0] * ky -
                           spec.padding[0];
                  int ix = ox * spec.stride[1] + spec.dilation[1] * kx -
                           spec.padding[1];
                  int iz = oz * spec.stride[2] + spec.dilation[2] * kz -
                           spec.padding[2];
                  if (iy < 0 || iy >= in.shape[0] || ix < 0 ||
                      ix >= in.shape[1] || iz < 0 || iz >= in.shape[2])
                    continue;
                  int k = (ky * spec.kernel[1] + kx) * spec.kernel[2] + kz;
                  const S* wrow = weight.row(k);
                  for (int ci = 0; ci < c_in; ++ci)
                    acc += in.at(b, ci, iy, ix, iz) *
                           wrow[size_t(ci) * c_out + co];
                }
            out.at(b, co, oy, ox, oz) = acc;
          }
  return out;
}

}  // namespace pnx
