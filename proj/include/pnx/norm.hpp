#pragma once
// Normalization layers and activations over active rows. BatchNorm reduces
// over every active row in the batch; LayerNorm reduces within each row.

#include <cmath>

#include "pnx/core.hpp"
#include "pnx/sparse.hpp"
#include "pnx/tape.hpp"

namespace pnx {

enum class NormMode { Train, Eval };

template <class S>
struct NormParams {
  Param<S> gamma;  // 1 x C
  Param<S> beta;   // 1 x C
  Matrix<S> running_mean;
  Matrix<S> running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  int channels() const { return gamma.v.cols; }
};

template <class S>
inline NormParams<S> init_norm_params(int channels, double eps = 1e-5,
                                      double momentum = 0.1) {
  require(eps > 0.0, Err::InvalidSpec, "norm eps must be > 0");
  require(momentum > 0.0 && momentum < 1.0, Err::InvalidSpec,
          "norm momentum must lie in (0,1)");
  NormParams<S> p;
  p.eps = eps;
  p.momentum = momentum;
  p.gamma = Param<S>(1, channels);
  p.beta = Param<S>(1, channels);
  p.running_mean = Matrix<S>(1, channels);
  p.running_var = Matrix<S>(1, channels);
  for (int c = 0; c < channels; ++c) {
    p.gamma.v.data[size_t(c)] = S(1);
    p.running_var.data[size_t(c)] = S(1);
  }
  return p;
}

// Per-channel normalization over all rows. Train mode uses batch moments
// (biased variance) and folds them into the running stats; eval mode uses
// the running stats unchanged.
template <class S>
inline TracedMat<S> batchnorm_rows(Tape<S>* tape, const TracedMat<S>& in,
                                   NormParams<S>& p, NormMode mode) {
  const Matrix<S>& x = in.val();
  int n = x.rows, c = x.cols;
  require(c == p.channels(), Err::ChannelMismatch,
          "feature width differs from norm parameters");
  Matrix<S> mean(1, c), inv_std(1, c);
  if (mode == NormMode::Train) {
    require(n >= 2, Err::TooFewRows,
            "batch statistics need at least two active rows");
    for (int r = 0; r < n; ++r) {
      const S* xr = x.row(r);
      for (int j = 0; j < c; ++j) mean.data[size_t(j)] += xr[j];
    }
    for (int j = 0; j < c; ++j) mean.data[size_t(j)] /= S(n);
    Matrix<S> var(1, c);
    for (int r = 0; r < n; ++r) {
      const S* xr = x.row(r);
      for (int j = 0; j < c; ++j) {
        S d = xr[j] - mean.data[size_t(j)];
        var.data[size_t(j)] += d * d;
      }
    }
    for (int j = 0; j < c; ++j) var.data[size_t(j)] /= S(n);
    for (int j = 0; j < c; ++j)
      inv_std.data[size_t(j)] =
          S(1) / std::sqrt(var.data[size_t(j)] + S(p.eps));
    // Running stats keep the unbiased variance, matching the usual
    // train-then-eval convention.
    S m = S(p.momentum);
    for (int j = 0; j < c; ++j) {
      p.running_mean.data[size_t(j)] =
          (S(1) - m) * p.running_mean.data[size_t(j)] + m * mean.data[size_t(j)];
      S unbiased = var.data[size_t(j)] * S(n) / S(n - 1);
      p.running_var.data[size_t(j)] =
          (S(1) - m) * p.running_var.data[size_t(j)] + m * unbiased;
    }
  } else {
    mean = p.running_mean;
    for (int j = 0; j < c; ++j)
      inv_std.data[size_t(j)] =
          S(1) / std::sqrt(p.running_var.data[size_t(j)] + S(p.eps));
  }

  auto xhat = std::make_shared<Matrix<S>>(n, c);
  Matrix<S> out(n, c);
  for (int r = 0; r < n; ++r) {
    const S* xr = x.row(r);
    S* hr = xhat->row(r);
    S* o = out.row(r);
    for (int j = 0; j < c; ++j) {
      hr[j] = (xr[j] - mean.data[size_t(j)]) * inv_std.data[size_t(j)];
      o[j] = p.gamma.v.data[size_t(j)] * hr[j] + p.beta.v.data[size_t(j)];
    }
  }
  TracedMat<S> r = trace(tape, std::move(out));
  if (tape) {
    auto istd = std::make_shared<Matrix<S>>(std::move(inv_std));
    NormParams<S>* pp = &p;
    int in_id = in.id, out_id = r.id;
    bool train = mode == NormMode::Train;
    tape->record([xhat, istd, pp, in_id, out_id, train](Tape<S>& tp) {
      const Matrix<S>& go = tp.grad(out_id);
      int n = go.rows, c = go.cols;
      // dgamma = sum(go * xhat), dbeta = sum(go), per channel.
      Matrix<S> sum_g(1, c), sum_gh(1, c);
      for (int r = 0; r < n; ++r) {
        const S* g = go.row(r);
        const S* h = xhat->row(r);
        for (int j = 0; j < c; ++j) {
          sum_g.data[size_t(j)] += g[j];
          sum_gh.data[size_t(j)] += g[j] * h[j];
        }
      }
      for (int j = 0; j < c; ++j) {
        pp->gamma.g.data[size_t(j)] += sum_gh.data[size_t(j)];
        pp->beta.g.data[size_t(j)] += sum_g.data[size_t(j)];
      }
      if (in_id < 0) return;
      Matrix<S>& gin = tp.grad(in_id);
      if (train) {
        // dx = gamma*istd * (go - mean(go) - xhat*mean(go*xhat))
        for (int r = 0; r < n; ++r) {
          const S* g = go.row(r);
          const S* h = xhat->row(r);
          S* gi = gin.row(r);
          for (int j = 0; j < c; ++j) {
            S gam = pp->gamma.v.data[size_t(j)];
            S term = g[j] - sum_g.data[size_t(j)] / S(n) -
                     h[j] * sum_gh.data[size_t(j)] / S(n);
            gi[j] += gam * istd->data[size_t(j)] * term;
          }
        }
      } else {
        for (int r = 0; r < n; ++r) {
          const S* g = go.row(r);
          S* gi = gin.row(r);
          for (int j = 0; j < c; ++j)
            gi[j] += pp->gamma.v.data[size_t(j)] * istd->data[size_t(j)] * g[j];
        }
      }
    });
  }
  return r;
}

template <class S>
inline TracedSt<S> batchnorm_forward(Tape<S>* tape, const TracedSt<S>& in,
                                     NormParams<S>& p, NormMode mode) {
  return TracedSt<S>{in.cm, batchnorm_rows(tape, in.feats, p, mode)};
}

// ---------------------------------------------------------------------------
// Row-wise LayerNorm with affine parameters.

template <class S>
struct LayerNormParams {
  Param<S> gamma;
  Param<S> beta;
  double eps = 1e-6;

  int channels() const { return gamma.v.cols; }
};

template <class S>
inline LayerNormParams<S> init_layernorm_params(int channels,
                                                double eps = 1e-6) {
  require(eps > 0.0, Err::InvalidSpec, "norm eps must be > 0");
  LayerNormParams<S> p;
  p.gamma = Param<S>(1, channels);
  p.beta = Param<S>(1, channels);
  p.eps = eps;
  for (int c = 0; c < channels; ++c) p.gamma.v.data[size_t(c)] = S(1);
  return p;
}

template <class S>
inline TracedMat<S> layernorm_rows(Tape<S>* tape, const TracedMat<S>& in,
                                   LayerNormParams<S>& p) {
  const Matrix<S>& x = in.val();
  int n = x.rows, c = x.cols;
  require(c == p.channels(), Err::ChannelMismatch,
          "feature width differs from norm parameters");
  auto xhat = std::make_shared<Matrix<S>>(n, c);
  auto istd = std::make_shared<Matrix<S>>(n, 1);
  Matrix<S> out(n, c);
  for (int r = 0; r < n; ++r) {
    const S* xr = x.row(r);
    S mu = S(0);
    for (int j = 0; j < c; ++j) mu += xr[j];
    mu /= S(c);
    S var = S(0);
    for (int j = 0; j < c; ++j) {
      S d = xr[j] - mu;
      var += d * d;
    }
    var /= S(c);
    S is = S(1) / std::sqrt(var + S(p.eps));
    istd->data[size_t(r)] = is;
    S* hr = xhat->row(r);
    S* o = out.row(r);
    for (int j = 0; j < c; ++j) {
      hr[j] = (xr[j] - mu) * is;
      o[j] = p.gamma.v.data[size_t(j)] * hr[j] + p.beta.v.data[size_t(j)];
    }
  }
  TracedMat<S> r = trace(tape, std::move(out));
  if (tape) {
    LayerNormParams<S>* pp = &p;
    int in_id = in.id, out_id = r.id;
    tape->record([xhat, istd, pp, in_id, out_id](Tape<S>& tp) {
      const Matrix<S>& go = tp.grad(out_id);
      int n = go.rows, c = go.cols;
      Matrix<S>* gin = in_id >= 0 ? &tp.grad(in_id) : nullptr;
      for (int r = 0; r < n; ++r) {
        const S* g = go.row(r);
        const S* h = xhat->row(r);
        S sum_g = S(0), sum_gh = S(0);
        for (int j = 0; j < c; ++j) {
          S dh = g[j] * pp->gamma.v.data[size_t(j)];
          sum_g += dh;
          sum_gh += dh * h[j];
          pp->gamma.g.data[size_t(j)] += g[j] * h[j];
          pp->beta.g.data[size_t(j)] += g[j];
        }
        if (!gin) continue;
        S* gi = gin->row(r);
        S is = istd->data[size_t(r)];
        for (int j = 0; j < c; ++j) {
          S dh = g[j] * pp->gamma.v.data[size_t(j)];
          gi[j] += is * (dh - sum_g / S(c) - h[j] * sum_gh / S(c));
        }
      }
    });
  }
  return r;
}

template <class S>
inline TracedSt<S> layernorm_forward(Tape<S>* tape, const TracedSt<S>& in,
                                     LayerNormParams<S>& p) {
  return TracedSt<S>{in.cm, layernorm_rows(tape, in.feats, p)};
}

// ---------------------------------------------------------------------------
// Activations

template <class S>
inline TracedMat<S> relu_rows(Tape<S>* tape, const TracedMat<S>& in) {
  const Matrix<S>& x = in.val();
  Matrix<S> out(x.rows, x.cols);
  for (size_t i = 0; i < x.data.size(); ++i)
    out.data[i] = x.data[i] > S(0) ? x.data[i] : S(0);
  TracedMat<S> r = trace(tape, std::move(out));
  if (tape && in.id >= 0) {
    auto x_m = in.m;
    int in_id = in.id, out_id = r.id;
    tape->record([x_m, in_id, out_id](Tape<S>& tp) {
      const Matrix<S>& go = tp.grad(out_id);
      Matrix<S>& gi = tp.grad(in_id);
      for (size_t i = 0; i < go.data.size(); ++i)
        if (x_m->data[i] > S(0)) gi.data[i] += go.data[i];
    });
  }
  return r;
}

template <class S>
inline TracedMat<S> gelu_rows(Tape<S>* tape, const TracedMat<S>& in) {
  const Matrix<S>& x = in.val();
  Matrix<S> out(x.rows, x.cols);
  const S inv_sqrt2 = S(0.7071067811865475244);
  for (size_t i = 0; i < x.data.size(); ++i) {
    S v = x.data[i];
    out.data[i] = v * S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
  }
  TracedMat<S> r = trace(tape, std::move(out));
  if (tape && in.id >= 0) {
    auto x_m = in.m;
    int in_id = in.id, out_id = r.id;
    tape->record([x_m, in_id, out_id](Tape<S>& tp) {
      const Matrix<S>& go = tp.grad(out_id);
      Matrix<S>& gi = tp.grad(in_id);
      const S inv_sqrt2 = S(0.7071067811865475244);
      const S inv_sqrt2pi = S(0.3989422804014326779);
      for (size_t i = 0; i < go.data.size(); ++i) {
        S v = x_m->data[i];
        S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
        S pdf = inv_sqrt2pi * std::exp(S(-0.5) * v * v);
        gi.data[i] += go.data[i] * (cdf + v * pdf);
      }
    });
  }
  return r;
}

template <class S>
inline TracedSt<S> relu(Tape<S>* tape, const TracedSt<S>& in) {
  return TracedSt<S>{in.cm, relu_rows(tape, in.feats)};
}

template <class S>
inline TracedSt<S> gelu(Tape<S>* tape, const TracedSt<S>& in) {
  return TracedSt<S>{in.cm, gelu_rows(tape, in.feats)};
}

}  // namespace pnx
