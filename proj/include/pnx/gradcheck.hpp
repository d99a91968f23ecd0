#pragma once
// Registry of finite-difference gradient checks: every differentiable op and
// every composed block, each runnable by name at a chosen seed and tolerance.
// Central differences in 64-bit, step 1e-5; large parameter groups are
// subsampled with a seeded pick so the suite stays fast.

#include "pnx/train.hpp"

namespace pnx {

struct CheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool pass = false;
  int resamples = 0;
};

namespace gradcheck_detail {

using MatD = Matrix<double>;

struct RunOut {
  double err = 0.0;
  int ties = 0;
};

struct Group {
  MatD* slots;
  const MatD* analytic;
};

// The denominator floor sets the absolute agreement demanded of near-zero
// entries: at tol 1e-5 it asks for |a - n| <= 1e-7, comfortably above the
// ~1e-9 roundoff a double-precision loss accumulates through a deep forward
// pass at step 1e-5, and far below any real backward defect. A floor at the
// noise scale itself would fail honest dead weights on ulp dice.
inline double fd_rel_err(double a, double n) {
  return std::abs(a - n) / std::max({1e-2, std::abs(a), std::abs(n)});
}

// Central difference over a seeded subsample of the slot entries. The step
// suits smooth nonlinear losses; purely linear maps pass a wider one, where
// truncation is zero anyway and cancellation noise shrinks with the step.
template <class EvalFn>
inline double fd_group(EvalFn&& eval, MatD& slots, const MatD& analytic,
                       Rng& pick, int cap, double h = 1e-5) {
  require(slots.same_shape(analytic), Err::ShapeMismatch,
          "gradient check: analytic shape differs from slots");
  size_t total = slots.data.size();
  std::vector<size_t> idx(total);
  for (size_t i = 0; i < total; ++i) idx[i] = i;
  if (int(total) > cap) {
    for (int i = 0; i < cap; ++i) {
      size_t j = size_t(i) + size_t(pick.uniform_int(int64_t(total) - i));
      std::swap(idx[size_t(i)], idx[j]);
    }
    idx.resize(size_t(cap));
  }
  double worst = 0.0;
  for (size_t i : idx) {
    double keep = slots.data[i];
    auto f_at = [&](double x) {
      slots.data[i] = x;
      double v = eval();
      slots.data[i] = keep;
      return v;
    };
    double a = analytic.data[i];
    double err = fd_rel_err(a, (f_at(keep + h) - f_at(keep - h)) / (2 * h));
    // A relu kink or pool-max handover inside the window contaminates one
    // side, and strong curvature inflates the wide step; the finer central
    // and the two one-sided slopes each survive one of those failure modes,
    // while a wrong analytic gradient matches none of them.
    if (err > 1e-7) {
      double f0 = f_at(keep), hs = h * 0.1;
      double up = f_at(keep + hs), dn = f_at(keep - hs);
      for (double n : {(up - dn) / (2 * hs), (up - f0) / hs, (f0 - dn) / hs})
        err = std::min(err, fd_rel_err(a, n));
    }
    worst = std::max(worst, err);
  }
  return worst;
}

template <class EvalFn>
inline double fd_groups(EvalFn&& eval, const std::vector<Group>& groups,
                        uint64_t seed, int cap, double h = 1e-5) {
  Rng pick = Rng::stream(seed, "fd_pick");
  double worst = 0.0;
  for (const Group& g : groups)
    worst = std::max(worst,
                     fd_group(eval, *g.slots, *g.analytic, pick, cap, h));
  return worst;
}

inline MatD random_mat(int rows, int cols, uint64_t seed,
                       const char* stream = "gc_mat") {
  MatD m(rows, cols);
  Rng rng = Rng::stream(seed, stream);
  m.fill_normal(rng);
  return m;
}

inline std::shared_ptr<const MatD> random_probe(int rows, int cols,
                                                uint64_t seed) {
  auto m = std::make_shared<MatD>(rows, cols);
  Rng rng = Rng::stream(seed, "gc_probe");
  m->fill_normal(rng);
  return m;
}

inline SparseTensor<double> random_tensor(int extent, int channels,
                                          double density, uint64_t seed,
                                          int rank = 2, int depth = 1) {
  Rng rng = Rng::stream(seed, "gc_tensor");
  std::vector<Coord> coords;
  for (int y = 0; y < extent; ++y)
    for (int x = 0; x < extent; ++x)
      for (int z = 0; z < depth; ++z)
        if (rng.uniform() < density) coords.push_back({0, y, x, rank == 3 ? z : 0});
  if (coords.empty()) coords.push_back({0, extent / 2, extent / 2, 0});
  auto cm = make_coord_map(rank, {extent, extent, rank == 3 ? depth : 1}, 1,
                           coords);
  MatD feats(cm->n(), channels);
  feats.fill_normal(rng);
  return SparseTensor<double>{cm, std::move(feats)};
}

inline GridConfig toy_grid() {
  GridConfig g;
  g.x_range = {0.0, 16.0};
  g.y_range = {0.0, 16.0};
  g.z_range = {0.0, 4.0};
  g.voxel_size = {0.5, 0.5, 1.0};
  return g;
}

inline std::vector<PointCloud<double>> toy_cloud(const GridConfig& g, int n,
                                                 uint64_t seed) {
  Rng rng = Rng::stream(seed, "gc_cloud");
  MatD pts(n, 4);
  for (int i = 0; i < n; ++i) {
    pts.at(i, 0) = rng.uniform(g.x_range[0], g.x_range[1]);
    pts.at(i, 1) = rng.uniform(g.y_range[0], g.y_range[1]);
    pts.at(i, 2) = rng.uniform(g.z_range[0], g.z_range[1]);
    pts.at(i, 3) = rng.uniform();
  }
  return {PointCloud<double>{std::move(pts)}};
}

struct Check {
  std::string name;
  std::function<RunOut(uint64_t)> run;
};

// One conv check: forward through a single rulebook, FD on weight, bias, x.
inline RunOut check_conv(const KernelSpec& spec, int extent, int c_in,
                         int c_out, uint64_t seed, int cap, int rank = 2,
                         int depth = 1) {
  auto t = random_tensor(extent, c_in, 0.3, seed, rank, depth);
  auto p = init_conv_params<double>(spec, c_in, c_out, seed + 1, true);
  auto rb = build_rulebook(t.cm, spec);
  Tape<double> tape;
  auto in = trace_st(&tape, t);
  auto out = conv_forward(&tape, in, rb, p);
  auto probe = random_probe(out.n(), c_out, seed + 2);
  auto loss = weighted_sum(&tape, out.feats, probe);
  tape.backward(loss.id);
  const MatD& gx = tape.grad(in.feats.id);
  auto eval = [&]() {
    auto o = conv_forward<double>(nullptr,
                                  TracedSt<double>{t.cm, constant(t.feats)},
                                  rb, p);
    double acc = 0.0;
    for (size_t i = 0; i < o.feats.val().data.size(); ++i)
      acc += o.feats.val().data[i] * probe->data[i];
    return acc;
  };
  RunOut r;
  r.err = fd_groups(eval,
                    {{&p.weight.v, &p.weight.g},
                     {&p.bias.v, &p.bias.g},
                     {&t.feats, &gx}},
                    seed + 3, cap);
  r.ties = tape.nondiff_ties;
  return r;
}

inline std::vector<Check> build_registry() {
  std::vector<Check> checks;
  const int cap = 120;

  checks.push_back({"linear_map", [](uint64_t seed) {
    MatD x = random_mat(12, 5, seed);
    Param<double> w(5, 7);
    Rng rng = Rng::stream(seed + 1, "gc_w");
    w.v.fill_normal(rng);
    Tape<double> tape;
    auto in = trace(&tape, x);
    auto out = matmul(&tape, in, w);
    auto probe = random_probe(12, 7, seed + 2);
    auto loss = weighted_sum(&tape, out, probe);
    tape.backward(loss.id);
    const MatD& gx = tape.grad(in.id);
    auto eval = [&]() {
      double acc = 0.0;
      for (int i = 0; i < 12; ++i)
        for (int j = 0; j < 7; ++j) {
          double o = 0.0;
          for (int k = 0; k < 5; ++k) o += x.at(i, k) * w.v.at(k, j);
          acc += o * probe->at(i, j);
        }
      return acc;
    };
    RunOut r;
    r.err = fd_groups(eval, {{&w.v, &w.g}, {&x, &gx}}, seed + 3, 1000, 1e-2);
    return r;
  }});

  checks.push_back({"add", [](uint64_t seed) {
    MatD a = random_mat(9, 4, seed), b = random_mat(9, 4, seed + 1);
    Tape<double> tape;
    auto ta = trace(&tape, a);
    auto tb = trace(&tape, b);
    auto out = add(&tape, ta, tb);
    auto probe = random_probe(9, 4, seed + 2);
    auto loss = weighted_sum(&tape, out, probe);
    tape.backward(loss.id);
    const MatD ga = tape.grad(ta.id), gb = tape.grad(tb.id);
    auto eval = [&]() {
      double acc = 0.0;
      for (size_t i = 0; i < a.data.size(); ++i)
        acc += (a.data[i] + b.data[i]) * probe->data[i];
      return acc;
    };
    RunOut r;
    r.err = fd_groups(eval, {{&a, &ga}, {&b, &gb}}, seed + 3, 1000);
    return r;
  }});

  auto rowwise_check = [](uint64_t seed, auto&& fwd) {
    MatD x = random_mat(10, 6, seed);
    Tape<double> tape;
    auto in = trace(&tape, x);
    auto out = fwd(&tape, in);
    auto probe = random_probe(10, 6, seed + 1);
    auto loss = weighted_sum(&tape, out, probe);
    tape.backward(loss.id);
    const MatD& gx = tape.grad(in.id);
    auto eval = [&]() {
      auto o = fwd(static_cast<Tape<double>*>(nullptr), constant(x));
      double acc = 0.0;
      for (size_t i = 0; i < o.val().data.size(); ++i)
        acc += o.val().data[i] * probe->data[i];
      return acc;
    };
    RunOut r;
    r.err = fd_groups(eval, {{&x, &gx}}, seed + 2, 1000);
    r.ties = tape.nondiff_ties;
    return r;
  };

  checks.push_back({"relu", [rowwise_check](uint64_t seed) {
    return rowwise_check(seed, [](Tape<double>* tp, const TracedMat<double>& m) {
      return relu_rows(tp, m);
    });
  }});

  checks.push_back({"gelu", [rowwise_check](uint64_t seed) {
    return rowwise_check(seed, [](Tape<double>* tp, const TracedMat<double>& m) {
      return gelu_rows(tp, m);
    });
  }});

  auto norm_check = [](uint64_t seed, NormMode mode) {
    MatD x = random_mat(20, 5, seed);
    auto p = init_norm_params<double>(5);
    Rng rng = Rng::stream(seed + 1, "gc_norm");
    p.gamma.v.fill_normal(rng);
    p.beta.v.fill_normal(rng);
    if (mode == NormMode::Eval) {
      p.running_mean.fill_normal(rng);
      for (int c = 0; c < 5; ++c) p.running_var.at(0, c) = rng.uniform(0.5, 2.0);
    }
    Tape<double> tape;
    auto in = trace(&tape, x);
    NormParams<double> run = p;
    auto out = batchnorm_rows(&tape, in, run, mode);
    auto probe = random_probe(20, 5, seed + 2);
    auto loss = weighted_sum(&tape, out, probe);
    tape.backward(loss.id);
    const MatD& gx = tape.grad(in.id);
    // Gradients land in the original parameter buffers.
    p.gamma.g = run.gamma.g;
    p.beta.g = run.beta.g;
    auto eval = [&]() {
      NormParams<double> local = p;
      auto o = batchnorm_rows<double>(nullptr, constant(x), local, mode);
      double acc = 0.0;
      for (size_t i = 0; i < o.val().data.size(); ++i)
        acc += o.val().data[i] * probe->data[i];
      return acc;
    };
    RunOut r;
    r.err = fd_groups(
        eval, {{&p.gamma.v, &p.gamma.g}, {&p.beta.v, &p.beta.g}, {&x, &gx}},
        seed + 3, 1000);
    return r;
  };

  checks.push_back({"batchnorm_train", [norm_check](uint64_t seed) {
    return norm_check(seed, NormMode::Train);
  }});
  checks.push_back({"batchnorm_eval", [norm_check](uint64_t seed) {
    return norm_check(seed, NormMode::Eval);
  }});

  checks.push_back({"layernorm", [](uint64_t seed) {
    MatD x = random_mat(12, 8, seed);
    auto p = init_layernorm_params<double>(8);
    Rng rng = Rng::stream(seed + 1, "gc_ln");
    p.gamma.v.fill_normal(rng);
    p.beta.v.fill_normal(rng);
    Tape<double> tape;
    auto in = trace(&tape, x);
    auto out = layernorm_rows(&tape, in, p);
    auto probe = random_probe(12, 8, seed + 2);
    auto loss = weighted_sum(&tape, out, probe);
    tape.backward(loss.id);
    const MatD& gx = tape.grad(in.id);
    auto eval = [&]() {
      LayerNormParams<double> local = p;
      auto o = layernorm_rows<double>(nullptr, constant(x), local);
      double acc = 0.0;
      for (size_t i = 0; i < o.val().data.size(); ++i)
        acc += o.val().data[i] * probe->data[i];
      return acc;
    };
    RunOut r;
    r.err = fd_groups(
        eval, {{&p.gamma.v, &p.gamma.g}, {&p.beta.v, &p.beta.g}, {&x, &gx}},
        seed + 3, 1000);
    return r;
  }});

  checks.push_back({"conv_subm3x3", [cap](uint64_t seed) {
    return check_conv(subm2d(3, 3), 12, 3, 4, seed, cap);
  }});
  checks.push_back({"conv_subm3x3_dil2", [cap](uint64_t seed) {
    return check_conv(subm2d(3, 3, 2), 12, 3, 4, seed, cap);
  }});
  checks.push_back({"conv_spatial3x3_s2", [cap](uint64_t seed) {
    return check_conv(spatial2d(3, 3, 2, 2), 12, 3, 4, seed, cap);
  }});
  checks.push_back({"conv_sep1x9", [cap](uint64_t seed) {
    return check_conv(subm2d(1, 9), 12, 3, 4, seed, cap);
  }});
  checks.push_back({"conv_column_collapse", [cap](uint64_t seed) {
    return check_conv(column_collapse_spec(4), 8, 3, 4, seed, cap, 3, 4);
  }});

  checks.push_back({"depthwise5x5", [cap](uint64_t seed) {
    auto t = random_tensor(10, 4, 0.3, seed);
    auto p = init_depthwise_params<double>(subm2d(5, 5), 4, seed + 1);
    auto rb = build_rulebook(t.cm, subm2d(5, 5));
    Tape<double> tape;
    auto in = trace_st(&tape, t);
    auto out = depthwise_forward(&tape, in, rb, p);
    auto probe = random_probe(out.n(), 4, seed + 2);
    auto loss = weighted_sum(&tape, out.feats, probe);
    tape.backward(loss.id);
    const MatD& gx = tape.grad(in.feats.id);
    auto eval = [&]() {
      auto o = depthwise_forward<double>(
          nullptr, TracedSt<double>{t.cm, constant(t.feats)}, rb, p);
      double acc = 0.0;
      for (size_t i = 0; i < o.feats.val().data.size(); ++i)
        acc += o.feats.val().data[i] * probe->data[i];
      return acc;
    };
    RunOut r;
    r.err = fd_groups(eval, {{&p.weight.v, &p.weight.g}, {&t.feats, &gx}},
                      seed + 3, cap);
    r.ties = tape.nondiff_ties;
    return r;
  }});

  checks.push_back({"point_mlp", [cap](uint64_t seed) {
    MatD feats = random_mat(40, 7, seed);
    auto p = init_mlp_params<double>(7, 6, seed + 1);
    Tape<double> tape;
    auto out = point_mlp(&tape, constant(feats), p, NormMode::Train);
    auto probe = random_probe(40, 6, seed + 2);
    auto loss = weighted_sum(&tape, out, probe);
    tape.backward(loss.id);
    auto eval = [&]() {
      MlpParams<double> local = p;
      auto o = point_mlp<double>(nullptr, constant(feats), local,
                                 NormMode::Train);
      double acc = 0.0;
      for (size_t i = 0; i < o.val().data.size(); ++i)
        acc += o.val().data[i] * probe->data[i];
      return acc;
    };
    RunOut r;
    r.err = fd_groups(eval, {{&p.weight.v, &p.weight.g}}, seed + 3, cap);
    r.ties = tape.nondiff_ties;
    return r;
  }});

  auto pool_check = [](uint64_t seed, bool mmm) {
    Rng rng = Rng::stream(seed, "gc_pool");
    std::vector<int32_t> starts{0};
    int rows = 0;
    for (int g = 0; g < 6; ++g) {
      rows += 1 + int(rng.uniform_int(5));
      starts.push_back(int32_t(rows));
    }
    MatD x = random_mat(rows, 4, seed + 1);
    Tape<double> tape;
    auto in = trace(&tape, x);
    auto out = mmm ? pool_mmm_groups(&tape, in, starts)
                   : pool_max_groups(&tape, in, starts);
    auto probe = random_probe(out.rows(), out.cols(), seed + 2);
    auto loss = weighted_sum(&tape, out, probe);
    tape.backward(loss.id);
    const MatD& gx = tape.grad(in.id);
    auto eval = [&]() {
      auto o = mmm ? pool_mmm_groups<double>(nullptr, constant(x), starts)
                   : pool_max_groups<double>(nullptr, constant(x), starts);
      double acc = 0.0;
      for (size_t i = 0; i < o.val().data.size(); ++i)
        acc += o.val().data[i] * probe->data[i];
      return acc;
    };
    RunOut r;
    r.err = fd_groups(eval, {{&x, &gx}}, seed + 3, 1000);
    r.ties = tape.nondiff_ties;
    return r;
  };
  checks.push_back({"pool_max", [pool_check](uint64_t seed) {
    return pool_check(seed, false);
  }});
  checks.push_back({"pool_mmm", [pool_check](uint64_t seed) {
    return pool_check(seed, true);
  }});

  checks.push_back({"voxel2pillar", [cap](uint64_t seed) {
    GridConfig g = toy_grid();
    auto clouds = toy_cloud(g, 80, seed);
    auto mlp = init_mlp_params<double>(7, 4, seed + 1);
    auto col = init_column_collapse<double>(g.D(), 12, 5, seed + 2);
    Tape<double> tape;
    auto out = voxel2pillar_encode(&tape, clouds, g, mlp, col,
                                   NormMode::Train, seed + 3);
    auto probe = random_probe(out.n(), 5, seed + 4);
    auto loss = weighted_sum(&tape, out.feats, probe);
    tape.backward(loss.id);
    auto eval = [&]() {
      MlpParams<double> lm = mlp;
      ColumnCollapseParams<double> lc = col;
      auto o = voxel2pillar_encode<double>(nullptr, clouds, g, lm, lc,
                                           NormMode::Train, seed + 3);
      double acc = 0.0;
      for (size_t i = 0; i < o.feats.val().data.size(); ++i)
        acc += o.feats.val().data[i] * probe->data[i];
      return acc;
    };
    RunOut r;
    r.err = fd_groups(
        eval, {{&mlp.weight.v, &mlp.weight.g}, {&col.conv.weight.v, &col.conv.weight.g}},
        seed + 5, cap);
    r.ties = tape.nondiff_ties;
    return r;
  }});

  checks.push_back({"lsfe_block", [cap](uint64_t seed) {
    auto t = random_tensor(8, 3, 0.3, seed);
    auto p = init_lsfe<double>(3, 2, seed + 1);
    Tape<double> tape;
    auto in = trace_st(&tape, t);
    auto out = lsfe_block(&tape, in, p, NormMode::Train);
    auto probe = random_probe(out.n(), 3, seed + 2);
    auto loss = weighted_sum(&tape, out.feats, probe);
    tape.backward(loss.id);
    auto eval = [&]() {
      LsfeParams<double> local = p;
      auto o = lsfe_block<double>(
          nullptr, TracedSt<double>{t.cm, constant(t.feats)}, local,
          NormMode::Train);
      double acc = 0.0;
      for (size_t i = 0; i < o.feats.val().data.size(); ++i)
        acc += o.feats.val().data[i] * probe->data[i];
      return acc;
    };
    RunOut r;
    r.err = fd_groups(eval,
                      {{&p.main1.weight.v, &p.main1.weight.g},
                       {&p.main2.weight.v, &p.main2.weight.g},
                       {&p.dil.weight.v, &p.dil.weight.g},
                       {&p.bn1.gamma.v, &p.bn1.gamma.g},
                       {&p.bn2.beta.v, &p.bn2.beta.g}},
                      seed + 3, cap);
    r.ties = tape.nondiff_ties;
    return r;
  }});

  checks.push_back({"dlsfe_block", [cap](uint64_t seed) {
    auto t = random_tensor(10, 3, 0.25, seed);
    auto p = init_dlsfe<double>(3, seed + 1);
    Tape<double> tape;
    auto in = trace_st(&tape, t);
    auto out = dlsfe_block(&tape, in, p, NormMode::Train);
    auto probe = random_probe(out.n(), 3, seed + 2);
    auto loss = weighted_sum(&tape, out.feats, probe);
    tape.backward(loss.id);
    auto eval = [&]() {
      DlsfeParams<double> local = p;
      auto o = dlsfe_block<double>(
          nullptr, TracedSt<double>{t.cm, constant(t.feats)}, local,
          NormMode::Train);
      double acc = 0.0;
      for (size_t i = 0; i < o.feats.val().data.size(); ++i)
        acc += o.feats.val().data[i] * probe->data[i];
      return acc;
    };
    RunOut r;
    r.err = fd_groups(eval,
                      {{&p.fine.weight.v, &p.fine.weight.g},
                       {&p.row9.weight.v, &p.row9.weight.g},
                       {&p.col9.weight.v, &p.col9.weight.g},
                       {&p.bn_row.gamma.v, &p.bn_row.gamma.g}},
                      seed + 3, cap);
    r.ties = tape.nondiff_ties;
    return r;
  }});

  checks.push_back({"convnext_block", [cap](uint64_t seed) {
    auto t = random_tensor(8, 4, 0.35, seed);
    auto p = init_convnext<double>(4, 2, 5, seed + 1);
    Tape<double> tape;
    auto in = trace_st(&tape, t);
    auto out = convnext_block(&tape, in, p, NormMode::Eval);
    auto probe = random_probe(out.n(), 4, seed + 2);
    auto loss = weighted_sum(&tape, out.feats, probe);
    tape.backward(loss.id);
    auto eval = [&]() {
      ConvNeXtParams<double> local = p;
      auto o = convnext_block<double>(
          nullptr, TracedSt<double>{t.cm, constant(t.feats)}, local,
          NormMode::Eval);
      double acc = 0.0;
      for (size_t i = 0; i < o.feats.val().data.size(); ++i)
        acc += o.feats.val().data[i] * probe->data[i];
      return acc;
    };
    RunOut r;
    r.err = fd_groups(eval,
                      {{&p.dw.weight.v, &p.dw.weight.g},
                       {&p.ln.gamma.v, &p.ln.gamma.g},
                       {&p.expand.weight.v, &p.expand.weight.g},
                       {&p.project.weight.v, &p.project.weight.g}},
                      seed + 3, cap);
    r.ties = tape.nondiff_ties;
    return r;
  }});

  checks.push_back({"msfe_downsample", [cap](uint64_t seed) {
    auto t = random_tensor(12, 3, 0.3, seed);
    auto p = init_msfe<double>(3, 4, true, {2, 3}, seed + 1);
    Tape<double> tape;
    auto in = trace_st(&tape, t);
    auto out = msfe_module(&tape, in, p, NormMode::Train);
    auto probe = random_probe(out.n(), 4, seed + 2);
    auto loss = weighted_sum(&tape, out.feats, probe);
    tape.backward(loss.id);
    auto eval = [&]() {
      MsfeParams<double> local = p;
      auto o = msfe_module<double>(
          nullptr, TracedSt<double>{t.cm, constant(t.feats)}, local,
          NormMode::Train);
      double acc = 0.0;
      for (size_t i = 0; i < o.feats.val().data.size(); ++i)
        acc += o.feats.val().data[i] * probe->data[i];
      return acc;
    };
    RunOut r;
    r.err = fd_groups(eval,
                      {{&p.down.weight.v, &p.down.weight.g},
                       {&p.dlsfe.fine.weight.v, &p.dlsfe.fine.weight.g},
                       {&p.lsfes[0].dil.weight.v, &p.lsfes[0].dil.weight.g},
                       {&p.lsfes[1].main1.weight.v, &p.lsfes[1].main1.weight.g}},
                      seed + 3, cap);
    r.ties = tape.nondiff_ties;
    return r;
  }});

  checks.push_back({"fuse_last_three", [cap](uint64_t seed) {
    auto s4 = random_tensor(16, 3, 0.05, seed);
    auto s5 = random_tensor(8, 4, 0.1, seed + 1);
    auto s6 = random_tensor(4, 5, 0.2, seed + 2);
    auto p = init_fuse<double>(3, 4, 5, 6, seed + 3);
    Tape<double> tape;
    auto out = fuse_last_three(&tape, trace_st(&tape, s4), trace_st(&tape, s5),
                               trace_st(&tape, s6), p);
    auto probe = random_probe(out.n(), 6, seed + 4);
    auto loss = weighted_sum(&tape, out.feats, probe);
    tape.backward(loss.id);
    auto eval = [&]() {
      FuseParams<double> local = p;
      auto o = fuse_last_three<double>(
          nullptr, TracedSt<double>{s4.cm, constant(s4.feats)},
          TracedSt<double>{s5.cm, constant(s5.feats)},
          TracedSt<double>{s6.cm, constant(s6.feats)}, local);
      double acc = 0.0;
      for (size_t i = 0; i < o.feats.val().data.size(); ++i)
        acc += o.feats.val().data[i] * probe->data[i];
      return acc;
    };
    RunOut r;
    r.err = fd_groups(eval,
                      {{&p.p4.weight.v, &p.p4.weight.g},
                       {&p.p5.weight.v, &p.p5.weight.g},
                       {&p.p6.weight.v, &p.p6.weight.g}},
                      seed + 5, cap);
    r.ties = tape.nondiff_ties;
    return r;
  }});

  checks.push_back({"neck", [cap](uint64_t seed) {
    NetworkConfig cfg;
    cfg.fuse_channels = 4;
    cfg.convnext_expand = 2;
    auto t = random_tensor(10, 4, 0.2, seed);
    auto p = init_neck<double>(cfg, seed + 1);
    Tape<double> tape;
    auto in = trace_st(&tape, t);
    auto out = neck_forward(&tape, in, p, NormMode::Train);
    auto probe = random_probe(out.n(), 4, seed + 2);
    auto loss = weighted_sum(&tape, out.feats, probe);
    tape.backward(loss.id);
    auto eval = [&]() {
      NeckParams<double> local = p;
      auto o = neck_forward<double>(
          nullptr, TracedSt<double>{t.cm, constant(t.feats)}, local,
          NormMode::Train);
      double acc = 0.0;
      for (size_t i = 0; i < o.feats.val().data.size(); ++i)
        acc += o.feats.val().data[i] * probe->data[i];
      return acc;
    };
    RunOut r;
    r.err = fd_groups(eval,
                      {{&p.stem.weight.v, &p.stem.weight.g},
                       {&p.bn.gamma.v, &p.bn.gamma.g},
                       {&p.blocks[0].dw.weight.v, &p.blocks[0].dw.weight.g}},
                      seed + 3, cap);
    r.ties = tape.nondiff_ties;
    return r;
  }});

  checks.push_back({"head", [cap](uint64_t seed) {
    auto t = random_tensor(10, 4, 0.3, seed);
    auto p = init_head<double>(4, 6, 3, seed + 1);
    Tape<double> tape;
    auto in = trace_st(&tape, t);
    auto out = head_forward(&tape, in, p, NormMode::Train);
    auto probe_c = random_probe(out.cls.rows(), 3, seed + 2);
    auto probe_b = random_probe(out.box.rows(), 8, seed + 3);
    auto loss = scalar_add(&tape, weighted_sum(&tape, out.cls, probe_c),
                           weighted_sum(&tape, out.box, probe_b));
    tape.backward(loss.id);
    auto eval = [&]() {
      HeadParams<double> local = p;
      auto o = head_forward<double>(
          nullptr, TracedSt<double>{t.cm, constant(t.feats)}, local,
          NormMode::Train);
      double acc = 0.0;
      for (size_t i = 0; i < o.cls.val().data.size(); ++i)
        acc += o.cls.val().data[i] * probe_c->data[i];
      for (size_t i = 0; i < o.box.val().data.size(); ++i)
        acc += o.box.val().data[i] * probe_b->data[i];
      return acc;
    };
    RunOut r;
    r.err = fd_groups(eval,
                      {{&p.cls_trunk.weight.v, &p.cls_trunk.weight.g},
                       {&p.cls_out.weight.v, &p.cls_out.weight.g},
                       {&p.cls_out.bias.v, &p.cls_out.bias.g},
                       {&p.box_out.weight.v, &p.box_out.weight.g}},
                      seed + 4, cap);
    r.ties = tape.nondiff_ties;
    return r;
  }});

  auto loss_check = [](uint64_t seed, bool with_positives) {
    int n = 14, k = 3;
    MatD cls = random_mat(n, k, seed);
    MatD box = random_mat(n, kBoxValues, seed + 1);
    TargetSet<double> targets;
    targets.cls.assign(size_t(n), -1);
    targets.box = Matrix<double>(n, kBoxValues);
    if (with_positives) {
      Rng rng = Rng::stream(seed + 2, "gc_targets");
      for (int i : {2, 7, 11}) {
        targets.cls[size_t(i)] = int(rng.uniform_int(k));
        for (int j = 0; j < kBoxValues; ++j)
          targets.box.at(i, j) = rng.normal();
        ++targets.n_pos;
      }
    }
    Tape<double> tape;
    auto tc = trace(&tape, cls);
    auto tb = trace(&tape, box);
    auto loss = detection_loss(&tape, tc, tb, targets);
    tape.backward(loss.total.id);
    const MatD& gc = tape.grad(tc.id);
    const MatD& gb = tape.grad(tb.id);
    auto eval = [&]() {
      return double(detection_loss<double>(nullptr, constant(cls),
                                           constant(box), targets)
                        .total.value);
    };
    RunOut r;
    r.err = fd_groups(eval, {{&cls, &gc}, {&box, &gb}}, seed + 3, 1000);
    return r;
  };
  checks.push_back({"focal_background_only", [loss_check](uint64_t seed) {
    return loss_check(seed, false);
  }});
  checks.push_back({"detection_loss", [loss_check](uint64_t seed) {
    return loss_check(seed, true);
  }});

  checks.push_back({"full_toy_network", [](uint64_t seed) {
    GridConfig g = toy_grid();  // 32x32 BEV cells
    NetworkConfig cfg;
    cfg.stage_channels = {4, 4, 4, 6, 6, 6};
    cfg.fuse_channels = 6;
    cfg.head_channels = 4;
    cfg.num_classes = 2;
    cfg.convnext_expand = 2;
    auto params = init_detector<double>(g, cfg, 4, seed);

    SceneSpec spec;
    spec.min_boxes = 1;
    spec.max_boxes = 2;
    spec.min_points_per_box = 30;
    spec.max_points_per_box = 40;
    spec.noise_points = 20;
    spec.seed = seed + 1;
    spec.classes[0].size_mean = {2.5, 1.5, 1.2};
    auto scene = synth_scene<double>(spec, g, 0);

    int stride = cfg.cumulative_strides()[3];
    Tape<double> tape;
    auto out = detector_forward(&tape, {scene.cloud}, params, NormMode::Eval,
                                seed + 2);
    auto targets =
        assign_targets(scene.boxes, *out.head.cm, g, stride);
    auto loss = detection_loss(&tape, out.head.cls, out.head.box, targets);
    tape.backward(loss.total.id);
    auto eval = [&]() {
      DetectorParams<double> local = params;
      auto o = detector_forward<double>(nullptr, {scene.cloud}, local,
                                        NormMode::Eval, seed + 2);
      return double(detection_loss<double>(nullptr, o.head.cls, o.head.box,
                                           targets)
                        .total.value);
    };
    auto& P = params;
    RunOut r;
    r.err = fd_groups(
        eval,
        {{&P.mlp.weight.v, &P.mlp.weight.g},
         {&P.col.conv.weight.v, &P.col.conv.weight.g},
         {&P.backbone.stages[0].dlsfe.fine.weight.v,
          &P.backbone.stages[0].dlsfe.fine.weight.g},
         {&P.backbone.stages[3].down.weight.v,
          &P.backbone.stages[3].down.weight.g},
         {&P.backbone.stages[5].lsfes[1].dil.weight.v,
          &P.backbone.stages[5].lsfes[1].dil.weight.g},
         {&P.fuse.p5.weight.v, &P.fuse.p5.weight.g},
         {&P.neck.stem.weight.v, &P.neck.stem.weight.g},
         {&P.head.cls_out.weight.v, &P.head.cls_out.weight.g},
         {&P.head.cls_out.bias.v, &P.head.cls_out.bias.g},
         {&P.head.box_out.weight.v, &P.head.box_out.weight.g}},
        seed + 3, 16);
    r.ties = tape.nondiff_ties;
    return r;
  }});

  return checks;
}

inline const std::vector<Check>& registry() {
  static const std::vector<Check> checks = build_registry();
  return checks;
}

}  // namespace gradcheck_detail

inline std::vector<std::string> grad_check_names() {
  std::vector<std::string> names;
  for (const auto& c : gradcheck_detail::registry()) names.push_back(c.name);
  return names;
}

// Runs one named check, resampling up to 5 times when the forward pass lands
// on a pooling tie (the loss is not differentiable there).
inline CheckResult run_grad_check(const std::string& name, uint64_t seed,
                                  double tol) {
  for (const auto& c : gradcheck_detail::registry()) {
    if (c.name != name) continue;
    CheckResult res;
    res.name = name;
    res.tol = tol;
    for (int attempt = 0; attempt < 5; ++attempt) {
      auto out = c.run(Rng::keyed(seed, uint64_t(attempt)).next_u64());
      if (out.ties > 0) {
        ++res.resamples;
        continue;
      }
      res.max_rel_err = out.err;
      res.pass = out.err <= tol;
      return res;
    }
    fail(Err::NonDifferentiablePoint,
         "check " + name + " hit pooling ties on 5 consecutive samples");
  }
  fail(Err::InvalidConfig, "unknown gradient check: " + name);
}

inline std::vector<CheckResult> run_grad_checks(uint64_t seed, double tol) {
  std::vector<CheckResult> out;
  for (const auto& c : gradcheck_detail::registry())
    out.push_back(run_grad_check(c.name, seed, tol));
  return out;
}

}  // namespace pnx
