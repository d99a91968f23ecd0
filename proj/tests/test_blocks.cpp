#include <doctest.h>

#include <set>

#include "pnx/network.hpp"
#include "test_util.hpp"

using namespace pnx;
using pnxtest::thrown;
using pnxtest::worst_fd_error;

using MatD = Matrix<double>;
using TapeD = Tape<double>;
using StD = SparseTensor<double>;

namespace {

StD random_bev(int extent, int channels, double density, uint64_t seed,
               int batch = 1) {
  Rng rng = Rng::stream(seed, "bev");
  std::vector<Coord> coords;
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < extent; ++y)
      for (int x = 0; x < extent; ++x)
        if (rng.uniform() < density) coords.push_back({b, y, x, 0});
  auto cm = make_coord_map(2, {extent, extent, 1}, batch, coords);
  Matrix<double> feats(cm->n(), channels);
  feats.fill_normal(rng);
  return StD{cm, std::move(feats)};
}

std::shared_ptr<const MatD> probe_like(int rows, int cols, uint64_t seed) {
  Rng rng = Rng::stream(seed, "probe");
  auto m = std::make_shared<MatD>(rows, cols);
  m->fill_normal(rng);
  return m;
}

// Max Chebyshev reach of the dilated branch: zero every branch except the
// dilation conv (all-ones weight, unit eval norm), feed an impulse on an
// all-active grid, and measure how far nonzero outputs sit from the center.
int dilated_reach(LsfeParams<double>& p, int extent) {
  LsfeParams<double> local = p;
  local.main1.weight.v.zero();
  local.main2.weight.v.zero();
  local.dil.weight.v = MatD(local.dil.weight.v.rows, local.dil.weight.v.cols, 1.0);
  local.bn_dil.gamma.v = MatD(1, local.channels, 1.0);

  std::vector<Coord> coords;
  for (int y = 0; y < extent; ++y)
    for (int x = 0; x < extent; ++x) coords.push_back({0, y, x, 0});
  auto cm = make_coord_map(2, {extent, extent, 1}, 1, coords);
  MatD feats(cm->n(), local.channels);
  int mid = extent / 2;
  feats.at(mid * extent + mid, 0) = 1.0;
  auto in = TracedSt<double>{cm, constant(std::move(feats))};

  auto out = lsfe_block<double>(nullptr, in, local, NormMode::Eval);
  int reach = 0;
  for (int i = 0; i < out.n(); ++i) {
    bool nonzero = false;
    for (int c = 0; c < local.channels; ++c)
      if (out.feats.val().at(i, c) != 0.0) nonzero = true;
    if (!nonzero) continue;
    const Coord& co = out.cm->coords[size_t(i)];
    reach = std::max({reach, std::abs(co.y - mid), std::abs(co.x - mid)});
  }
  return reach;
}

// Nonzero support size of an impulse pushed through one or two dense convs.
int impulse_support(const std::vector<KernelSpec>& specs, int extent) {
  DenseGrid<double> d(1, 1, 2, {extent, extent, 1});
  d.at(0, 0, extent / 2, extent / 2) = 1.0;
  for (const KernelSpec& spec : specs) {
    MatD w(spec.k_total(), 1, 1.0);
    d = dense_conv_oracle(d, spec, w);
  }
  int support = 0;
  for (double v : d.data) support += v != 0.0;
  return support;
}

}  // namespace

TEST_CASE("network config validation") {
  NetworkConfig cfg;
  cfg.validate();
  CHECK(cfg.cumulative_strides() == std::array<int, 6>{1, 2, 4, 8, 16, 32});
  CHECK(cfg.neck_repeats == 1);
  CHECK(cfg.neck_kernel == 5);
  SUBCASE("even neck kernel rejected") {
    cfg.neck_kernel = 4;
    CHECK(thrown([&] { cfg.validate(); }) == Err::InvalidConfig);
  }
  SUBCASE("dilation schedule must match lsfe count") {
    cfg.dilation_schedule = {2};
    CHECK(thrown([&] { cfg.validate(); }) == Err::InvalidConfig);
  }
  SUBCASE("first stage must not downsample") {
    cfg.stage_strides[0] = 2;
    CHECK(thrown([&] { cfg.validate(); }) == Err::InvalidConfig);
  }
}

TEST_CASE("lsfe block") {
  auto t = random_bev(8, 3, 0.3, 1);
  auto p = init_lsfe<double>(3, 2, 7);
  SUBCASE("zeroed branches leave relu of the identity") {
    LsfeParams<double> z = p;
    z.main1.weight.v.zero();
    z.main2.weight.v.zero();
    z.dil.weight.v.zero();
    z.bn1.gamma.v.zero();
    z.bn2.gamma.v.zero();
    z.bn_dil.gamma.v.zero();
    auto in = TracedSt<double>{t.cm, constant(t.feats)};
    auto out = lsfe_block<double>(nullptr, in, z, NormMode::Train);
    REQUIRE(out.n() == t.cm->n());
    for (int i = 0; i < out.n(); ++i)
      for (int c = 0; c < 3; ++c)
        CHECK(out.feats.val().at(i, c) == std::max(0.0, t.feats.at(i, c)));
  }
  SUBCASE("active set and coordinate map preserved") {
    auto in = TracedSt<double>{t.cm, constant(t.feats)};
    auto out = lsfe_block<double>(nullptr, in, p, NormMode::Train);
    CHECK(out.cm == t.cm);
  }
  SUBCASE("channel mismatch rejected") {
    auto wide = random_bev(8, 5, 0.3, 2);
    auto in = TracedSt<double>{wide.cm, constant(wide.feats)};
    CHECK(thrown([&] {
            lsfe_block<double>(nullptr, in, p, NormMode::Train);
          }) == Err::ChannelMismatch);
  }
  SUBCASE("empty input passes through") {
    auto empty = random_bev(8, 3, 0.0, 3);
    auto in = TracedSt<double>{empty.cm, constant(empty.feats)};
    CHECK(lsfe_block<double>(nullptr, in, p, NormMode::Train).n() == 0);
  }
  SUBCASE("gradients match finite differences") {
    auto probe = probe_like(t.cm->n(), 3, 11);
    auto eval = [&]() {
      LsfeParams<double> local = p;
      auto in = TracedSt<double>{t.cm, constant(t.feats)};
      auto out = lsfe_block<double>(nullptr, in, local, NormMode::Train);
      double acc = 0.0;
      for (size_t i = 0; i < out.feats.val().data.size(); ++i)
        acc += out.feats.val().data[i] * probe->data[i];
      return acc;
    };
    TapeD tape;
    auto in = trace_st(&tape, t);
    auto out = lsfe_block(&tape, in, p, NormMode::Train);
    auto loss = weighted_sum(&tape, out.feats, probe);
    tape.backward(loss.id);
    CHECK(worst_fd_error(eval, p.main1.weight.v, p.main1.weight.g) <= 1e-5);
    CHECK(worst_fd_error(eval, p.main2.weight.v, p.main2.weight.g) <= 1e-5);
    CHECK(worst_fd_error(eval, p.dil.weight.v, p.dil.weight.g) <= 1e-5);
    CHECK(worst_fd_error(eval, p.bn1.gamma.v, p.bn1.gamma.g) <= 1e-5);
    CHECK(worst_fd_error(eval, p.bn2.beta.v, p.bn2.beta.g) <= 1e-5);
  }
}

TEST_CASE("dlsfe block") {
  auto t = random_bev(10, 3, 0.25, 5);
  auto p = init_dlsfe<double>(3, 9);
  SUBCASE("separable branch parameter count equals two 3x3 convs") {
    int c = 3;
    int separable = p.row9.weight.v.rows * p.row9.weight.v.cols +
                    p.col9.weight.v.rows * p.col9.weight.v.cols;
    CHECK(separable == 2 * 9 * c * c);
  }
  SUBCASE("separable branch reaches 9x9 where two 3x3 reach 5x5") {
    CHECK(impulse_support({subm2d(1, 9), subm2d(9, 1)}, 17) == 81);
    CHECK(impulse_support({subm2d(3, 3), subm2d(3, 3)}, 17) == 25);
  }
  SUBCASE("active set preserved") {
    auto in = TracedSt<double>{t.cm, constant(t.feats)};
    auto out = dlsfe_block<double>(nullptr, in, p, NormMode::Train);
    CHECK(out.cm == t.cm);
  }
  SUBCASE("gradients match finite differences") {
    auto probe = probe_like(t.cm->n(), 3, 13);
    auto eval = [&]() {
      DlsfeParams<double> local = p;
      auto in = TracedSt<double>{t.cm, constant(t.feats)};
      auto out = dlsfe_block<double>(nullptr, in, local, NormMode::Train);
      double acc = 0.0;
      for (size_t i = 0; i < out.feats.val().data.size(); ++i)
        acc += out.feats.val().data[i] * probe->data[i];
      return acc;
    };
    TapeD tape;
    auto in = trace_st(&tape, t);
    auto out = dlsfe_block(&tape, in, p, NormMode::Train);
    auto loss = weighted_sum(&tape, out.feats, probe);
    tape.backward(loss.id);
    CHECK(worst_fd_error(eval, p.fine.weight.v, p.fine.weight.g) <= 1e-5);
    CHECK(worst_fd_error(eval, p.row9.weight.v, p.row9.weight.g) <= 1e-5);
    CHECK(worst_fd_error(eval, p.col9.weight.v, p.col9.weight.g) <= 1e-5);
    CHECK(worst_fd_error(eval, p.bn_row.gamma.v, p.bn_row.gamma.g) <= 1e-5);
  }
}

TEST_CASE("convnext block") {
  auto t = random_bev(8, 4, 0.35, 15);
  auto p = init_convnext<double>(4, 4, 5, 17);
  SUBCASE("zeroed projection is the identity") {
    ConvNeXtParams<double> z = p;
    z.project.weight.v.zero();
    z.project.bias.v.zero();
    auto in = TracedSt<double>{t.cm, constant(t.feats)};
    auto out = convnext_block<double>(nullptr, in, z, NormMode::Eval);
    CHECK(out.cm == t.cm);
    CHECK(out.feats.val().data == t.feats.data);
  }
  SUBCASE("expansion widens by the configured factor") {
    CHECK(p.expand.c_out == 16);
    CHECK(p.project.c_in == 16);
  }
  SUBCASE("gradients match finite differences") {
    auto probe = probe_like(t.cm->n(), 4, 19);
    auto eval = [&]() {
      ConvNeXtParams<double> local = p;
      auto in = TracedSt<double>{t.cm, constant(t.feats)};
      auto out = convnext_block<double>(nullptr, in, local, NormMode::Eval);
      double acc = 0.0;
      for (size_t i = 0; i < out.feats.val().data.size(); ++i)
        acc += out.feats.val().data[i] * probe->data[i];
      return acc;
    };
    TapeD tape;
    auto in = trace_st(&tape, t);
    auto out = convnext_block(&tape, in, p, NormMode::Eval);
    auto loss = weighted_sum(&tape, out.feats, probe);
    tape.backward(loss.id);
    CHECK(worst_fd_error(eval, p.dw.weight.v, p.dw.weight.g) <= 1e-5);
    CHECK(worst_fd_error(eval, p.ln.gamma.v, p.ln.gamma.g) <= 1e-5);
    CHECK(worst_fd_error(eval, p.expand.weight.v, p.expand.weight.g) <= 1e-5);
    CHECK(worst_fd_error(eval, p.expand.bias.v, p.expand.bias.g) <= 1e-5);
    CHECK(worst_fd_error(eval, p.project.weight.v, p.project.weight.g) <= 1e-5);
  }
}

TEST_CASE("msfe module") {
  SUBCASE("no downsample preserves the active set") {
    auto t = random_bev(8, 3, 0.3, 21);
    auto p = init_msfe<double>(3, 3, false, {2, 3}, 23);
    auto in = TracedSt<double>{t.cm, constant(t.feats)};
    auto out = msfe_module<double>(nullptr, in, p, NormMode::Train);
    CHECK(out.cm == t.cm);
  }
  SUBCASE("downsampled single site lands on its four stride-2 children") {
    auto cm = make_coord_map(2, {16, 16, 1}, 1, {Coord{0, 5, 7, 0}});
    MatD feats(1, 3, 1.0);
    auto p = init_msfe<double>(3, 4, true, {2, 3}, 25);
    auto in = TracedSt<double>{cm, constant(std::move(feats))};
    auto out = msfe_module<double>(nullptr, in, p, NormMode::Eval);
    CHECK(out.cm->shape[0] == 8);
    std::set<std::pair<int, int>> expect{{2, 3}, {2, 4}, {3, 3}, {3, 4}};
    REQUIRE(out.n() == 4);
    for (const Coord& c : out.cm->coords)
      CHECK(expect.count({c.y, c.x}) == 1);
    CHECK(out.channels() == 4);
  }
  SUBCASE("dilation schedule is applied in order") {
    auto p = init_msfe<double>(3, 3, false, {2, 3}, 27);
    REQUIRE(p.lsfes.size() == 2);
    CHECK(p.lsfes[0].dilation == 2);
    CHECK(p.lsfes[1].dilation == 3);
    CHECK(dilated_reach(p.lsfes[0], 15) == 2);
    CHECK(dilated_reach(p.lsfes[1], 15) == 3);
  }
  SUBCASE("stage without downsample cannot change width") {
    CHECK(thrown([&] { init_msfe<double>(3, 4, false, {2, 3}, 29); }) ==
          Err::ChannelMismatch);
  }
}

TEST_CASE("backbone stage shapes and channels on the default grid") {
  GridConfig g;
  NetworkConfig cfg;
  auto p = init_backbone<double>(cfg, 31);
  Rng rng = Rng::stream(33, "sites");
  std::vector<Coord> coords;
  std::set<std::pair<int, int>> used;
  while (coords.size() < 24) {
    int y = int(rng.uniform_int(g.H())), x = int(rng.uniform_int(g.W()));
    if (!used.insert({y, x}).second) continue;
    coords.push_back({0, y, x, 0});
  }
  auto cm = make_coord_map(2, {g.H(), g.W(), 1}, 1, coords);
  MatD feats(cm->n(), cfg.stage_channels[0]);
  feats.fill_normal(rng);
  auto in = TracedSt<double>{cm, constant(std::move(feats))};
  auto stages = backbone_forward<double>(nullptr, in, p, NormMode::Eval);
  std::array<int, 6> extents{1504, 752, 376, 188, 94, 47};
  for (int i = 0; i < 6; ++i) {
    CHECK(stages[size_t(i)].cm->shape[0] == extents[size_t(i)]);
    CHECK(stages[size_t(i)].cm->shape[1] == extents[size_t(i)]);
    CHECK(stages[size_t(i)].channels() == cfg.stage_channels[size_t(i)]);
    CHECK(stages[size_t(i)].feats.val().all_finite());
  }
  CHECK(stages[0].n() == 24);
}

TEST_CASE("backbone keeps empty inputs empty") {
  NetworkConfig cfg;
  cfg.stage_channels = {4, 4, 4, 4, 4, 4};
  auto p = init_backbone<double>(cfg, 35);
  auto cm = make_coord_map(2, {64, 64, 1}, 1, {});
  auto in = TracedSt<double>{cm, constant(MatD(0, 4))};
  auto stages = backbone_forward<double>(nullptr, in, p, NormMode::Train);
  std::array<int, 6> extents{64, 32, 16, 8, 4, 2};
  for (int i = 0; i < 6; ++i) {
    CHECK(stages[size_t(i)].n() == 0);
    CHECK(stages[size_t(i)].cm->shape[0] == extents[size_t(i)]);
  }
}

TEST_CASE("fusing the last three stages") {
  NetworkConfig cfg;
  auto mk = [](int extent, std::vector<Coord> coords, int channels,
               uint64_t seed) {
    auto cm = make_coord_map(2, {extent, extent, 1}, 1, std::move(coords));
    MatD feats(cm->n(), channels);
    Rng rng = Rng::stream(seed, "fuse_feats");
    feats.fill_normal(rng);
    return StD{cm, std::move(feats)};
  };
  auto p = init_fuse<double>(3, 4, 5, 6, 37);

  SUBCASE("empty coarse maps leave the projected fine map") {
    auto s4 = mk(16, {{0, 3, 3, 0}, {0, 9, 12, 0}}, 3, 1);
    auto s5 = mk(8, {}, 4, 2);
    auto s6 = mk(4, {}, 5, 3);
    auto out = fuse_last_three<double>(
        nullptr, TracedSt<double>{s4.cm, constant(s4.feats)},
        TracedSt<double>{s5.cm, constant(s5.feats)},
        TracedSt<double>{s6.cm, constant(s6.feats)}, p);
    REQUIRE(out.n() == 2);
    CHECK(same_coord_set(*out.cm, *s4.cm));
    // Feature rows equal the 1x1 projection of s4 alone.
    const MatD& w = p.p4.weight.v;  // row 0: C_in x C_out
    for (int i = 0; i < 2; ++i)
      for (int co = 0; co < 6; ++co) {
        double expect = 0.0;
        for (int ci = 0; ci < 3; ++ci)
          expect += s4.feats.at(i, ci) * w.at(0, ci * 6 + co);
        CHECK(rel_err(out.feats.val().at(i, co), expect) <= 1e-12);
      }
  }
  SUBCASE("a coarse site is scaled onto the fine grid") {
    auto s4 = mk(16, {}, 3, 4);
    auto s5 = mk(8, {}, 4, 5);
    auto s6 = mk(4, {{0, 3, 1, 0}}, 5, 6);  // (3,1) x4 -> (12,4)
    auto out = fuse_last_three<double>(
        nullptr, TracedSt<double>{s4.cm, constant(s4.feats)},
        TracedSt<double>{s5.cm, constant(s5.feats)},
        TracedSt<double>{s6.cm, constant(s6.feats)}, p);
    REQUIRE(out.n() == 1);
    CHECK(out.cm->coords[0] == Coord{0, 12, 4, 0});
  }
  SUBCASE("union size and coincidence sum") {
    auto s4 = mk(16, {{0, 4, 6, 0}, {0, 1, 1, 0}}, 3, 7);
    auto s5 = mk(8, {{0, 2, 3, 0}, {0, 0, 0, 0}}, 4, 8);  // (4,6) collides
    auto s6 = mk(4, {{0, 1, 1, 0}}, 5, 9);                // (4,4) fresh
    auto out = fuse_last_three<double>(
        nullptr, TracedSt<double>{s4.cm, constant(s4.feats)},
        TracedSt<double>{s5.cm, constant(s5.feats)},
        TracedSt<double>{s6.cm, constant(s6.feats)}, p);
    CHECK(out.n() == 4);  // 5 inputs, one collision
    auto at = [&](int y, int x) {
      auto row = out.cm->find(Coord{0, y, x, 0});
      REQUIRE(row);
      return *row;
    };
    // The colliding site carries the sum of both projections.
    int r = at(4, 6);
    const MatD& w4 = p.p4.weight.v;
    const MatD& w5 = p.p5.weight.v;
    for (int co = 0; co < 6; ++co) {
      double expect = 0.0;
      for (int ci = 0; ci < 3; ++ci)
        expect += s4.feats.at(0, ci) * w4.at(0, ci * 6 + co);
      for (int ci = 0; ci < 4; ++ci)
        expect += s5.feats.at(0, ci) * w5.at(0, ci * 6 + co);
      CHECK(rel_err(out.feats.val().at(r, co), expect) <= 1e-12);
    }
    // Every fused coordinate scales back into the fine grid.
    for (const Coord& c : out.cm->coords) {
      CHECK(c.y < 16);
      CHECK(c.x < 16);
    }
  }
  SUBCASE("mismatched shape halving is rejected") {
    auto s4 = mk(16, {}, 3, 10);
    auto s5 = mk(7, {}, 4, 11);  // should be 8
    auto s6 = mk(4, {}, 5, 12);
    CHECK(thrown([&] {
            fuse_last_three<double>(
                nullptr, TracedSt<double>{s4.cm, constant(s4.feats)},
                TracedSt<double>{s5.cm, constant(s5.feats)},
                TracedSt<double>{s6.cm, constant(s6.feats)}, p);
          }) == Err::StrideMismatch);
  }
  SUBCASE("gradients flow through the scatter") {
    auto s4 = mk(16, {{0, 4, 6, 0}, {0, 2, 2, 0}}, 3, 13);
    auto s5 = mk(8, {{0, 2, 3, 0}}, 4, 14);  // collides with (4,6)
    auto s6 = mk(4, {{0, 1, 1, 0}}, 5, 15);
    auto probe = probe_like(3, 6, 41);
    auto eval = [&]() {
      FuseParams<double> local = p;
      auto out = fuse_last_three<double>(
          nullptr, TracedSt<double>{s4.cm, constant(s4.feats)},
          TracedSt<double>{s5.cm, constant(s5.feats)},
          TracedSt<double>{s6.cm, constant(s6.feats)}, local);
      double acc = 0.0;
      for (size_t i = 0; i < out.feats.val().data.size(); ++i)
        acc += out.feats.val().data[i] * probe->data[i];
      return acc;
    };
    TapeD tape;
    auto out = fuse_last_three(&tape, trace_st(&tape, s4), trace_st(&tape, s5),
                               trace_st(&tape, s6), p);
    auto loss = weighted_sum(&tape, out.feats, probe);
    tape.backward(loss.id);
    CHECK(worst_fd_error(eval, p.p4.weight.v, p.p4.weight.g) <= 1e-6);
    CHECK(worst_fd_error(eval, p.p5.weight.v, p.p5.weight.g) <= 1e-6);
    CHECK(worst_fd_error(eval, p.p6.weight.v, p.p6.weight.g) <= 1e-6);
  }
}

TEST_CASE("neck dilates then refines on the fused grid") {
  NetworkConfig cfg;
  cfg.fuse_channels = 4;
  cfg.convnext_expand = 2;
  auto t = random_bev(12, 4, 0.15, 43);
  SUBCASE("output active set contains the input set") {
    auto p = init_neck<double>(cfg, 45);
    auto in = TracedSt<double>{t.cm, constant(t.feats)};
    auto out = neck_forward<double>(nullptr, in, p, NormMode::Eval);
    CHECK(out.cm->shape == t.cm->shape);
    CHECK(out.n() >= t.cm->n());
    for (const Coord& c : t.cm->coords) CHECK(out.cm->find(c).has_value());
  }
  SUBCASE("zero repeats leaves only the stem") {
    NetworkConfig r0 = cfg;
    r0.neck_repeats = 0;
    auto p = init_neck<double>(r0, 47);
    CHECK(p.blocks.empty());
    auto in = TracedSt<double>{t.cm, constant(t.feats)};
    auto out = neck_forward<double>(nullptr, in, p, NormMode::Eval);
    auto rb = build_rulebook(t.cm, spatial_spec(2, {3, 3, 1}, {1, 1, 1}));
    auto manual = conv_forward<double>(nullptr, in, rb, p.stem);
    manual = relu<double>(nullptr,
                          batchnorm_forward<double>(nullptr, manual, p.bn,
                                                    NormMode::Eval));
    CHECK(tensors_equal(out.tensor(), manual.tensor(), 0.0));
  }
}

TEST_CASE("head emits one prediction row per neck site") {
  auto t = random_bev(10, 4, 0.3, 49);
  auto p = init_head<double>(4, 6, 3, 51);
  SUBCASE("row counts and widths") {
    auto in = TracedSt<double>{t.cm, constant(t.feats)};
    auto out = head_forward<double>(nullptr, in, p, NormMode::Train);
    CHECK(out.cls.rows() == t.cm->n());
    CHECK(out.cls.cols() == 3);
    CHECK(out.box.rows() == t.cm->n());
    CHECK(out.box.cols() == 8);
    CHECK(out.cm == t.cm);
  }
  SUBCASE("empty input emits empty predictions") {
    auto empty = random_bev(10, 4, 0.0, 53);
    auto in = TracedSt<double>{empty.cm, constant(empty.feats)};
    auto out = head_forward<double>(nullptr, in, p, NormMode::Train);
    CHECK(out.cls.rows() == 0);
    CHECK(out.box.rows() == 0);
  }
  SUBCASE("gradients match finite differences") {
    auto probe_c = probe_like(t.cm->n(), 3, 55);
    auto probe_b = probe_like(t.cm->n(), 8, 57);
    auto eval = [&]() {
      HeadParams<double> local = p;
      auto in = TracedSt<double>{t.cm, constant(t.feats)};
      auto out = head_forward<double>(nullptr, in, local, NormMode::Train);
      double acc = 0.0;
      for (size_t i = 0; i < out.cls.val().data.size(); ++i)
        acc += out.cls.val().data[i] * probe_c->data[i];
      for (size_t i = 0; i < out.box.val().data.size(); ++i)
        acc += out.box.val().data[i] * probe_b->data[i];
      return acc;
    };
    TapeD tape;
    auto in = trace_st(&tape, t);
    auto out = head_forward(&tape, in, p, NormMode::Train);
    auto loss = scalar_add(&tape, weighted_sum(&tape, out.cls, probe_c),
                           weighted_sum(&tape, out.box, probe_b));
    tape.backward(loss.id);
    CHECK(worst_fd_error(eval, p.cls_trunk.weight.v, p.cls_trunk.weight.g) <=
          1e-5);
    CHECK(worst_fd_error(eval, p.cls_out.bias.v, p.cls_out.bias.g) <= 1e-5);
    CHECK(worst_fd_error(eval, p.box_out.weight.v, p.box_out.weight.g) <= 1e-5);
  }
}

TEST_CASE("decoding raw head outputs into boxes") {
  GridConfig g;
  g.x_range = {0.0, 64.0};
  g.y_range = {0.0, 64.0};
  g.z_range = {0.0, 4.0};
  g.voxel_size = {1.0, 1.0, 1.0};

  SUBCASE("empty predictions decode to nothing") {
    auto cm = make_coord_map(2, {8, 8, 1}, 1, {});
    auto dets = decode_detections<double>(MatD(0, 2), MatD(0, 8), *cm, g, 8,
                                          0.1);
    CHECK(dets.empty());
  }
  SUBCASE("zeroed predictions give a centered unit box at score one half") {
    auto cm = make_coord_map(2, {8, 8, 1}, 1, {Coord{0, 2, 3, 0}});
    auto dets =
        decode_detections<double>(MatD(1, 2), MatD(1, 8), *cm, g, 8, 0.4);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].score == 0.5);
    CHECK(dets[0].class_id == 0);
    CHECK(dets[0].center[0] == doctest::Approx(28.0));  // (3 + 0.5) * 8
    CHECK(dets[0].center[1] == doctest::Approx(20.0));
    CHECK(dets[0].center[2] == 0.0);
    CHECK(dets[0].size[0] == doctest::Approx(1.0));
    CHECK(dets[0].yaw == 0.0);
  }
  SUBCASE("score is the sigmoid of the best logit") {
    auto cm = make_coord_map(2, {8, 8, 1}, 1, {Coord{0, 1, 1, 0}});
    MatD cls(1, 3);
    cls.at(0, 0) = -1.0;
    cls.at(0, 1) = 2.0;
    cls.at(0, 2) = 0.5;
    auto dets = decode_detections<double>(cls, MatD(1, 8), *cm, g, 8, 0.1);
    REQUIRE(dets.size() == 1);
    CHECK(dets[0].class_id == 1);
    CHECK(dets[0].score == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))));
  }
  SUBCASE("weaker neighbors are suppressed, ties go to smaller (y,x)") {
    auto cm = make_coord_map(
        2, {8, 8, 1}, 1,
        {Coord{0, 2, 2, 0}, Coord{0, 2, 3, 0}, Coord{0, 5, 5, 0},
         Coord{0, 5, 6, 0}});
    MatD cls(4, 1);
    cls.at(0, 0) = 2.0;  // beats its neighbor (2,3)
    cls.at(1, 0) = 1.0;
    cls.at(2, 0) = 1.5;  // ties with (5,6): smaller (y,x) wins
    cls.at(3, 0) = 1.5;
    auto dets = decode_detections<double>(cls, MatD(4, 8), *cm, g, 8, 0.1);
    REQUIRE(dets.size() == 2);
    CHECK(dets[0].center[1] == doctest::Approx((2 + 0.5) * 8));
    CHECK(dets[0].center[0] == doctest::Approx((2 + 0.5) * 8));
    CHECK(dets[1].center[1] == doctest::Approx((5 + 0.5) * 8));
    CHECK(dets[1].center[0] == doctest::Approx((5 + 0.5) * 8));
  }
  SUBCASE("threshold removes low scores") {
    auto cm = make_coord_map(2, {8, 8, 1}, 1, {Coord{0, 1, 1, 0}});
    MatD cls(1, 1);
    cls.at(0, 0) = -3.0;  // sigmoid ~ 0.047
    CHECK(decode_detections<double>(cls, MatD(1, 8), *cm, g, 8, 0.1).empty());
    CHECK(decode_detections<double>(cls, MatD(1, 8), *cm, g, 8, 0.01).size() ==
          1);
  }
}

TEST_CASE("checkpoint round-trips every parameter") {
  GridConfig g;
  g.x_range = {0.0, 32.0};
  g.y_range = {0.0, 32.0};
  g.z_range = {0.0, 4.0};
  g.voxel_size = {1.0, 1.0, 1.0};
  NetworkConfig cfg;
  cfg.stage_channels = {4, 4, 4, 4, 4, 4};
  cfg.fuse_channels = 4;
  cfg.head_channels = 4;
  cfg.num_classes = 2;
  cfg.convnext_expand = 2;
  auto a = init_detector<double>(g, cfg, 4, 59);
  auto b = init_detector<double>(g, cfg, 4, 61);  // different weights
  auto ra = collect_params(a);
  auto rb = collect_params(b);
  REQUIRE(ra.size() == rb.size());

  std::string path = "blocks_test_ckpt.bin";
  save_checkpoint(path, ra);
  load_checkpoint(path, rb);
  double worst = 0.0;
  for (size_t i = 0; i < ra.size(); ++i)
    for (size_t j = 0; j < ra[i].v->data.size(); ++j)
      worst = std::max(worst,
                       std::abs(ra[i].v->data[j] - rb[i].v->data[j]));
  CHECK(worst == 0.0);

  SUBCASE("manifest mismatch is rejected") {
    NetworkConfig other = cfg;
    other.head_channels = 8;
    auto c = init_detector<double>(g, other, 4, 63);
    auto rc = collect_params(c);
    CHECK(thrown([&] { load_checkpoint(path, rc); }) == Err::ManifestMismatch);
  }
  std::remove(path.c_str());
}

TEST_CASE("detector forward reports pipeline stats") {
  GridConfig g;
  g.x_range = {0.0, 32.0};
  g.y_range = {0.0, 32.0};
  g.z_range = {0.0, 4.0};
  g.voxel_size = {1.0, 1.0, 1.0};
  NetworkConfig cfg;
  cfg.stage_channels = {4, 6, 6, 8, 8, 8};
  cfg.fuse_channels = 8;
  cfg.head_channels = 4;
  cfg.num_classes = 2;
  cfg.convnext_expand = 2;
  auto p = init_detector<double>(g, cfg, 4, 65);

  Rng rng = Rng::stream(67, "scene");
  MatD pts(40, 4);
  for (int i = 0; i < 40; ++i) {
    pts.at(i, 0) = rng.uniform(0.0, 32.0);
    pts.at(i, 1) = rng.uniform(0.0, 32.0);
    pts.at(i, 2) = rng.uniform(0.0, 4.0);
    pts.at(i, 3) = rng.uniform();
  }
  auto out = detector_forward<double>(nullptr, {PointCloud<double>{pts}}, p,
                                      NormMode::Eval, 3);
  CHECK(out.stats.grid == std::array<int, 3>{32, 32, 4});
  CHECK(out.stats.stage_strides == std::array<int, 6>{1, 2, 4, 8, 16, 32});
  CHECK(out.stats.fused_stride == 8);
  CHECK(out.stats.encoder_active == out.stats.stage_active[0]);
  CHECK(out.stats.fused_active > 0);
  CHECK(out.stats.neck_active >= out.stats.fused_active);
  CHECK(out.head.cls.rows() == out.stats.neck_active);

  SUBCASE("empty scene stays empty to the head") {
    auto empty = detector_forward<double>(
        nullptr, {PointCloud<double>{MatD(0, 4)}}, p, NormMode::Eval, 3);
    CHECK(empty.stats.encoder_active == 0);
    CHECK(empty.stats.neck_active == 0);
    CHECK(empty.head.cls.rows() == 0);
  }
}
