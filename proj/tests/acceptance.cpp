// Acceptance gate: ten end-to-end checks over the sparse-conv engine, the
// pillar encoder, the detector, and the tooling. Each prints one PASS/FAIL
// line; the binary exits 0 only when every check passes. Tolerances and time
// budgets are pinned next to each check.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "pnx/cli.hpp"

using namespace pnx;
using MatD = Matrix<double>;

namespace {

template <class... A>
std::string fmt(const char* f, A... a) {
  char buf[320];
  std::snprintf(buf, sizeof buf, f, a...);
  return std::string(buf);
}

// Mixed metric: relative above unit scale, absolute below it. Feature values
// sit at O(1), so the 1e-12 threshold reads as "twelve digits or better" for
// every comparison regardless of cancellation in the exact value.
double rel_err(double got, double want) {
  double scale = std::max({1.0, std::abs(got), std::abs(want)});
  return std::abs(got - want) / scale;
}

SparseTensor<double> random2d(int h, int w, double density, int c,
                              uint64_t seed, int batch = 1) {
  Rng rng = Rng::stream(seed, "accept2d");
  std::vector<Coord> coords;
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (rng.uniform() < density) coords.push_back({b, y, x, 0});
  if (coords.empty()) coords.push_back({0, h / 2, w / 2, 0});
  MatD feats(int(coords.size()), c);
  feats.fill_normal(rng);
  return make_sparse2d<double>(std::move(coords), std::move(feats), h, w,
                               batch);
}

SparseTensor<double> random3d(int h, int w, int d, double density, int c,
                              uint64_t seed) {
  Rng rng = Rng::stream(seed, "accept3d");
  std::vector<Coord> coords;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int z = 0; z < d; ++z)
        if (rng.uniform() < density) coords.push_back({0, y, x, z});
  if (coords.empty()) coords.push_back({0, h / 2, w / 2, 0});
  MatD feats(int(coords.size()), c);
  feats.fill_normal(rng);
  return make_sparse<double>(std::move(coords), std::move(feats), 3, {h, w, d},
                             1);
}

std::set<std::array<int, 4>> coord_set(const CoordMap& cm) {
  std::set<std::array<int, 4>> s;
  for (const Coord& c : cm.coords) s.insert({c.b, c.y, c.x, c.z});
  return s;
}

double max_rel_err_dense(const DenseGrid<double>& a,
                         const DenseGrid<double>& b) {
  double worst = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    worst = std::max(worst, rel_err(a.data[i], b.data[i]));
  return worst;
}

std::vector<KernelSpec> closure_kernels() {
  return {subm2d(3, 3, 1), subm2d(3, 3, 2), subm2d(3, 3, 3),
          subm2d(1, 9),    subm2d(9, 1),    subm2d(5, 5)};
}

// --- 1: submanifold convolutions never move the active set -----------------

bool check_submanifold_closure(std::string& d) {
  Rng rng = Rng::stream(101, "accept_c1");
  int runs = 0;
  for (int t = 0; t < 200; ++t) {
    int extent = 8 + int(rng.uniform_int(57));
    double density = 0.01 + 0.19 * rng.uniform();
    int batch = 1 + int(rng.uniform_int(2));
    auto ten = random2d(extent, extent, density, 3, rng.next_u64(), batch);
    auto before = coord_set(*ten.cm);
    for (const KernelSpec& spec : closure_kernels()) {
      auto rb = build_rulebook(ten, spec);
      auto p = init_conv_params<double>(spec, 3, 4, rng.next_u64(), true);
      auto out = conv_forward(ten, rb, p);
      ++runs;
      if (coord_set(*out.cm) != before) {
        d = fmt("coordinate set changed (extent %d, kernel %dx%d m%d)", extent,
                spec.kernel[0], spec.kernel[1], spec.dilation[0]);
        return false;
      }
    }
  }
  d = fmt("%d conv runs on grids 8..64, densities 1-20%%: active sets exact",
          runs);
  return true;
}

// --- 2: sparse forward equals the dense oracle -----------------------------

bool check_dense_oracle(std::string& d) {
  const double tol = 1e-12;
  Rng rng = Rng::stream(102, "accept_c2");
  Rng brng = Rng::stream(103, "accept_c2b");
  double worst = 0.0;
  int compares = 0;
  for (int t = 0; t < 200; ++t) {
    int extent = 4 + int(rng.uniform_int(13));
    double density = 0.01 + 0.19 * rng.uniform();
    int batch = 1 + int(rng.uniform_int(2));
    auto ten = random2d(extent, extent, density, 3, rng.next_u64(), batch);
    auto dense = to_dense(ten);
    auto mask = active_mask(ten);
    for (const KernelSpec& spec : closure_kernels()) {
      auto rb = build_rulebook(ten, spec);
      auto p = init_conv_params<double>(spec, 3, 4, rng.next_u64(), true);
      p.bias.v.fill_normal(brng);
      auto out = conv_forward(ten, rb, p);
      auto oracle = dense_conv_oracle(dense, spec, p.weight.v, &p.bias.v);
      auto got = to_dense(out);
      for (int b = 0; b < got.batch; ++b)
        for (int ch = 0; ch < got.channels; ++ch)
          for (int y = 0; y < got.shape[0]; ++y)
            for (int x = 0; x < got.shape[1]; ++x) {
              double expect = mask.at(b, y, x) ? oracle.at(b, ch, y, x) : 0.0;
              worst = std::max(worst, rel_err(got.at(b, ch, y, x), expect));
            }
      ++compares;
    }
    for (int stride : {1, 2}) {
      KernelSpec spec = spatial2d(3, 3, stride, stride);
      auto rb = build_rulebook(ten, spec);
      auto p = init_conv_params<double>(spec, 3, 4, rng.next_u64());
      auto out = conv_forward(ten, rb, p);
      auto oracle = dense_conv_oracle(dense, spec, p.weight.v);
      worst = std::max(worst, max_rel_err_dense(to_dense(out), oracle));
      ++compares;
    }
  }
  for (int t = 0; t < 40; ++t) {
    int depth = 2 + int(rng.uniform_int(7));
    int extent = 4 + int(rng.uniform_int(5));
    auto ten =
        random3d(extent, extent, depth, 0.1 + 0.1 * rng.uniform(), 2,
                 rng.next_u64());
    KernelSpec spec = column_collapse_spec(depth);
    auto rb = build_rulebook(ten, spec);
    auto p = init_conv_params<double>(spec, 2, 3, rng.next_u64());
    auto out = conv_forward(ten, rb, p);
    auto oracle = dense_conv_oracle(to_dense(ten), spec, p.weight.v);
    worst = std::max(worst, max_rel_err_dense(to_dense(out), oracle));
    ++compares;
  }
  d = fmt("%d oracle comparisons, worst rel err %.2e (tol 1e-12)", compares,
          worst);
  return worst <= tol;
}

// --- 3: finite-difference gradients for every op and block -----------------

bool check_gradients(std::string& d) {
  const double tol = 1e-5;
  auto results = run_grad_checks(17, tol);
  int passed = 0;
  double worst = 0.0;
  std::string first_fail;
  for (const CheckResult& r : results) {
    worst = std::max(worst, r.max_rel_err);
    if (r.pass) ++passed;
    else if (first_fail.empty()) first_fail = r.name;
  }
  d = fmt("%d/%zu gradient checks, worst rel err %.2e (tol 1e-5)%s%s", passed,
          results.size(), worst, first_fail.empty() ? "" : ", first fail: ",
          first_fail.c_str());
  return passed == int(results.size());
}

// --- 4: pooling laws over random groups -------------------------------------

bool check_pooling(std::string& d) {
  const double tol = 1e-12;
  Rng rng = Rng::stream(104, "accept_c4");
  int groups_done = 0, singles = 0;
  double worst_mean = 0.0;
  while (groups_done < 1000) {
    int n_groups = 5 + int(rng.uniform_int(20));
    std::vector<int32_t> starts{0};
    for (int g = 0; g < n_groups; ++g) {
      int len = (g % 7 == 0) ? 1 : 1 + int(rng.uniform_int(6));
      starts.push_back(starts.back() + len);
    }
    int rows = starts.back();
    int c = 1 + int(rng.uniform_int(6));
    MatD x(rows, c);
    x.fill_normal(rng);
    auto mx = pool_max_groups<double>(nullptr, constant(x), starts);
    auto mmm = pool_mmm_groups<double>(nullptr, constant(x), starts);
    // shuffled copy: rows permuted inside each group
    std::vector<int> order(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) order[size_t(r)] = r;
    for (int g = 0; g < n_groups; ++g) {
      int s = starts[size_t(g)], e = starts[size_t(g) + 1];
      for (int r = s; r < e - 1; ++r)
        std::swap(order[size_t(r)],
                  order[size_t(r) + size_t(rng.uniform_int(e - r))]);
    }
    MatD xp(rows, c);
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < c; ++j) xp.at(r, j) = x.at(order[size_t(r)], j);
    auto mxp = pool_max_groups<double>(nullptr, constant(xp), starts);
    auto mmmp = pool_mmm_groups<double>(nullptr, constant(xp), starts);

    for (int g = 0; g < n_groups; ++g) {
      int s = starts[size_t(g)], e = starts[size_t(g) + 1];
      for (int j = 0; j < c; ++j) {
        double hi = mmm.val().at(g, j), lo = mmm.val().at(g, c + j),
               mean = mmm.val().at(g, 2 * c + j);
        if (mmm.val().at(g, j) != mx.val().at(g, j)) {
          d = "mmm max slice differs from pool_max";
          return false;
        }
        if (!(hi >= lo) || rel_err(std::min(hi, mean), mean) > tol ||
            rel_err(std::max(lo, mean), mean) > tol) {
          d = fmt("order violated: max %.17g mean %.17g min %.17g", hi, mean,
                  lo);
          return false;
        }
        if (mxp.val().at(g, j) != mx.val().at(g, j) ||
            mmmp.val().at(g, c + j) != mmm.val().at(g, c + j)) {
          d = "max/min changed under within-group permutation";
          return false;
        }
        worst_mean =
            std::max(worst_mean, rel_err(mmmp.val().at(g, 2 * c + j), mean));
        if (e - s == 1) {
          ++singles;
          if (hi != x.at(s, j) || lo != x.at(s, j) || mean != x.at(s, j)) {
            d = "single-row group did not collapse to its row";
            return false;
          }
        }
      }
    }
    groups_done += n_groups;
  }
  if (worst_mean > tol) {
    d = fmt("mean permutation drift %.2e above 1e-12", worst_mean);
    return false;
  }
  d = fmt("%d groups (%d single-row entries): order, permutation and collapse "
          "laws hold, mean drift %.1e",
          groups_done, singles, worst_mean);
  return true;
}

// --- 5: encoder active set equals column occupancy -------------------------

int cell_of(double p, double lo, double hi, int cells) {
  double t = (p - lo) / (hi - lo) * double(cells) + 1e-9;
  double f = std::floor(t);
  if (f < 0.0 || f >= double(cells)) return -1;
  return int(f);
}

bool check_pillar_occupancy(std::string& d) {
  GridConfig g;
  g.x_range = {0.0, 16.0};
  g.y_range = {0.0, 16.0};
  g.z_range = {0.0, 4.0};
  g.voxel_size = {0.5, 0.5, 1.0};
  auto mlp = init_mlp_params<double>(7, 4, 501);
  auto col = init_column_collapse<double>(g.D(), 12, 5, 502);
  GridConfig g1 = g;
  g1.voxel_size[2] = 4.0;  // one vertical cell
  auto mlp1 = init_mlp_params<double>(7, 4, 503);
  auto col1 = init_column_collapse<double>(g1.D(), 12, 5, 504);
  auto mlp_base = init_mlp_params<double>(6, 12, 505);  // rank-2 path: 6 inputs

  Rng rng = Rng::stream(105, "accept_c5");
  int total_sites = 0;
  for (int t = 0; t < 100; ++t) {
    int n = 30 + int(rng.uniform_int(300));
    MatD pts(n, 4);
    for (int i = 0; i < n; ++i) {
      pts.at(i, 0) = rng.uniform(-3.0, 19.0);  // some points out of range
      pts.at(i, 1) = rng.uniform(-3.0, 19.0);
      pts.at(i, 2) = rng.uniform(-1.0, 5.0);
      pts.at(i, 3) = rng.uniform();
    }
    std::vector<PointCloud<double>> cloud{PointCloud<double>{pts}};

    std::set<std::array<int, 4>> occ;
    for (int i = 0; i < n; ++i) {
      int ix = cell_of(pts.at(i, 0), g.x_range[0], g.x_range[1], g.W());
      int iy = cell_of(pts.at(i, 1), g.y_range[0], g.y_range[1], g.H());
      int iz = cell_of(pts.at(i, 2), g.z_range[0], g.z_range[1], g.D());
      if (ix < 0 || iy < 0 || iz < 0) continue;
      occ.insert({0, iy, ix, 0});
    }
    auto out = voxel2pillar_encode<double>(nullptr, cloud, g, mlp, col,
                                           NormMode::Eval, 7);
    if (coord_set(*out.cm) != occ) {
      d = fmt("active set differs from column occupancy (cloud %d)", t);
      return false;
    }
    total_sites += out.n();

    auto flat = voxel2pillar_encode<double>(nullptr, cloud, g1, mlp1, col1,
                                            NormMode::Eval, 7);
    auto base = baseline_pillar_encode<double>(nullptr, cloud, g1, mlp_base,
                                               NormMode::Eval, 7);
    if (coord_set(*flat.cm) != coord_set(*base.cm)) {
      d = fmt("single-cell column active set differs from the baseline "
              "encoder (cloud %d)",
              t);
      return false;
    }
  }
  d = fmt("100 clouds, %d pillar sites: occupancy exact; single-cell columns "
          "match the baseline encoder",
          total_sites);
  return true;
}

// --- 6: default shape constants ---------------------------------------------

bool check_constants(std::string& d) {
  GridConfig g;
  NetworkConfig net;
  auto strides = net.cumulative_strides();
  auto params = init_detector<double>(g, net, 32, 1);
  bool ok = g.W() == 1504 && g.H() == 1504 && g.D() == 30;
  ok = ok && column_collapse_spec(g.D()).k_total() == 30 &&
       params.col.spec.k_total() == 30;
  ok = ok && strides == std::array<int, 6>{1, 2, 4, 8, 16, 32};
  ok = ok && strides[3] == 8;
  ok = ok && net.neck_kernel == 5 && params.neck.blocks.size() == 1 &&
       params.neck.blocks[0].kernel == 5;
  ok = ok && net.neck_repeats == 1;
  d = fmt("grid %dx%dx%d, column offsets %d, strides 1/2/4/8/16/32, fused "
          "stride %d, neck kernel %d x%zu",
          g.W(), g.H(), g.D(), params.col.spec.k_total(), strides[3],
          net.neck_kernel, params.neck.blocks.size());
  return ok;
}

// --- 7: separable pair vs two 3x3 -------------------------------------------

bool check_separable(std::string& d) {
  const int C = 16;
  auto count = [](const ConvParams<double>& p) {
    return p.weight.v.data.size() + (p.has_bias ? p.bias.v.data.size() : 0);
  };
  size_t sep = count(init_conv_params<double>(subm2d(1, 9), C, C, 1, true)) +
               count(init_conv_params<double>(subm2d(9, 1), C, C, 2, true));
  size_t two = count(init_conv_params<double>(subm2d(3, 3), C, C, 3, true)) +
               count(init_conv_params<double>(subm2d(3, 3), C, C, 4, true));

  DenseGrid<double> imp(1, 1, 2, {17, 17, 1});
  imp.at(0, 0, 8, 8) = 1.0;
  MatD ones(9, 1);
  for (double& v : ones.data) v = 1.0;
  auto sep_out = dense_conv_oracle(
      dense_conv_oracle(imp, subm2d(1, 9), ones), subm2d(9, 1), ones);
  auto two_out = dense_conv_oracle(
      dense_conv_oracle(imp, subm2d(3, 3), ones), subm2d(3, 3), ones);
  auto support = [](const DenseGrid<double>& grid) {
    int nz = 0;
    for (double v : grid.data) nz += v != 0.0;
    return nz;
  };
  int s_sep = support(sep_out), s_two = support(two_out);
  d = fmt("params %zu == %zu; impulse support %d vs %d", sep, two, s_sep,
          s_two);
  return sep == two && s_sep == 81 && s_two == 25;
}

// --- 8: three fixed scenes overfit and decode back --------------------------

bool check_toy_overfit(std::string& d) {
  GridConfig g;
  g.x_range = {-20.0, 20.0};
  g.y_range = {-20.0, 20.0};
  g.z_range = {-0.7, 0.7};
  g.voxel_size = {0.2, 0.2, 0.7};
  NetworkConfig net;
  net.stage_channels = {12, 16, 24, 32, 32, 32};
  net.fuse_channels = 32;
  net.head_channels = 32;
  net.num_classes = 2;
  net.convnext_expand = 2;
  SceneSpec spec;
  spec.min_boxes = 2;
  spec.max_boxes = 3;
  spec.classes = {ClassShape{{1.35, 1.25, 1.2}, {0.0, 0.0, 0.0}},
                  ClassShape{{0.95, 0.9, 0.9}, {0.0, 0.0, 0.0}}};
  spec.min_points_per_box = 120;
  spec.max_points_per_box = 160;
  spec.noise_points = 40;
  spec.seed = 7;

  std::vector<Scene<double>> scenes;
  for (uint64_t k = 0; k < 3; ++k)
    scenes.push_back(synth_scene<double>(spec, g, k));
  for (const auto& s : scenes)
    if (s.boxes.size() < 2 || s.boxes.size() > 3) {
      d = fmt("scene has %zu boxes, want 2..3", s.boxes.size());
      return false;
    }

  auto params = init_detector<double>(g, net, 8, 11);
  auto curve = overfit_toy<double>(params, scenes, 500, 1e-3, 11);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 10; ++i) {
    head += curve[size_t(i)].total;
    tail += curve[curve.size() - 10 + size_t(i)].total;
  }
  head /= 10.0;
  tail /= 10.0;
  double ratio = tail / head;

  double p_min = 1.0, r_min = 1.0;
  for (const auto& s : scenes) {
    auto out =
        detector_forward<double>(nullptr, {s.cloud}, params, NormMode::Eval, 11);
    auto dets =
        decode_detections(out.head.cls.val(), out.head.box.val(), *out.head.cm,
                          g, out.stats.fused_stride, 0.35);
    auto [p, r] = eval_toy(dets, s.boxes, 0.7);
    p_min = std::min(p_min, p);
    r_min = std::min(r_min, r);
  }
  d = fmt("500 steps: loss %.1f -> %.3f (ratio %.4f, need <= 0.10); "
          "precision %.2f recall %.2f at IoU 0.7",
          head, tail, ratio, p_min, r_min);
  return ratio <= 0.10 && p_min == 1.0 && r_min == 1.0;
}

// --- 9: byte-identical reruns ------------------------------------------------

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool check_determinism(std::string& d) {
  namespace fs = std::filesystem;
  RunConfig cfg;
  cfg.grid.x_range = {0.0, 32.0};
  cfg.grid.y_range = {0.0, 32.0};
  cfg.grid.z_range = {0.0, 4.0};
  cfg.grid.voxel_size = {0.5, 0.5, 1.0};
  cfg.net.stage_channels = {4, 4, 4, 6, 6, 6};
  cfg.net.fuse_channels = 6;
  cfg.net.head_channels = 4;
  cfg.net.num_classes = 2;
  cfg.net.convnext_expand = 2;
  cfg.scene.max_boxes = 2;
  cfg.scene.seed = 5;
  cfg.run.seed = 5;
  cfg.run.encoder_channels = 4;

  fs::path base = fs::temp_directory_path() / "pnx_accept_det";
  fs::remove_all(base);
  bool ok = true;
  std::string why;
  for (int rep = 0; rep < 2; ++rep) {
    cmd_synth(cfg, 2, (base / ("synth" + std::to_string(rep))).string());
    cmd_train_toy(cfg, 5, 1e-3, 2,
                  (base / ("train" + std::to_string(rep))).string());
  }
  for (const char* f : {"scene_0.bin", "scene_0.json", "scene_1.bin",
                        "scene_1.json"})
    if (slurp(base / "synth0" / f) != slurp(base / "synth1" / f)) {
      ok = false;
      why = f;
    }
  for (const char* f : {"curve.csv", "weights.ckpt", "eval.json"})
    if (slurp(base / "train0" / f) != slurp(base / "train1" / f)) {
      ok = false;
      why = f;
    }
  fs::remove_all(base);
  d = ok ? "synth (2 scenes) and train-toy (5 steps) reruns byte-identical"
         : fmt("rerun differs in %s", why.c_str());
  return ok;
}

// --- 10: rulebook pair counts and the benchmark ------------------------------

bool check_bench(std::string& d) {
  Rng rng = Rng::stream(110, "accept_c10");
  for (int t = 0; t < 25; ++t) {
    double density = 0.05 + 0.25 * rng.uniform();
    int batch = 1 + int(rng.uniform_int(2));
    auto ten = random2d(16, 16, density, 2, rng.next_u64(), batch);
    auto rb = build_rulebook(ten, subm2d(3, 3));
    int64_t brute = 0;
    for (const Coord& a : ten.cm->coords)
      for (const Coord& b : ten.cm->coords)
        if (a.b == b.b && std::abs(a.y - b.y) <= 1 && std::abs(a.x - b.x) <= 1)
          ++brute;
    if (brute != rb->pair_count()) {
      d = fmt("pair count %lld != brute-force %lld", (long long)rb->pair_count(),
              (long long)brute);
      return false;
    }
  }

  namespace fs = std::filesystem;
  fs::path csv = fs::temp_directory_path() / "pnx_accept_bench.csv";
  RunConfig cfg;  // default 1504x1504 grid
  auto t0 = std::chrono::steady_clock::now();
  cmd_bench(cfg, {0.005, 0.02, 0.1}, csv.string());
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                              t0)
                    .count();
  auto rows = run_bench(cfg.grid, {0.005, 0.02, 0.1}, cfg.run.seed);
  std::string text = slurp(csv);
  fs::remove(csv);
  int lines = 0;
  for (char ch : text) lines += ch == '\n';
  bool ok = lines == 13 && rows.size() == 12;
  int64_t last_active = 0;
  std::string kernel;
  for (const BenchRow& r : rows) {
    KernelSpec spec = r.kernel == "sep1x9" ? subm2d(1, 9)
                      : r.kernel == "dilated3x3m2" ? subm2d(3, 3, 2)
                                                   : subm2d(3, 3);
    if (r.rulebook_pairs > int64_t(r.n_active) * spec.k_total()) ok = false;
    if (r.kernel != kernel) {
      kernel = r.kernel;
      last_active = 0;
    }
    if (r.n_active <= last_active) ok = false;  // densities are increasing
    last_active = r.n_active;
  }
  d = fmt("25 exact pair counts; 12 bench rows on the 1504x1504 grid in %.1fs "
          "(limit 60s)",
          secs);
  return ok && secs < 60.0;
}

struct Criterion {
  const char* name;
  std::function<bool(std::string&)> run;
  double limit_s;  // 0: no wall-clock budget
};

}  // namespace

int main() {
  std::vector<Criterion> criteria = {
      {"submanifold closure", check_submanifold_closure, 10.0},
      {"dense conv oracle", check_dense_oracle, 30.0},
      {"gradient checks", check_gradients, 300.0},
      {"group pooling laws", check_pooling, 0.0},
      {"pillar occupancy", check_pillar_occupancy, 0.0},
      {"default constants", check_constants, 0.0},
      {"separable factorization", check_separable, 0.0},
      {"toy overfit", check_toy_overfit, 600.0},
      {"determinism", check_determinism, 0.0},
      {"pair counts and bench", check_bench, 0.0},
  };
  int passed = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    std::string detail;
    bool ok = false;
    auto t0 = std::chrono::steady_clock::now();
    try {
      ok = criteria[i].run(detail);
    } catch (const Error& e) {
      detail = fmt("threw %s", e.what());
    } catch (const std::exception& e) {
      detail = fmt("threw %s", e.what());
    }
    double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    if (ok && criteria[i].limit_s > 0.0 && secs > criteria[i].limit_s) {
      ok = false;
      detail += fmt(" [over %.0fs budget]", criteria[i].limit_s);
    }
    passed += ok;
    std::printf("[%s] %2zu %-26s %7.2fs  %s\n", ok ? "PASS" : "FAIL", i + 1,
                criteria[i].name, secs, detail.c_str());
    std::fflush(stdout);
  }
  std::printf("acceptance: %d/%zu criteria passed\n", passed, criteria.size());
  return passed == int(criteria.size()) ? 0 : 1;
}
