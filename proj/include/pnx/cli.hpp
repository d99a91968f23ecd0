#pragma once
// Command implementations behind the pnx binary: config parsing with strict
// key checking, scene synthesis, end-to-end forward runs, the gradient-check
// suite, rulebook/conv benchmarks, and the toy training loop. Kept as a
// library so tests can drive every command without spawning processes.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "pnx/gradcheck.hpp"

namespace pnx {

struct RunOptions {
  uint64_t seed = 1;
  int precision = 64;  // 32 or 64
  double score_thresh = 0.3;
  int encoder_channels = 32;
  std::string out_dir = ".";

  void validate() const {
    require(precision == 32 || precision == 64, Err::InvalidConfig,
            "run.precision must be 32 or 64");
    require(score_thresh >= 0.0 && score_thresh <= 1.0, Err::InvalidConfig,
            "run.score_thresh must lie in [0, 1]");
    require(encoder_channels > 0, Err::InvalidConfig,
            "run.encoder_channels must be positive");
  }
};

struct RunConfig {
  GridConfig grid;
  NetworkConfig net;
  SceneSpec scene;
  RunOptions run;

  void validate() const {
    grid.validate();
    net.validate();
    scene.validate();
    run.validate();
  }
};

// ---------------------------------------------------------------------------
// Strict JSON config parsing

namespace cli_detail {

using nlohmann::json;

inline int edit_distance(const std::string& a, const std::string& b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  for (size_t j = 0; j <= b.size(); ++j) prev[j] = int(j);
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = int(i);
    for (size_t j = 1; j <= b.size(); ++j) {
      int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::string join_path(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}

inline void check_keys(const json& j, const std::string& path,
                       std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed) known = known || item.key() == k;
    if (known) continue;
    std::string best;
    int best_d = 4;  // only suggest close misses
    for (const char* k : allowed) {
      int d = edit_distance(item.key(), k);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    std::string msg =
        "unknown config key '" + join_path(path, item.key()) + "'";
    if (!best.empty()) msg += " (did you mean '" + best + "'?)";
    fail(Err::InvalidConfig, msg);
  }
}

inline const json* find(const json& j, const char* key) {
  auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

inline double as_num(const json& v, const std::string& path) {
  require(v.is_number(), Err::InvalidConfig,
          "config field '" + path + "' must be a number");
  return v.get<double>();
}

inline int as_int(const json& v, const std::string& path) {
  require(v.is_number_integer(), Err::InvalidConfig,
          "config field '" + path + "' must be an integer");
  return v.get<int>();
}

inline uint64_t as_u64(const json& v, const std::string& path) {
  require(v.is_number_unsigned() || (v.is_number_integer() && v.get<int64_t>() >= 0),
          Err::InvalidConfig,
          "config field '" + path + "' must be a non-negative integer");
  return v.get<uint64_t>();
}

template <size_t N>
inline std::array<double, N> as_darray(const json& v, const std::string& path) {
  require(v.is_array() && v.size() == N, Err::InvalidConfig,
          "config field '" + path + "' must be an array of " +
              std::to_string(N) + " numbers");
  std::array<double, N> out{};
  for (size_t i = 0; i < N; ++i)
    out[i] = as_num(v[i], path + "[" + std::to_string(i) + "]");
  return out;
}

template <size_t N>
inline std::array<int, N> as_iarray(const json& v, const std::string& path) {
  require(v.is_array() && v.size() == N, Err::InvalidConfig,
          "config field '" + path + "' must be an array of " +
              std::to_string(N) + " integers");
  std::array<int, N> out{};
  for (size_t i = 0; i < N; ++i)
    out[i] = as_int(v[i], path + "[" + std::to_string(i) + "]");
  return out;
}

inline std::vector<int> as_ivec(const json& v, const std::string& path) {
  require(v.is_array(), Err::InvalidConfig,
          "config field '" + path + "' must be an array of integers");
  std::vector<int> out;
  for (size_t i = 0; i < v.size(); ++i)
    out.push_back(as_int(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

inline void read_grid(const json& j, const std::string& path, GridConfig& g) {
  check_keys(j, path,
             {"x_range", "y_range", "z_range", "voxel_size",
              "max_points_per_voxel"});
  if (const json* v = find(j, "x_range"))
    g.x_range = as_darray<2>(*v, join_path(path, "x_range"));
  if (const json* v = find(j, "y_range"))
    g.y_range = as_darray<2>(*v, join_path(path, "y_range"));
  if (const json* v = find(j, "z_range"))
    g.z_range = as_darray<2>(*v, join_path(path, "z_range"));
  if (const json* v = find(j, "voxel_size"))
    g.voxel_size = as_darray<3>(*v, join_path(path, "voxel_size"));
  if (const json* v = find(j, "max_points_per_voxel"))
    g.max_points_per_voxel = as_int(*v, join_path(path, "max_points_per_voxel"));
}

inline void read_network(const json& j, const std::string& path,
                         NetworkConfig& n) {
  check_keys(j, path,
             {"stage_channels", "stage_strides", "lsfe_per_stage",
              "dilation_schedule", "fuse_channels", "neck_repeats",
              "neck_kernel", "convnext_expand", "num_classes",
              "head_channels"});
  if (const json* v = find(j, "stage_channels"))
    n.stage_channels = as_iarray<6>(*v, join_path(path, "stage_channels"));
  if (const json* v = find(j, "stage_strides"))
    n.stage_strides = as_iarray<6>(*v, join_path(path, "stage_strides"));
  if (const json* v = find(j, "lsfe_per_stage"))
    n.lsfe_per_stage = as_int(*v, join_path(path, "lsfe_per_stage"));
  if (const json* v = find(j, "dilation_schedule"))
    n.dilation_schedule = as_ivec(*v, join_path(path, "dilation_schedule"));
  if (const json* v = find(j, "fuse_channels"))
    n.fuse_channels = as_int(*v, join_path(path, "fuse_channels"));
  if (const json* v = find(j, "neck_repeats"))
    n.neck_repeats = as_int(*v, join_path(path, "neck_repeats"));
  if (const json* v = find(j, "neck_kernel"))
    n.neck_kernel = as_int(*v, join_path(path, "neck_kernel"));
  if (const json* v = find(j, "convnext_expand"))
    n.convnext_expand = as_int(*v, join_path(path, "convnext_expand"));
  if (const json* v = find(j, "num_classes"))
    n.num_classes = as_int(*v, join_path(path, "num_classes"));
  if (const json* v = find(j, "head_channels"))
    n.head_channels = as_int(*v, join_path(path, "head_channels"));
}

inline void read_scene(const json& j, const std::string& path, SceneSpec& s) {
  check_keys(j, path,
             {"min_boxes", "max_boxes", "classes", "min_points_per_box",
              "max_points_per_box", "noise_points", "seed"});
  if (const json* v = find(j, "min_boxes"))
    s.min_boxes = as_int(*v, join_path(path, "min_boxes"));
  if (const json* v = find(j, "max_boxes"))
    s.max_boxes = as_int(*v, join_path(path, "max_boxes"));
  if (const json* v = find(j, "min_points_per_box"))
    s.min_points_per_box = as_int(*v, join_path(path, "min_points_per_box"));
  if (const json* v = find(j, "max_points_per_box"))
    s.max_points_per_box = as_int(*v, join_path(path, "max_points_per_box"));
  if (const json* v = find(j, "noise_points"))
    s.noise_points = as_int(*v, join_path(path, "noise_points"));
  if (const json* v = find(j, "seed"))
    s.seed = as_u64(*v, join_path(path, "seed"));
  if (const json* v = find(j, "classes")) {
    std::string cpath = join_path(path, "classes");
    require(v->is_array() && !v->empty(), Err::InvalidConfig,
            "config field '" + cpath + "' must be a non-empty array");
    s.classes.clear();
    for (size_t i = 0; i < v->size(); ++i) {
      const json& e = (*v)[i];
      std::string epath = cpath + "[" + std::to_string(i) + "]";
      require(e.is_object(), Err::InvalidConfig,
              "config field '" + epath + "' must be an object");
      check_keys(e, epath, {"size_mean", "size_jitter"});
      ClassShape cs;
      if (const json* f = find(e, "size_mean"))
        cs.size_mean = as_darray<3>(*f, join_path(epath, "size_mean"));
      if (const json* f = find(e, "size_jitter"))
        cs.size_jitter = as_darray<3>(*f, join_path(epath, "size_jitter"));
      s.classes.push_back(cs);
    }
  }
}

inline void read_run(const json& j, const std::string& path, RunOptions& r) {
  check_keys(j, path,
             {"seed", "precision", "score_thresh", "encoder_channels",
              "out_dir"});
  if (const json* v = find(j, "seed"))
    r.seed = as_u64(*v, join_path(path, "seed"));
  if (const json* v = find(j, "precision"))
    r.precision = as_int(*v, join_path(path, "precision"));
  if (const json* v = find(j, "score_thresh"))
    r.score_thresh = as_num(*v, join_path(path, "score_thresh"));
  if (const json* v = find(j, "encoder_channels"))
    r.encoder_channels = as_int(*v, join_path(path, "encoder_channels"));
  if (const json* v = find(j, "out_dir")) {
    require(v->is_string(), Err::InvalidConfig,
            "config field '" + join_path(path, "out_dir") + "' must be a string");
    r.out_dir = v->get<std::string>();
  }
}

}  // namespace cli_detail

inline RunConfig parse_run_config(const std::string& text) {
  using cli_detail::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(Err::InvalidConfig, std::string("config is not valid JSON: ") + e.what());
  }
  require(j.is_object(), Err::InvalidConfig, "config root must be an object");
  cli_detail::check_keys(j, "", {"grid", "network", "scene", "run"});
  RunConfig cfg;
  if (const json* v = cli_detail::find(j, "grid")) {
    require(v->is_object(), Err::InvalidConfig, "config field 'grid' must be an object");
    cli_detail::read_grid(*v, "grid", cfg.grid);
  }
  if (const json* v = cli_detail::find(j, "network")) {
    require(v->is_object(), Err::InvalidConfig, "config field 'network' must be an object");
    cli_detail::read_network(*v, "network", cfg.net);
  }
  if (const json* v = cli_detail::find(j, "scene")) {
    require(v->is_object(), Err::InvalidConfig, "config field 'scene' must be an object");
    cli_detail::read_scene(*v, "scene", cfg.scene);
  }
  if (const json* v = cli_detail::find(j, "run")) {
    require(v->is_object(), Err::InvalidConfig, "config field 'run' must be an object");
    cli_detail::read_run(*v, "run", cfg.run);
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), Err::IoError, "cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

// ---------------------------------------------------------------------------
// Output helpers: everything lands via tmp + rename so a failing command
// never leaves a partial file behind.

inline void write_bytes_atomic(const std::string& path,
                               const void* data, size_t len) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    require(f.good(), Err::IoError, "cannot open for write: " + tmp);
    f.write(static_cast<const char*>(data), std::streamsize(len));
    require(f.good(), Err::IoError, "short write: " + tmp);
  }
  require(std::rename(tmp.c_str(), path.c_str()) == 0, Err::IoError,
          "cannot move " + tmp + " into place");
}

inline void write_text_atomic(const std::string& path, const std::string& s) {
  write_bytes_atomic(path, s.data(), s.size());
}

namespace cli_detail {

inline std::string fmt_full(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <class S>
inline json boxes_to_json(const std::vector<GTBox<S>>& boxes) {
  json arr = json::array();
  for (const GTBox<S>& b : boxes) {
    json e;
    e["class_id"] = b.class_id;
    e["center"] = {double(b.center[0]), double(b.center[1]), double(b.center[2])};
    e["size"] = {double(b.size[0]), double(b.size[1]), double(b.size[2])};
    e["yaw"] = double(b.yaw);
    arr.push_back(e);
  }
  return arr;
}

inline double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - t0)
      .count();
}

}  // namespace cli_detail

// ---------------------------------------------------------------------------
// synth: K scene pairs, scene_k.bin + scene_k.json

inline int cmd_synth(const RunConfig& cfg, int scenes,
                     const std::string& out_dir) {
  require(scenes >= 0, Err::InvalidConfig, "scene count must be >= 0");
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  for (int k = 0; k < scenes; ++k) {
    auto scene = synth_scene<double>(cfg.scene, cfg.grid, uint64_t(k));
    std::string stem = out_dir + "/scene_" + std::to_string(k);
    auto bytes = encode_points(scene.cloud);
    write_bytes_atomic(stem + ".bin", bytes.data(), bytes.size());
    cli_detail::json labels;
    labels["boxes"] = cli_detail::boxes_to_json(scene.boxes);
    write_text_atomic(stem + ".json", labels.dump(2) + "\n");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// forward: one cloud through the whole pipeline, detections + stats to JSON

namespace cli_detail {

template <class S>
inline int run_forward(const RunConfig& cfg, const std::string& weights,
                       const std::string& input, const std::string& out_path) {
  auto cloud = load_points<S>(input);
  auto params = init_detector<S>(cfg.grid, cfg.net, cfg.run.encoder_channels,
                                 cfg.run.seed);
  if (!weights.empty()) {
    auto refs = collect_params(params);
    load_checkpoint(weights, refs);
  }
  auto out = detector_forward<S>(nullptr, {cloud}, params, NormMode::Eval,
                                 cfg.run.seed);
  auto dets = decode_detections(out.head.cls.val(), out.head.box.val(),
                                *out.head.cm, cfg.grid, out.stats.fused_stride,
                                S(cfg.run.score_thresh));
  json doc;
  doc["detections"] = json::array();
  for (const Detection<S>& d : dets) {
    json e;
    e["class_id"] = d.class_id;
    e["score"] = double(d.score);
    e["center"] = {double(d.center[0]), double(d.center[1]), double(d.center[2])};
    e["size"] = {double(d.size[0]), double(d.size[1]), double(d.size[2])};
    e["yaw"] = double(d.yaw);
    doc["detections"].push_back(e);
  }
  const PipelineStats& st = out.stats;
  json stats;
  stats["grid"] = st.grid;
  stats["stage_strides"] = st.stage_strides;
  stats["encoder_active"] = st.encoder_active;
  stats["stage_active"] = st.stage_active;
  stats["fused_active"] = st.fused_active;
  stats["fused_stride"] = st.fused_stride;
  stats["neck_active"] = st.neck_active;
  doc["stats"] = stats;
  write_text_atomic(out_path, doc.dump(2) + "\n");
  return 0;
}

}  // namespace cli_detail

inline int cmd_forward(const RunConfig& cfg, const std::string& weights,
                       const std::string& input, const std::string& out_path) {
  cfg.validate();
  if (cfg.run.precision == 32)
    return cli_detail::run_forward<float>(cfg, weights, input, out_path);
  return cli_detail::run_forward<double>(cfg, weights, input, out_path);
}

// ---------------------------------------------------------------------------
// gradcheck: the whole registry (or one named check) to CSV

inline int cmd_gradcheck(uint64_t seed, double tol, const std::string& out_csv,
                         const std::string& only = "") {
  std::vector<CheckResult> results =
      only.empty() ? run_grad_checks(seed, tol)
                   : std::vector<CheckResult>{run_grad_check(only, seed, tol)};
  std::string csv = "name,max_rel_err,tol,pass\n";
  bool all_pass = true;
  for (const CheckResult& r : results) {
    csv += r.name + "," + cli_detail::fmt_full(r.max_rel_err) + "," +
           cli_detail::fmt_full(r.tol) + "," + (r.pass ? "1" : "0") + "\n";
    all_pass = all_pass && r.pass;
  }
  if (out_csv.empty())
    std::fwrite(csv.data(), 1, csv.size(), stdout);
  else
    write_text_atomic(out_csv, csv);
  return all_pass ? 0 : 2;
}

// ---------------------------------------------------------------------------
// bench: rulebook build + conv forward timings across densities and kernels

struct BenchRow {
  std::string kernel;
  double density = 0.0;
  int n_active = 0;
  int64_t rulebook_pairs = 0;
  double rulebook_build_ms = 0.0;
  double conv_forward_ms = 0.0;
};

inline std::vector<BenchRow> run_bench(const GridConfig& g,
                                       const std::vector<double>& densities,
                                       uint64_t seed) {
  for (double d : densities)
    require(d > 0.0 && d <= 1.0, Err::InvalidConfig,
            "bench density must lie in (0, 1]");
  const int channels = 32;
  const std::vector<std::pair<std::string, KernelSpec>> kernels = {
      {"submanifold3x3", subm2d(3, 3)},
      {"dilated3x3m2", subm2d(3, 3, 2)},
      {"spatial3x3s2", spatial2d(3, 3, 2, 2)},
      {"sep1x9", subm2d(1, 9)},
  };
  std::vector<BenchRow> rows;
  for (size_t di = 0; di < densities.size(); ++di) {
    double density = densities[di];
    Rng rng = Rng::keyed(Rng::stream(seed, "bench").next_u64(), di);
    std::vector<Coord> coords;
    for (int y = 0; y < g.H(); ++y)
      for (int x = 0; x < g.W(); ++x)
        if (rng.uniform() < density) coords.push_back({0, y, x, 0});
    auto cm = make_coord_map(2, {g.H(), g.W(), 1}, 1, coords);
    Matrix<double> feats(cm->n(), channels);
    feats.fill_normal(rng);
    for (const auto& [name, spec] : kernels) {
      auto p = init_conv_params<double>(spec, channels, channels,
                                        Rng::keyed(seed, di).next_u64());
      auto t0 = std::chrono::steady_clock::now();
      auto rb = build_rulebook(cm, spec);
      double build_ms = cli_detail::elapsed_ms(t0);
      TracedSt<double> in{cm, constant(feats)};
      t0 = std::chrono::steady_clock::now();
      auto out = conv_forward<double>(nullptr, in, rb, p);
      double conv_ms = cli_detail::elapsed_ms(t0);
      require(out.feats.val().all_finite(), Err::NonFinite,
              "bench conv produced non-finite values");
      BenchRow row;
      row.kernel = name;
      row.density = density;
      row.n_active = cm->n();
      row.rulebook_pairs = rb->pair_count();
      row.rulebook_build_ms = build_ms;
      row.conv_forward_ms = conv_ms;
      rows.push_back(row);
    }
  }
  return rows;
}

inline int cmd_bench(const RunConfig& cfg, const std::vector<double>& densities,
                     const std::string& out_csv) {
  cfg.validate();
  auto rows = run_bench(cfg.grid, densities, cfg.run.seed);
  std::ostringstream csv;
  csv << "kernel,density,n_active,rulebook_pairs,rulebook_build_ms,"
         "conv_forward_ms\n";
  for (const BenchRow& r : rows)
    csv << r.kernel << "," << cli_detail::fmt_full(r.density) << ","
        << r.n_active << "," << r.rulebook_pairs << "," << std::fixed
        << std::setprecision(3) << r.rulebook_build_ms << ","
        << r.conv_forward_ms << std::defaultfloat << "\n";
  write_text_atomic(out_csv, csv.str());
  return 0;
}

// ---------------------------------------------------------------------------
// train-toy: synthesize scenes, overfit, dump curve + checkpoint + eval

namespace cli_detail {

template <class S>
inline int run_train_toy(const RunConfig& cfg, int steps, double lr,
                         int n_scenes, const std::string& out_dir) {
  require(steps >= 0, Err::InvalidConfig, "step count must be >= 0");
  require(n_scenes >= 1, Err::InvalidConfig, "need at least one scene");
  std::filesystem::create_directories(out_dir);

  std::vector<Scene<S>> scenes;
  for (int k = 0; k < n_scenes; ++k)
    scenes.push_back(synth_scene<S>(cfg.scene, cfg.grid, uint64_t(k)));
  auto params = init_detector<S>(cfg.grid, cfg.net, cfg.run.encoder_channels,
                                 cfg.run.seed);
  auto curve = overfit_toy(params, scenes, steps, S(lr), cfg.run.seed);

  std::string csv = "step,loss,cls_loss,reg_loss\n";
  for (const StepLoss<S>& s : curve)
    csv += std::to_string(s.step) + "," + fmt_full(double(s.total)) + "," +
           fmt_full(double(s.cls)) + "," + fmt_full(double(s.reg)) + "\n";
  write_text_atomic(out_dir + "/curve.csv", csv);

  auto refs = collect_params(params);
  save_checkpoint(out_dir + "/weights.ckpt", refs);

  const double iou_thresh = 0.7;
  int64_t total_tp = 0, total_det = 0, total_gt = 0;
  for (const Scene<S>& scene : scenes) {
    auto out = detector_forward<S>(nullptr, {scene.cloud}, params,
                                   NormMode::Eval, cfg.run.seed);
    auto dets = decode_detections(out.head.cls.val(), out.head.box.val(),
                                  *out.head.cm, cfg.grid,
                                  out.stats.fused_stride,
                                  S(cfg.run.score_thresh));
    auto [p, r] = eval_toy(dets, scene.boxes, iou_thresh);
    total_tp += int64_t(std::llround(p * double(dets.size())));
    total_det += int64_t(dets.size());
    total_gt += int64_t(scene.boxes.size());
  }
  json ev;
  ev["iou_thresh"] = iou_thresh;
  ev["scenes"] = n_scenes;
  ev["steps"] = steps;
  ev["precision"] =
      total_det == 0 ? 1.0 : double(total_tp) / double(total_det);
  ev["recall"] = total_gt == 0 ? 1.0 : double(total_tp) / double(total_gt);
  write_text_atomic(out_dir + "/eval.json", ev.dump(2) + "\n");
  return 0;
}

}  // namespace cli_detail

inline int cmd_train_toy(const RunConfig& cfg, int steps, double lr,
                         int n_scenes, const std::string& out_dir) {
  cfg.validate();
  if (cfg.run.precision == 32)
    return cli_detail::run_train_toy<float>(cfg, steps, lr, n_scenes, out_dir);
  return cli_detail::run_train_toy<double>(cfg, steps, lr, n_scenes, out_dir);
}

}  // namespace pnx
