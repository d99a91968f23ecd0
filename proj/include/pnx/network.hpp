#pragma once
// Full detector: multi-scale fusion onto the stride-8 grid, the ConvNeXt
// neck, the dual sparse head, box decoding, and checkpoint I/O.

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <tuple>
#include <unordered_map>

#include "pnx/blocks.hpp"
#include "pnx/encoder.hpp"

namespace pnx {

template <class S>
struct Detection {
  int class_id = 0;
  S score = S(0);
  std::array<S, 3> center{};  // meters
  std::array<S, 3> size{};    // meters, positive
  S yaw = S(0);               // radians in (-pi, pi]
};

inline int ceil_half(int v) { return (v + 1) / 2; }

// ---------------------------------------------------------------------------
// Fusion of the last three backbone stages onto the stride-8 grid: each map
// is 1x1-projected to a common width, the coarser coordinates are scaled up
// (x2, x4) and the three feature sets are summed on the union of sites.

template <class S>
struct FuseParams {
  int channels = 0;
  ConvParams<S> p4, p5, p6;
};

template <class S>
inline FuseParams<S> init_fuse(int c4, int c5, int c6, int c_fuse,
                               uint64_t seed) {
  Rng seeds = Rng::stream(seed, "fuse");
  FuseParams<S> p;
  p.channels = c_fuse;
  p.p4 = init_conv_params<S>(subm2d(1, 1), c4, c_fuse, seeds.next_u64());
  p.p5 = init_conv_params<S>(subm2d(1, 1), c5, c_fuse, seeds.next_u64());
  p.p6 = init_conv_params<S>(subm2d(1, 1), c6, c_fuse, seeds.next_u64());
  return p;
}

template <class S>
inline TracedSt<S> fuse_last_three(Tape<S>* tape, const TracedSt<S>& s4,
                                   const TracedSt<S>& s5,
                                   const TracedSt<S>& s6, FuseParams<S>& p) {
  require(s4.cm->rank == 2 && s5.cm->rank == 2 && s6.cm->rank == 2,
          Err::StrideMismatch, "fusion expects three BEV maps");
  require(s4.cm->batch_size == s5.cm->batch_size &&
              s4.cm->batch_size == s6.cm->batch_size,
          Err::StrideMismatch, "fusion inputs disagree on batch size");
  for (int a = 0; a < 2; ++a) {
    require(s5.cm->shape[size_t(a)] == ceil_half(s4.cm->shape[size_t(a)]),
            Err::StrideMismatch, "second fusion input is not at twice the stride");
    require(s6.cm->shape[size_t(a)] == ceil_half(s5.cm->shape[size_t(a)]),
            Err::StrideMismatch, "third fusion input is not at four times the stride");
  }

  auto project = [&](const TracedSt<S>& t, ConvParams<S>& cp) {
    auto rb1 = build_rulebook(t.cm, subm2d(1, 1));
    return conv_forward(tape, t, rb1, cp);
  };
  TracedSt<S> f4 = project(s4, p.p4);
  TracedSt<S> f5 = project(s5, p.p5);
  TracedSt<S> f6 = project(s6, p.p6);

  // Union of sites in first-touch order: s4's own sites, then s5 scaled x2,
  // then s6 scaled x4.
  std::vector<Coord> coords;
  std::unordered_map<uint64_t, int32_t> slot;
  auto admit = [&](Coord c) {
    uint64_t key = pack_coord(c);
    auto it = slot.find(key);
    if (it != slot.end()) return it->second;
    int32_t row = int32_t(coords.size());
    slot.emplace(key, row);
    coords.push_back(c);
    return row;
  };
  auto map_rows = [&](const CoordMap& cm, int scale) {
    std::vector<int32_t> rows(size_t(cm.n()));
    for (int i = 0; i < cm.n(); ++i) {
      Coord c = cm.coords[size_t(i)];
      rows[size_t(i)] = admit(Coord{c.b, c.y * scale, c.x * scale, 0});
    }
    return rows;
  };
  auto rows4 = map_rows(*s4.cm, 1);
  auto rows5 = map_rows(*s5.cm, 2);
  auto rows6 = map_rows(*s6.cm, 4);
  CoordMapPtr out_cm =
      make_coord_map(2, s4.cm->shape, s4.cm->batch_size, coords);

  Matrix<S> out(out_cm->n(), p.channels);
  auto scatter = [&](const TracedSt<S>& f, const std::vector<int32_t>& rows) {
    for (int i = 0; i < f.n(); ++i) {
      const S* src = f.feats.val().row(i);
      S* dst = out.row(rows[size_t(i)]);
      for (int c = 0; c < p.channels; ++c) dst[c] += src[c];
    }
  };
  scatter(f4, rows4);
  scatter(f5, rows5);
  scatter(f6, rows6);

  TracedMat<S> feats = trace(tape, std::move(out));
  if (tape) {
    struct Src {
      int id;
      std::vector<int32_t> rows;
    };
    auto srcs = std::make_shared<std::vector<Src>>();
    srcs->push_back(Src{f4.feats.id, std::move(rows4)});
    srcs->push_back(Src{f5.feats.id, std::move(rows5)});
    srcs->push_back(Src{f6.feats.id, std::move(rows6)});
    int rid = feats.id;
    tape->record([srcs, rid](Tape<S>& tp) {
      const Matrix<S>& go = tp.grad(rid);
      for (const auto& s : *srcs) {
        if (s.id < 0) continue;
        Matrix<S>& gs = tp.grad(s.id);
        for (int i = 0; i < gs.rows; ++i) {
          const S* src = go.row(s.rows[size_t(i)]);
          S* dst = gs.row(i);
          for (int c = 0; c < go.cols; ++c) dst[c] += src[c];
        }
      }
    });
  }
  return TracedSt<S>{out_cm, feats};
}

// ---------------------------------------------------------------------------
// Neck: spatial 3x3 stem (active set dilates) -> BN -> relu -> R ConvNeXt
// blocks, all on the fused stride-8 grid.

template <class S>
struct NeckParams {
  int channels = 0;
  ConvParams<S> stem;
  NormParams<S> bn;
  std::vector<ConvNeXtParams<S>> blocks;
};

template <class S>
inline NeckParams<S> init_neck(const NetworkConfig& cfg, uint64_t seed) {
  Rng seeds = Rng::stream(seed, "neck");
  NeckParams<S> p;
  p.channels = cfg.fuse_channels;
  p.stem = init_conv_params<S>(spatial2d(3, 3, 1, 1), cfg.fuse_channels,
                               cfg.fuse_channels, seeds.next_u64());
  p.bn = init_norm_params<S>(cfg.fuse_channels);
  for (int r = 0; r < cfg.neck_repeats; ++r)
    p.blocks.push_back(init_convnext<S>(cfg.fuse_channels, cfg.convnext_expand,
                                        cfg.neck_kernel, seeds.next_u64()));
  return p;
}

template <class S>
inline TracedSt<S> neck_forward(Tape<S>* tape, const TracedSt<S>& in,
                                NeckParams<S>& p, NormMode mode) {
  require(in.channels() == p.channels, Err::ChannelMismatch,
          "neck_forward: channel width differs from parameters");
  auto rb = build_rulebook(in.cm, spatial_spec(2, {3, 3, 1}, {1, 1, 1}));
  TracedSt<S> h = conv_forward(tape, in, rb, p.stem);
  if (h.n() > 0) h = relu(tape, batchnorm_forward(tape, h, p.bn, mode));
  for (auto& bp : p.blocks) h = convnext_block(tape, h, bp, mode);
  return h;
}

// ---------------------------------------------------------------------------
// Head: two parallel submanifold 3x3 -> BN -> relu -> 1x1 stacks that emit
// per-site class logits and the 8 raw box values
// (ox, oy, zc, log dx, log dy, log dz, sin yaw, cos yaw).

constexpr int kBoxValues = 8;

template <class S>
struct HeadParams {
  int channels = 0;   // trunk width of each stack
  int num_classes = 0;
  ConvParams<S> cls_trunk, cls_out;
  NormParams<S> cls_bn;
  ConvParams<S> box_trunk, box_out;
  NormParams<S> box_bn;
};

template <class S>
inline HeadParams<S> init_head(int c_in, int head_channels, int num_classes,
                               uint64_t seed) {
  Rng seeds = Rng::stream(seed, "head");
  HeadParams<S> p;
  p.channels = head_channels;
  p.num_classes = num_classes;
  p.cls_trunk = init_conv_params<S>(subm2d(3, 3), c_in, head_channels,
                                    seeds.next_u64());
  p.cls_bn = init_norm_params<S>(head_channels);
  p.cls_out = init_conv_params<S>(subm2d(1, 1), head_channels, num_classes,
                                  seeds.next_u64(), /*has_bias=*/true);
  p.box_trunk = init_conv_params<S>(subm2d(3, 3), c_in, head_channels,
                                    seeds.next_u64());
  p.box_bn = init_norm_params<S>(head_channels);
  p.box_out = init_conv_params<S>(subm2d(1, 1), head_channels, kBoxValues,
                                  seeds.next_u64(), /*has_bias=*/true);
  return p;
}

template <class S>
struct HeadOut {
  CoordMapPtr cm;
  TracedMat<S> cls;  // n x num_classes logits
  TracedMat<S> box;  // n x 8 raw values
};

template <class S>
inline HeadOut<S> head_forward(Tape<S>* tape, const TracedSt<S>& in,
                               HeadParams<S>& p, NormMode mode) {
  HeadOut<S> out;
  out.cm = in.cm;
  if (in.n() == 0) {
    out.cls = constant(Matrix<S>(0, p.num_classes));
    out.box = constant(Matrix<S>(0, kBoxValues));
    return out;
  }
  auto rb3 = build_rulebook(in.cm, subm2d(3, 3));
  auto rb1 = build_rulebook(in.cm, subm2d(1, 1));
  auto stack = [&](ConvParams<S>& trunk, NormParams<S>& bn,
                   ConvParams<S>& head_out) {
    auto h = conv_forward(tape, in, rb3, trunk);
    h = relu(tape, batchnorm_forward(tape, h, bn, mode));
    return conv_forward(tape, h, rb1, head_out);
  };
  out.cls = stack(p.cls_trunk, p.cls_bn, p.cls_out).feats;
  out.box = stack(p.box_trunk, p.box_bn, p.box_out).feats;
  return out;
}

// ---------------------------------------------------------------------------
// Box decoding: sigmoid-scored best class, 3x3 active-neighborhood local-max
// suppression (ties broken toward smaller (y, x)), then raw values to meters.

template <class S>
inline S sigmoid(S v) {
  return v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                   : std::exp(v) / (S(1) + std::exp(v));
}

template <class S>
inline std::vector<Detection<S>> decode_detections(
    const Matrix<S>& cls, const Matrix<S>& box, const CoordMap& cm,
    const GridConfig& g, int stride, S score_thresh) {
  require(cls.rows == cm.n() && box.rows == cm.n(), Err::ShapeMismatch,
          "decode_detections: prediction rows differ from active sites");
  require(box.cols == kBoxValues, Err::ShapeMismatch,
          "decode_detections: expected 8 box values per site");
  int n = cm.n();
  std::vector<int> best(size_t(n), 0);
  std::vector<S> score(size_t(n), S(0));
  for (int i = 0; i < n; ++i) {
    int j_best = 0;
    for (int j = 1; j < cls.cols; ++j)
      if (cls.at(i, j) > cls.at(i, j_best)) j_best = j;
    best[size_t(i)] = j_best;
    score[size_t(i)] = sigmoid(cls.at(i, j_best));
  }

  std::vector<Detection<S>> out;
  for (int i = 0; i < n; ++i) {
    if (!(score[size_t(i)] > score_thresh)) continue;
    const Coord& c = cm.coords[size_t(i)];
    bool is_peak = true;
    for (int dy = -1; dy <= 1 && is_peak; ++dy)
      for (int dx = -1; dx <= 1 && is_peak; ++dx) {
        if (dy == 0 && dx == 0) continue;
        int ny = c.y + dy, nx = c.x + dx;
        if (ny < 0 || ny >= cm.shape[0] || nx < 0 || nx >= cm.shape[1])
          continue;
        auto row = cm.find(Coord{c.b, ny, nx, 0});
        if (!row) continue;
        S s_n = score[size_t(*row)];
        if (s_n > score[size_t(i)]) is_peak = false;
        const Coord& nc = cm.coords[size_t(*row)];
        if (s_n == score[size_t(i)] &&
            std::tie(nc.y, nc.x) < std::tie(c.y, c.x))
          is_peak = false;
      }
    if (!is_peak) continue;

    const S* b = box.row(i);
    Detection<S> d;
    d.class_id = best[size_t(i)];
    d.score = score[size_t(i)];
    d.center[0] = S(g.x_range[0]) +
                  (S(c.x) + S(0.5) + b[0]) * S(stride) * S(g.voxel_size[0]);
    d.center[1] = S(g.y_range[0]) +
                  (S(c.y) + S(0.5) + b[1]) * S(stride) * S(g.voxel_size[1]);
    d.center[2] = b[2];
    d.size = {std::exp(b[3]), std::exp(b[4]), std::exp(b[5])};
    d.yaw = std::atan2(b[6], b[7]);
    if (d.yaw <= S(-M_PI)) d.yaw = S(M_PI);
    out.push_back(d);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Whole detector

template <class S>
struct DetectorParams {
  GridConfig grid;
  NetworkConfig net;
  int encoder_channels = 0;  // point-MLP width before the 3x pool concat
  MlpParams<S> mlp;
  ColumnCollapseParams<S> col;
  BackboneParams<S> backbone;
  FuseParams<S> fuse;
  NeckParams<S> neck;
  HeadParams<S> head;
};

template <class S>
inline DetectorParams<S> init_detector(const GridConfig& g,
                                       const NetworkConfig& cfg,
                                       int encoder_channels, uint64_t seed) {
  g.validate();
  cfg.validate();
  Rng seeds = Rng::stream(seed, "detector");
  DetectorParams<S> p;
  p.grid = g;
  p.net = cfg;
  p.encoder_channels = encoder_channels;
  p.mlp = init_mlp_params<S>(7, encoder_channels, seeds.next_u64());
  p.col = init_column_collapse<S>(g.D(), 3 * encoder_channels,
                                  cfg.stage_channels[0], seeds.next_u64());
  p.backbone = init_backbone<S>(cfg, seeds.next_u64());
  p.fuse = init_fuse<S>(cfg.stage_channels[3], cfg.stage_channels[4],
                        cfg.stage_channels[5], cfg.fuse_channels,
                        seeds.next_u64());
  p.neck = init_neck<S>(cfg, seeds.next_u64());
  p.head = init_head<S>(cfg.fuse_channels, cfg.head_channels, cfg.num_classes,
                        seeds.next_u64());
  return p;
}

struct PipelineStats {
  std::array<int, 3> grid{};          // cells per axis (x, y, z)
  std::array<int, 6> stage_strides{};
  int encoder_active = 0;
  std::array<int, 6> stage_active{};
  int fused_active = 0;
  int fused_stride = 0;
  int neck_active = 0;
};

template <class S>
struct DetectorOut {
  HeadOut<S> head;
  PipelineStats stats;
};

template <class S>
inline DetectorOut<S> detector_forward(Tape<S>* tape,
                                       const std::vector<PointCloud<S>>& clouds,
                                       DetectorParams<S>& p, NormMode mode,
                                       uint64_t seed) {
  DetectorOut<S> out;
  out.stats.grid = {p.grid.W(), p.grid.H(), p.grid.D()};
  out.stats.stage_strides = p.net.cumulative_strides();
  out.stats.fused_stride = out.stats.stage_strides[3];

  auto enc = voxel2pillar_encode(tape, clouds, p.grid, p.mlp, p.col, mode, seed);
  out.stats.encoder_active = enc.n();
  auto stages = backbone_forward(tape, enc, p.backbone, mode);
  for (int i = 0; i < 6; ++i)
    out.stats.stage_active[size_t(i)] = stages[size_t(i)].n();
  auto fused =
      fuse_last_three(tape, stages[3], stages[4], stages[5], p.fuse);
  out.stats.fused_active = fused.n();
  auto neck_out = neck_forward(tape, fused, p.neck, mode);
  out.stats.neck_active = neck_out.n();
  require(neck_out.feats.val().all_finite(), Err::NonFinite,
          "neck produced a non-finite feature");
  out.head = head_forward(tape, neck_out, p.head, mode);
  return out;
}

// ---------------------------------------------------------------------------
// Parameter registry and checkpoint I/O. The checkpoint is a text manifest
// (ordered names and shapes) followed by raw little-endian 64-bit reals.

template <class S>
struct ParamRef {
  std::string name;
  Matrix<S>* v;
  Matrix<S>* g;  // null for running statistics (stored but not optimized)
};

template <class S>
inline void collect_conv(std::vector<ParamRef<S>>& out, const std::string& name,
                         ConvParams<S>& p) {
  out.push_back({name + ".weight", &p.weight.v, &p.weight.g});
  if (p.has_bias) out.push_back({name + ".bias", &p.bias.v, &p.bias.g});
}

template <class S>
inline void collect_norm(std::vector<ParamRef<S>>& out, const std::string& name,
                         NormParams<S>& p) {
  out.push_back({name + ".gamma", &p.gamma.v, &p.gamma.g});
  out.push_back({name + ".beta", &p.beta.v, &p.beta.g});
  out.push_back({name + ".running_mean", &p.running_mean, nullptr});
  out.push_back({name + ".running_var", &p.running_var, nullptr});
}

template <class S>
inline void collect_lsfe(std::vector<ParamRef<S>>& out, const std::string& name,
                         LsfeParams<S>& p) {
  collect_conv(out, name + ".main1", p.main1);
  collect_norm(out, name + ".bn1", p.bn1);
  collect_conv(out, name + ".main2", p.main2);
  collect_norm(out, name + ".bn2", p.bn2);
  collect_conv(out, name + ".dil", p.dil);
  collect_norm(out, name + ".bn_dil", p.bn_dil);
}

template <class S>
inline void collect_dlsfe(std::vector<ParamRef<S>>& out,
                          const std::string& name, DlsfeParams<S>& p) {
  collect_conv(out, name + ".fine", p.fine);
  collect_norm(out, name + ".bn_fine", p.bn_fine);
  collect_conv(out, name + ".row9", p.row9);
  collect_norm(out, name + ".bn_row", p.bn_row);
  collect_conv(out, name + ".col9", p.col9);
  collect_norm(out, name + ".bn_col", p.bn_col);
}

template <class S>
inline void collect_convnext(std::vector<ParamRef<S>>& out,
                             const std::string& name, ConvNeXtParams<S>& p) {
  out.push_back({name + ".dw.weight", &p.dw.weight.v, &p.dw.weight.g});
  out.push_back({name + ".ln.gamma", &p.ln.gamma.v, &p.ln.gamma.g});
  out.push_back({name + ".ln.beta", &p.ln.beta.v, &p.ln.beta.g});
  collect_conv(out, name + ".expand", p.expand);
  collect_conv(out, name + ".project", p.project);
}

template <class S>
inline std::vector<ParamRef<S>> collect_params(DetectorParams<S>& p) {
  std::vector<ParamRef<S>> out;
  out.push_back({"mlp.weight", &p.mlp.weight.v, &p.mlp.weight.g});
  collect_norm(out, "mlp.bn", p.mlp.norm);
  collect_conv(out, "collapse.conv", p.col.conv);
  collect_norm(out, "collapse.bn", p.col.norm);
  for (size_t i = 0; i < p.backbone.stages.size(); ++i) {
    std::string sn = "stage" + std::to_string(i + 1);
    MsfeParams<S>& st = p.backbone.stages[i];
    if (st.downsample) {
      collect_conv(out, sn + ".down", st.down);
      collect_norm(out, sn + ".bn_down", st.bn_down);
    }
    collect_dlsfe(out, sn + ".dlsfe", st.dlsfe);
    for (size_t j = 0; j < st.lsfes.size(); ++j)
      collect_lsfe(out, sn + ".lsfe" + std::to_string(j + 1), st.lsfes[j]);
  }
  collect_conv(out, "fuse.p4", p.fuse.p4);
  collect_conv(out, "fuse.p5", p.fuse.p5);
  collect_conv(out, "fuse.p6", p.fuse.p6);
  collect_conv(out, "neck.stem", p.neck.stem);
  collect_norm(out, "neck.bn", p.neck.bn);
  for (size_t r = 0; r < p.neck.blocks.size(); ++r)
    collect_convnext(out, "neck.block" + std::to_string(r + 1),
                     p.neck.blocks[r]);
  collect_conv(out, "head.cls_trunk", p.head.cls_trunk);
  collect_norm(out, "head.cls_bn", p.head.cls_bn);
  collect_conv(out, "head.cls_out", p.head.cls_out);
  collect_conv(out, "head.box_trunk", p.head.box_trunk);
  collect_norm(out, "head.box_bn", p.head.box_bn);
  collect_conv(out, "head.box_out", p.head.box_out);
  return out;
}

template <class S>
inline void zero_grads(std::vector<ParamRef<S>>& refs) {
  for (auto& r : refs)
    if (r.g) r.g->zero();
}

inline void append_f64_le(std::vector<uint8_t>& bytes, double v) {
  uint64_t u;
  std::memcpy(&u, &v, 8);
  for (int b = 0; b < 8; ++b) bytes.push_back(uint8_t((u >> (8 * b)) & 0xFF));
}

inline double read_f64_le(const uint8_t* p) {
  uint64_t u = 0;
  for (int b = 7; b >= 0; --b) u = (u << 8) | p[b];
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

template <class S>
inline void save_checkpoint(const std::string& path,
                            const std::vector<ParamRef<S>>& refs) {
  std::string manifest = "pnx-checkpoint 1\n";
  size_t total = 0;
  for (const auto& r : refs) {
    manifest += "param " + r.name + " " + std::to_string(r.v->rows) + " " +
                std::to_string(r.v->cols) + "\n";
    total += r.v->data.size();
  }
  manifest += "data\n";
  std::vector<uint8_t> bytes;
  bytes.reserve(manifest.size() + 8 * total);
  bytes.insert(bytes.end(), manifest.begin(), manifest.end());
  for (const auto& r : refs)
    for (S v : r.v->data) append_f64_le(bytes, double(v));

  // Write to a sibling temp file, then rename: never a torn checkpoint.
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    require(f.good(), Err::IoError, "cannot open checkpoint for write: " + tmp);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            std::streamsize(bytes.size()));
    require(f.good(), Err::IoError, "short write to checkpoint: " + tmp);
  }
  require(std::rename(tmp.c_str(), path.c_str()) == 0, Err::IoError,
          "cannot move checkpoint into place: " + path);
}

template <class S>
inline void load_checkpoint(const std::string& path,
                            std::vector<ParamRef<S>>& refs) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), Err::IoError, "cannot open checkpoint: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  size_t pos = 0;
  auto next_line = [&]() {
    size_t end = pos;
    while (end < bytes.size() && bytes[end] != '\n') ++end;
    require(end < bytes.size(), Err::ManifestMismatch,
            "checkpoint manifest is truncated");
    std::string line(bytes.begin() + long(pos), bytes.begin() + long(end));
    pos = end + 1;
    return line;
  };
  require(next_line() == "pnx-checkpoint 1", Err::ManifestMismatch,
          "unrecognized checkpoint header");
  for (auto& r : refs) {
    std::string expect = "param " + r.name + " " + std::to_string(r.v->rows) +
                         " " + std::to_string(r.v->cols);
    std::string got = next_line();
    require(got == expect, Err::ManifestMismatch,
            "checkpoint manifest differs: expected \"" + expect +
                "\", found \"" + got + "\"");
  }
  require(next_line() == "data", Err::ManifestMismatch,
          "checkpoint manifest missing data marker");
  size_t total = 0;
  for (const auto& r : refs) total += r.v->data.size();
  require(bytes.size() - pos == 8 * total, Err::ManifestMismatch,
          "checkpoint payload size differs from manifest");
  for (auto& r : refs)
    for (S& v : r.v->data) {
      v = S(read_f64_le(bytes.data() + pos));
      pos += 8;
    }
}

}  // namespace pnx
