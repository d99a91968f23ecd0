#pragma once
// Desk-scale training harness: synthetic scenes, target assignment, the
// focal + L1 detection loss, Adam, toy overfitting, and toy precision/recall.

#include <algorithm>

#include "pnx/geometry.hpp"
#include "pnx/network.hpp"

namespace pnx {

// ---------------------------------------------------------------------------
// Scene synthesis

struct ClassShape {
  std::array<double, 3> size_mean{3.8, 1.8, 1.5};
  std::array<double, 3> size_jitter{0.2, 0.1, 0.1};
};

struct SceneSpec {
  int min_boxes = 2;
  int max_boxes = 3;
  std::vector<ClassShape> classes{ClassShape{},
                                  ClassShape{{0.9, 0.9, 1.7}, {0.1, 0.1, 0.1}}};
  int min_points_per_box = 60;
  int max_points_per_box = 100;
  int noise_points = 40;
  uint64_t seed = 1;

  void validate() const {
    require(min_boxes >= 0 && max_boxes >= min_boxes, Err::InvalidConfig,
            "box count range is inverted");
    require(!classes.empty(), Err::InvalidConfig, "need at least one class");
    require(min_points_per_box >= 0 &&
                max_points_per_box >= min_points_per_box,
            Err::InvalidConfig, "points-per-box range is inverted");
    require(noise_points >= 0, Err::InvalidConfig, "noise count negative");
  }
};

template <class S>
struct Scene {
  PointCloud<S> cloud;
  std::vector<GTBox<S>> boxes;
};

// Uniform sample on the cuboid surface (area-weighted over the six faces),
// rotated by yaw and translated to the box center.
template <class S>
inline std::array<S, 3> sample_box_surface(Rng& rng, const GTBox<S>& b) {
  double dx = double(b.size[0]), dy = double(b.size[1]), dz = double(b.size[2]);
  double axy = dx * dy, axz = dx * dz, ayz = dy * dz;
  double total = 2 * (axy + axz + ayz);
  double pick = rng.uniform(0.0, total);
  double lx, ly, lz;
  if (pick < 2 * axy) {
    lx = rng.uniform(-dx / 2, dx / 2);
    ly = rng.uniform(-dy / 2, dy / 2);
    lz = pick < axy ? dz / 2 : -dz / 2;
  } else if (pick < 2 * axy + 2 * axz) {
    lx = rng.uniform(-dx / 2, dx / 2);
    lz = rng.uniform(-dz / 2, dz / 2);
    ly = pick < 2 * axy + axz ? dy / 2 : -dy / 2;
  } else {
    ly = rng.uniform(-dy / 2, dy / 2);
    lz = rng.uniform(-dz / 2, dz / 2);
    lx = pick < 2 * (axy + axz) + ayz ? dx / 2 : -dx / 2;
  }
  double c = std::cos(double(b.yaw)), s = std::sin(double(b.yaw));
  return {S(double(b.center[0]) + lx * c - ly * s),
          S(double(b.center[1]) + lx * s + ly * c), S(double(b.center[2]) + lz)};
}

template <class S>
inline Scene<S> synth_scene(const SceneSpec& spec, const GridConfig& g,
                            uint64_t scene_key) {
  spec.validate();
  g.validate();
  Rng rng = Rng::keyed(Rng::stream(spec.seed, "scene").next_u64(), scene_key);

  Scene<S> out;
  int n_boxes =
      spec.min_boxes + int(rng.uniform_int(spec.max_boxes - spec.min_boxes + 1));
  for (int bi = 0; bi < n_boxes; ++bi) {
    int ci = int(rng.uniform_int(int64_t(spec.classes.size())));
    const ClassShape& cs = spec.classes[size_t(ci)];
    GTBox<S> b;
    b.class_id = ci;
    for (int a = 0; a < 3; ++a)
      b.size[size_t(a)] =
          S(std::max(0.2, cs.size_mean[size_t(a)] +
                              cs.size_jitter[size_t(a)] * rng.normal()));
    b.yaw = S(rng.uniform(-M_PI, M_PI));
    if (b.yaw <= S(-M_PI)) b.yaw = S(M_PI);

    // Keep the whole footprint (any yaw) well inside the range, and boxes
    // apart from each other so each claims its own fused-grid site.
    double half_diag =
        0.5 * std::hypot(double(b.size[0]), double(b.size[1])) + 0.5;
    double zlo = g.z_range[0] + double(b.size[2]) / 2 + 0.05;
    double zhi = g.z_range[1] - double(b.size[2]) / 2 - 0.05;
    for (int attempt = 0; attempt < 64; ++attempt) {
      b.center[0] = S(rng.uniform(g.x_range[0] + half_diag, g.x_range[1] - half_diag));
      b.center[1] = S(rng.uniform(g.y_range[0] + half_diag, g.y_range[1] - half_diag));
      b.center[2] = S(zhi <= zlo ? (zlo + zhi) / 2 : rng.uniform(zlo, zhi));
      bool clear = true;
      for (const GTBox<S>& other : out.boxes) {
        double dist = std::hypot(double(b.center[0] - other.center[0]),
                                 double(b.center[1] - other.center[1]));
        if (dist < 6.0) clear = false;
      }
      if (clear) break;
    }
    out.boxes.push_back(b);
  }

  std::vector<std::array<S, 4>> rows;
  for (const GTBox<S>& b : out.boxes) {
    int n_pts = spec.min_points_per_box +
                int(rng.uniform_int(
                    spec.max_points_per_box - spec.min_points_per_box + 1));
    for (int i = 0; i < n_pts; ++i) {
      auto p = sample_box_surface(rng, b);
      rows.push_back({p[0], p[1], p[2], S(rng.uniform())});
    }
  }
  for (int i = 0; i < spec.noise_points; ++i)
    rows.push_back({S(rng.uniform(g.x_range[0], g.x_range[1])),
                    S(rng.uniform(g.y_range[0], g.y_range[1])),
                    S(g.z_range[0] + 0.05 * (g.z_range[1] - g.z_range[0]) *
                                         rng.uniform()),
                    S(rng.uniform())});

  Matrix<S> pts(int(rows.size()), 4);
  for (size_t i = 0; i < rows.size(); ++i)
    for (int c = 0; c < 4; ++c) pts.at(int(i), c) = rows[i][size_t(c)];
  out.cloud = make_cloud(std::move(pts));
  return out;
}

// ---------------------------------------------------------------------------
// Target assignment: the exact inverse of decode_detections at the chosen
// site, so decode(assign(gt)) reproduces the box.

template <class S>
inline std::array<S, kBoxValues> encode_box_targets(const GTBox<S>& b,
                                                    const Coord& site,
                                                    const GridConfig& g,
                                                    int stride) {
  S cell_x = S(stride) * S(g.voxel_size[0]);
  S cell_y = S(stride) * S(g.voxel_size[1]);
  return {(b.center[0] - S(g.x_range[0])) / cell_x - S(site.x) - S(0.5),
          (b.center[1] - S(g.y_range[0])) / cell_y - S(site.y) - S(0.5),
          b.center[2],
          std::log(b.size[0]),
          std::log(b.size[1]),
          std::log(b.size[2]),
          std::sin(b.yaw),
          std::cos(b.yaw)};
}

template <class S>
struct TargetSet {
  std::vector<int> cls;  // per site: class id, or -1 for background
  Matrix<S> box;         // per site: 8 encoded values (rows for positives)
  int n_pos = 0;
  int conflicts = 0;  // boxes that displaced an earlier box's site
};

// Restrict to one batch slice by passing its index; -1 considers every site.
template <class S>
inline TargetSet<S> assign_targets(const std::vector<GTBox<S>>& gt,
                                   const CoordMap& cm, const GridConfig& g,
                                   int stride, int batch = -1) {
  require(gt.empty() || cm.n() > 0, Err::NoActiveSites,
          "no active sites to carry targets");
  TargetSet<S> t;
  t.cls.assign(size_t(cm.n()), -1);
  t.box = Matrix<S>(cm.n(), kBoxValues);
  S cell_x = S(stride) * S(g.voxel_size[0]);
  S cell_y = S(stride) * S(g.voxel_size[1]);
  for (const GTBox<S>& b : gt) {
    b.validate();
    int best = -1;
    double best_d2 = 0.0;
    for (int i = 0; i < cm.n(); ++i) {
      const Coord& c = cm.coords[size_t(i)];
      if (batch >= 0 && c.b != batch) continue;
      double sx = g.x_range[0] + (double(c.x) + 0.5) * double(cell_x);
      double sy = g.y_range[0] + (double(c.y) + 0.5) * double(cell_y);
      double d2 = (sx - double(b.center[0])) * (sx - double(b.center[0])) +
                  (sy - double(b.center[1])) * (sy - double(b.center[1]));
      if (best < 0 || d2 < best_d2) {
        best = i;
        best_d2 = d2;
      } else if (d2 == best_d2) {
        const Coord& bc = cm.coords[size_t(best)];
        if (std::tie(c.y, c.x) < std::tie(bc.y, bc.x)) best = i;
      }
    }
    if (best < 0) continue;
    if (t.cls[size_t(best)] >= 0) ++t.conflicts;
    else ++t.n_pos;
    t.cls[size_t(best)] = b.class_id;
    auto enc = encode_box_targets(b, cm.coords[size_t(best)], g, stride);
    for (int k = 0; k < kBoxValues; ++k) t.box.at(best, k) = enc[size_t(k)];
  }
  return t;
}

// ---------------------------------------------------------------------------
// Loss: per-logit focal term (gamma=2, alpha=0.25) normalized by the positive
// count, plus twice the mean absolute error of the 8 box values at positives.

template <class S>
inline S log_sigmoid(S z) {
  return z >= S(0) ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}

template <class S>
struct LossOut {
  TracedScalar<S> total;
  S cls_part = S(0);
  S reg_part = S(0);
  int n_pos = 0;
};

template <class S>
inline LossOut<S> detection_loss(Tape<S>* tape, const TracedMat<S>& cls,
                                 const TracedMat<S>& box,
                                 const TargetSet<S>& targets) {
  require(cls.rows() == int(targets.cls.size()), Err::ShapeMismatch,
          "detection_loss: logit rows differ from target sites");
  require(box.rows() == cls.rows() && box.cols() == kBoxValues,
          Err::ShapeMismatch, "detection_loss: box rows differ from targets");
  const S gamma = S(2), alpha = S(0.25);
  int n = cls.rows(), k = cls.cols();
  S norm = S(std::max(1, targets.n_pos));

  auto grad_cls = std::make_shared<Matrix<S>>(n, k);
  S cls_loss = S(0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) {
      S z = cls.val().at(i, j);
      S p = sigmoid(z);
      S log_p = log_sigmoid(z);
      S log_q = log_sigmoid(-z);  // log(1 - p)
      if (targets.cls[size_t(i)] == j) {
        S q = S(1) - p;
        cls_loss += -alpha * q * q * log_p;
        grad_cls->at(i, j) =
            (alpha * gamma * p * q * q * log_p - alpha * q * q * q) / norm;
      } else {
        cls_loss += -(S(1) - alpha) * p * p * log_q;
        grad_cls->at(i, j) =
            (S(1) - alpha) * (p * p * p - gamma * p * p * (S(1) - p) * log_q) /
            norm;
      }
    }
  cls_loss /= norm;

  auto grad_box = std::make_shared<Matrix<S>>(n, kBoxValues);
  S reg_loss = S(0);
  if (targets.n_pos > 0) {
    S denom = S(targets.n_pos) * S(kBoxValues);
    for (int i = 0; i < n; ++i) {
      if (targets.cls[size_t(i)] < 0) continue;
      for (int j = 0; j < kBoxValues; ++j) {
        S d = box.val().at(i, j) - targets.box.at(i, j);
        reg_loss += std::abs(d);
        grad_box->at(i, j) = (d > S(0) ? S(2) : d < S(0) ? S(-2) : S(0)) / denom;
      }
    }
    reg_loss = S(2) * reg_loss / denom;
  }

  LossOut<S> out;
  out.cls_part = cls_loss;
  out.reg_part = reg_loss;
  out.n_pos = targets.n_pos;
  out.total.value = cls_loss + reg_loss;
  if (tape) {
    out.total.id = tape->alloc(1, 1);
    int cid = cls.id, bid = box.id, rid = out.total.id;
    tape->record([cid, bid, rid, grad_cls, grad_box](Tape<S>& tp) {
      S go = tp.grad(rid).at(0, 0);
      if (cid >= 0) {
        Matrix<S>& g = tp.grad(cid);
        for (size_t i = 0; i < g.data.size(); ++i)
          g.data[i] += go * grad_cls->data[i];
      }
      if (bid >= 0) {
        Matrix<S>& g = tp.grad(bid);
        for (size_t i = 0; i < g.data.size(); ++i)
          g.data[i] += go * grad_box->data[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam

template <class S>
struct AdamState {
  int64_t step = 0;
  std::vector<Matrix<S>> m, v;  // aligned with the optimizable refs, in order
};

template <class S>
inline AdamState<S> init_adam(const std::vector<ParamRef<S>>& refs) {
  AdamState<S> st;
  for (const auto& r : refs) {
    if (!r.g) continue;
    st.m.emplace_back(r.v->rows, r.v->cols);
    st.v.emplace_back(r.v->rows, r.v->cols);
  }
  return st;
}

template <class S>
inline void adam_step(std::vector<ParamRef<S>>& refs, AdamState<S>& st, S lr) {
  const S b1 = S(0.9), b2 = S(0.999), eps = S(1e-8);
  ++st.step;
  S c1 = S(1) - S(std::pow(double(b1), double(st.step)));
  S c2 = S(1) - S(std::pow(double(b2), double(st.step)));
  size_t slot = 0;
  for (auto& r : refs) {
    if (!r.g) continue;
    require(slot < st.m.size() && st.m[slot].same_shape(*r.v),
            Err::ShapeMismatch, "optimizer state misaligned with parameters");
    Matrix<S>& m = st.m[slot];
    Matrix<S>& v = st.v[slot];
    for (size_t i = 0; i < r.v->data.size(); ++i) {
      S g = r.g->data[i];
      m.data[i] = b1 * m.data[i] + (S(1) - b1) * g;
      v.data[i] = b2 * v.data[i] + (S(1) - b2) * g * g;
      S mhat = m.data[i] / c1;
      S vhat = v.data[i] / c2;
      r.v->data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    ++slot;
  }
}

// ---------------------------------------------------------------------------
// Toy overfit loop and evaluation

template <class S>
struct StepLoss {
  int step = 0;
  S total = S(0), cls = S(0), reg = S(0);
};

template <class S>
inline std::vector<StepLoss<S>> overfit_toy(DetectorParams<S>& params,
                                            const std::vector<Scene<S>>& scenes,
                                            int steps, S lr, uint64_t seed) {
  require(!scenes.empty(), Err::InvalidConfig, "need at least one scene");
  auto refs = collect_params(params);
  AdamState<S> st = init_adam(refs);
  std::vector<StepLoss<S>> curve;
  int stride = params.net.cumulative_strides()[3];
  std::vector<PointCloud<S>> clouds;
  for (const Scene<S>& scene : scenes) clouds.push_back(scene.cloud);
  for (int step = 0; step < steps; ++step) {
    Tape<S> tape;
    zero_grads(refs);
    auto out = detector_forward(&tape, clouds, params, NormMode::Train,
                                Rng::keyed(seed, uint64_t(step)).next_u64());
    const CoordMap& cm = *out.head.cm;
    TargetSet<S> targets;
    targets.cls.assign(size_t(cm.n()), -1);
    targets.box = Matrix<S>(cm.n(), kBoxValues);
    for (size_t b = 0; b < scenes.size(); ++b) {
      auto tb = assign_targets(scenes[b].boxes, cm, params.grid, stride, int(b));
      for (int i = 0; i < cm.n(); ++i) {
        if (tb.cls[size_t(i)] < 0) continue;
        targets.cls[size_t(i)] = tb.cls[size_t(i)];
        for (int k = 0; k < kBoxValues; ++k)
          targets.box.at(i, k) = tb.box.at(i, k);
      }
      targets.n_pos += tb.n_pos;
      targets.conflicts += tb.conflicts;
    }
    auto loss = detection_loss(&tape, out.head.cls, out.head.box, targets);
    require(std::isfinite(double(loss.total.value)), Err::NonFinite,
            "training loss diverged");
    tape.backward(loss.total.id);
    adam_step(refs, st, lr);
    curve.push_back(
        StepLoss<S>{step, loss.total.value, loss.cls_part, loss.reg_part});
  }
  return curve;
}

// Greedy class-aware matching by descending score at a BEV IoU threshold.
// No detections with ground truth present: precision 1 by convention.
template <class S>
inline std::pair<double, double> eval_toy(std::vector<Detection<S>> dets,
                                          const std::vector<GTBox<S>>& gt,
                                          double iou_thresh) {
  require(iou_thresh > 0.0 && iou_thresh < 1.0, Err::InvalidConfig,
          "IoU threshold must lie in (0, 1)");
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection<S>& a, const Detection<S>& b) {
                     return a.score > b.score;
                   });
  std::vector<bool> taken(gt.size(), false);
  int tp = 0;
  for (const Detection<S>& d : dets) {
    GTBox<S> db;
    db.center = d.center;
    db.size = d.size;
    db.yaw = d.yaw;
    int best = -1;
    double best_iou = iou_thresh;
    for (size_t j = 0; j < gt.size(); ++j) {
      if (taken[j] || gt[j].class_id != d.class_id) continue;
      double iou = double(bev_iou(db, gt[j]));
      if (iou >= best_iou) {
        best_iou = iou;
        best = int(j);
      }
    }
    if (best >= 0) {
      taken[size_t(best)] = true;
      ++tp;
    }
  }
  double precision = dets.empty() ? 1.0 : double(tp) / double(dets.size());
  double recall = gt.empty() ? 1.0 : double(tp) / double(gt.size());
  return {precision, recall};
}

}  // namespace pnx
