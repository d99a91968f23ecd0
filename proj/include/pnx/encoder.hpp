#pragma once
// Point-cloud encoders: voxelization into per-cell groups, per-point feature
// augmentation, the shared point MLP, group pooling, and the two pillar
// encoders (max-pooled baseline and the vertical-collapse voxel path).

#include <algorithm>
#include <tuple>

#include "pnx/conv.hpp"
#include "pnx/coords.hpp"
#include "pnx/norm.hpp"
#include "pnx/points.hpp"
#include "pnx/sparse.hpp"
#include "pnx/tape.hpp"

namespace pnx {

// Points bucketed by cell. Rows are packed group-major; members within a
// group are ordered by point content (x, y, z, intensity) so the batch is
// identical no matter how the input rows were ordered.
template <class S>
struct VoxelBatch {
  int rank = 2;
  std::array<int, 3> shape{0, 0, 1};
  int batch_size = 1;
  std::vector<Coord> cells;          // one per group, ascending packed order
  std::vector<int32_t> group_start;  // groups+1 prefix offsets into feats
  Matrix<S> feats;                   // kept points x F
  std::vector<int32_t> src_rows;     // original row within the source cloud

  int groups() const { return int(cells.size()); }
  int points() const { return feats.rows; }
  int group_size(int g) const {
    return group_start[size_t(g) + 1] - group_start[size_t(g)];
  }
};

// Cell index along one axis, inclusive at the low edge and exclusive at the
// high edge. Computed in normalized cell units with a tiny forward nudge so
// points sitting on an exact cell boundary land in the upper cell instead of
// drifting down on floating-point noise.
inline int cell_index(double p, double lo, double hi, int cells) {
  double t = (p - lo) / (hi - lo) * double(cells) + 1e-9;
  double f = std::floor(t);
  if (f < 0.0 || f >= double(cells)) return -1;
  return int(f);
}

template <class S>
inline VoxelBatch<S> voxelize(const std::vector<PointCloud<S>>& clouds,
                              const GridConfig& g, int rank, uint64_t seed) {
  g.validate();
  require(rank == 2 || rank == 3, Err::InvalidSpec, "rank must be 2 or 3");
  int W = g.W(), H = g.H(), D = g.D();

  struct Entry {
    uint64_t cell;
    S x, y, z, it;
    int32_t src;
  };
  std::vector<Entry> entries;
  for (size_t b = 0; b < clouds.size(); ++b) {
    const Matrix<S>& pts = clouds[b].pts;
    for (int i = 0; i < pts.rows; ++i) {
      double x = double(pts.at(i, 0)), y = double(pts.at(i, 1)),
             z = double(pts.at(i, 2));
      int ix = cell_index(x, g.x_range[0], g.x_range[1], W);
      int iy = cell_index(y, g.y_range[0], g.y_range[1], H);
      int iz = cell_index(z, g.z_range[0], g.z_range[1], D);
      if (ix < 0 || iy < 0 || iz < 0) continue;
      if (rank == 2) iz = 0;
      Coord c{int32_t(b), iy, ix, iz};
      entries.push_back({pack_coord(c), pts.at(i, 0), pts.at(i, 1),
                         pts.at(i, 2), pts.at(i, 3), i});
    }
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return std::tie(a.cell, a.x, a.y, a.z, a.it, a.src) <
           std::tie(b.cell, b.x, b.y, b.z, b.it, b.src);
  });

  VoxelBatch<S> vb;
  vb.rank = rank;
  vb.shape = {H, W, rank == 2 ? 1 : D};
  vb.batch_size = std::max<int>(1, int(clouds.size()));
  vb.feats = Matrix<S>(0, 4);
  std::vector<int32_t> kept;
  size_t i = 0;
  while (i < entries.size()) {
    size_t j = i;
    while (j < entries.size() && entries[j].cell == entries[i].cell) ++j;
    int m = int(j - i);
    kept.clear();
    if (m <= g.max_points_per_voxel) {
      for (int t = 0; t < m; ++t) kept.push_back(int32_t(i) + t);
    } else {
      // Seeded per-cell sampling over content-ordered members: pick
      // max_points_per_voxel positions, then restore content order.
      Rng rng = Rng::keyed(seed, entries[i].cell);
      std::vector<int32_t> pos(static_cast<size_t>(m));
      for (int t = 0; t < m; ++t) pos[size_t(t)] = int32_t(t);
      for (int t = 0; t < g.max_points_per_voxel; ++t)
        std::swap(pos[size_t(t)],
                  pos[size_t(t) + size_t(rng.uniform_int(m - t))]);
      pos.resize(size_t(g.max_points_per_voxel));
      std::sort(pos.begin(), pos.end());
      for (int32_t p : pos) kept.push_back(int32_t(i) + p);
    }
    vb.cells.push_back(unpack_coord(entries[i].cell));
    vb.group_start.push_back(int32_t(vb.src_rows.size()));
    for (int32_t t : kept) {
      const Entry& e = entries[size_t(t)];
      vb.src_rows.push_back(e.src);
      vb.feats.data.insert(vb.feats.data.end(), {e.x, e.y, e.z, e.it});
      ++vb.feats.rows;
    }
    i = j;
  }
  vb.group_start.push_back(int32_t(vb.src_rows.size()));
  return vb;
}

// Widens raw (x, y, z, intensity) rows with offsets to the cell's geometric
// center. Rank 3 keeps raw z plus its offset (7 columns); rank 2 replaces z
// with the offset to the pillar's mid-height (6 columns).
template <class S>
inline VoxelBatch<S> augment_point_features(VoxelBatch<S> vb,
                                            const GridConfig& g) {
  require(vb.feats.cols >= 4, Err::ShapeMismatch,
          "expected raw (x, y, z, intensity) columns");
  int fp = vb.rank == 3 ? 7 : 6;
  Matrix<S> out(vb.feats.rows, fp);
  double ex = g.x_range[1] - g.x_range[0];
  double ey = g.y_range[1] - g.y_range[0];
  double ez = g.z_range[1] - g.z_range[0];
  for (int gi = 0; gi < vb.groups(); ++gi) {
    const Coord& c = vb.cells[size_t(gi)];
    double cx = g.x_range[0] + (c.x + 0.5) * ex / g.W();
    double cy = g.y_range[0] + (c.y + 0.5) * ey / g.H();
    double cz = vb.rank == 3 ? g.z_range[0] + (c.z + 0.5) * ez / g.D()
                             : g.z_range[0] + 0.5 * ez;
    for (int r = vb.group_start[size_t(gi)]; r < vb.group_start[size_t(gi) + 1];
         ++r) {
      const S* p = vb.feats.row(r);
      S* o = out.row(r);
      if (vb.rank == 3) {
        o[0] = p[0];
        o[1] = p[1];
        o[2] = p[2];
        o[3] = p[3];
        o[4] = S(double(p[0]) - cx);
        o[5] = S(double(p[1]) - cy);
        o[6] = S(double(p[2]) - cz);
      } else {
        o[0] = p[0];
        o[1] = p[1];
        o[2] = S(double(p[2]) - cz);
        o[3] = p[3];
        o[4] = S(double(p[0]) - cx);
        o[5] = S(double(p[1]) - cy);
      }
    }
  }
  vb.feats = std::move(out);
  return vb;
}

// ---------------------------------------------------------------------------
// Point MLP (linear -> batchnorm -> relu over all kept points)

template <class S>
struct MlpParams {
  Param<S> weight;  // F' x C_mid, no bias (the norm absorbs it)
  NormParams<S> norm;

  int c_mid() const { return weight.v.cols; }
};

template <class S>
inline MlpParams<S> init_mlp_params(int f_in, int c_mid, uint64_t seed) {
  MlpParams<S> p;
  p.weight = Param<S>(f_in, c_mid);
  double bound = std::sqrt(6.0 / double(f_in));
  Rng rng = Rng::stream(seed, "mlp_init");
  p.weight.v.fill_uniform(rng, -bound, bound);
  p.norm = init_norm_params<S>(c_mid);
  return p;
}

template <class S>
inline TracedMat<S> point_mlp(Tape<S>* tape, const TracedMat<S>& feats,
                              MlpParams<S>& p, NormMode mode) {
  require(feats.cols() == p.weight.v.rows, Err::ChannelMismatch,
          "point feature width differs from MLP weight");
  if (feats.rows() == 0)
    return trace(tape, Matrix<S>(0, p.c_mid()));  // empty in, empty out
  auto h = matmul(tape, feats, p.weight);
  h = batchnorm_rows(tape, h, p.norm, mode);
  return relu_rows(tape, h);
}

// ---------------------------------------------------------------------------
// Group pooling

namespace detail {

// Counts a tie only when a non-zero extremum is achieved by several rows:
// those are the points where the max/min subgradient is genuinely ambiguous.
// Ties at exactly zero are relu-clamped slots whose inputs sit strictly in
// the flat region, so the loss is locally constant there.
template <class S>
inline void note_tie(Tape<S>* tape, S value, int achievers) {
  if (tape && achievers > 1 && value != S(0)) ++tape->nondiff_ties;
}

}  // namespace detail

template <class S>
inline TracedMat<S> pool_max_groups(Tape<S>* tape, const TracedMat<S>& feats,
                                    std::vector<int32_t> group_start) {
  const Matrix<S>& x = feats.val();
  int groups = int(group_start.size()) - 1;
  int c = x.cols;
  Matrix<S> out(groups, c);
  auto argmax = std::make_shared<std::vector<int32_t>>(size_t(groups) * c);
  for (int g = 0; g < groups; ++g) {
    int s = group_start[size_t(g)], e = group_start[size_t(g) + 1];
    require(e > s, Err::EmptyGroup, "cannot pool an empty group");
    for (int j = 0; j < c; ++j) {
      S best = x.at(s, j);
      int32_t arg = s;
      int achievers = 1;
      for (int r = s + 1; r < e; ++r) {
        S v = x.at(r, j);
        if (v > best) {
          best = v;
          arg = r;
          achievers = 1;
        } else if (v == best) {
          ++achievers;
        }
      }
      detail::note_tie(tape, best, achievers);
      out.at(g, j) = best;
      (*argmax)[size_t(g) * c + size_t(j)] = arg;
    }
  }
  TracedMat<S> r = trace(tape, std::move(out));
  if (tape && feats.id >= 0) {
    int in_id = feats.id, out_id = r.id;
    tape->record([argmax, in_id, out_id, c](Tape<S>& tp) {
      const Matrix<S>& go = tp.grad(out_id);
      Matrix<S>& gi = tp.grad(in_id);
      for (int g = 0; g < go.rows; ++g)
        for (int j = 0; j < c; ++j)
          gi.at((*argmax)[size_t(g) * c + size_t(j)], j) += go.at(g, j);
    });
  }
  return r;
}

// [max | min | mean] per channel, in that order.
template <class S>
inline TracedMat<S> pool_mmm_groups(Tape<S>* tape, const TracedMat<S>& feats,
                                    std::vector<int32_t> group_start) {
  const Matrix<S>& x = feats.val();
  int groups = int(group_start.size()) - 1;
  int c = x.cols;
  Matrix<S> out(groups, 3 * c);
  auto argmax = std::make_shared<std::vector<int32_t>>(size_t(groups) * c);
  auto argmin = std::make_shared<std::vector<int32_t>>(size_t(groups) * c);
  for (int g = 0; g < groups; ++g) {
    int s = group_start[size_t(g)], e = group_start[size_t(g) + 1];
    require(e > s, Err::EmptyGroup, "cannot pool an empty group");
    for (int j = 0; j < c; ++j) {
      S hi = x.at(s, j), lo = x.at(s, j), sum = x.at(s, j);
      int32_t ahi = s, alo = s;
      int hits_hi = 1, hits_lo = 1;
      for (int r = s + 1; r < e; ++r) {
        S v = x.at(r, j);
        sum += v;
        if (v > hi) {
          hi = v;
          ahi = r;
          hits_hi = 1;
        } else if (v == hi) {
          ++hits_hi;
        }
        if (v < lo) {
          lo = v;
          alo = r;
          hits_lo = 1;
        } else if (v == lo) {
          ++hits_lo;
        }
      }
      detail::note_tie(tape, hi, hits_hi);
      detail::note_tie(tape, lo, hits_lo);
      out.at(g, j) = hi;
      out.at(g, c + j) = lo;
      out.at(g, 2 * c + j) = sum / S(e - s);
      (*argmax)[size_t(g) * c + size_t(j)] = ahi;
      (*argmin)[size_t(g) * c + size_t(j)] = alo;
    }
  }
  TracedMat<S> r = trace(tape, std::move(out));
  if (tape && feats.id >= 0) {
    auto starts = std::make_shared<std::vector<int32_t>>(std::move(group_start));
    int in_id = feats.id, out_id = r.id;
    tape->record([argmax, argmin, starts, in_id, out_id, c](Tape<S>& tp) {
      const Matrix<S>& go = tp.grad(out_id);
      Matrix<S>& gi = tp.grad(in_id);
      for (int g = 0; g < go.rows; ++g) {
        int s = (*starts)[size_t(g)], e = (*starts)[size_t(g) + 1];
        for (int j = 0; j < c; ++j) {
          gi.at((*argmax)[size_t(g) * c + size_t(j)], j) += go.at(g, j);
          gi.at((*argmin)[size_t(g) * c + size_t(j)], j) += go.at(g, c + j);
          S share = go.at(g, 2 * c + j) / S(e - s);
          for (int r = s; r < e; ++r) gi.at(r, j) += share;
        }
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Encoders

template <class S>
inline TracedSt<S> group_tensor(const VoxelBatch<S>& vb,
                                const TracedMat<S>& pooled) {
  auto cm = make_coord_map(vb.rank, vb.shape, vb.batch_size, vb.cells);
  require(pooled.rows() == cm->n(), Err::ShapeMismatch,
          "pooled rows differ from group count");
  return TracedSt<S>{cm, pooled};
}

// Max-pooled pillar features over occupied (b, y, x) cells.
template <class S>
inline TracedSt<S> baseline_pillar_encode(Tape<S>* tape,
                                          const std::vector<PointCloud<S>>& clouds,
                                          const GridConfig& g,
                                          MlpParams<S>& mlp, NormMode mode,
                                          uint64_t seed) {
  VoxelBatch<S> vb = voxelize(clouds, g, 2, seed);
  vb = augment_point_features(vb, g);
  auto pm = point_mlp(tape, constant(vb.feats), mlp, mode);
  auto pooled = pool_max_groups(tape, pm, vb.group_start);
  return group_tensor(vb, pooled);
}

// Parameters of the vertical-collapse step: a (1,1,D) spatially sparse
// convolution over each occupied column, then batchnorm and relu.
template <class S>
struct ColumnCollapseParams {
  KernelSpec spec;
  ConvParams<S> conv;
  NormParams<S> norm;
};

template <class S>
inline ColumnCollapseParams<S> init_column_collapse(int depth, int c_in,
                                                    int c_out, uint64_t seed) {
  ColumnCollapseParams<S> p;
  p.spec = column_collapse_spec(depth);
  p.conv = init_conv_params<S>(p.spec, c_in, c_out, seed);
  p.norm = init_norm_params<S>(c_out);
  return p;
}

// Rank-3 tensor of pooled voxel features -> rank-2 pillar tensor.
template <class S>
inline TracedSt<S> collapse_to_pillars(Tape<S>* tape, const TracedSt<S>& vox,
                                       ColumnCollapseParams<S>& p,
                                       NormMode mode) {
  require(vox.cm->rank == 3, Err::ConfigMismatch,
          "column collapse expects a rank-3 tensor");
  require(p.spec.kernel == std::array<int, 3>{1, 1, vox.cm->shape[2]} &&
              p.spec.stride == std::array<int, 3>{1, 1, vox.cm->shape[2]} &&
              p.spec.padding == std::array<int, 3>{0, 0, 0},
          Err::ConfigMismatch,
          "column kernel must span exactly the grid's vertical extent");
  auto rb = build_rulebook(vox.cm, p.spec);
  auto h = conv_forward(tape, vox, rb, p.conv);
  h = batchnorm_forward(tape, h, p.norm, mode);
  h = relu(tape, h);
  // Every z coordinate is now 0; reinterpret as rank 2 without touching the
  // feature rows (identity for gradients).
  std::vector<Coord> coords = h.cm->coords;
  auto cm = make_coord_map(2, {h.cm->shape[0], h.cm->shape[1], 1},
                           h.cm->batch_size, std::move(coords));
  return TracedSt<S>{cm, h.feats};
}

template <class S>
inline TracedSt<S> voxel2pillar_encode(Tape<S>* tape,
                                       const std::vector<PointCloud<S>>& clouds,
                                       const GridConfig& g, MlpParams<S>& mlp,
                                       ColumnCollapseParams<S>& col,
                                       NormMode mode, uint64_t seed) {
  require(col.spec.kernel[2] == g.D(), Err::ConfigMismatch,
          "column kernel depth differs from the grid's vertical cell count");
  VoxelBatch<S> vb = voxelize(clouds, g, 3, seed);
  vb = augment_point_features(vb, g);
  auto pm = point_mlp(tape, constant(vb.feats), mlp, mode);
  auto pooled = pool_mmm_groups(tape, pm, vb.group_start);
  auto vox = group_tensor(vb, pooled);
  if (vox.n() == 0) {
    // Empty cloud: emit the empty pillar tensor directly.
    auto cm = make_coord_map(2, {g.H(), g.W(), 1}, vb.batch_size, {});
    return TracedSt<S>{cm, trace(tape, Matrix<S>(0, col.conv.c_out))};
  }
  return collapse_to_pillars(tape, vox, col, mode);
}

}  // namespace pnx
