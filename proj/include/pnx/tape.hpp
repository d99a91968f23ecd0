#pragma once
// Reverse-mode tape. Forward ops register one closure per recorded step;
// backward replays the closures in reverse order exactly once, accumulating
// into per-value gradient slots and into Param::g buffers.

#include <functional>
#include <memory>

#include "pnx/core.hpp"
#include "pnx/sparse.hpp"

namespace pnx {

// A learnable (or tracked) tensor. Backward closures hold raw pointers to
// Params, so the owning model must outlive the tape.
template <class S>
struct Param {
  Matrix<S> v;
  Matrix<S> g;

  Param() = default;
  Param(int rows, int cols) : v(rows, cols), g(rows, cols) {}

  void zero_grad() { g.zero(); }
  int rows() const { return v.rows; }
  int cols() const { return v.cols; }
};

template <class S>
class Tape {
 public:
  // Reserves a gradient slot for a value of the given shape.
  int alloc(int rows, int cols) {
    slots_.push_back(Slot{rows, cols, {}});
    return int(slots_.size()) - 1;
  }

  Matrix<S>& grad(int id) {
    Slot& s = slots_.at(size_t(id));
    if (s.g.rows == 0 && (s.rows != 0 || s.cols != 0))
      s.g = Matrix<S>(s.rows, s.cols);
    return s.g;
  }

  void record(std::function<void(Tape&)> fn) { ops_.push_back(std::move(fn)); }

  // Seeds d(loss)/d(loss) = 1 and replays the tape once, newest op first.
  void backward(int loss_id) {
    Matrix<S>& seed = grad(loss_id);
    require(seed.rows == 1 && seed.cols == 1, Err::ShapeMismatch,
            "backward seed must be a scalar");
    seed.at(0, 0) = S(1);
    for (size_t i = ops_.size(); i-- > 0;) ops_[i](*this);
  }

  size_t num_ops() const { return ops_.size(); }

  // Pooling max/min ties observed during forward; gradient checks resample
  // when nonzero because the loss is not differentiable there.
  int nondiff_ties = 0;

 private:
  struct Slot {
    int rows = 0, cols = 0;
    Matrix<S> g;
  };
  std::vector<Slot> slots_;
  std::vector<std::function<void(Tape&)>> ops_;
};

// Traced feature matrix: the value plus its tape slot (id < 0 = constant,
// gradients are not propagated into it).
template <class S>
struct TracedMat {
  std::shared_ptr<const Matrix<S>> m;
  int id = -1;

  const Matrix<S>& val() const { return *m; }
  int rows() const { return m->rows; }
  int cols() const { return m->cols; }
};

template <class S>
inline TracedMat<S> trace(Tape<S>* tape, Matrix<S> m) {
  TracedMat<S> t;
  t.m = std::make_shared<const Matrix<S>>(std::move(m));
  t.id = tape ? tape->alloc(t.m->rows, t.m->cols) : -1;
  return t;
}

template <class S>
inline TracedMat<S> constant(Matrix<S> m) {
  return TracedMat<S>{std::make_shared<const Matrix<S>>(std::move(m)), -1};
}

// Traced sparse tensor: coordinate map + traced features.
template <class S>
struct TracedSt {
  CoordMapPtr cm;
  TracedMat<S> feats;

  int n() const { return cm ? cm->n() : 0; }
  int channels() const { return feats.m ? feats.m->cols : 0; }

  SparseTensor<S> tensor() const { return SparseTensor<S>{cm, feats.val()}; }
};

template <class S>
inline TracedSt<S> trace_st(Tape<S>* tape, const SparseTensor<S>& t) {
  return TracedSt<S>{t.cm, trace(tape, t.feats)};
}

// ---------------------------------------------------------------------------
// Elementary traced ops

// out = a + b, rows aligned (same coordinate map expected by callers).
template <class S>
inline TracedMat<S> add(Tape<S>* tape, const TracedMat<S>& a,
                        const TracedMat<S>& b) {
  require(a.val().same_shape(b.val()), Err::ShapeMismatch,
          "add: operand shapes differ");
  Matrix<S> out = a.val();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.val().data[i];
  TracedMat<S> r = trace(tape, std::move(out));
  if (tape) {
    int aid = a.id, bid = b.id, rid = r.id;
    tape->record([aid, bid, rid](Tape<S>& tp) {
      const Matrix<S>& go = tp.grad(rid);
      if (aid >= 0) {
        Matrix<S>& ga = tp.grad(aid);
        for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
      }
      if (bid >= 0) {
        Matrix<S>& gb = tp.grad(bid);
        for (size_t i = 0; i < go.data.size(); ++i) gb.data[i] += go.data[i];
      }
    });
  }
  return r;
}

template <class S>
inline TracedSt<S> add(Tape<S>* tape, const TracedSt<S>& a,
                       const TracedSt<S>& b) {
  require(a.cm == b.cm, Err::ShapeMismatch,
          "add: sparse operands must share one coordinate map");
  return TracedSt<S>{a.cm, add(tape, a.feats, b.feats)};
}

// out = A * W.v  (linear layer, no bias)
template <class S>
inline TracedMat<S> matmul(Tape<S>* tape, const TracedMat<S>& a, Param<S>& w) {
  const Matrix<S>& A = a.val();
  require(A.cols == w.v.rows, Err::ChannelMismatch,
          "matmul: inner dimensions differ");
  Matrix<S> out(A.rows, w.v.cols);
  for (int i = 0; i < A.rows; ++i) {
    const S* ai = A.row(i);
    S* oi = out.row(i);
    for (int k = 0; k < A.cols; ++k) {
      S av = ai[k];
      const S* wk = w.v.row(k);
      for (int j = 0; j < w.v.cols; ++j) oi[j] += av * wk[j];
    }
  }
  TracedMat<S> r = trace(tape, std::move(out));
  if (tape) {
    auto a_m = a.m;
    Param<S>* wp = &w;
    int aid = a.id, rid = r.id;
    tape->record([a_m, wp, aid, rid](Tape<S>& tp) {
      const Matrix<S>& go = tp.grad(rid);
      // dW += A^T * go
      for (int i = 0; i < a_m->rows; ++i) {
        const S* ai = a_m->row(i);
        const S* gi = go.row(i);
        for (int k = 0; k < a_m->cols; ++k) {
          S av = ai[k];
          S* gw = wp->g.row(k);
          for (int j = 0; j < go.cols; ++j) gw[j] += av * gi[j];
        }
      }
      if (aid >= 0) {
        // dA += go * W^T
        Matrix<S>& ga = tp.grad(aid);
        for (int i = 0; i < a_m->rows; ++i) {
          const S* gi = go.row(i);
          S* gai = ga.row(i);
          for (int k = 0; k < a_m->cols; ++k) {
            const S* wk = wp->v.row(k);
            S acc = S(0);
            for (int j = 0; j < go.cols; ++j) acc += gi[j] * wk[j];
            gai[k] += acc;
          }
        }
      }
    });
  }
  return r;
}

// Scalar reduction sum_ij weights_ij * a_ij. Fixed random weights make this
// a full-coverage probe for finite-difference checks.
template <class S>
struct TracedScalar {
  S value = S(0);
  int id = -1;
};

template <class S>
inline TracedScalar<S> weighted_sum(Tape<S>* tape, const TracedMat<S>& a,
                                    std::shared_ptr<const Matrix<S>> weights) {
  require(a.val().same_shape(*weights), Err::ShapeMismatch,
          "weighted_sum: weight shape differs");
  S acc = S(0);
  for (size_t i = 0; i < a.val().data.size(); ++i)
    acc += a.val().data[i] * weights->data[i];
  TracedScalar<S> r;
  r.value = acc;
  if (tape) {
    r.id = tape->alloc(1, 1);
    int aid = a.id, rid = r.id;
    tape->record([aid, rid, weights](Tape<S>& tp) {
      if (aid < 0) return;
      S go = tp.grad(rid).at(0, 0);
      Matrix<S>& ga = tp.grad(aid);
      for (size_t i = 0; i < weights->data.size(); ++i)
        ga.data[i] += go * weights->data[i];
    });
  }
  return r;
}

template <class S>
inline TracedScalar<S> scalar_add(Tape<S>* tape, const TracedScalar<S>& a,
                                  const TracedScalar<S>& b) {
  TracedScalar<S> r;
  r.value = a.value + b.value;
  if (tape) {
    r.id = tape->alloc(1, 1);
    int aid = a.id, bid = b.id, rid = r.id;
    tape->record([aid, bid, rid](Tape<S>& tp) {
      S go = tp.grad(rid).at(0, 0);
      if (aid >= 0) tp.grad(aid).at(0, 0) += go;
      if (bid >= 0) tp.grad(bid).at(0, 0) += go;
    });
  }
  return r;
}

}  // namespace pnx
