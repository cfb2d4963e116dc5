#pragma once

// Differentiable operations. Every op follows the same pattern: validate
// shapes, compute the forward value, and, if at least one input is tracked on
// the tape, record a backward rule that routes the output gradient into the
// tracked inputs. Untracked inputs are constants; an op whose inputs are all
// untracked records nothing, so forward passes through frozen networks leave
// no trace on the tape.
//
// Conventions:
//   - conv1d/conv2d compute cross-correlation (no kernel flip).
//   - spatial output dims follow floor((n + 2*pad - k) / stride) + 1.
//   - max_pool2d uses no padding and drops trailing partial windows; ties
//     resolve to the first (lowest index) maximum.
//   - tanh_act clamps its output to the open interval (-1, 1) by one ulp;
//     std::tanh alone rounds to +-1.0 for saturated inputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "aver/errors.hpp"
#include "aver/tape.hpp"
#include "aver/tensor.hpp"

namespace aver {

enum class Phase { kTrain, kEval };

namespace detail {

inline std::size_t tail_product(const std::vector<int>& shape, std::size_t from) {
  std::size_t n = 1;
  for (std::size_t i = from; i < shape.size(); ++i) n *= static_cast<std::size_t>(shape[i]);
  return n;
}

inline int conv_out_dim(int n, int k, int stride, int pad) {
  return (n + 2 * pad - k) / stride + 1;
}

template <typename T>
using Buf = std::shared_ptr<const std::vector<T>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops and reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()));
  const NodeId na = tape.node_on(a), nb = tape.node_on(b);
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] + b.data()[i];
  TensorT<T> out(a.shape(), std::move(y));
  if (na == kNoNode && nb == kNoNode) return out;
  return tape.emit(std::move(out), {na, nb}, [na, nb](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    t.accumulate(na, go);
    t.accumulate(nb, go);
  });
}

template <typename T>
TensorT<T> sub(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()));
  const NodeId na = tape.node_on(a), nb = tape.node_on(b);
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] - b.data()[i];
  TensorT<T> out(a.shape(), std::move(y));
  if (na == kNoNode && nb == kNoNode) return out;
  return tape.emit(std::move(out), {na, nb}, [na, nb](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    t.accumulate(na, go);
    if (nb != kNoNode) {
      std::vector<T> gb(go.size());
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] = -go[i];
      t.accumulate(nb, gb);
    }
  });
}

template <typename T>
TensorT<T> mul(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()));
  const NodeId na = tape.node_on(a), nb = tape.node_on(b);
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * b.data()[i];
  TensorT<T> out(a.shape(), std::move(y));
  if (na == kNoNode && nb == kNoNode) return out;
  auto da = a.data_ptr();
  auto db = b.data_ptr();
  return tape.emit(std::move(out), {na, nb}, [na, nb, da, db](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    if (na != kNoNode) {
      std::vector<T> g(go.size());
      for (std::size_t i = 0; i < go.size(); ++i) g[i] = go[i] * (*db)[i];
      t.accumulate(na, g);
    }
    if (nb != kNoNode) {
      std::vector<T> g(go.size());
      for (std::size_t i = 0; i < go.size(); ++i) g[i] = go[i] * (*da)[i];
      t.accumulate(nb, g);
    }
  });
}

template <typename T>
TensorT<T> scale(TapeT<T>& tape, const TensorT<T>& a, T c) {
  const NodeId na = tape.node_on(a);
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = c * a.data()[i];
  TensorT<T> out(a.shape(), std::move(y));
  if (na == kNoNode) return out;
  return tape.emit(std::move(out), {na}, [na, c](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    std::vector<T> g(go.size());
    for (std::size_t i = 0; i < go.size(); ++i) g[i] = c * go[i];
    t.accumulate(na, g);
  });
}

template <typename T>
TensorT<T> sum_all(TapeT<T>& tape, const TensorT<T>& a) {
  const NodeId na = tape.node_on(a);
  T s = 0;
  for (T v : a.data()) s += v;
  TensorT<T> out = TensorT<T>::scalar(s);
  if (na == kNoNode) return out;
  const std::size_t n = a.numel();
  return tape.emit(std::move(out), {na}, [na, n](TapeT<T>& t, NodeId self) {
    const T go = t.grad_of(self)[0];
    std::vector<T> g(n, go);
    t.accumulate(na, g);
  });
}

template <typename T>
TensorT<T> mean_all(TapeT<T>& tape, const TensorT<T>& a) {
  const NodeId na = tape.node_on(a);
  T s = 0;
  for (T v : a.data()) s += v;
  const std::size_t n = a.numel();
  TensorT<T> out = TensorT<T>::scalar(s / static_cast<T>(n));
  if (na == kNoNode) return out;
  return tape.emit(std::move(out), {na}, [na, n](TapeT<T>& t, NodeId self) {
    const T go = t.grad_of(self)[0] / static_cast<T>(n);
    std::vector<T> g(n, go);
    t.accumulate(na, g);
  });
}

template <typename T>
TensorT<T> relu(TapeT<T>& tape, const TensorT<T>& a) {
  const NodeId na = tape.node_on(a);
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  TensorT<T> out(a.shape(), std::move(y));
  if (na == kNoNode) return out;
  auto da = a.data_ptr();
  return tape.emit(std::move(out), {na}, [na, da](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    std::vector<T> g(go.size());
    for (std::size_t i = 0; i < go.size(); ++i) g[i] = (*da)[i] > T(0) ? go[i] : T(0);
    t.accumulate(na, g);
  });
}

template <typename T>
TensorT<T> tanh_act(TapeT<T>& tape, const TensorT<T>& a) {
  const NodeId na = tape.node_on(a);
  const T hi = std::nextafter(T(1), T(0));
  const T lo = -hi;
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = std::clamp(std::tanh(a.data()[i]), lo, hi);
  }
  TensorT<T> out(a.shape(), std::move(y));
  auto dy = out.data_ptr();
  if (na == kNoNode) return out;
  return tape.emit(std::move(out), {na}, [na, dy](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    std::vector<T> g(go.size());
    for (std::size_t i = 0; i < go.size(); ++i) {
      const T v = (*dy)[i];
      g[i] = go[i] * (T(1) - v * v);
    }
    t.accumulate(na, g);
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> reshape(TapeT<T>& tape, const TensorT<T>& a, std::vector<int> shape) {
  require(numel_of(shape) == a.numel(), "reshape: ", shape_str(a.shape()), " -> ",
          shape_str(shape), " changes element count");
  const NodeId na = tape.node_on(a);
  TensorT<T> out(std::move(shape), a.data());
  if (na == kNoNode) return out;
  return tape.emit(std::move(out), {na}, [na](TapeT<T>& t, NodeId self) {
    t.accumulate(na, t.grad_of(self));
  });
}

// [A, X, Y] -> [A, Y, X]
template <typename T>
TensorT<T> transpose_12(TapeT<T>& tape, const TensorT<T>& a) {
  require(a.rank() == 3, "transpose_12 expects a rank-3 tensor, got ", shape_str(a.shape()));
  const int A = a.dim(0), X = a.dim(1), Y = a.dim(2);
  const NodeId na = tape.node_on(a);
  std::vector<T> y(a.numel());
  const T* src = a.data().data();
  for (int n = 0; n < A; ++n) {
    for (int i = 0; i < X; ++i) {
      for (int j = 0; j < Y; ++j) {
        y[(static_cast<std::size_t>(n) * Y + j) * X + i] =
            src[(static_cast<std::size_t>(n) * X + i) * Y + j];
      }
    }
  }
  TensorT<T> out({A, Y, X}, std::move(y));
  if (na == kNoNode) return out;
  return tape.emit(std::move(out), {na}, [na, A, X, Y](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    std::vector<T> g(go.size());
    for (int n = 0; n < A; ++n) {
      for (int i = 0; i < X; ++i) {
        for (int j = 0; j < Y; ++j) {
          g[(static_cast<std::size_t>(n) * X + i) * Y + j] =
              go[(static_cast<std::size_t>(n) * Y + j) * X + i];
        }
      }
    }
    t.accumulate(na, g);
  });
}

template <typename T>
TensorT<T> concat(TapeT<T>& tape, const std::vector<TensorT<T>>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  const int rank = parts[0].rank();
  require(axis >= 0 && axis < rank, "concat: axis ", axis, " out of range for rank ", rank);
  std::vector<int> out_shape = parts[0].shape();
  int axis_total = 0;
  for (const TensorT<T>& p : parts) {
    require(p.rank() == rank, "concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d == axis) continue;
      require(p.shape()[static_cast<std::size_t>(d)] == out_shape[static_cast<std::size_t>(d)],
              "concat: dim ", d, " mismatch ", shape_str(p.shape()), " vs ",
              shape_str(parts[0].shape()));
    }
    axis_total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = axis_total;

  const std::size_t outer = detail::tail_product(out_shape, 0) /
                            detail::tail_product(out_shape, static_cast<std::size_t>(axis));
  const std::size_t inner = detail::tail_product(out_shape, static_cast<std::size_t>(axis) + 1);

  std::vector<T> y(numel_of(out_shape));
  std::vector<NodeId> ids;
  std::vector<int> axis_dims;
  bool tracked = false;
  for (const TensorT<T>& p : parts) {
    const NodeId id = tape.node_on(p);
    ids.push_back(id);
    axis_dims.push_back(p.dim(axis));
    if (id != kNoNode) tracked = true;
  }
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const std::size_t block = static_cast<std::size_t>(axis_dims[pi]) * inner;
    const T* src = parts[pi].data().data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(src + o * block, src + (o + 1) * block,
                y.begin() + static_cast<std::ptrdiff_t>(o * static_cast<std::size_t>(axis_total) * inner + offset));
    }
    offset += block;
  }
  TensorT<T> out(out_shape, std::move(y));
  if (!tracked) return out;
  const std::size_t total_block = static_cast<std::size_t>(axis_total) * inner;
  return tape.emit(std::move(out), ids,
                   [ids, axis_dims, outer, inner, total_block](TapeT<T>& t, NodeId self) {
                     const std::vector<T>& go = t.grad_of(self);
                     std::size_t offset = 0;
                     for (std::size_t pi = 0; pi < ids.size(); ++pi) {
                       const std::size_t block = static_cast<std::size_t>(axis_dims[pi]) * inner;
                       if (ids[pi] != kNoNode) {
                         std::vector<T> g(block * outer);
                         for (std::size_t o = 0; o < outer; ++o) {
                           std::copy(go.begin() + static_cast<std::ptrdiff_t>(o * total_block + offset),
                                     go.begin() + static_cast<std::ptrdiff_t>(o * total_block + offset + block),
                                     g.begin() + static_cast<std::ptrdiff_t>(o * block));
                         }
                         t.accumulate(ids[pi], g);
                       }
                       offset += block;
                     }
                   });
}

// Rows [r0, r1) of a tensor whose first axis indexes rows.
template <typename T>
TensorT<T> slice_rows(TapeT<T>& tape, const TensorT<T>& a, int r0, int r1) {
  require(a.rank() >= 1, "slice_rows expects rank >= 1");
  const int R = a.dim(0);
  require(0 <= r0 && r0 < r1 && r1 <= R, "slice_rows: range [", r0, ",", r1,
          ") invalid for ", R, " rows");
  const std::size_t inner = detail::tail_product(a.shape(), 1);
  std::vector<int> out_shape = a.shape();
  out_shape[0] = r1 - r0;
  std::vector<T> y(a.data().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(r0) * inner),
                   a.data().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(r1) * inner));
  const NodeId na = tape.node_on(a);
  TensorT<T> out(std::move(out_shape), std::move(y));
  if (na == kNoNode) return out;
  const std::size_t full = a.numel();
  return tape.emit(std::move(out), {na}, [na, r0, inner, full](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    std::vector<T> g(full, T(0));
    std::copy(go.begin(), go.end(),
              g.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(r0) * inner));
    t.accumulate(na, g);
  });
}

// [B, T, H] -> [B, H], the last time step.
template <typename T>
TensorT<T> take_last_step(TapeT<T>& tape, const TensorT<T>& a) {
  require(a.rank() == 3, "take_last_step expects [B,T,H], got ", shape_str(a.shape()));
  const int B = a.dim(0), Tn = a.dim(1), H = a.dim(2);
  const NodeId na = tape.node_on(a);
  std::vector<T> y(static_cast<std::size_t>(B) * H);
  for (int b = 0; b < B; ++b) {
    const T* src = a.data().data() + (static_cast<std::size_t>(b) * Tn + (Tn - 1)) * H;
    std::copy(src, src + H, y.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(b) * H));
  }
  TensorT<T> out({B, H}, std::move(y));
  if (na == kNoNode) return out;
  return tape.emit(std::move(out), {na}, [na, B, Tn, H](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    std::vector<T> g(static_cast<std::size_t>(B) * Tn * H, T(0));
    for (int b = 0; b < B; ++b) {
      std::copy(go.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(b) * H),
                go.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(b + 1) * H),
                g.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(b) * Tn + (Tn - 1)) * H));
    }
    t.accumulate(na, g);
  });
}

// [B, C] -> [B], one column.
template <typename T>
TensorT<T> select_column(TapeT<T>& tape, const TensorT<T>& a, int col) {
  require(a.rank() == 2, "select_column expects [B,C], got ", shape_str(a.shape()));
  const int B = a.dim(0), C = a.dim(1);
  require(col >= 0 && col < C, "select_column: column ", col, " out of range for ", C);
  const NodeId na = tape.node_on(a);
  std::vector<T> y(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) y[static_cast<std::size_t>(b)] = a.data()[static_cast<std::size_t>(b) * C + col];
  TensorT<T> out({B}, std::move(y));
  if (na == kNoNode) return out;
  return tape.emit(std::move(out), {na}, [na, B, C, col](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    std::vector<T> g(static_cast<std::size_t>(B) * C, T(0));
    for (int b = 0; b < B; ++b) g[static_cast<std::size_t>(b) * C + col] = go[static_cast<std::size_t>(b)];
    t.accumulate(na, g);
  });
}

// ---------------------------------------------------------------------------
// dense layer
// ---------------------------------------------------------------------------

// y[B,O] = x[B,I] . w[I,O] + b[O]
template <typename T>
TensorT<T> dense(TapeT<T>& tape, const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  require(x.rank() == 2, "dense: x must be [B,I], got ", shape_str(x.shape()));
  require(w.rank() == 2, "dense: w must be [I,O], got ", shape_str(w.shape()));
  require(x.dim(1) == w.dim(0), "dense: inner dims differ, x axis 1 is ", x.dim(1),
          " but w axis 0 is ", w.dim(0));
  require(b.rank() == 1 && b.dim(0) == w.dim(1), "dense: b must be [", w.dim(1), "], got ",
          shape_str(b.shape()));
  const int B = x.dim(0), I = x.dim(1), O = w.dim(1);
  const NodeId nx = tape.node_on(x), nw = tape.node_on(w), nb = tape.node_on(b);

  std::vector<T> y(static_cast<std::size_t>(B) * O);
  {
    const T* xd = x.data().data();
    const T* wd = w.data().data();
    const T* bd = b.data().data();
    for (int r = 0; r < B; ++r) {
      T* yr = y.data() + static_cast<std::size_t>(r) * O;
      std::copy(bd, bd + O, yr);
      const T* xr = xd + static_cast<std::size_t>(r) * I;
      for (int i = 0; i < I; ++i) {
        const T xv = xr[i];
        const T* wr = wd + static_cast<std::size_t>(i) * O;
        for (int o = 0; o < O; ++o) yr[o] += xv * wr[o];
      }
    }
  }
  TensorT<T> out({B, O}, std::move(y));
  if (nx == kNoNode && nw == kNoNode && nb == kNoNode) return out;

  auto xd = x.data_ptr();
  auto wd = w.data_ptr();
  return tape.emit(std::move(out), {nx, nw, nb}, [=](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    if (nx != kNoNode) {
      std::vector<T> gx(static_cast<std::size_t>(B) * I, T(0));
      for (int r = 0; r < B; ++r) {
        const T* gr = go.data() + static_cast<std::size_t>(r) * O;
        T* gxr = gx.data() + static_cast<std::size_t>(r) * I;
        for (int i = 0; i < I; ++i) {
          const T* wr = wd->data() + static_cast<std::size_t>(i) * O;
          T acc = 0;
          for (int o = 0; o < O; ++o) acc += gr[o] * wr[o];
          gxr[i] = acc;
        }
      }
      t.accumulate(nx, gx);
    }
    if (nw != kNoNode) {
      std::vector<T> gw(static_cast<std::size_t>(I) * O, T(0));
      for (int r = 0; r < B; ++r) {
        const T* xr = xd->data() + static_cast<std::size_t>(r) * I;
        const T* gr = go.data() + static_cast<std::size_t>(r) * O;
        for (int i = 0; i < I; ++i) {
          const T xv = xr[i];
          T* gwr = gw.data() + static_cast<std::size_t>(i) * O;
          for (int o = 0; o < O; ++o) gwr[o] += xv * gr[o];
        }
      }
      t.accumulate(nw, gw);
    }
    if (nb != kNoNode) {
      std::vector<T> gb(static_cast<std::size_t>(O), T(0));
      for (int r = 0; r < B; ++r) {
        const T* gr = go.data() + static_cast<std::size_t>(r) * O;
        for (int o = 0; o < O; ++o) gb[static_cast<std::size_t>(o)] += gr[o];
      }
      t.accumulate(nb, gb);
    }
  });
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
  int B, C, H, W;        // input
  int F, kh, kw;         // kernel
  int stride, pad_h, pad_w;
  int Ho, Wo;            // output
  int Hp, Wp;            // padded input
};

template <typename T>
void pad_sample(const T* x, T* xp, const ConvDims& d) {
  std::fill(xp, xp + static_cast<std::size_t>(d.C) * d.Hp * d.Wp, T(0));
  for (int c = 0; c < d.C; ++c) {
    for (int h = 0; h < d.H; ++h) {
      const T* src = x + (static_cast<std::size_t>(c) * d.H + h) * d.W;
      T* dst = xp + (static_cast<std::size_t>(c) * d.Hp + (h + d.pad_h)) * d.Wp + d.pad_w;
      std::copy(src, src + d.W, dst);
    }
  }
}

template <typename T>
void conv_forward_raw(const T* x, const T* k, T* y, const ConvDims& d) {
  std::vector<T> padded;
  const bool needs_pad = d.pad_h > 0 || d.pad_w > 0;
  if (needs_pad) padded.resize(static_cast<std::size_t>(d.C) * d.Hp * d.Wp);
  for (int b = 0; b < d.B; ++b) {
    const T* xb = x + static_cast<std::size_t>(b) * d.C * d.H * d.W;
    const T* xp = xb;
    if (needs_pad) {
      pad_sample(xb, padded.data(), d);
      xp = padded.data();
    }
    for (int f = 0; f < d.F; ++f) {
      T* yp = y + (static_cast<std::size_t>(b) * d.F + f) * d.Ho * d.Wo;
      std::fill(yp, yp + static_cast<std::size_t>(d.Ho) * d.Wo, T(0));
      for (int c = 0; c < d.C; ++c) {
        for (int i = 0; i < d.kh; ++i) {
          for (int j = 0; j < d.kw; ++j) {
            const T wv = k[((static_cast<std::size_t>(f) * d.C + c) * d.kh + i) * d.kw + j];
            for (int ho = 0; ho < d.Ho; ++ho) {
              const T* xr = xp + (static_cast<std::size_t>(c) * d.Hp + (ho * d.stride + i)) * d.Wp + j;
              T* yr = yp + static_cast<std::size_t>(ho) * d.Wo;
              if (d.stride == 1) {
                for (int wo = 0; wo < d.Wo; ++wo) yr[wo] += wv * xr[wo];
              } else {
                for (int wo = 0; wo < d.Wo; ++wo) yr[wo] += wv * xr[wo * d.stride];
              }
            }
          }
        }
      }
    }
  }
}

// gx and gk may be null; either is accumulated into when present.
template <typename T>
void conv_backward_raw(const T* x, const T* k, const T* gy, T* gx, T* gk, const ConvDims& d) {
  std::vector<T> padded(static_cast<std::size_t>(d.C) * d.Hp * d.Wp);
  std::vector<T> gpadded;
  if (gx) gpadded.resize(padded.size());
  for (int b = 0; b < d.B; ++b) {
    const T* xb = x + static_cast<std::size_t>(b) * d.C * d.H * d.W;
    pad_sample(xb, padded.data(), d);
    if (gx) std::fill(gpadded.begin(), gpadded.end(), T(0));
    for (int f = 0; f < d.F; ++f) {
      const T* gyp = gy + (static_cast<std::size_t>(b) * d.F + f) * d.Ho * d.Wo;
      for (int c = 0; c < d.C; ++c) {
        for (int i = 0; i < d.kh; ++i) {
          for (int j = 0; j < d.kw; ++j) {
            const std::size_t kidx = ((static_cast<std::size_t>(f) * d.C + c) * d.kh + i) * d.kw + j;
            const T wv = k[kidx];
            T acc = 0;
            for (int ho = 0; ho < d.Ho; ++ho) {
              const std::size_t row = (static_cast<std::size_t>(c) * d.Hp + (ho * d.stride + i)) * d.Wp + j;
              const T* gr = gyp + static_cast<std::size_t>(ho) * d.Wo;
              const T* xr = padded.data() + row;
              T* gxr = gx ? gpadded.data() + row : nullptr;
              if (d.stride == 1) {
                for (int wo = 0; wo < d.Wo; ++wo) acc += gr[wo] * xr[wo];
                if (gx) {
                  for (int wo = 0; wo < d.Wo; ++wo) gxr[wo] += wv * gr[wo];
                }
              } else {
                for (int wo = 0; wo < d.Wo; ++wo) acc += gr[wo] * xr[wo * d.stride];
                if (gx) {
                  for (int wo = 0; wo < d.Wo; ++wo) gxr[wo * d.stride] += wv * gr[wo];
                }
              }
            }
            if (gk) gk[kidx] += acc;
          }
        }
      }
    }
    if (gx) {
      T* gxb = gx + static_cast<std::size_t>(b) * d.C * d.H * d.W;
      for (int c = 0; c < d.C; ++c) {
        for (int h = 0; h < d.H; ++h) {
          const T* src = gpadded.data() + (static_cast<std::size_t>(c) * d.Hp + (h + d.pad_h)) * d.Wp + d.pad_w;
          T* dst = gxb + (static_cast<std::size_t>(c) * d.H + h) * d.W;
          for (int w = 0; w < d.W; ++w) dst[w] += src[w];
        }
      }
    }
  }
}

template <typename T>
TensorT<T> conv_common(TapeT<T>& tape, const TensorT<T>& x, const TensorT<T>& k,
                       const ConvDims& dims, std::vector<int> out_shape) {
  const NodeId nx = tape.node_on(x), nk = tape.node_on(k);
  std::vector<T> y(numel_of(out_shape));
  conv_forward_raw(x.data().data(), k.data().data(), y.data(), dims);
  TensorT<T> out(std::move(out_shape), std::move(y));
  if (nx == kNoNode && nk == kNoNode) return out;
  auto xd = x.data_ptr();
  auto kd = k.data_ptr();
  const std::size_t x_numel = x.numel();
  const std::size_t k_numel = k.numel();
  return tape.emit(std::move(out), {nx, nk}, [=](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    std::vector<T> gx, gk;
    if (nx != kNoNode) gx.assign(x_numel, T(0));
    if (nk != kNoNode) gk.assign(k_numel, T(0));
    conv_backward_raw(xd->data(), kd->data(), go.data(), nx != kNoNode ? gx.data() : nullptr,
                      nk != kNoNode ? gk.data() : nullptr, dims);
    if (nx != kNoNode) t.accumulate(nx, gx);
    if (nk != kNoNode) t.accumulate(nk, gk);
  });
}

}  // namespace detail

// x[B,C,H,W] (*) k[F,C,kh,kw] -> y[B,F,Ho,Wo]
template <typename T>
TensorT<T> conv2d(TapeT<T>& tape, const TensorT<T>& x, const TensorT<T>& k, int stride, int padding) {
  require(x.rank() == 4, "conv2d: x must be [B,C,H,W], got ", shape_str(x.shape()));
  require(k.rank() == 4, "conv2d: kernel must be [F,C,kh,kw], got ", shape_str(k.shape()));
  require(x.dim(1) == k.dim(1), "conv2d: channel mismatch, x axis 1 is ", x.dim(1),
          " but kernel axis 1 is ", k.dim(1));
  require(stride >= 1, "conv2d: stride must be >= 1, got ", stride);
  require(padding >= 0, "conv2d: padding must be >= 0, got ", padding);
  detail::ConvDims d;
  d.B = x.dim(0); d.C = x.dim(1); d.H = x.dim(2); d.W = x.dim(3);
  d.F = k.dim(0); d.kh = k.dim(2); d.kw = k.dim(3);
  d.stride = stride; d.pad_h = padding; d.pad_w = padding;
  d.Hp = d.H + 2 * padding; d.Wp = d.W + 2 * padding;
  require(d.kh <= d.Hp && d.kw <= d.Wp, "conv2d: kernel ", d.kh, "x", d.kw,
          " exceeds padded input ", d.Hp, "x", d.Wp);
  d.Ho = detail::conv_out_dim(d.H, d.kh, stride, padding);
  d.Wo = detail::conv_out_dim(d.W, d.kw, stride, padding);
  return detail::conv_common(tape, x, k, d, {d.B, d.F, d.Ho, d.Wo});
}

// x[B,C,T] (*) k[F,C,kt] -> y[B,F,To]
template <typename T>
TensorT<T> conv1d(TapeT<T>& tape, const TensorT<T>& x, const TensorT<T>& k, int stride, int padding) {
  require(x.rank() == 3, "conv1d: x must be [B,C,T], got ", shape_str(x.shape()));
  require(k.rank() == 3, "conv1d: kernel must be [F,C,kt], got ", shape_str(k.shape()));
  require(x.dim(1) == k.dim(1), "conv1d: channel mismatch, x axis 1 is ", x.dim(1),
          " but kernel axis 1 is ", k.dim(1));
  require(stride >= 1, "conv1d: stride must be >= 1, got ", stride);
  require(padding >= 0, "conv1d: padding must be >= 0, got ", padding);
  detail::ConvDims d;
  d.B = x.dim(0); d.C = x.dim(1); d.H = 1; d.W = x.dim(2);
  d.F = k.dim(0); d.kh = 1; d.kw = k.dim(2);
  d.stride = stride; d.pad_h = 0; d.pad_w = padding;
  d.Hp = 1; d.Wp = d.W + 2 * padding;
  require(d.kw <= d.Wp, "conv1d: kernel length ", d.kw, " exceeds padded input ", d.Wp);
  d.Ho = 1;
  d.Wo = detail::conv_out_dim(d.W, d.kw, stride, padding);
  return detail::conv_common(tape, x, k, d, {d.B, d.F, d.Wo});
}

// y = x + b, b broadcast over every axis except axis 1 (channels).
template <typename T>
TensorT<T> add_channel_bias(TapeT<T>& tape, const TensorT<T>& x, const TensorT<T>& b) {
  require(x.rank() >= 2, "add_channel_bias: x must be [B,C,...], got ", shape_str(x.shape()));
  const int C = x.dim(1);
  require(b.rank() == 1 && b.dim(0) == C, "add_channel_bias: bias must be [", C, "], got ",
          shape_str(b.shape()));
  const int B = x.dim(0);
  const std::size_t S = detail::tail_product(x.shape(), 2);
  const NodeId nx = tape.node_on(x), nb = tape.node_on(b);
  std::vector<T> y(x.numel());
  for (int n = 0; n < B; ++n) {
    for (int c = 0; c < C; ++c) {
      const T bias = b.data()[static_cast<std::size_t>(c)];
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * S;
      for (std::size_t s = 0; s < S; ++s) y[base + s] = x.data()[base + s] + bias;
    }
  }
  TensorT<T> out(x.shape(), std::move(y));
  if (nx == kNoNode && nb == kNoNode) return out;
  return tape.emit(std::move(out), {nx, nb}, [nx, nb, B, C, S](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    t.accumulate(nx, go);
    if (nb != kNoNode) {
      std::vector<T> gb(static_cast<std::size_t>(C), T(0));
      for (int n = 0; n < B; ++n) {
        for (int c = 0; c < C; ++c) {
          const std::size_t base = (static_cast<std::size_t>(n) * C + c) * S;
          T acc = 0;
          for (std::size_t s = 0; s < S; ++s) acc += go[base + s];
          gb[static_cast<std::size_t>(c)] += acc;
        }
      }
      t.accumulate(nb, gb);
    }
  });
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormStateT {
  TensorT<T> running_mean;
  TensorT<T> running_var;
  T momentum = T(0.9);
  T eps = T(1e-5);

  explicit BatchNormStateT(int channels = 1)
      : running_mean(TensorT<T>::zeros({channels})),
        running_var(TensorT<T>::full({channels}, T(1))) {}
};

using BatchNormState = BatchNormStateT<float>;

// Normalizes over every axis except axis 1. In train mode uses batch
// statistics (population variance) and updates the running estimates; in eval
// mode uses the running estimates and leaves the state untouched.
template <typename T>
TensorT<T> batch_norm(TapeT<T>& tape, const TensorT<T>& x, const TensorT<T>& gamma,
                      const TensorT<T>& beta, BatchNormStateT<T>& state, Phase phase) {
  require(x.rank() >= 2, "batch_norm: x must be [B,C,...], got ", shape_str(x.shape()));
  const int B = x.dim(0);
  const int C = x.dim(1);
  require(gamma.rank() == 1 && gamma.dim(0) == C, "batch_norm: gamma must be [", C, "], got ",
          shape_str(gamma.shape()));
  require(beta.rank() == 1 && beta.dim(0) == C, "batch_norm: beta must be [", C, "], got ",
          shape_str(beta.shape()));
  require(state.running_mean.dim(0) == C && state.running_var.dim(0) == C,
          "batch_norm: state sized for ", state.running_mean.dim(0), " channels, input has ", C);
  const std::size_t S = detail::tail_product(x.shape(), 2);
  const std::size_t m = static_cast<std::size_t>(B) * S;  // samples per channel

  const NodeId nx = tape.node_on(x), ng = tape.node_on(gamma), nb = tape.node_on(beta);

  std::vector<T> mean(static_cast<std::size_t>(C)), var(static_cast<std::size_t>(C));
  if (phase == Phase::kTrain) {
    require(B >= 2, "batch_norm: train mode needs batch size >= 2, got B=", B);
    for (int c = 0; c < C; ++c) {
      T acc = 0;
      for (int n = 0; n < B; ++n) {
        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) acc += x.data()[base + s];
      }
      mean[static_cast<std::size_t>(c)] = acc / static_cast<T>(m);
    }
    for (int c = 0; c < C; ++c) {
      T acc = 0;
      const T mu = mean[static_cast<std::size_t>(c)];
      for (int n = 0; n < B; ++n) {
        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) {
          const T d = x.data()[base + s] - mu;
          acc += d * d;
        }
      }
      var[static_cast<std::size_t>(c)] = acc / static_cast<T>(m);
    }
    // running <- momentum * running + (1 - momentum) * batch
    std::vector<T> rm(state.running_mean.data()), rv(state.running_var.data());
    for (int c = 0; c < C; ++c) {
      rm[static_cast<std::size_t>(c)] = state.momentum * rm[static_cast<std::size_t>(c)] +
                                        (T(1) - state.momentum) * mean[static_cast<std::size_t>(c)];
      rv[static_cast<std::size_t>(c)] = state.momentum * rv[static_cast<std::size_t>(c)] +
                                        (T(1) - state.momentum) * var[static_cast<std::size_t>(c)];
    }
    state.running_mean = TensorT<T>({C}, std::move(rm));
    state.running_var = TensorT<T>({C}, std::move(rv));
  } else {
    mean = state.running_mean.data();
    var = state.running_var.data();
  }

  std::vector<T> invstd(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    invstd[static_cast<std::size_t>(c)] = T(1) / std::sqrt(var[static_cast<std::size_t>(c)] + state.eps);
  }

  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  std::vector<T> y(x.numel());
  for (int n = 0; n < B; ++n) {
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * S;
      const T mu = mean[static_cast<std::size_t>(c)];
      const T is = invstd[static_cast<std::size_t>(c)];
      const T g = gamma.data()[static_cast<std::size_t>(c)];
      const T be = beta.data()[static_cast<std::size_t>(c)];
      for (std::size_t s = 0; s < S; ++s) {
        const T xh = (x.data()[base + s] - mu) * is;
        (*xhat)[base + s] = xh;
        y[base + s] = g * xh + be;
      }
    }
  }
  TensorT<T> out(x.shape(), std::move(y));
  if (nx == kNoNode && ng == kNoNode && nb == kNoNode) return out;

  auto gamma_d = gamma.data_ptr();
  const bool train = phase == Phase::kTrain;
  return tape.emit(std::move(out), {nx, ng, nb},
                   [nx, ng, nb, B, C, S, m, xhat, invstd, gamma_d, train](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    if (ng != kNoNode || nb != kNoNode) {
      std::vector<T> gg(static_cast<std::size_t>(C), T(0)), gb(static_cast<std::size_t>(C), T(0));
      for (int n = 0; n < B; ++n) {
        for (int c = 0; c < C; ++c) {
          const std::size_t base = (static_cast<std::size_t>(n) * C + c) * S;
          T ag = 0, ab = 0;
          for (std::size_t s = 0; s < S; ++s) {
            ag += go[base + s] * (*xhat)[base + s];
            ab += go[base + s];
          }
          gg[static_cast<std::size_t>(c)] += ag;
          gb[static_cast<std::size_t>(c)] += ab;
        }
      }
      if (ng != kNoNode) t.accumulate(ng, gg);
      if (nb != kNoNode) t.accumulate(nb, gb);
    }
    if (nx != kNoNode) {
      std::vector<T> gx(go.size());
      if (train) {
        // dx = (gamma * invstd / m) * (m*dy - sum(dy) - xhat * sum(dy*xhat))
        for (int c = 0; c < C; ++c) {
          T sum_dy = 0, sum_dy_xh = 0;
          for (int n = 0; n < B; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * S;
            for (std::size_t s = 0; s < S; ++s) {
              sum_dy += go[base + s];
              sum_dy_xh += go[base + s] * (*xhat)[base + s];
            }
          }
          const T k = (*gamma_d)[static_cast<std::size_t>(c)] * invstd[static_cast<std::size_t>(c)] /
                      static_cast<T>(m);
          for (int n = 0; n < B; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * S;
            for (std::size_t s = 0; s < S; ++s) {
              gx[base + s] = k * (static_cast<T>(m) * go[base + s] - sum_dy -
                                  (*xhat)[base + s] * sum_dy_xh);
            }
          }
        }
      } else {
        for (int n = 0; n < B; ++n) {
          for (int c = 0; c < C; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * S;
            const T k = (*gamma_d)[static_cast<std::size_t>(c)] * invstd[static_cast<std::size_t>(c)];
            for (std::size_t s = 0; s < S; ++s) gx[base + s] = k * go[base + s];
          }
        }
      }
      t.accumulate(nx, gx);
    }
  });
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> max_pool2d(TapeT<T>& tape, const TensorT<T>& x, int k, int stride) {
  require(x.rank() == 4, "max_pool2d: x must be [B,C,H,W], got ", shape_str(x.shape()));
  require(k >= 1 && stride >= 1, "max_pool2d: window and stride must be >= 1");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(k <= H && k <= W, "max_pool2d: window ", k, " exceeds input ", H, "x", W);
  const int Ho = (H - k) / stride + 1;
  const int Wo = (W - k) / stride + 1;
  const NodeId nx = tape.node_on(x);

  std::vector<T> y(static_cast<std::size_t>(B) * C * Ho * Wo);
  auto argmax = std::make_shared<std::vector<std::int32_t>>(y.size());
  const T* xd = x.data().data();
  std::size_t oi = 0;
  for (int n = 0; n < B; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* plane = xd + (static_cast<std::size_t>(n) * C + c) * H * W;
      for (int ho = 0; ho < Ho; ++ho) {
        for (int wo = 0; wo < Wo; ++wo) {
          T best = -std::numeric_limits<T>::infinity();
          std::int32_t best_idx = 0;
          for (int i = 0; i < k; ++i) {
            const int h = ho * stride + i;
            for (int j = 0; j < k; ++j) {
              const int w = wo * stride + j;
              const T v = plane[static_cast<std::size_t>(h) * W + w];
              if (v > best) {
                best = v;
                best_idx = static_cast<std::int32_t>(h * W + w);
              }
            }
          }
          y[oi] = best;
          (*argmax)[oi] = best_idx;
          ++oi;
        }
      }
    }
  }
  TensorT<T> out({B, C, Ho, Wo}, std::move(y));
  if (nx == kNoNode) return out;
  const std::size_t plane_in = static_cast<std::size_t>(H) * W;
  const std::size_t plane_out = static_cast<std::size_t>(Ho) * Wo;
  const std::size_t planes = static_cast<std::size_t>(B) * C;
  return tape.emit(std::move(out), {nx},
                   [nx, argmax, plane_in, plane_out, planes](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    std::vector<T> gx(planes * plane_in, T(0));
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t o = 0; o < plane_out; ++o) {
        const std::size_t oi = p * plane_out + o;
        gx[p * plane_in + static_cast<std::size_t>((*argmax)[oi])] += go[oi];
      }
    }
    t.accumulate(nx, gx);
  });
}

// [B,C,...] -> [B,C], mean over all trailing axes. Backward spreads the
// gradient uniformly, 1/(pooled size) to each element.
template <typename T>
TensorT<T> global_avg_pool(TapeT<T>& tape, const TensorT<T>& x) {
  require(x.rank() >= 3, "global_avg_pool: x must be [B,C,...], got ", shape_str(x.shape()));
  const int B = x.dim(0), C = x.dim(1);
  const std::size_t S = detail::tail_product(x.shape(), 2);
  const NodeId nx = tape.node_on(x);
  std::vector<T> y(static_cast<std::size_t>(B) * C);
  for (std::size_t bc = 0; bc < y.size(); ++bc) {
    const T* src = x.data().data() + bc * S;
    T acc = 0;
    for (std::size_t s = 0; s < S; ++s) acc += src[s];
    y[bc] = acc / static_cast<T>(S);
  }
  TensorT<T> out({B, C}, std::move(y));
  if (nx == kNoNode) return out;
  return tape.emit(std::move(out), {nx}, [nx, S](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    std::vector<T> gx(go.size() * S);
    for (std::size_t bc = 0; bc < go.size(); ++bc) {
      const T g = go[bc] / static_cast<T>(S);
      for (std::size_t s = 0; s < S; ++s) gx[bc * S + s] = g;
    }
    t.accumulate(nx, gx);
  });
}

// [B,C,H,W] -> [B,C,H], mean over the last axis.
template <typename T>
TensorT<T> avg_over_last_axis(TapeT<T>& tape, const TensorT<T>& x) {
  require(x.rank() == 4, "avg_over_last_axis: x must be rank 4, got ", shape_str(x.shape()));
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const NodeId nx = tape.node_on(x);
  const std::size_t rows = static_cast<std::size_t>(B) * C * H;
  std::vector<T> y(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.data().data() + r * static_cast<std::size_t>(W);
    T acc = 0;
    for (int w = 0; w < W; ++w) acc += src[w];
    y[r] = acc / static_cast<T>(W);
  }
  TensorT<T> out({B, C, H}, std::move(y));
  if (nx == kNoNode) return out;
  return tape.emit(std::move(out), {nx}, [nx, W](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    std::vector<T> gx(go.size() * static_cast<std::size_t>(W));
    for (std::size_t r = 0; r < go.size(); ++r) {
      const T g = go[r] / static_cast<T>(W);
      for (int w = 0; w < W; ++w) gx[r * static_cast<std::size_t>(W) + static_cast<std::size_t>(w)] = g;
    }
    t.accumulate(nx, gx);
  });
}

// [B,C,T] -> [B,C,out_len]; bin i covers [floor(i*T/out), ceil((i+1)*T/out)).
template <typename T>
TensorT<T> adaptive_avg_pool1d(TapeT<T>& tape, const TensorT<T>& x, int out_len) {
  require(x.rank() == 3, "adaptive_avg_pool1d: x must be [B,C,T], got ", shape_str(x.shape()));
  require(out_len >= 1, "adaptive_avg_pool1d: out_len must be >= 1");
  const int B = x.dim(0), C = x.dim(1), Tn = x.dim(2);
  require(Tn >= out_len, "adaptive_avg_pool1d: input length ", Tn, " shorter than output ", out_len);
  const NodeId nx = tape.node_on(x);
  std::vector<int> starts(static_cast<std::size_t>(out_len)), ends(static_cast<std::size_t>(out_len));
  for (int i = 0; i < out_len; ++i) {
    starts[static_cast<std::size_t>(i)] = (i * Tn) / out_len;
    ends[static_cast<std::size_t>(i)] = ((i + 1) * Tn + out_len - 1) / out_len;
  }
  const std::size_t rows = static_cast<std::size_t>(B) * C;
  std::vector<T> y(rows * static_cast<std::size_t>(out_len));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.data().data() + r * static_cast<std::size_t>(Tn);
    for (int i = 0; i < out_len; ++i) {
      T acc = 0;
      for (int u = starts[static_cast<std::size_t>(i)]; u < ends[static_cast<std::size_t>(i)]; ++u) acc += src[u];
      y[r * static_cast<std::size_t>(out_len) + static_cast<std::size_t>(i)] =
          acc / static_cast<T>(ends[static_cast<std::size_t>(i)] - starts[static_cast<std::size_t>(i)]);
    }
  }
  TensorT<T> out({B, C, out_len}, std::move(y));
  if (nx == kNoNode) return out;
  return tape.emit(std::move(out), {nx}, [nx, Tn, out_len, starts, ends, rows](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    std::vector<T> gx(rows * static_cast<std::size_t>(Tn), T(0));
    for (std::size_t r = 0; r < rows; ++r) {
      for (int i = 0; i < out_len; ++i) {
        const int s = starts[static_cast<std::size_t>(i)], e = ends[static_cast<std::size_t>(i)];
        const T g = go[r * static_cast<std::size_t>(out_len) + static_cast<std::size_t>(i)] / static_cast<T>(e - s);
        for (int u = s; u < e; ++u) gx[r * static_cast<std::size_t>(Tn) + static_cast<std::size_t>(u)] += g;
      }
    }
    t.accumulate(nx, gx);
  });
}

// ---------------------------------------------------------------------------
// row-wise L2 normalization
// ---------------------------------------------------------------------------

// Bare norm by design: rows with norm < 1e-12 are a contract violation, not
// a case to epsilon-smooth away.
template <typename T>
TensorT<T> l2_normalize(TapeT<T>& tape, const TensorT<T>& x) {
  require(x.rank() == 2, "l2_normalize: x must be [B,D], got ", shape_str(x.shape()));
  const int B = x.dim(0), D = x.dim(1);
  const NodeId nx = tape.node_on(x);
  std::vector<T> norms(static_cast<std::size_t>(B));
  std::vector<T> y(x.numel());
  for (int b = 0; b < B; ++b) {
    const T* row = x.data().data() + static_cast<std::size_t>(b) * D;
    T sq = 0;
    for (int d = 0; d < D; ++d) sq += row[d] * row[d];
    const T norm = std::sqrt(sq);
    require(norm >= T(1e-12), "l2_normalize: row ", b, " has near-zero norm");
    norms[static_cast<std::size_t>(b)] = norm;
    for (int d = 0; d < D; ++d) y[static_cast<std::size_t>(b) * D + d] = row[d] / norm;
  }
  TensorT<T> out({B, D}, std::move(y));
  auto yd = out.data_ptr();
  if (nx == kNoNode) return out;
  return tape.emit(std::move(out), {nx}, [nx, B, D, norms, yd](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    std::vector<T> gx(go.size());
    for (int b = 0; b < B; ++b) {
      const std::size_t base = static_cast<std::size_t>(b) * D;
      T dot = 0;
      for (int d = 0; d < D; ++d) dot += go[base + d] * (*yd)[base + d];
      const T inv = T(1) / norms[static_cast<std::size_t>(b)];
      for (int d = 0; d < D; ++d) gx[base + d] = (go[base + d] - dot * (*yd)[base + d]) * inv;
    }
    t.accumulate(nx, gx);
  });
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

// Gate layout follows the [i, f, g, o] row blocks of w_ih/w_hh ([4H, I] and
// [4H, H]): input and forget gates and output gate are sigmoid, the candidate
// g is tanh. Initial hidden and cell states are zero.
template <typename T>
struct LstmLayerParamsT {
  TensorT<T> w_ih, w_hh, b_ih, b_hh;
};

using LstmLayerParams = LstmLayerParamsT<float>;

namespace detail {

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

// z[B,N] += x[B,M] . W[N,M]^T
template <typename T>
void addmm_bt(const T* x, const T* w, T* z, int B, int M, int N) {
  for (int b = 0; b < B; ++b) {
    const T* xr = x + static_cast<std::size_t>(b) * M;
    T* zr = z + static_cast<std::size_t>(b) * N;
    for (int n = 0; n < N; ++n) {
      const T* wr = w + static_cast<std::size_t>(n) * M;
      T acc = 0;
      for (int m = 0; m < M; ++m) acc += xr[m] * wr[m];
      zr[n] += acc;
    }
  }
}

// dW[N,M] += dz[B,N]^T . x[B,M]
template <typename T>
void accum_wgrad(const T* dz, const T* x, T* dw, int B, int M, int N) {
  for (int b = 0; b < B; ++b) {
    const T* dzr = dz + static_cast<std::size_t>(b) * N;
    const T* xr = x + static_cast<std::size_t>(b) * M;
    for (int n = 0; n < N; ++n) {
      const T v = dzr[n];
      T* dwr = dw + static_cast<std::size_t>(n) * M;
      for (int m = 0; m < M; ++m) dwr[m] += v * xr[m];
    }
  }
}

// dx[B,M] += dz[B,N] . W[N,M]
template <typename T>
void accum_xgrad(const T* dz, const T* w, T* dx, int B, int M, int N) {
  for (int b = 0; b < B; ++b) {
    const T* dzr = dz + static_cast<std::size_t>(b) * N;
    T* dxr = dx + static_cast<std::size_t>(b) * M;
    for (int n = 0; n < N; ++n) {
      const T v = dzr[n];
      const T* wr = w + static_cast<std::size_t>(n) * M;
      for (int m = 0; m < M; ++m) dxr[m] += v * wr[m];
    }
  }
}

}  // namespace detail

// One LSTM layer over a full sequence: x[B,T,I] -> h[B,T,H].
template <typename T>
TensorT<T> lstm_layer(TapeT<T>& tape, const TensorT<T>& x, const LstmLayerParamsT<T>& p) {
  require(x.rank() == 3, "lstm_layer: x must be [B,T,I], got ", shape_str(x.shape()));
  const int B = x.dim(0), Tn = x.dim(1), I = x.dim(2);
  require(Tn >= 1, "lstm_layer: zero-length sequence");
  require(p.w_ih.rank() == 2 && p.w_ih.dim(0) % 4 == 0, "lstm_layer: w_ih must be [4H,I], got ",
          shape_str(p.w_ih.shape()));
  const int H = p.w_ih.dim(0) / 4;
  require(p.w_ih.dim(1) == I, "lstm_layer: w_ih expects input dim ", p.w_ih.dim(1), ", x has ", I);
  require(p.w_hh.rank() == 2 && p.w_hh.dim(0) == 4 * H && p.w_hh.dim(1) == H,
          "lstm_layer: w_hh must be [", 4 * H, ",", H, "], got ", shape_str(p.w_hh.shape()));
  require(p.b_ih.rank() == 1 && p.b_ih.dim(0) == 4 * H, "lstm_layer: b_ih must be [", 4 * H, "]");
  require(p.b_hh.rank() == 1 && p.b_hh.dim(0) == 4 * H, "lstm_layer: b_hh must be [", 4 * H, "]");

  const NodeId nx = tape.node_on(x);
  const NodeId nwih = tape.node_on(p.w_ih), nwhh = tape.node_on(p.w_hh);
  const NodeId nbih = tape.node_on(p.b_ih), nbhh = tape.node_on(p.b_hh);

  const std::size_t BH = static_cast<std::size_t>(B) * H;
  struct Cache {
    std::vector<T> gates;   // [T, B, 4H] post-activation (i, f, g, o)
    std::vector<T> cells;   // [T, B, H]
    std::vector<T> tanhc;   // [T, B, H]
  };
  auto cache = std::make_shared<Cache>();
  cache->gates.resize(static_cast<std::size_t>(Tn) * B * 4 * H);
  cache->cells.resize(static_cast<std::size_t>(Tn) * BH);
  cache->tanhc.resize(static_cast<std::size_t>(Tn) * BH);

  std::vector<T> h(static_cast<std::size_t>(B) * Tn * H);
  std::vector<T> h_prev(BH, T(0)), c_prev(BH, T(0));
  std::vector<T> z(static_cast<std::size_t>(B) * 4 * H);

  const T* xd = x.data().data();
  for (int t = 0; t < Tn; ++t) {
    // z = x_t . w_ih^T + h_prev . w_hh^T + b_ih + b_hh
    for (int b = 0; b < B; ++b) {
      T* zr = z.data() + static_cast<std::size_t>(b) * 4 * H;
      for (int j = 0; j < 4 * H; ++j) zr[j] = p.b_ih.data()[static_cast<std::size_t>(j)] + p.b_hh.data()[static_cast<std::size_t>(j)];
    }
    std::vector<T> xt(static_cast<std::size_t>(B) * I);
    for (int b = 0; b < B; ++b) {
      const T* src = xd + (static_cast<std::size_t>(b) * Tn + t) * I;
      std::copy(src, src + I, xt.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(b) * I));
    }
    detail::addmm_bt(xt.data(), p.w_ih.data().data(), z.data(), B, I, 4 * H);
    detail::addmm_bt(h_prev.data(), p.w_hh.data().data(), z.data(), B, H, 4 * H);

    T* gates_t = cache->gates.data() + static_cast<std::size_t>(t) * B * 4 * H;
    T* cells_t = cache->cells.data() + static_cast<std::size_t>(t) * BH;
    T* tanhc_t = cache->tanhc.data() + static_cast<std::size_t>(t) * BH;
    for (int b = 0; b < B; ++b) {
      const T* zr = z.data() + static_cast<std::size_t>(b) * 4 * H;
      T* gr = gates_t + static_cast<std::size_t>(b) * 4 * H;
      for (int j = 0; j < H; ++j) {
        const T ig = detail::sigmoid(zr[j]);
        const T fg = detail::sigmoid(zr[H + j]);
        const T gg = std::tanh(zr[2 * H + j]);
        const T og = detail::sigmoid(zr[3 * H + j]);
        gr[j] = ig;
        gr[H + j] = fg;
        gr[2 * H + j] = gg;
        gr[3 * H + j] = og;
        const T c = fg * c_prev[static_cast<std::size_t>(b) * H + j] + ig * gg;
        const T tc = std::tanh(c);
        cells_t[static_cast<std::size_t>(b) * H + j] = c;
        tanhc_t[static_cast<std::size_t>(b) * H + j] = tc;
        const T hv = og * tc;
        h[(static_cast<std::size_t>(b) * Tn + t) * H + j] = hv;
        h_prev[static_cast<std::size_t>(b) * H + j] = hv;
        c_prev[static_cast<std::size_t>(b) * H + j] = c;
      }
    }
  }

  TensorT<T> out({B, Tn, H}, std::move(h));
  if (nx == kNoNode && nwih == kNoNode && nwhh == kNoNode && nbih == kNoNode && nbhh == kNoNode) {
    return out;
  }

  auto xd_p = x.data_ptr();
  auto wih_d = p.w_ih.data_ptr();
  auto whh_d = p.w_hh.data_ptr();
  auto hout = out.data_ptr();
  return tape.emit(std::move(out), {nx, nwih, nwhh, nbih, nbhh},
                   [=](TapeT<T>& t, NodeId self) {
    const std::vector<T>& go = t.grad_of(self);
    std::vector<T> gx(nx != kNoNode ? static_cast<std::size_t>(B) * Tn * I : 0, T(0));
    std::vector<T> gwih(static_cast<std::size_t>(4 * H) * I, T(0));
    std::vector<T> gwhh(static_cast<std::size_t>(4 * H) * H, T(0));
    std::vector<T> gbias(static_cast<std::size_t>(4 * H), T(0));  // b_ih and b_hh share it

    std::vector<T> dh(BH, T(0)), dc(BH, T(0));
    std::vector<T> dz(static_cast<std::size_t>(B) * 4 * H);
    std::vector<T> xt(static_cast<std::size_t>(B) * I);
    std::vector<T> hprev(BH);
    std::vector<T> dxt(static_cast<std::size_t>(B) * I);
    std::vector<T> dhprev(BH);

    for (int step = Tn - 1; step >= 0; --step) {
      const T* gates_t = cache->gates.data() + static_cast<std::size_t>(step) * B * 4 * H;
      const T* tanhc_t = cache->tanhc.data() + static_cast<std::size_t>(step) * BH;
      const T* cprev_t = step > 0 ? cache->cells.data() + static_cast<std::size_t>(step - 1) * BH : nullptr;

      for (int b = 0; b < B; ++b) {
        const T* gr = gates_t + static_cast<std::size_t>(b) * 4 * H;
        T* dzr = dz.data() + static_cast<std::size_t>(b) * 4 * H;
        for (int j = 0; j < H; ++j) {
          const std::size_t bj = static_cast<std::size_t>(b) * H + j;
          const T dht = go[(static_cast<std::size_t>(b) * Tn + step) * H + j] + dh[bj];
          const T ig = gr[j], fg = gr[H + j], gg = gr[2 * H + j], og = gr[3 * H + j];
          const T tc = tanhc_t[bj];
          const T dot = dht * tc;
          T dct = dc[bj] + dht * og * (T(1) - tc * tc);
          const T cp = cprev_t ? cprev_t[bj] : T(0);
          const T dit = dct * gg;
          const T dft = dct * cp;
          const T dgt = dct * ig;
          dc[bj] = dct * fg;
          dzr[j] = dit * ig * (T(1) - ig);
          dzr[H + j] = dft * fg * (T(1) - fg);
          dzr[2 * H + j] = dgt * (T(1) - gg * gg);
          dzr[3 * H + j] = dot * og * (T(1) - og);
        }
      }

      for (int b = 0; b < B; ++b) {
        const T* src = xd_p->data() + (static_cast<std::size_t>(b) * Tn + step) * I;
        std::copy(src, src + I, xt.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(b) * I));
        if (step > 0) {
          const T* hsrc = hout->data() + (static_cast<std::size_t>(b) * Tn + step - 1) * H;
          std::copy(hsrc, hsrc + H, hprev.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(b) * H));
        }
      }
      if (step == 0) std::fill(hprev.begin(), hprev.end(), T(0));

      detail::accum_wgrad(dz.data(), xt.data(), gwih.data(), B, I, 4 * H);
      detail::accum_wgrad(dz.data(), hprev.data(), gwhh.data(), B, H, 4 * H);
      for (int b = 0; b < B; ++b) {
        const T* dzr = dz.data() + static_cast<std::size_t>(b) * 4 * H;
        for (int j = 0; j < 4 * H; ++j) gbias[static_cast<std::size_t>(j)] += dzr[j];
      }
      if (nx != kNoNode) {
        std::fill(dxt.begin(), dxt.end(), T(0));
        detail::accum_xgrad(dz.data(), wih_d->data(), dxt.data(), B, I, 4 * H);
        for (int b = 0; b < B; ++b) {
          T* dst = gx.data() + (static_cast<std::size_t>(b) * Tn + step) * I;
          const T* src = dxt.data() + static_cast<std::size_t>(b) * I;
          for (int i = 0; i < I; ++i) dst[i] += src[i];
        }
      }
      std::fill(dhprev.begin(), dhprev.end(), T(0));
      detail::accum_xgrad(dz.data(), whh_d->data(), dhprev.data(), B, H, 4 * H);
      dh = dhprev;
    }

    if (nx != kNoNode) t.accumulate(nx, gx);
    if (nwih != kNoNode) t.accumulate(nwih, gwih);
    if (nwhh != kNoNode) t.accumulate(nwhh, gwhh);
    if (nbih != kNoNode) t.accumulate(nbih, gbias);
    if (nbhh != kNoNode) t.accumulate(nbhh, gbias);
  });
}

template <typename T>
struct LstmOutT {
  TensorT<T> sequence;  // [B, T, H]
  TensorT<T> final;     // [B, H], equals sequence at the last step
};

using LstmOut = LstmOutT<float>;

// Stacked layers; layer l consumes the full hidden sequence of layer l-1.
template <typename T>
LstmOutT<T> lstm_forward(TapeT<T>& tape, const TensorT<T>& x,
                         const std::vector<LstmLayerParamsT<T>>& layers) {
  require(!layers.empty(), "lstm_forward: needs at least one layer");
  TensorT<T> seq = x;
  for (const LstmLayerParamsT<T>& p : layers) seq = lstm_layer(tape, seq, p);
  TensorT<T> last = take_last_step(tape, seq);
  return {std::move(seq), std::move(last)};
}

}  // namespace aver
