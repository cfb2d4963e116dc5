#pragma once

// Training losses, each a single fused tape op with a hand-derived backward
// rule (the finite-difference tests hold them to the same tolerance as the
// layer ops). Targets, labels, and teacher embeddings are constants: the
// losses only differentiate through their first argument.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "aver/errors.hpp"
#include "aver/tape.hpp"
#include "aver/tensor.hpp"

namespace aver {

namespace detail {

template <typename T>
T huber(T e) {
  const T a = std::fabs(e);
  return a <= T(1) ? T(0.5) * e * e : a - T(0.5);
}

template <typename T>
T huber_grad(T e) {
  if (e > T(1)) return T(1);
  if (e < T(-1)) return T(-1);
  return e;
}

}  // namespace detail

// Negative concordance correlation, -ccc(pred, target), over two length-n
// series with population statistics. The denominator var_p + var_t +
// (mean gap)^2 must be positive: a constant prediction against a constant
// equal target has no gradient direction and is rejected.
template <typename T>
TensorT<T> neg_ccc_loss(TapeT<T>& tape, const TensorT<T>& pred, const TensorT<T>& target) {
  require(pred.rank() == 1, "neg_ccc_loss: pred must be rank 1, got ", shape_str(pred.shape()));
  require(target.rank() == 1 && target.dim(0) == pred.dim(0),
          "neg_ccc_loss: target shape ", shape_str(target.shape()), " does not match pred ",
          shape_str(pred.shape()));
  require(pred.dim(0) >= 2, "neg_ccc_loss: needs at least 2 samples");
  require(tape.node_on(target) == kNoNode, "neg_ccc_loss: target must be a constant");
  const std::size_t n = pred.numel();
  const T* x = pred.data().data();
  const T* y = target.data().data();

  T mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<T>(n);
  my /= static_cast<T>(n);
  T vx = 0, vy = 0, cov = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T dx = x[i] - mx, dy = y[i] - my;
    vx += dx * dx;
    vy += dy * dy;
    cov += dx * dy;
  }
  vx /= static_cast<T>(n);
  vy /= static_cast<T>(n);
  cov /= static_cast<T>(n);
  const T gap = mx - my;
  const T denom = vx + vy + gap * gap;
  require(denom > T(0), "neg_ccc_loss: both series constant and equal, ccc undefined gradient");
  const T ccc = T(2) * cov / denom;

  TensorT<T> out = TensorT<T>::scalar(-ccc);
  const NodeId nx_id = tape.node_on(pred);
  if (nx_id == kNoNode) return out;
  auto xd = pred.data_ptr();
  auto yd = target.data_ptr();
  return tape.emit(std::move(out), {nx_id},
                   [nx_id, xd, yd, n, mx, my, denom, ccc](TapeT<T>& t, NodeId self) {
    const T go = t.grad_of(self)[0];
    std::vector<T> g(n);
    const T k = T(2) / (static_cast<T>(n) * denom);
    for (std::size_t i = 0; i < n; ++i) {
      const T dccc = k * (((*yd)[i] - my) - ccc * (((*xd)[i] - mx) + (mx - my)));
      g[i] = -go * dccc;
    }
    t.accumulate(nx_id, g);
  });
}

// Two-hinge triplet loss over expression-comparison triplets. Rows come in
// consecutive triples and must be unit length (the embedding head normalizes
// them; tolerance 1e-3). odd_index[t] marks which row of triple t shows the
// different expression; the other two form the positive pair. Each hinge is
// max(0, margin + ||p - q||^2 - ||p_or_q - odd||^2), and the loss is the mean
// of the two-hinge sums over triples.
template <typename T>
TensorT<T> fec_triplet_loss(TapeT<T>& tape, const TensorT<T>& embeddings,
                            const std::vector<int>& odd_index, T margin) {
  require(embeddings.rank() == 2, "fec_triplet_loss: embeddings must be [3n,D], got ",
          shape_str(embeddings.shape()));
  const int rows = embeddings.dim(0);
  const int D = embeddings.dim(1);
  require(!odd_index.empty() && rows == static_cast<int>(odd_index.size()) * 3,
          "fec_triplet_loss: ", rows, " rows do not form ", odd_index.size(), " triples");
  require(margin >= T(0), "fec_triplet_loss: negative margin");
  const T* e = embeddings.data().data();
  for (int r = 0; r < rows; ++r) {
    T sq = 0;
    for (int d = 0; d < D; ++d) sq += e[static_cast<std::size_t>(r) * D + d] * e[static_cast<std::size_t>(r) * D + d];
    require(std::fabs(std::sqrt(sq) - T(1)) <= T(1e-3), "fec_triplet_loss: row ", r,
            " is not unit length");
  }

  auto sqdist = [&](int a, int b) {
    T s = 0;
    for (int d = 0; d < D; ++d) {
      const T diff = e[static_cast<std::size_t>(a) * D + d] - e[static_cast<std::size_t>(b) * D + d];
      s += diff * diff;
    }
    return s;
  };

  const std::size_t n = odd_index.size();
  std::vector<unsigned char> active(2 * n, 0);
  T total = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const int odd = odd_index[t];
    require(odd >= 0 && odd < 3, "fec_triplet_loss: odd index out of range");
    const int base = static_cast<int>(t) * 3;
    const int o = base + odd;
    const int p = base + (odd == 0 ? 1 : 0);
    const int q = base + (odd == 2 ? 1 : 2);
    const T dpq = sqdist(p, q);
    const T h1 = margin + dpq - sqdist(p, o);
    const T h2 = margin + dpq - sqdist(q, o);
    if (h1 > T(0)) {
      total += h1;
      active[2 * t] = 1;
    }
    if (h2 > T(0)) {
      total += h2;
      active[2 * t + 1] = 1;
    }
  }
  TensorT<T> out = TensorT<T>::scalar(total / static_cast<T>(n));
  const NodeId ne = tape.node_on(embeddings);
  if (ne == kNoNode) return out;
  auto ed = embeddings.data_ptr();
  auto odd_copy = odd_index;
  return tape.emit(std::move(out), {ne},
                   [ne, ed, odd_copy, active, D, n](TapeT<T>& t, NodeId self) {
    const T go = t.grad_of(self)[0] / static_cast<T>(n);
    std::vector<T> g(ed->size(), T(0));
    const T* em = ed->data();
    auto axpy = [&](int row_to, int row_a, int row_b, T c) {
      // g[row_to] += c * (e[row_a] - e[row_b])
      T* dst = g.data() + static_cast<std::size_t>(row_to) * D;
      const T* ea = em + static_cast<std::size_t>(row_a) * D;
      const T* eb = em + static_cast<std::size_t>(row_b) * D;
      for (int d = 0; d < D; ++d) dst[d] += c * (ea[d] - eb[d]);
    };
    for (std::size_t tr = 0; tr < n; ++tr) {
      const int odd = odd_copy[tr];
      const int base = static_cast<int>(tr) * 3;
      const int o = base + odd;
      const int p = base + (odd == 0 ? 1 : 0);
      const int q = base + (odd == 2 ? 1 : 2);
      if (active[2 * tr]) {
        // h1 = m + ||p-q||^2 - ||p-o||^2
        axpy(p, p, q, T(2) * go);
        axpy(p, p, o, T(-2) * go);
        axpy(q, p, q, T(-2) * go);
        axpy(o, p, o, T(2) * go);
      }
      if (active[2 * tr + 1]) {
        // h2 = m + ||p-q||^2 - ||q-o||^2
        axpy(p, p, q, T(2) * go);
        axpy(q, p, q, T(-2) * go);
        axpy(q, q, o, T(-2) * go);
        axpy(o, q, o, T(2) * go);
      }
    }
    t.accumulate(ne, g);
  });
}

// Softmax cross entropy with the usual max-shift stabilization; the mean over
// the batch is returned and the backward rule is (softmax - onehot) / B.
template <typename T>
TensorT<T> cross_entropy_loss(TapeT<T>& tape, const TensorT<T>& logits,
                              const std::vector<int>& labels) {
  require(logits.rank() == 2, "cross_entropy_loss: logits must be [B,K], got ",
          shape_str(logits.shape()));
  const int B = logits.dim(0), K = logits.dim(1);
  require(static_cast<int>(labels.size()) == B, "cross_entropy_loss: ", labels.size(),
          " labels for batch of ", B);
  const T* z = logits.data().data();
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  T total = 0;
  for (int b = 0; b < B; ++b) {
    require(labels[static_cast<std::size_t>(b)] >= 0 && labels[static_cast<std::size_t>(b)] < K,
            "cross_entropy_loss: label out of range");
    const T* row = z + static_cast<std::size_t>(b) * K;
    T mx = row[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    T sum = 0;
    for (int k = 0; k < K; ++k) sum += std::exp(row[k] - mx);
    const T log_sum = std::log(sum) + mx;
    for (int k = 0; k < K; ++k) {
      (*probs)[static_cast<std::size_t>(b) * K + k] = std::exp(row[k] - log_sum);
    }
    total += log_sum - row[labels[static_cast<std::size_t>(b)]];
  }
  TensorT<T> out = TensorT<T>::scalar(total / static_cast<T>(B));
  const NodeId nz = tape.node_on(logits);
  if (nz == kNoNode) return out;
  auto labels_copy = labels;
  return tape.emit(std::move(out), {nz}, [nz, probs, labels_copy, B, K](TapeT<T>& t, NodeId self) {
    const T go = t.grad_of(self)[0] / static_cast<T>(B);
    std::vector<T> g(*probs);
    for (int b = 0; b < B; ++b) g[static_cast<std::size_t>(b) * K + labels_copy[static_cast<std::size_t>(b)]] -= T(1);
    for (T& v : g) v *= go;
    t.accumulate(nz, g);
  });
}

// ---------------------------------------------------------------------------
// relational knowledge distillation
// ---------------------------------------------------------------------------

namespace detail {

// Pairwise Euclidean distances of the rows of a [B,D] matrix, flattened as
// d[i * B + j] (symmetric, zero diagonal).
template <typename T>
std::vector<T> pairwise_distances(const T* x, int B, int D) {
  std::vector<T> d(static_cast<std::size_t>(B) * B, T(0));
  for (int i = 0; i < B; ++i) {
    for (int j = i + 1; j < B; ++j) {
      T s = 0;
      for (int k = 0; k < D; ++k) {
        const T diff = x[static_cast<std::size_t>(i) * D + k] - x[static_cast<std::size_t>(j) * D + k];
        s += diff * diff;
      }
      const T dist = std::sqrt(s);
      d[static_cast<std::size_t>(i) * B + j] = dist;
      d[static_cast<std::size_t>(j) * B + i] = dist;
    }
  }
  return d;
}

}  // namespace detail

struct RkdWeights {
  double distance = 1.0;
  double angle = 2.0;
};

// Relational distillation: Huber distance between the student's and teacher's
// mean-normalized pairwise distance structure, plus Huber distance between
// their triple-wise angle cosines. Pairs where either side has zero distance
// are excluded from both the normalizer and the loss; triples with a
// degenerate edge on either side are likewise excluded. The two terms are
// combined as distance_weight * L_d + angle_weight * L_a.
template <typename T>
TensorT<T> rkd_loss(TapeT<T>& tape, const TensorT<T>& student, const TensorT<T>& teacher,
                    RkdWeights weights = {}) {
  require(student.rank() == 2 && teacher.rank() == 2, "rkd_loss: embeddings must be [B,D]");
  require(student.shape() == teacher.shape(), "rkd_loss: student ", shape_str(student.shape()),
          " vs teacher ", shape_str(teacher.shape()));
  const int B = student.dim(0), D = student.dim(1);
  require(B >= 3, "rkd_loss: needs a batch of at least 3, got ", B);
  require(tape.node_on(teacher) == kNoNode, "rkd_loss: teacher side must be frozen");

  const T* xs = student.data().data();
  const T* xt = teacher.data().data();
  const std::vector<T> ds = detail::pairwise_distances(xs, B, D);
  const std::vector<T> dt = detail::pairwise_distances(xt, B, D);

  // Distance term over pairs alive on both sides.
  std::vector<std::pair<int, int>> pairs;
  T mu_s = 0, mu_t = 0;
  for (int i = 0; i < B; ++i) {
    for (int j = i + 1; j < B; ++j) {
      const T a = ds[static_cast<std::size_t>(i) * B + j];
      const T b = dt[static_cast<std::size_t>(i) * B + j];
      if (a > T(0) && b > T(0)) {
        pairs.emplace_back(i, j);
        mu_s += a;
        mu_t += b;
      }
    }
  }
  T dist_term = 0;
  if (!pairs.empty()) {
    mu_s /= static_cast<T>(pairs.size());
    mu_t /= static_cast<T>(pairs.size());
    for (auto [i, j] : pairs) {
      const T e = ds[static_cast<std::size_t>(i) * B + j] / mu_s - dt[static_cast<std::size_t>(i) * B + j] / mu_t;
      dist_term += detail::huber(e);
    }
    dist_term /= static_cast<T>(pairs.size());
  }

  // Angle term over ordered distinct triples (i, j, k), angle at vertex j.
  auto cos_at = [D](const T* x, const std::vector<T>& d, int i, int j, int k, int B_) {
    const T ni = d[static_cast<std::size_t>(i) * B_ + j];
    const T nk = d[static_cast<std::size_t>(k) * B_ + j];
    T dot = 0;
    for (int c = 0; c < D; ++c) {
      dot += (x[static_cast<std::size_t>(i) * D + c] - x[static_cast<std::size_t>(j) * D + c]) *
             (x[static_cast<std::size_t>(k) * D + c] - x[static_cast<std::size_t>(j) * D + c]);
    }
    return dot / (ni * nk);
  };

  std::size_t n_triples = 0;
  T angle_term = 0;
  for (int i = 0; i < B; ++i) {
    for (int j = 0; j < B; ++j) {
      if (j == i) continue;
      for (int k = 0; k < B; ++k) {
        if (k == i || k == j) continue;
        if (ds[static_cast<std::size_t>(i) * B + j] <= T(0) || ds[static_cast<std::size_t>(k) * B + j] <= T(0) ||
            dt[static_cast<std::size_t>(i) * B + j] <= T(0) || dt[static_cast<std::size_t>(k) * B + j] <= T(0)) {
          continue;
        }
        const T e = cos_at(xs, ds, i, j, k, B) - cos_at(xt, dt, i, j, k, B);
        angle_term += detail::huber(e);
        ++n_triples;
      }
    }
  }
  if (n_triples > 0) angle_term /= static_cast<T>(n_triples);

  const T total = static_cast<T>(weights.distance) * dist_term +
                  static_cast<T>(weights.angle) * angle_term;
  TensorT<T> out = TensorT<T>::scalar(total);
  const NodeId ns = tape.node_on(student);
  if (ns == kNoNode) return out;

  auto sd = student.data_ptr();
  auto td = teacher.data_ptr();
  return tape.emit(std::move(out), {ns},
                   [ns, sd, td, B, D, weights](TapeT<T>& t, NodeId self) {
    const T go = t.grad_of(self)[0];
    const T* xs = sd->data();
    const T* xt = td->data();
    const std::vector<T> ds = detail::pairwise_distances(xs, B, D);
    const std::vector<T> dt = detail::pairwise_distances(xt, B, D);
    std::vector<T> g(sd->size(), T(0));

    // Distance term gradient.
    std::vector<std::pair<int, int>> pairs;
    T mu_s = 0, mu_t = 0;
    for (int i = 0; i < B; ++i) {
      for (int j = i + 1; j < B; ++j) {
        if (ds[static_cast<std::size_t>(i) * B + j] > T(0) && dt[static_cast<std::size_t>(i) * B + j] > T(0)) {
          pairs.emplace_back(i, j);
          mu_s += ds[static_cast<std::size_t>(i) * B + j];
          mu_t += dt[static_cast<std::size_t>(i) * B + j];
        }
      }
    }
    if (!pairs.empty()) {
      const T np = static_cast<T>(pairs.size());
      mu_s /= np;
      mu_t /= np;
      // dL/d(psi_ij) then back through the shared normalizer mu_s.
      std::vector<T> gpsi(pairs.size());
      T correction = 0;  // sum over pairs of gpsi * psi
      for (std::size_t p = 0; p < pairs.size(); ++p) {
        auto [i, j] = pairs[p];
        const T psi_s = ds[static_cast<std::size_t>(i) * B + j] / mu_s;
        const T psi_t = dt[static_cast<std::size_t>(i) * B + j] / mu_t;
        gpsi[p] = detail::huber_grad(psi_s - psi_t) / np;
        correction += gpsi[p] * psi_s;
      }
      const T w = static_cast<T>(weights.distance) * go;
      for (std::size_t p = 0; p < pairs.size(); ++p) {
        auto [i, j] = pairs[p];
        const T gd = w * (gpsi[p] - correction / np) / mu_s;
        const T inv = gd / ds[static_cast<std::size_t>(i) * B + j];
        for (int c = 0; c < D; ++c) {
          const T diff = xs[static_cast<std::size_t>(i) * D + c] - xs[static_cast<std::size_t>(j) * D + c];
          g[static_cast<std::size_t>(i) * D + c] += inv * diff;
          g[static_cast<std::size_t>(j) * D + c] -= inv * diff;
        }
      }
    }

    // Angle term gradient.
    std::size_t n_triples = 0;
    for (int i = 0; i < B; ++i) {
      for (int j = 0; j < B; ++j) {
        if (j == i) continue;
        for (int k = 0; k < B; ++k) {
          if (k == i || k == j) continue;
          if (ds[static_cast<std::size_t>(i) * B + j] <= T(0) || ds[static_cast<std::size_t>(k) * B + j] <= T(0) ||
              dt[static_cast<std::size_t>(i) * B + j] <= T(0) || dt[static_cast<std::size_t>(k) * B + j] <= T(0)) {
            continue;
          }
          ++n_triples;
        }
      }
    }
    if (n_triples > 0) {
      const T wa = static_cast<T>(weights.angle) * go / static_cast<T>(n_triples);
      std::vector<T> u(static_cast<std::size_t>(D)), wv(static_cast<std::size_t>(D));
      for (int i = 0; i < B; ++i) {
        for (int j = 0; j < B; ++j) {
          if (j == i) continue;
          for (int k = 0; k < B; ++k) {
            if (k == i || k == j) continue;
            const T nu = ds[static_cast<std::size_t>(i) * B + j];
            const T nw = ds[static_cast<std::size_t>(k) * B + j];
            if (nu <= T(0) || nw <= T(0) || dt[static_cast<std::size_t>(i) * B + j] <= T(0) ||
                dt[static_cast<std::size_t>(k) * B + j] <= T(0)) {
              continue;
            }
            T dot_s = 0, dot_t = 0;
            for (int c = 0; c < D; ++c) {
              u[static_cast<std::size_t>(c)] = xs[static_cast<std::size_t>(i) * D + c] - xs[static_cast<std::size_t>(j) * D + c];
              wv[static_cast<std::size_t>(c)] = xs[static_cast<std::size_t>(k) * D + c] - xs[static_cast<std::size_t>(j) * D + c];
              dot_s += u[static_cast<std::size_t>(c)] * wv[static_cast<std::size_t>(c)];
              dot_t += (xt[static_cast<std::size_t>(i) * D + c] - xt[static_cast<std::size_t>(j) * D + c]) *
                       (xt[static_cast<std::size_t>(k) * D + c] - xt[static_cast<std::size_t>(j) * D + c]);
            }
            const T cos_s = dot_s / (nu * nw);
            const T cos_t = dot_t / (dt[static_cast<std::size_t>(i) * B + j] * dt[static_cast<std::size_t>(k) * B + j]);
            const T ge = wa * detail::huber_grad(cos_s - cos_t);
            const T inv_uw = T(1) / (nu * nw);
            for (int c = 0; c < D; ++c) {
              const T dcos_du = wv[static_cast<std::size_t>(c)] * inv_uw - cos_s * u[static_cast<std::size_t>(c)] / (nu * nu);
              const T dcos_dw = u[static_cast<std::size_t>(c)] * inv_uw - cos_s * wv[static_cast<std::size_t>(c)] / (nw * nw);
              g[static_cast<std::size_t>(i) * D + c] += ge * dcos_du;
              g[static_cast<std::size_t>(k) * D + c] += ge * dcos_dw;
              g[static_cast<std::size_t>(j) * D + c] -= ge * (dcos_du + dcos_dw);
            }
          }
        }
      }
    }
    t.accumulate(ns, g);
  });
}

}  // namespace aver
