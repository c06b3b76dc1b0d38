#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
// Templated on the scalar so the same graph runs in float (training) and
// double (gradient checks).

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "frigid/rng.hpp"

namespace frigid::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Param {
  std::string name;
  Mat<T> value;
  Mat<T> grad;
};

struct Var {
  int id = -1;
};

template <typename T>
class Tape {
 public:
  using M = Mat<T>;
  using Backward = std::function<void(Tape&)>;

  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }

  Var constant(M value) { return push(std::move(value), nullptr, false); }

  Var param(Param<T>& p) {
    Node n;
    n.ref = &p.value;
    n.param = &p;
    n.needs_grad = record_;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const M& value(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    return n.ref ? *n.ref : n.value;
  }

  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

  // Gradient buffer of v, zero-initialized on first access. Parameter nodes
  // accumulate straight into Param::grad.
  M& grad(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.param) {
      if (n.param->grad.rows() != n.param->value.rows() || n.param->grad.cols() != n.param->value.cols()) {
        n.param->grad = M::Zero(n.param->value.rows(), n.param->value.cols());
      }
      return n.param->grad;
    }
    if (!n.has_grad) {
      n.grad = M::Zero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  Var push(M value, Backward back, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = record_ && needs_grad;
    if (n.needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // Seeds d(loss)/d(loss) = 1 and propagates to every recorded node.
  void backward(Var loss) {
    if (!record_) throw std::logic_error("backward on a non-recording tape");
    const M& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) throw std::logic_error("backward needs a scalar loss");
    grad(loss)(0, 0) += T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back && n.has_grad) n.back(*this);
    }
  }

  std::size_t mark() const { return nodes_.size(); }
  void rewind(std::size_t mark) { nodes_.resize(mark); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    M value;
    M grad;
    const M* ref = nullptr;
    Param<T>* param = nullptr;
    bool needs_grad = false;
    bool has_grad = false;
    Backward back;
  };

  bool record_;
  std::vector<Node> nodes_;
};

template <typename T>
bool any_grad(const Tape<T>& t, std::initializer_list<Var> vs) {
  for (Var v : vs) {
    if (t.needs_grad(v)) return true;
  }
  return false;
}

// Y = X W (+ b). W is [in x out], b is [1 x out].
template <typename T>
Var linear(Tape<T>& t, Var x, Var w, Var b) {
  Mat<T> y = t.value(x) * t.value(w);
  y.rowwise() += t.value(b).row(0);
  const bool ng = any_grad(t, {x, w, b});
  return t.push(std::move(y),
                [x, w, b, out = Var{static_cast<int>(t.size())}](Tape<T>& tp) {
                  const Mat<T>& dy = tp.grad(out);
                  if (tp.needs_grad(x)) tp.grad(x).noalias() += dy * tp.value(w).transpose();
                  if (tp.needs_grad(w)) tp.grad(w).noalias() += tp.value(x).transpose() * dy;
                  if (tp.needs_grad(b)) tp.grad(b) += dy.colwise().sum();
                },
                ng);
}

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
  Mat<T> y = t.value(a) * t.value(b);
  return t.push(std::move(y),
                [a, b, out = Var{static_cast<int>(t.size())}](Tape<T>& tp) {
                  const Mat<T>& dy = tp.grad(out);
                  if (tp.needs_grad(a)) tp.grad(a).noalias() += dy * tp.value(b).transpose();
                  if (tp.needs_grad(b)) tp.grad(b).noalias() += tp.value(a).transpose() * dy;
                },
                any_grad(t, {a, b}));
}

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  if (t.value(a).rows() != t.value(b).rows() || t.value(a).cols() != t.value(b).cols()) {
    throw std::invalid_argument("add: shape mismatch");
  }
  Mat<T> y = t.value(a) + t.value(b);
  return t.push(std::move(y),
                [a, b, out = Var{static_cast<int>(t.size())}](Tape<T>& tp) {
                  if (tp.needs_grad(a)) tp.grad(a) += tp.grad(out);
                  if (tp.needs_grad(b)) tp.grad(b) += tp.grad(out);
                },
                any_grad(t, {a, b}));
}

// Exact (erf) GELU, used as the feed-forward nonlinearity.
template <typename T>
Var gelu(Tape<T>& t, Var x) {
  const Mat<T>& xv = t.value(x);
  Mat<T> y(xv.rows(), xv.cols());
  const T inv_sqrt2 = T(0.70710678118654752440);
  for (Eigen::Index i = 0; i < xv.size(); ++i) {
    const T v = xv.data()[i];
    y.data()[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  return t.push(std::move(y),
                [x, out = Var{static_cast<int>(t.size())}, inv_sqrt2](Tape<T>& tp) {
                  const Mat<T>& xv2 = tp.value(x);
                  const Mat<T>& dy = tp.grad(out);
                  Mat<T>& dx = tp.grad(x);
                  const T inv_sqrt2pi = T(0.39894228040143267794);
                  for (Eigen::Index i = 0; i < xv2.size(); ++i) {
                    const T v = xv2.data()[i];
                    const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                    const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
                    dx.data()[i] += dy.data()[i] * (cdf + v * pdf);
                  }
                },
                t.needs_grad(x));
}

template <typename T>
Var layer_norm(Tape<T>& t, Var x, Var gamma, Var beta, T eps = T(1e-5)) {
  const Mat<T>& xv = t.value(x);
  const Eigen::Index n = xv.rows(), d = xv.cols();
  Mat<T> xhat(n, d);
  std::vector<T> rstd(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = xv.row(i).mean();
    const T var = (xv.row(i).array() - mean).square().mean();
    rstd[i] = T(1) / std::sqrt(var + eps);
    xhat.row(i) = (xv.row(i).array() - mean) * rstd[i];
  }
  Mat<T> y = (xhat.array().rowwise() * t.value(gamma).row(0).array()).matrix();
  y.rowwise() += t.value(beta).row(0);
  const bool ng = any_grad(t, {x, gamma, beta});
  return t.push(std::move(y),
                [x, gamma, beta, out = Var{static_cast<int>(t.size())}, xhat = std::move(xhat),
                 rstd = std::move(rstd)](Tape<T>& tp) {
                  const Mat<T>& dy = tp.grad(out);
                  if (tp.needs_grad(gamma)) tp.grad(gamma) += (dy.array() * xhat.array()).colwise().sum().matrix();
                  if (tp.needs_grad(beta)) tp.grad(beta) += dy.colwise().sum();
                  if (tp.needs_grad(x)) {
                    Mat<T>& dx = tp.grad(x);
                    const auto g = tp.value(gamma).row(0).array();
                    const T inv_d = T(1) / static_cast<T>(xhat.cols());
                    for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
                      const Eigen::Array<T, 1, Eigen::Dynamic> dxh = dy.row(i).array() * g;
                      const T s1 = dxh.sum();
                      const T s2 = (dxh * xhat.row(i).array()).sum();
                      dx.row(i).array() += rstd[i] * (dxh - inv_d * s1 - xhat.row(i).array() * (inv_d * s2));
                    }
                  }
                },
                ng);
}

// Rows of `table` selected by `ids`.
template <typename T>
Var embedding(Tape<T>& t, Var table, std::vector<int> ids) {
  const Mat<T>& tv = t.value(table);
  Mat<T> y(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) throw std::out_of_range("embedding index out of range");
    y.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  return t.push(std::move(y),
                [table, ids = std::move(ids), out = Var{static_cast<int>(t.size())}](Tape<T>& tp) {
                  const Mat<T>& dy = tp.grad(out);
                  Mat<T>& dt = tp.grad(table);
                  for (std::size_t i = 0; i < ids.size(); ++i) dt.row(ids[i]) += dy.row(static_cast<Eigen::Index>(i));
                },
                t.needs_grad(table));
}

// Same as embedding but over an arbitrary node: Y = X[rows].
template <typename T>
Var gather_rows(Tape<T>& t, Var x, std::vector<int> rows) {
  return embedding(t, x, std::move(rows));
}

template <typename T>
Var concat_rows(Tape<T>& t, const std::vector<Var>& parts) {
  Eigen::Index n = 0, d = -1;
  bool ng = false;
  for (Var p : parts) {
    n += t.value(p).rows();
    if (t.value(p).rows() > 0) {
      if (d >= 0 && t.value(p).cols() != d) throw std::invalid_argument("concat_rows: width mismatch");
      d = t.value(p).cols();
    }
    ng = ng || t.needs_grad(p);
  }
  if (d < 0) d = parts.empty() ? 0 : t.value(parts.front()).cols();
  Mat<T> y(n, d);
  Eigen::Index r = 0;
  for (Var p : parts) {
    const Mat<T>& pv = t.value(p);
    if (pv.rows() > 0) y.middleRows(r, pv.rows()) = pv;
    r += pv.rows();
  }
  return t.push(std::move(y),
                [parts, out = Var{static_cast<int>(t.size())}](Tape<T>& tp) {
                  const Mat<T>& dy = tp.grad(out);
                  Eigen::Index r2 = 0;
                  for (Var p : parts) {
                    const Eigen::Index rows = tp.value(p).rows();
                    if (tp.needs_grad(p) && rows > 0) tp.grad(p) += dy.middleRows(r2, rows);
                    r2 += rows;
                  }
                },
                ng);
}

// Inverted dropout; identity when p == 0.
template <typename T>
Var dropout(Tape<T>& t, Var x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  const Mat<T>& xv = t.value(x);
  Mat<T> keep(xv.rows(), xv.cols());
  const T scale = T(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < keep.size(); ++i) keep.data()[i] = rng.uniform() < p ? T(0) : scale;
  Mat<T> y = xv.cwiseProduct(keep);
  return t.push(std::move(y),
                [x, keep = std::move(keep), out = Var{static_cast<int>(t.size())}](Tape<T>& tp) {
                  tp.grad(x) += tp.grad(out).cwiseProduct(keep);
                },
                t.needs_grad(x));
}

// One attention group: queries [q0, q0+qn) attend to keys [k0, k0+kn).
struct AttnSegment {
  int q0 = 0;
  int qn = 0;
  int k0 = 0;
  int kn = 0;
};

// Multi-head scaled dot-product attention over row-packed groups. Q is
// [Nq x d], K and V are [Nk x d]; head h uses columns [h*d/H, (h+1)*d/H).
// Keys outside a query's group are masked; a group with no keys yields zeros.
template <typename T>
Var attention(Tape<T>& t, Var q, Var k, Var v, int n_heads, std::vector<AttnSegment> segs) {
  const Mat<T>& qv = t.value(q);
  const Mat<T>& kv = t.value(k);
  const Mat<T>& vv = t.value(v);
  const Eigen::Index d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() || d % n_heads != 0) {
    throw std::invalid_argument("attention: shape mismatch");
  }
  const Eigen::Index dh = d / n_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Mat<T> y = Mat<T>::Zero(qv.rows(), d);
  std::vector<Mat<T>> probs;
  const bool ng = any_grad(t, {q, k, v});
  if (ng) probs.reserve(segs.size() * static_cast<std::size_t>(n_heads));
  for (const auto& s : segs) {
    for (int h = 0; h < n_heads; ++h) {
      if (s.kn == 0 || s.qn == 0) {
        if (ng) probs.emplace_back();
        continue;
      }
      const auto qb = qv.block(s.q0, h * dh, s.qn, dh);
      const auto kb = kv.block(s.k0, h * dh, s.kn, dh);
      Mat<T> p = (qb * kb.transpose()) * scale;
      for (Eigen::Index i = 0; i < p.rows(); ++i) {
        const T mx = p.row(i).maxCoeff();
        p.row(i) = (p.row(i).array() - mx).exp();
        p.row(i) /= p.row(i).sum();
      }
      y.block(s.q0, h * dh, s.qn, dh).noalias() = p * vv.block(s.k0, h * dh, s.kn, dh);
      if (ng) probs.push_back(std::move(p));
    }
  }
  return t.push(std::move(y),
                [q, k, v, n_heads, dh, scale, segs = std::move(segs), probs = std::move(probs),
                 out = Var{static_cast<int>(t.size())}](Tape<T>& tp) {
                  const Mat<T>& dy = tp.grad(out);
                  const Mat<T>& qv2 = tp.value(q);
                  const Mat<T>& kv2 = tp.value(k);
                  const Mat<T>& vv2 = tp.value(v);
                  Mat<T>* dq = tp.needs_grad(q) ? &tp.grad(q) : nullptr;
                  Mat<T>* dk = tp.needs_grad(k) ? &tp.grad(k) : nullptr;
                  Mat<T>* dv = tp.needs_grad(v) ? &tp.grad(v) : nullptr;
                  std::size_t idx = 0;
                  for (const auto& s : segs) {
                    for (int h = 0; h < n_heads; ++h, ++idx) {
                      if (s.kn == 0 || s.qn == 0) continue;
                      const Mat<T>& p = probs[idx];
                      const auto dyb = dy.block(s.q0, h * dh, s.qn, dh);
                      if (dv) dv->block(s.k0, h * dh, s.kn, dh).noalias() += p.transpose() * dyb;
                      Mat<T> dp = dyb * vv2.block(s.k0, h * dh, s.kn, dh).transpose();
                      // softmax backward: dS = P * (dP - rowsum(dP * P))
                      Mat<T> ds = p.cwiseProduct(dp);
                      const Eigen::Matrix<T, Eigen::Dynamic, 1> rs = ds.rowwise().sum();
                      ds -= p.cwiseProduct(rs.replicate(1, p.cols()));
                      ds *= scale;
                      if (dq) dq->block(s.q0, h * dh, s.qn, dh).noalias() += ds * kv2.block(s.k0, h * dh, s.kn, dh);
                      if (dk) dk->block(s.k0, h * dh, s.kn, dh).noalias() += ds.transpose() * qv2.block(s.q0, h * dh, s.qn, dh);
                    }
                  }
                },
                ng);
}

// Sum of -log softmax(logits[r])[target[r]] over the listed rows, divided by
// `denom`. Returns a 1x1 node.
template <typename T>
Var cross_entropy(Tape<T>& t, Var logits, std::vector<int> rows, std::vector<int> targets, T denom) {
  const Mat<T>& lv = t.value(logits);
  Mat<T> soft(static_cast<Eigen::Index>(rows.size()), lv.cols());
  T total = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = lv.row(rows[i]);
    const T mx = r.maxCoeff();
    auto e = (r.array() - mx).exp();
    const T z = e.sum();
    soft.row(static_cast<Eigen::Index>(i)) = e / z;
    total += -(r(targets[i]) - mx - std::log(z));
  }
  Mat<T> y(1, 1);
  y(0, 0) = rows.empty() ? T(0) : total / denom;
  return t.push(std::move(y),
                [logits, rows = std::move(rows), targets = std::move(targets), soft = std::move(soft), denom,
                 out = Var{static_cast<int>(t.size())}](Tape<T>& tp) {
                  const T g = tp.grad(out)(0, 0) / denom;
                  Mat<T>& dl = tp.grad(logits);
                  for (std::size_t i = 0; i < rows.size(); ++i) {
                    dl.row(rows[i]) += g * soft.row(static_cast<Eigen::Index>(i));
                    dl(rows[i], targets[i]) -= g;
                  }
                },
                t.needs_grad(logits));
}

}  // namespace frigid::nn
