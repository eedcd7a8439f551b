#pragma once

// Differentiable primitives over Array. Each op computes its forward value eagerly and
// records a closure that accumulates input gradients during Tape::backward.

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "dcst/diffcore/tape.hpp"

namespace dcst {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using RowVecMap = Eigen::Map<Eigen::RowVectorXd>;
using ConstRowVecMap = Eigen::Map<const Eigen::RowVectorXd>;

inline void same_tape(Var a, Var b, const char* op) {
  if (&a.tape() != &b.tape()) throw DimensionError(std::string(op) + ": operands live on different tapes");
}

inline void accumulate(Array& dst, const Array& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

inline std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t p = 1;
  for (std::size_t i = from; i < to; ++i) p *= s[i];
  return p;
}

/// dst = tanh(src) through the vectorised exp: tanh(u) = 1 - 2 / (exp(2u) + 1). Inputs are
/// clamped to ±20, where tanh already rounds to ±1.
inline void fast_tanh(const double* src, double* dst, std::size_t n) {
  Eigen::Map<const Eigen::ArrayXd> u(src, static_cast<long>(n));
  Eigen::Map<Eigen::ArrayXd> out(dst, static_cast<long>(n));
  out = 1.0 - 2.0 / ((2.0 * u.max(-20.0).min(20.0)).exp() + 1.0);
}

inline double gelu_inner(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return c * (x + 0.044715 * x * x * x);
}

}  // namespace detail

inline Var add(Var a, Var b) {
  detail::same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  Array out = a.value();
  detail::accumulate(out, b.value());
  return a.tape().record("add", std::move(out), a.requires_grad() || b.requires_grad(),
                         [a, b](Tape& t, const Array& g, const Array&) {
                           if (a.requires_grad()) t.add_grad(a.index(), g);
                           if (b.requires_grad()) t.add_grad(b.index(), g);
                         });
}

inline Var sub(Var a, Var b) {
  detail::same_tape(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape().record("sub", std::move(out), a.requires_grad() || b.requires_grad(),
                         [a, b](Tape& t, const Array& g, const Array&) {
                           if (a.requires_grad()) t.add_grad(a.index(), g);
                           if (b.requires_grad()) {
                             auto& gb = t.grad(b.index());
                             for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
                           }
                         });
}

inline Var mul(Var a, Var b) {
  detail::same_tape(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape().record("mul", std::move(out), a.requires_grad() || b.requires_grad(),
                         [a, b](Tape& t, const Array& g, const Array&) {
                           if (a.requires_grad()) {
                             auto& ga = t.grad(a.index());
                             const auto& bv = b.value();
                             for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
                           }
                           if (b.requires_grad()) {
                             auto& gb = t.grad(b.index());
                             const auto& av = a.value();
                             for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
                           }
                         });
}

inline Var scale(Var a, double s) {
  Array out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.tape().record("scale", std::move(out), a.requires_grad(), [a, s](Tape& t, const Array& g, const Array&) {
    auto& ga = t.grad(a.index());
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
  });
}

/// x + p where p's shape equals the trailing dimensions of x.
inline Var add_broadcast(Var x, Var p) {
  detail::same_tape(x, p, "add_broadcast");
  const auto& xs = x.shape();
  const auto& ps = p.shape();
  if (ps.size() > xs.size() || !std::equal(ps.begin(), ps.end(), xs.end() - static_cast<long>(ps.size()))) {
    throw DimensionError("add_broadcast: " + shape_string(ps) + " is not a suffix of " + shape_string(xs));
  }
  const std::size_t inner = p.value().size();
  Array out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += p.value()[i % inner];
  return x.tape().record("add_broadcast", std::move(out), x.requires_grad() || p.requires_grad(),
                         [x, p, inner](Tape& t, const Array& g, const Array&) {
                           if (x.requires_grad()) t.add_grad(x.index(), g);
                           if (p.requires_grad()) {
                             auto& gp = t.grad(p.index());
                             for (std::size_t i = 0; i < g.size(); ++i) gp[i % inner] += g[i];
                           }
                         });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape().record("sum", Array::scalar(s), x.requires_grad(), [x](Tape& t, const Array& g, const Array&) {
    auto& gx = t.grad(x.index());
    for (auto& v : gx.data()) v += g[0];
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// out = x·w (+ b) over the last axis of x; w is [Din, Dout], b is [Dout].
inline Var linear(Var x, Var w, std::optional<Var> b = std::nullopt) {
  using namespace detail;
  same_tape(x, w, "linear");
  const auto& ws = w.shape();
  if (ws.size() != 2 || x.value().rank() < 1 || x.shape().back() != ws[0]) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                         shape_string(ws));
  }
  const std::size_t din = ws[0];
  const std::size_t dout = ws[1];
  if (b && (b->shape() != Shape{dout})) {
    throw DimensionError("linear: bias " + shape_string(b->shape()) + " does not match weight " + shape_string(ws));
  }
  const std::size_t rows = x.value().size() / din;
  Shape os = x.shape();
  os.back() = dout;
  Array out = Array::uninitialized(os);
  MatMap y(out.raw(), static_cast<long>(rows), static_cast<long>(dout));
  y.noalias() = ConstMatMap(x.value().raw(), rows, din) * ConstMatMap(w.value().raw(), din, dout);
  if (b) y.rowwise() += ConstRowVecMap(b->value().raw(), dout);
  const bool rg = x.requires_grad() || w.requires_grad() || (b && b->requires_grad());
  return x.tape().record("linear", std::move(out), rg, [x, w, b, rows, din, dout](Tape& t, const Array& g, const Array&) {
    ConstMatMap gy(g.raw(), rows, dout);
    if (x.requires_grad()) {
      const auto gx = gy * ConstMatMap(w.value().raw(), din, dout).transpose();
      if (t.has_grad(x.index())) {
        MatMap(t.grad(x.index()).raw(), rows, din).noalias() += gx;
      } else {
        MatMap(t.fresh_grad(x.index()).raw(), rows, din).noalias() = gx;
      }
    }
    if (w.requires_grad()) {
      const auto gw = ConstMatMap(x.value().raw(), rows, din).transpose() * gy;
      if (t.has_grad(w.index())) {
        MatMap(t.grad(w.index()).raw(), din, dout).noalias() += gw;
      } else {
        MatMap(t.fresh_grad(w.index()).raw(), din, dout).noalias() = gw;
      }
    }
    if (b && b->requires_grad()) RowVecMap(t.grad(b->index()).raw(), dout) += gy.colwise().sum();
  });
}

/// Slot-wise affine map: x is [..., S, Din], w is [S, Din, Dout], b is [S, Dout]; slot s of
/// every leading index uses w[s], b[s].
inline Var indexed_linear(Var x, Var w, Var b) {
  using namespace detail;
  same_tape(x, w, "indexed_linear");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() < 2 || ws.size() != 3 || xs[xs.size() - 2] != ws[0] || xs.back() != ws[1] ||
      b.shape() != Shape{ws[0], ws[2]}) {
    throw DimensionError("indexed_linear: input " + shape_string(xs) + " incompatible with weight " +
                         shape_string(ws) + " and bias " + shape_string(b.shape()));
  }
  const std::size_t slots = ws[0], din = ws[1], dout = ws[2];
  const std::size_t rows = x.value().size() / (slots * din);
  Shape os = xs;
  os.back() = dout;
  Array out = Array::uninitialized(os);
  for (std::size_t s = 0; s < slots; ++s) {
    StridedMap y(out.raw() + s * dout, rows, dout, Eigen::OuterStride<>(slots * dout));
    y.noalias() = ConstStridedMap(x.value().raw() + s * din, rows, din, Eigen::OuterStride<>(slots * din)) *
                  ConstMatMap(w.value().raw() + s * din * dout, din, dout);
    y.rowwise() += ConstRowVecMap(b.value().raw() + s * dout, dout);
  }
  const bool rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
  return x.tape().record(
      "indexed_linear", std::move(out), rg, [x, w, b, slots, din, dout, rows](Tape& t, const Array& g, const Array&) {
        for (std::size_t s = 0; s < slots; ++s) {
          ConstStridedMap gy(g.raw() + s * dout, rows, dout, Eigen::OuterStride<>(slots * dout));
          if (x.requires_grad()) {
            StridedMap(t.grad(x.index()).raw() + s * din, rows, din, Eigen::OuterStride<>(slots * din)).noalias() +=
                gy * ConstMatMap(w.value().raw() + s * din * dout, din, dout).transpose();
          }
          if (w.requires_grad()) {
            MatMap(t.grad(w.index()).raw() + s * din * dout, din, dout).noalias() +=
                ConstStridedMap(x.value().raw() + s * din, rows, din, Eigen::OuterStride<>(slots * din)).transpose() *
                gy;
          }
          if (b.requires_grad()) RowVecMap(t.grad(b.index()).raw() + s * dout, dout) += gy.colwise().sum();
        }
      });
}

/// Normalises the last axis to zero mean / unit variance, then applies gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  const std::size_t d = x.shape().empty() ? 0 : x.shape().back();
  if (d == 0 || gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm: input " + shape_string(x.shape()) + " with gain " +
                         shape_string(gain.shape()) + " and bias " + shape_string(bias.shape()));
  }
  const std::size_t rows = x.value().size() / d;
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  Array xhat = Array::uninitialized(x.shape());
  std::vector<double> rstd(rows);
  Array out = Array::uninitialized(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.raw() + r * d;
    double mu = 0.0;
    for (std::size_t k = 0; k < d; ++k) mu += xr[k];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t k = 0; k < d; ++k) var += (xr[k] - mu) * (xr[k] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t k = 0; k < d; ++k) {
      const double h = (xr[k] - mu) * rstd[r];
      xhat[r * d + k] = h;
      out[r * d + k] = h * gv[k] + bv[k];
    }
  }
  const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  return x.tape().record(
      "layer_norm", std::move(out), rg,
      [x, gain, bias, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, const Array& g, const Array&) {
        const auto& gv = gain.value();
        Array* gx = x.requires_grad() ? &t.grad(x.index()) : nullptr;
        Array* gg = gain.requires_grad() ? &t.grad(gain.index()) : nullptr;
        Array* gb = bias.requires_grad() ? &t.grad(bias.index()) : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.raw() + r * d;
          const double* hr = xhat.raw() + r * d;
          if (gg || gb) {
            for (std::size_t k = 0; k < d; ++k) {
              if (gg) (*gg)[k] += gr[k] * hr[k];
              if (gb) (*gb)[k] += gr[k];
            }
          }
          if (gx) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
              const double gh = gr[k] * gv[k];
              m1 += gh;
              m2 += gh * hr[k];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            double* out = gx->raw() + r * d;
            for (std::size_t k = 0; k < d; ++k) out[k] += rstd[r] * (gr[k] * gv[k] - m1 - hr[k] * m2);
          }
        }
      });
}

inline Var softmax(Var x, int axis = -1) {
  const auto& s = x.shape();
  const std::size_t ax = resolve_axis(axis, s.size());
  const std::size_t outer = detail::prod(s, 0, ax), n = s[ax], inner = detail::prod(s, ax + 1, s.size());
  Array out = Array::uninitialized(s);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      double mx = xv[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, xv[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= z;
    }
  }
  return x.tape().record("softmax", std::move(out), x.requires_grad(),
                         [x, outer, n, inner](Tape& t, const Array& g, const Array& y) {
                           auto& gx = t.grad(x.index());
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t i = 0; i < inner; ++i) {
                               const std::size_t base = o * n * inner + i;
                               double dot = 0.0;
                               for (std::size_t k = 0; k < n; ++k) dot += g[base + k * inner] * y[base + k * inner];
                               for (std::size_t k = 0; k < n; ++k) {
                                 gx[base + k * inner] += y[base + k * inner] * (g[base + k * inner] - dot);
                               }
                             }
                           }
                         });
}

/// tanh-approximated GELU; smooth at the origin.
inline Var gelu(Var x) {
  Array out = Array::uninitialized(x.shape());
  const auto& xv = x.value();
  auto th = std::make_shared<Storage>(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) (*th)[i] = detail::gelu_inner(xv[i]);
  detail::fast_tanh(th->data(), th->data(), th->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * xv[i] * (1.0 + (*th)[i]);
  return x.tape().record("gelu", std::move(out), x.requires_grad(), [x, th](Tape& t, const Array& g, const Array&) {
    constexpr double c = 0.7978845608028654;
    auto& gx = t.grad(x.index());
    const auto& xv = x.value();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double v = xv[i], h = (*th)[i];
      const double d = 0.5 * (1.0 + h) + 0.5 * v * (1.0 - h * h) * c * (1.0 + 3.0 * 0.044715 * v * v);
      gx[i] += g[i] * d;
    }
  });
}

inline Var sigmoid(Var x) {
  Array out = Array::uninitialized(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  return x.tape().record("sigmoid", std::move(out), x.requires_grad(), [x](Tape& t, const Array& g, const Array& y) {
    auto& gx = t.grad(x.index());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

inline Var reshape(Var x, Shape shape) {
  Array out = x.value().reshaped(std::move(shape));
  return x.tape().record("reshape", std::move(out), x.requires_grad(), [x](Tape& t, const Array& g, const Array&) {
    t.add_grad(x.index(), g);
  });
}

namespace detail {

/// Copies `src` into `dst` with axes reordered: dst axis k is src axis perm[k].
inline void permute_into(const Array& src, Array& dst, const std::vector<std::size_t>& perm, bool add) {
  const auto& s = src.shape();
  const std::size_t rank = s.size();
  std::vector<std::size_t> src_stride(rank, 1);
  for (std::size_t k = rank; k-- > 1;) src_stride[k - 1] = src_stride[k] * s[k];
  std::vector<std::size_t> dshape(rank), dstride(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    dshape[k] = s[perm[k]];
    dstride[k] = src_stride[perm[k]];
  }
  // Innermost destination axis copied as a (possibly strided) run.
  const std::size_t run = rank ? dshape[rank - 1] : 1;
  const std::size_t run_stride = rank ? dstride[rank - 1] : 1;
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t runs = src.size() / run;
  const double* sp = src.raw();
  double* dp = dst.raw();
  for (std::size_t r = 0; r < runs; ++r) {
    std::size_t off = 0;
    for (std::size_t k = 0; k + 1 < rank; ++k) off += idx[k] * dstride[k];
    double* out = dp + r * run;
    if (add) {
      for (std::size_t i = 0; i < run; ++i) out[i] += sp[off + i * run_stride];
    } else {
      for (std::size_t i = 0; i < run; ++i) out[i] = sp[off + i * run_stride];
    }
    for (std::size_t k = rank - 1; k-- > 0;) {
      if (++idx[k] < dshape[k]) break;
      idx[k] = 0;
    }
  }
}

}  // namespace detail

inline Var permute(Var x, std::vector<std::size_t> perm) {
  const auto& s = x.shape();
  if (perm.size() != s.size()) throw DimensionError("permute: permutation rank mismatch for " + shape_string(s));
  std::vector<bool> seen(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || seen[p]) throw DimensionError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape os(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) os[k] = s[perm[k]];
  Array out = Array::uninitialized(os);
  detail::permute_into(x.value(), out, perm, false);
  std::vector<std::size_t> inverse(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) inverse[perm[k]] = k;
  return x.tape().record("permute", std::move(out), x.requires_grad(),
                         [x, inverse](Tape& t, const Array& g, const Array&) {
                           if (t.has_grad(x.index())) {
                             detail::permute_into(g, t.grad(x.index()), inverse, true);
                           } else {
                             detail::permute_into(g, t.fresh_grad(x.index()), inverse, false);
                           }
                         });
}

/// Batched matrix product over matching leading axes: a [..., M, K] times b [..., K, N]
/// (or b [..., N, K] when transpose_b).
inline Var bmm(Var a, Var b, bool transpose_b = false) {
  using namespace detail;
  same_tape(a, b, "bmm");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const std::size_t r = as.size();
  if (r < 2 || bs.size() != r || !std::equal(as.begin(), as.end() - 2, bs.begin())) {
    throw DimensionError("bmm: incompatible shapes " + shape_string(as) + " and " + shape_string(bs));
  }
  const std::size_t m = as[r - 2], k = as[r - 1];
  const std::size_t bk = transpose_b ? bs[r - 1] : bs[r - 2];
  const std::size_t n = transpose_b ? bs[r - 2] : bs[r - 1];
  if (bk != k) throw DimensionError("bmm: inner dimension mismatch " + shape_string(as) + " x " + shape_string(bs));
  const std::size_t groups = prod(as, 0, r - 2);
  Shape os = as;
  os[r - 1] = n;
  Array out = Array::uninitialized(os);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    ConstMatMap am(a.value().raw() + gi * m * k, m, k);
    MatMap om(out.raw() + gi * m * n, m, n);
    if (transpose_b) {
      om.noalias() = am * ConstMatMap(b.value().raw() + gi * n * k, n, k).transpose();
    } else {
      om.noalias() = am * ConstMatMap(b.value().raw() + gi * k * n, k, n);
    }
  }
  return a.tape().record(
      "bmm", std::move(out), a.requires_grad() || b.requires_grad(),
      [a, b, transpose_b, groups, m, k, n](Tape& t, const Array& g, const Array&) {
        // A first contribution overwrites a fresh buffer; groups write disjoint blocks.
        const bool fresh_a = a.requires_grad() && !t.has_grad(a.index());
        const bool fresh_b = b.requires_grad() && !t.has_grad(b.index());
        double* ga_raw = a.requires_grad() ? (fresh_a ? t.fresh_grad(a.index()) : t.grad(a.index())).raw() : nullptr;
        double* gb_raw = b.requires_grad() ? (fresh_b ? t.fresh_grad(b.index()) : t.grad(b.index())).raw() : nullptr;
        auto put = [](auto&& dst, const auto& expr, bool fresh) {
          if (fresh) {
            dst.noalias() = expr;
          } else {
            dst.noalias() += expr;
          }
        };
        for (std::size_t gi = 0; gi < groups; ++gi) {
          ConstMatMap gm(g.raw() + gi * m * n, m, n);
          if (ga_raw) {
            MatMap ga(ga_raw + gi * m * k, m, k);
            if (transpose_b) {
              put(ga, gm * ConstMatMap(b.value().raw() + gi * n * k, n, k), fresh_a);
            } else {
              put(ga, gm * ConstMatMap(b.value().raw() + gi * k * n, k, n).transpose(), fresh_a);
            }
          }
          if (gb_raw) {
            ConstMatMap am(a.value().raw() + gi * m * k, m, k);
            if (transpose_b) {
              put(MatMap(gb_raw + gi * n * k, n, k), gm.transpose() * am, fresh_b);
            } else {
              put(MatMap(gb_raw + gi * k * n, k, n), am.transpose() * gm, fresh_b);
            }
          }
        }
      });
}

/// Sums positions along `axis` into groups: out[..., group[p], ...] += x[..., p, ...].
inline Var group_sum(Var x, int axis, std::vector<std::size_t> group, std::size_t n_groups) {
  const auto& s = x.shape();
  const std::size_t ax = resolve_axis(axis, s.size());
  if (group.size() != s[ax]) {
    throw DimensionError("group_sum: " + std::to_string(group.size()) + " group labels for axis of length " +
                         std::to_string(s[ax]));
  }
  for (auto gidx : group) {
    if (gidx >= n_groups) throw DimensionError("group_sum: group index out of range");
  }
  const std::size_t outer = detail::prod(s, 0, ax), n = s[ax], inner = detail::prod(s, ax + 1, s.size());
  Shape os = s;
  os[ax] = n_groups;
  Array out(os);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t p = 0; p < n; ++p) {
      const double* src = xv.raw() + (o * n + p) * inner;
      double* dst = out.raw() + (o * n_groups + group[p]) * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  return x.tape().record("group_sum", std::move(out), x.requires_grad(),
                         [x, group = std::move(group), n_groups, outer, n, inner](Tape& t, const Array& g, const Array&) {
                           auto& gx = t.grad(x.index());
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t p = 0; p < n; ++p) {
                               const double* src = g.raw() + (o * n_groups + group[p]) * inner;
                               double* dst = gx.raw() + (o * n + p) * inner;
                               for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                             }
                           }
                         });
}

/// Sliding windows over the second-to-last axis: [..., T, C] -> [..., T-k+1, k*C], window
/// w at position t holding steps t..t+k-1.
inline Var unfold(Var x, std::size_t k) {
  const auto& s = x.shape();
  if (s.size() < 2 || k == 0 || k > s[s.size() - 2]) {
    throw DimensionError("unfold: window " + std::to_string(k) + " invalid for " + shape_string(s));
  }
  const std::size_t steps = s[s.size() - 2], c = s.back();
  const std::size_t outer = x.value().size() / (steps * c);
  const std::size_t out_steps = steps - k + 1;
  Shape os = s;
  os[s.size() - 2] = out_steps;
  os.back() = k * c;
  Array out = Array::uninitialized(os);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t t = 0; t < out_steps; ++t) {
      std::copy_n(xv.raw() + (o * steps + t) * c, k * c, out.raw() + (o * out_steps + t) * k * c);
    }
  }
  return x.tape().record("unfold", std::move(out), x.requires_grad(),
                         [x, k, steps, c, outer, out_steps](Tape& t, const Array& g, const Array&) {
                           auto& gx = t.grad(x.index());
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t s2 = 0; s2 < out_steps; ++s2) {
                               const double* src = g.raw() + (o * out_steps + s2) * k * c;
                               double* dst = gx.raw() + (o * steps + s2) * c;
                               for (std::size_t i = 0; i < k * c; ++i) dst[i] += src[i];
                             }
                           }
                         });
}

/// Columns [begin, end) of the last axis.
inline Var slice_last(Var x, std::size_t begin, std::size_t end) {
  const auto& s = x.shape();
  if (s.empty() || begin >= end || end > s.back()) {
    throw DimensionError("slice_last: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_string(s));
  }
  const std::size_t c = s.back(), w = end - begin, rows = x.value().size() / c;
  Shape os = s;
  os.back() = w;
  Array out = Array::uninitialized(os);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.value().raw() + r * c + begin, w, out.raw() + r * w);
  return x.tape().record("slice_last", std::move(out), x.requires_grad(),
                         [x, begin, c, w, rows](Tape& t, const Array& g, const Array&) {
                           auto& gx = t.grad(x.index());
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t i = 0; i < w; ++i) gx[r * c + begin + i] += g[r * w + i];
                           }
                         });
}

/// Left-multiplies along one axis by a constant matrix m [P, Q]: the axis of length Q
/// becomes length P.
inline Var mix(const Array& m, Var x, int axis) {
  using namespace detail;
  const auto& s = x.shape();
  const std::size_t ax = resolve_axis(axis, s.size());
  if (m.rank() != 2 || m.shape()[1] != s[ax]) {
    throw DimensionError("mix: matrix " + shape_string(m.shape()) + " incompatible with axis " + std::to_string(ax) +
                         " of " + shape_string(s));
  }
  const std::size_t p = m.shape()[0], q = m.shape()[1];
  const std::size_t outer = prod(s, 0, ax), inner = prod(s, ax + 1, s.size());
  Shape os = s;
  os[ax] = p;
  Array out = Array::uninitialized(os);
  ConstMatMap mm(m.raw(), p, q);
  for (std::size_t o = 0; o < outer; ++o) {
    MatMap(out.raw() + o * p * inner, p, inner).noalias() = mm * ConstMatMap(x.value().raw() + o * q * inner, q, inner);
  }
  return x.tape().record("mix", std::move(out), x.requires_grad(),
                         [x, m, p, q, outer, inner](Tape& t, const Array& g, const Array&) {
                           auto& gx = t.grad(x.index());
                           ConstMatMap mm(m.raw(), p, q);
                           for (std::size_t o = 0; o < outer; ++o) {
                             MatMap(gx.raw() + o * q * inner, q, inner).noalias() +=
                                 mm.transpose() * ConstMatMap(g.raw() + o * p * inner, p, inner);
                           }
                         });
}

/// Mean absolute error; the subgradient at exact ties is zero.
inline Var mae(Var pred, Var target) {
  detail::same_tape(pred, target, "mae");
  require_same_shape(pred.value(), target.value(), "mae");
  const auto& pv = pred.value();
  const auto& tv = target.value();
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) s += std::abs(pv[i] - tv[i]);
  const double inv_n = 1.0 / static_cast<double>(pv.size());
  return pred.tape().record(
      "mae", Array::scalar(s * inv_n), pred.requires_grad() || target.requires_grad(),
      [pred, target, inv_n](Tape& t, const Array& g, const Array&) {
        const auto& pv = pred.value();
        const auto& tv = target.value();
        Array* gp = pred.requires_grad() ? &t.grad(pred.index()) : nullptr;
        Array* gt = target.requires_grad() ? &t.grad(target.index()) : nullptr;
        for (std::size_t i = 0; i < pv.size(); ++i) {
          const double d = pv[i] - tv[i];
          const double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
          if (gp) (*gp)[i] += g[0] * sgn * inv_n;
          if (gt) (*gt)[i] -= g[0] * sgn * inv_n;
        }
      });
}

inline Var mse(Var pred, Var target) {
  detail::same_tape(pred, target, "mse");
  require_same_shape(pred.value(), target.value(), "mse");
  const auto& pv = pred.value();
  const auto& tv = target.value();
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) s += (pv[i] - tv[i]) * (pv[i] - tv[i]);
  const double inv_n = 1.0 / static_cast<double>(pv.size());
  return pred.tape().record(
      "mse", Array::scalar(s * inv_n), pred.requires_grad() || target.requires_grad(),
      [pred, target, inv_n](Tape& t, const Array& g, const Array&) {
        const auto& pv = pred.value();
        const auto& tv = target.value();
        Array* gp = pred.requires_grad() ? &t.grad(pred.index()) : nullptr;
        Array* gt = target.requires_grad() ? &t.grad(target.index()) : nullptr;
        for (std::size_t i = 0; i < pv.size(); ++i) {
          const double d = 2.0 * (pv[i] - tv[i]) * inv_n * g[0];
          if (gp) (*gp)[i] += d;
          if (gt) (*gt)[i] -= d;
        }
      });
}

}  // namespace dcst
