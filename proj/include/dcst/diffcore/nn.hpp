#pragma once

#include <cmath>
#include <string>

#include "dcst/diffcore/ops.hpp"
#include "dcst/diffcore/rng.hpp"

namespace dcst::nn {

inline Array xavier(SeededRng& rng, const Shape& shape, std::size_t fan_in, std::size_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return rng.uniform_array(shape, -limit, limit);
}

struct Linear {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;  // optional

  static Linear create(ParameterStore& store, const std::string& name, std::size_t din, std::size_t dout,
                       SeededRng& rng, bool with_bias = true) {
    Linear l;
    l.weight = &store.add(name + ".weight", xavier(rng, {din, dout}, din, dout));
    if (with_bias) l.bias = &store.add(name + ".bias", Array(Shape{dout}));
    return l;
  }

  Var operator()(Var x) const {
    Tape& t = x.tape();
    if (bias) return linear(x, t.param(*weight), t.param(*bias));
    return linear(x, t.param(*weight));
  }
};

struct LayerNorm {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;
  double eps = 1e-5;

  static LayerNorm create(ParameterStore& store, const std::string& name, std::size_t d, double eps = 1e-5) {
    return LayerNorm{&store.add(name + ".gain", Array(Shape{d}, 1.0)), &store.add(name + ".bias", Array(Shape{d})),
                     eps};
  }

  Var operator()(Var x) const { return layer_norm(x, x.tape().param(*gain), x.tape().param(*bias), eps); }
};

/// Position-wise feed-forward block D -> D_ff -> D with a GELU in between.
struct Mlp {
  Linear fc1;
  Linear fc2;

  static Mlp create(ParameterStore& store, const std::string& name, std::size_t d, std::size_t d_ff, SeededRng& rng) {
    return Mlp{Linear::create(store, name + ".fc1", d, d_ff, rng), Linear::create(store, name + ".fc2", d_ff, d, rng)};
  }

  Var operator()(Var x) const { return fc2(gelu(fc1(x))); }
};

inline Var mlp_block(Var x, const Mlp& params) { return params(x); }

/// Query/key/value projections (all heads stacked column-wise, no bias) and the output
/// projection.
struct Attention {
  Parameter* wq = nullptr;
  Parameter* wk = nullptr;
  Parameter* wv = nullptr;
  Linear out;
  std::size_t heads = 1;

  static Attention create(ParameterStore& store, const std::string& name, std::size_t d, std::size_t heads,
                          SeededRng& rng) {
    if (heads == 0 || d % heads != 0) {
      throw ConfigError("attention width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                        " heads");
    }
    Attention a;
    a.wq = &store.add(name + ".wq", xavier(rng, {d, d}, d, d));
    a.wk = &store.add(name + ".wk", xavier(rng, {d, d}, d, d));
    a.wv = &store.add(name + ".wv", xavier(rng, {d, d}, d, d));
    a.out = Linear::create(store, name + ".out", d, d, rng);
    a.heads = heads;
    return a;
  }
};

/// Scaled dot-product attention with `heads` heads over matching leading axes:
/// q_in [..., Lq, D], k_in/v_in [..., Lk, D] -> [..., Lq, D]. When `weights` is given it
/// receives the attention matrices, shape [G, heads, Lq, Lk] with G the leading size.
inline Var multi_head_attention(Var q_in, Var k_in, Var v_in, const Attention& p, Array* weights = nullptr) {
  const auto& qs = q_in.shape();
  const auto& ks = k_in.shape();
  if (qs.size() < 2 || ks.size() != qs.size() || v_in.shape() != ks ||
      !std::equal(qs.begin(), qs.end() - 2, ks.begin()) || qs.back() != ks.back()) {
    throw DimensionError("multi_head_attention: query " + shape_string(qs) + " incompatible with key/value " +
                         shape_string(ks) + "/" + shape_string(v_in.shape()));
  }
  const std::size_t d = qs.back();
  if (p.heads == 0 || d % p.heads != 0) {
    throw ConfigError("attention width " + std::to_string(d) + " not divisible by " + std::to_string(p.heads) +
                      " heads");
  }
  if (p.wq->shape() != Shape{d, d}) {
    throw DimensionError("multi_head_attention: projections " + shape_string(p.wq->shape()) + " for width " +
                         std::to_string(d));
  }
  const std::size_t h = p.heads, dh = d / h;
  const std::size_t lq = qs[qs.size() - 2], lk = ks[ks.size() - 2];
  const std::size_t g = q_in.value().size() / (lq * d);
  Tape& t = q_in.tape();

  auto split_heads = [&](Var x, std::size_t len) {
    return reshape(permute(reshape(x, {g, len, h, dh}), {0, 2, 1, 3}), {g * h, len, dh});
  };
  Var q = split_heads(linear(q_in, t.param(*p.wq)), lq);
  Var k = split_heads(linear(k_in, t.param(*p.wk)), lk);
  Var v = split_heads(linear(v_in, t.param(*p.wv)), lk);

  Var att = softmax(scale(bmm(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(static_cast<double>(dh))), -1);
  if (weights) *weights = att.value().reshaped({g, h, lq, lk});
  Var ctx = reshape(permute(reshape(bmm(att, v), {g, h, lq, dh}), {0, 2, 1, 3}), qs);
  return p.out(ctx);
}

}  // namespace dcst::nn
