#pragma once

// Finite-difference checks of every differentiable building block on small random
// instances, shared by the `grad-check` subcommand and the acceptance run.

#include <functional>
#include <string>
#include <vector>

#include "dcst/diffcore.hpp"
#include "dcst/model.hpp"
#include "dcst/scales.hpp"
#include "dcst/teacher.hpp"

namespace dcst::gradcheck {

/// Reduces a tensor to a scalar with fixed random ±[0.5, 1.5] weights so every output
/// coordinate contributes an O(1) gradient and none cancels to exactly zero.
inline Var weighted_sum(Var out, std::uint64_t seed) {
  SeededRng rng(seed ^ 0xABCDEFULL);
  Array w = rng.uniform_array(out.shape(), 0.5, 1.5);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (rng.uniform() < 0.5) w[i] = -w[i];
  }
  return sum(mul(out, out.tape().constant(std::move(w))));
}

struct Case {
  std::string name;
  double threshold;
  std::function<GradCheckResult(std::uint64_t)> run;
};

struct CaseResult {
  std::string name;
  double threshold = 0.0;
  int seeds = 0;
  GradCheckResult worst;
  bool passed() const { return worst.max_rel_error < threshold; }
};

namespace detail {

inline std::vector<Parameter*> with_store(std::vector<Parameter*> inputs, ParameterStore& store) {
  for (auto& p : store) inputs.push_back(&p);
  return inputs;
}

inline void shift(ParameterStore& store, SeededRng& rng, double scale) {
  for (auto& p : store) {
    Array v = p.value();
    Array n = rng.normal_array(p.shape(), scale);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += n[i];
    p.assign(v);
  }
}

inline model::DcstConfig toy_dcst() {
  model::DcstConfig c;
  c.d_model = 4;
  c.heads = 2;
  c.d_ff = 8;
  c.input_len = 4;
  c.horizon = 2;
  c.temporal_units = {2};
  c.spatial_grids = {{2, 2}};
  return c;
}

inline teacher::GnnConfig toy_gnn() {
  teacher::GnnConfig c;
  c.hidden = 4;
  c.blocks = 2;
  c.kernel = 2;
  c.input_len = 8;
  c.horizon = 2;
  return c;
}

}  // namespace detail

/// Thresholds: 1e-5 for elementwise and single-layer ops, 1e-4 for attention and whole
/// models, where deeper compositions accumulate more roundoff in the differences.
inline std::vector<Case> standard_cases() {
  std::vector<Case> cases;
  cases.push_back({"elementwise", 1e-5, [](std::uint64_t seed) {
                     SeededRng rng(seed);
                     Parameter x("x", rng.normal_array({3, 4}));
                     Parameter y("y", rng.normal_array({3, 4}));
                     return grad_check(
                         [&](Tape& t) {
                           Var a = t.param(x), b = t.param(y);
                           Var total = weighted_sum(add(a, b), seed);
                           total = add(total, weighted_sum(sub(a, scale(b, 0.7)), seed + 1));
                           total = add(total, weighted_sum(mul(a, b), seed + 2));
                           total = add(total, weighted_sum(sigmoid(a), seed + 3));
                           return add(total, weighted_sum(gelu(b), seed + 4));
                         },
                         {&x, &y});
                   }});
  cases.push_back({"linear", 1e-5, [](std::uint64_t seed) {
                     SeededRng rng(seed);
                     Parameter x("x", rng.normal_array({3, 2}));
                     Parameter w("w", rng.normal_array({2, 4}));
                     Parameter b("b", rng.normal_array({4}));
                     return grad_check(
                         [&](Tape& t) { return weighted_sum(linear(t.param(x), t.param(w), t.param(b)), seed); },
                         {&x, &w, &b});
                   }});
  cases.push_back({"layer_norm", 1e-5, [](std::uint64_t seed) {
                     SeededRng rng(seed);
                     Parameter x("x", rng.normal_array({2, 3}));
                     Parameter g("gain", rng.uniform_array({3}, 0.5, 1.5));
                     Parameter b("bias", rng.normal_array({3}));
                     return grad_check(
                         [&](Tape& t) { return weighted_sum(layer_norm(t.param(x), t.param(g), t.param(b)), seed); },
                         {&x, &g, &b});
                   }});
  cases.push_back({"softmax", 1e-5, [](std::uint64_t seed) {
                     SeededRng rng(seed);
                     Parameter x("x", rng.normal_array({4}));
                     return grad_check([&](Tape& t) { return weighted_sum(softmax(t.param(x)), seed); }, {&x});
                   }});
  cases.push_back({"mlp_block", 1e-5, [](std::uint64_t seed) {
                     ParameterStore store;
                     SeededRng rng(seed);
                     auto mlp = nn::Mlp::create(store, "mlp", 3, 12, rng);
                     for (auto& p : store) {
                       if (p.name().ends_with(".bias")) p.assign(rng.normal_array(p.shape(), 0.1));
                     }
                     Parameter x("x", rng.normal_array({2, 3}));
                     return grad_check([&](Tape& t) { return weighted_sum(nn::mlp_block(t.param(x), mlp), seed); },
                                       detail::with_store({&x}, store));
                   }});
  cases.push_back({"multi_head_attention", 1e-4, [](std::uint64_t seed) {
                     ParameterStore store;
                     SeededRng rng(seed);
                     auto att = nn::Attention::create(store, "mha", 8, 2, rng);
                     att.out.bias->assign(rng.normal_array({8}, 0.1));
                     Parameter q("q", rng.normal_array({3, 8}));
                     Parameter k("k", rng.normal_array({4, 8}));
                     Parameter v("v", rng.normal_array({4, 8}));
                     return grad_check(
                         [&](Tape& t) {
                           return weighted_sum(nn::multi_head_attention(t.param(q), t.param(k), t.param(v), att), seed);
                         },
                         detail::with_store({&q, &k, &v}, store));
                   }});
  cases.push_back({"spatial_scale_repr", 1e-5, [](std::uint64_t seed) {
                     SeededRng rng(seed);
                     std::vector<data::SensorMeta> s{{"a", 0, 0},     {"b", 0.2, 0.5}, {"c", 0.4, 0.9},
                                                     {"d", 0.6, 0.1}, {"e", 0.8, 0.3}, {"f", 1.0, 1.0}};
                     auto a = scales::assign_grids(s, {{{2, 1}}}).scales[0];
                     ParameterStore store;
                     auto p = scales::SpatialScaleParams::create(store, "sp", 6, 3, false, rng);
                     for (auto& q : store) q.assign(rng.normal_array(q.shape()));
                     Parameter h("h", rng.normal_array({3, 6, 3}));  // [T, N, D]
                     return grad_check(
                         [&](Tape& t) { return weighted_sum(scales::spatial_scale_repr(t.param(h), a, p), seed); },
                         detail::with_store({&h}, store));
                   }});
  cases.push_back({"temporal_scale_repr", 1e-5, [](std::uint64_t seed) {
                     SeededRng rng(seed);
                     ParameterStore store;
                     auto p = scales::TemporalScaleParams::create(store, "tp", 6, 3, 4, rng);
                     for (auto& q : store) q.assign(rng.normal_array(q.shape()));
                     Parameter h("h", rng.normal_array({3, 6, 4}));
                     return grad_check(
                         [&](Tape& t) { return weighted_sum(scales::temporal_scale_repr(t.param(h), p), seed); },
                         detail::with_store({&h}, store));
                   }});
  cases.push_back({"dcst_forward", 1e-4, [](std::uint64_t seed) {
                     const std::vector<data::SensorMeta> corners{{"a", 0, 0}, {"b", 1, 0}, {"c", 0, 1}, {"d", 1, 1}};
                     model::DcstModel m(detail::toy_dcst(), corners, seed);
                     SeededRng rng(seed + 300);
                     detail::shift(m.parameters(), rng, 0.3);
                     Array x = rng.normal_array({2, 4, 4});
                     Array y = rng.normal_array({2, 4, 2});
                     return grad_check([&](Tape& t) { return mse(m.forward(t.constant(x)), t.constant(y)); },
                                       detail::with_store({}, m.parameters()));
                   }});
  cases.push_back({"teacher_forward", 1e-4, [](std::uint64_t seed) {
                     SeededRng rng(seed + 100);
                     Array adj(Shape{4, 4});
                     for (std::size_t i = 0; i < 4; ++i) {
                       for (std::size_t j = i + 1; j < 4; ++j) {
                         if (rng.uniform() < 0.4) adj.at(i, j) = adj.at(j, i) = rng.uniform(0.1, 2.0);
                       }
                     }
                     teacher::GnnModel m(detail::toy_gnn(), adj, seed);
                     // Small shifts keep GLU gates and GELU out of their flat regions, where
                     // gradients fall to ~1e-7 and differences at step 1e-6 are roundoff-bound.
                     detail::shift(m.parameters(), rng, 0.1);
                     Array x = rng.normal_array({2, 4, 8});
                     return grad_check([&](Tape& t) { return weighted_sum(m.forward(t.constant(x)), seed); },
                                       detail::with_store({}, m.parameters()));
                   }});
  return cases;
}

inline CaseResult run_case(const Case& c, int seeds) {
  CaseResult r{c.name, c.threshold, seeds, {}};
  for (int s = 0; s < seeds; ++s) {
    auto g = c.run(static_cast<std::uint64_t>(s));
    if (g.max_rel_error >= r.worst.max_rel_error) r.worst = g;
  }
  return r;
}

}  // namespace dcst::gradcheck
