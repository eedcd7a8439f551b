#pragma once

#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "dcst/diffcore/parameter.hpp"

namespace dcst {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Frozen parameters are rejected at construction and never
/// updated; gradients are zeroed after every step.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    for (auto* p : params_) {
      if (p->frozen()) throw ConfigError("optimizer given frozen parameter '" + p->name() + "'");
      state_.emplace(p->id(), Moments{Array(p->shape()), Array(p->shape())});
    }
  }

  const AdamConfig& config() const { return config_; }
  std::uint64_t steps() const { return steps_; }

  /// Ids of every parameter the optimizer updates.
  std::vector<std::uint64_t> parameter_ids() const {
    std::vector<std::uint64_t> ids;
    for (auto* p : params_) ids.push_back(p->id());
    return ids;
  }

  void step() {
    ++steps_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (auto* p : params_) {
      if (p->frozen()) continue;
      auto& st = state_.at(p->id());
      auto& g = p->grad();
      auto& w = p->value();
      for (std::size_t i = 0; i < w.size(); ++i) {
        st.m[i] = config_.beta1 * st.m[i] + (1.0 - config_.beta1) * g[i];
        st.v[i] = config_.beta2 * st.v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        w[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
      }
      p->zero_grad();
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

 private:
  struct Moments {
    Array m;
    Array v;
  };
  std::vector<Parameter*> params_;
  AdamConfig config_;
  std::unordered_map<std::uint64_t, Moments> state_;
  std::uint64_t steps_ = 0;
};

}  // namespace dcst
