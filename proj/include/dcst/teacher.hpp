#pragma once

// STGCN-style teacher: blocks of gated temporal convolution, graph convolution over the
// normalised adjacency, a second gated temporal convolution and layer norm; then a per-node
// head over the remaining steps.

#include <string>
#include <vector>

#include <json.hpp>

#include "dcst/data/dataset.hpp"
#include "dcst/diffcore.hpp"
#include "dcst/training.hpp"

namespace dcst::teacher {

struct GnnConfig {
  std::size_t hidden = 32;
  std::size_t blocks = 2;
  std::size_t kernel = 3;
  std::size_t input_len = 12;
  std::size_t horizon = 12;
  // Pre-training.
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::size_t patience = 10;

  /// Time steps left after all temporal convolutions (two per block).
  std::size_t remaining_steps() const { return input_len - 2 * blocks * (kernel - 1); }

  void validate() const {
    if (hidden == 0 || blocks == 0 || kernel < 2 || input_len == 0 || horizon == 0) {
      throw ConfigError("gnn: hidden, blocks, input_len and horizon must be positive and kernel >= 2");
    }
    if (kernel >= input_len || 2 * blocks * (kernel - 1) >= input_len) {
      throw ConfigError("gnn: temporal kernels consume the whole input window");
    }
    if (epochs == 0 || batch_size == 0 || !(lr > 0.0) || patience == 0) {
      throw ConfigError("gnn: epochs, batch_size, lr and patience must be positive");
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GnnConfig, hidden, blocks, kernel, input_len, horizon, epochs,
                                                batch_size, lr, patience)

/// D^{-1/2} (A + I) D^{-1/2} with D the degree matrix of A + I.
inline Array normalize_adjacency(const Array& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) throw DimensionError("adjacency must be square, got " + shape_string(a.shape()));
  const std::size_t n = a.dim(0);
  Array out(Shape{n, n});
  std::vector<double> deg(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (a.at(i, j) < 0.0) throw ConfigError("adjacency weights must be nonnegative");
      deg[i] += a.at(i, j) + (i == j ? 1.0 : 0.0);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out.at(i, j) = (a.at(i, j) + (i == j ? 1.0 : 0.0)) / std::sqrt(deg[i] * deg[j]);
    }
  }
  return out;
}

struct GnnBlock {
  nn::Linear temporal_in;   // k·C_in -> 2·hidden, split into value and gate
  nn::Linear graph;         // hidden -> hidden after neighbourhood mixing
  nn::Linear temporal_out;  // k·hidden -> 2·hidden
  nn::LayerNorm norm;
};

class GnnModel {
 public:
  GnnModel(const GnnConfig& config, const Array& adjacency, std::uint64_t seed)
      : config_(config), adjacency_(normalize_adjacency(adjacency)) {
    config_.validate();
    SeededRng rng(seed);
    std::size_t c_in = 1;
    for (std::size_t b = 0; b < config_.blocks; ++b) {
      const std::string name = "block" + std::to_string(b);
      GnnBlock blk;
      blk.temporal_in = nn::Linear::create(store_, name + ".temporal_in", config_.kernel * c_in, 2 * config_.hidden, rng);
      blk.graph = nn::Linear::create(store_, name + ".graph", config_.hidden, config_.hidden, rng);
      blk.temporal_out =
          nn::Linear::create(store_, name + ".temporal_out", config_.kernel * config_.hidden, 2 * config_.hidden, rng);
      blk.norm = nn::LayerNorm::create(store_, name + ".norm", config_.hidden);
      blocks_.push_back(blk);
      c_in = config_.hidden;
    }
    head_ = nn::Linear::create(store_, "head", config_.remaining_steps() * config_.hidden, config_.horizon, rng);
  }

  GnnModel(const GnnModel&) = delete;
  GnnModel& operator=(const GnnModel&) = delete;

  const GnnConfig& config() const { return config_; }
  const Array& normalized_adjacency() const { return adjacency_; }
  std::size_t node_count() const { return adjacency_.dim(0); }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }

  /// x: [B, N, T] -> [B, N, H].
  Var forward(Var x) const {
    const auto& s = x.shape();
    if (s.size() != 3 || s[1] != node_count() || s[2] != config_.input_len) {
      throw DimensionError("gnn forward: expected [B," + std::to_string(node_count()) + "," +
                           std::to_string(config_.input_len) + "], got " + shape_string(s));
    }
    const std::size_t h = config_.hidden;
    const std::size_t k = config_.kernel;
    // Valid convolution along time, [B, N, T, C] -> [B, N, T-k+1, h], gated as (P + x) ⊙ σ(Q)
    // where x is the input at each window's last step whenever C = h.
    auto gated_conv = [&](Var z, const nn::Linear& conv) {
      const std::size_t c_in = z.shape().back();
      Var windows = unfold(z, k);
      Var c = conv(windows);
      Var p = slice_last(c, 0, h);
      if (c_in == h) p = add(p, slice_last(windows, (k - 1) * h, k * h));
      return mul(p, sigmoid(slice_last(c, h, 2 * h)));
    };
    Var z = reshape(x, {s[0], s[1], s[2], 1});
    for (const auto& blk : blocks_) {
      z = gated_conv(z, blk.temporal_in);
      // Residual keeps each node's own signal distinct from its neighbourhood average.
      z = add(z, gelu(blk.graph(mix(adjacency_, z, 1))));
      z = blk.norm(gated_conv(z, blk.temporal_out));
    }
    return head_(reshape(z, {s[0], s[1], config_.remaining_steps() * h}));
  }

  Array predict(const Array& x) const {
    Tape t;
    t.set_grad_enabled(false);
    Var y = forward(t.constant(x.reshaped({1, x.dim(0), x.dim(1)})));
    return y.value().reshaped({node_count(), config_.horizon});
  }

 private:
  GnnConfig config_;
  Array adjacency_;
  ParameterStore store_;
  std::vector<GnnBlock> blocks_;
  nn::Linear head_;
};

/// Minimises MAE against ground truth; the best-validation parameters are kept.
inline train::TrainReport pretrain(GnnModel& model, const train::WindowTensors& train_w,
                                   const train::WindowTensors& val_w, data::NormStats stats, std::uint64_t seed,
                                   const train::EpochCallback& on_epoch = {}) {
  const auto& c = model.config();
  train::FitConfig fc;
  fc.epochs = c.epochs;
  fc.batch_size = c.batch_size;
  fc.lr = c.lr;
  fc.patience = c.patience;
  fc.seed = seed;
  fc.on_epoch = on_epoch;
  return train::fit(model.parameters(), [&](Var x) { return model.forward(x); }, train_w, val_w, stats, fc);
}

/// Read-only view of a trained teacher. Its parameters are frozen for as long as the
/// handle lives, so no tape records gradients for them and no optimizer accepts them.
class FrozenTeacher {
 public:
  explicit FrozenTeacher(GnnModel& model) : model_(&model) {
    model_->parameters().set_frozen(true);
    checksum_ = model_->parameters().checksum();
  }
  ~FrozenTeacher() {
    if (model_) model_->parameters().set_frozen(false);
  }
  FrozenTeacher(const FrozenTeacher&) = delete;
  FrozenTeacher& operator=(const FrozenTeacher&) = delete;

  const GnnModel& model() const { return *model_; }
  std::uint64_t checksum_at_freeze() const { return checksum_; }
  bool unchanged() const { return model_->parameters().checksum() == checksum_; }

  std::vector<std::uint64_t> parameter_ids() const {
    std::vector<std::uint64_t> ids;
    for (const auto& p : model_->parameters()) ids.push_back(p.id());
    return ids;
  }

  Array predict_all(const Array& inputs, std::size_t batch_size = 64) const {
    return train::predict_all([this](Var x) { return model_->forward(x); }, inputs, batch_size);
  }

 private:
  GnnModel* model_;
  std::uint64_t checksum_ = 0;
};

inline FrozenTeacher freeze(GnnModel& model) { return FrozenTeacher(model); }

}  // namespace dcst::teacher
