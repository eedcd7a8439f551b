#pragma once

// The dual cross-scale Transformer student: embedding, temporal layers (fine -> coarse
// segments), spatial layers (fine -> coarse grids) and a per-node prediction head.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcst/data/dataset.hpp"
#include "dcst/diffcore.hpp"
#include "dcst/scales.hpp"

namespace dcst::model {

enum class AblationMode { full, no_spatial, no_temporal, single_scale };

NLOHMANN_JSON_SERIALIZE_ENUM(AblationMode, {{AblationMode::full, "full"},
                                            {AblationMode::no_spatial, "no_spatial"},
                                            {AblationMode::no_temporal, "no_temporal"},
                                            {AblationMode::single_scale, "single_scale"}})

inline std::string to_string(AblationMode m) {
  switch (m) {
    case AblationMode::full: return "full";
    case AblationMode::no_spatial: return "no_spatial";
    case AblationMode::no_temporal: return "no_temporal";
    case AblationMode::single_scale: return "single_scale";
  }
  return "full";
}

inline AblationMode parse_ablation(const std::string& s) {
  for (auto m : {AblationMode::full, AblationMode::no_spatial, AblationMode::no_temporal, AblationMode::single_scale}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown ablation '" + s + "' (expected full, no_spatial, no_temporal or single_scale)");
}

struct DcstConfig {
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t d_ff = 128;
  std::size_t input_len = 12;
  std::size_t horizon = 12;
  std::vector<std::size_t> temporal_units{2, 4, 6};
  std::vector<scales::GridSize> spatial_grids{{8, 8}, {4, 4}, {2, 2}};
  bool share_spatial_weights = false;
  bool step_embeddings = false;
  double ln_eps = 1e-5;

  void validate() const {
    if (d_model == 0 || d_ff == 0 || input_len == 0 || horizon == 0) {
      throw ConfigError("dcst: d_model, d_ff, input_len and horizon must be positive");
    }
    if (heads == 0 || d_model % heads != 0) {
      throw ConfigError("dcst: d_model " + std::to_string(d_model) + " not divisible by heads " +
                        std::to_string(heads));
    }
    if (!(ln_eps > 0.0)) throw ConfigError("dcst: ln_eps must be positive");
    scales::TemporalScaleSpec{temporal_units}.validate(input_len);
    scales::SpatialScaleSpec{spatial_grids}.validate();
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DcstConfig, d_model, heads, d_ff, input_len, horizon, temporal_units,
                                                spatial_grids, share_spatial_weights, step_embeddings, ln_eps)

/// Scale lists actually used under an ablation; single_scale keeps the finest of each.
inline DcstConfig for_ablation(DcstConfig c, AblationMode mode) {
  switch (mode) {
    case AblationMode::full: break;
    case AblationMode::no_spatial: c.spatial_grids.clear(); break;
    case AblationMode::no_temporal: c.temporal_units.clear(); break;
    case AblationMode::single_scale:
      if (c.temporal_units.size() > 1) c.temporal_units.resize(1);
      if (c.spatial_grids.size() > 1) c.spatial_grids.resize(1);
      break;
  }
  return c;
}

/// Residual attention + feed-forward block shared by both Transformers.
struct CrossScaleBlock {
  nn::Attention attention;
  nn::LayerNorm norm_attn;
  nn::LayerNorm norm_mlp;
  nn::Mlp mlp;

  static CrossScaleBlock create(ParameterStore& store, const std::string& name, const DcstConfig& c, SeededRng& rng) {
    CrossScaleBlock b;
    b.attention = nn::Attention::create(store, name + ".attn", c.d_model, c.heads, rng);
    b.norm_attn = nn::LayerNorm::create(store, name + ".norm_attn", c.d_model, c.ln_eps);
    b.mlp = nn::Mlp::create(store, name + ".mlp", c.d_model, c.d_ff, rng);
    b.norm_mlp = nn::LayerNorm::create(store, name + ".norm_mlp", c.d_model, c.ln_eps);
    return b;
  }

  /// H̃ = LN(H + MSA(H, Φ, Φ)); out = LN(H̃ + MLP(H̃)).
  Var operator()(Var h, Var phi, Array* weights = nullptr) const {
    Var tilde = norm_attn(add(h, nn::multi_head_attention(h, phi, phi, attention, weights)));
    return norm_mlp(add(tilde, mlp(tilde)));
  }
};

struct TemporalLayer {
  scales::TemporalScaleParams scale;
  CrossScaleBlock block;
};

struct SpatialLayer {
  scales::SpatialScaleParams scale;
  scales::ScaleAssignment assignment;
  CrossScaleBlock block;
};

/// Attention matrices captured during a forward pass, one entry per executed layer.
struct AttentionTrace {
  std::vector<Array> temporal;  // [B·N, heads, T, T/ξ]
  std::vector<Array> spatial;   // [B·T, heads, N, M]
};

class DcstModel {
 public:
  DcstModel(const DcstConfig& config, const std::vector<data::SensorMeta>& sensors, std::uint64_t seed,
            AblationMode mode = AblationMode::full)
      : base_config_(config), config_(for_ablation(config, mode)), mode_(mode), n_nodes_(sensors.size()) {
    base_config_.validate();
    if (sensors.empty()) throw ConfigError("dcst: no sensors");
    SeededRng rng(seed);
    const std::size_t d = config_.d_model;
    embed_ = nn::Linear::create(store_, "embed", 1, d, rng);
    if (config_.step_embeddings) {
      step_embedding_ = &store_.add("step_embedding", rng.normal_array({config_.input_len, d}, 0.02));
    }
    for (std::size_t l = 0; l < config_.temporal_units.size(); ++l) {
      const std::string name = "temporal" + std::to_string(l);
      TemporalLayer layer;
      layer.scale = scales::TemporalScaleParams::create(store_, name + ".scale", config_.input_len,
                                                        config_.temporal_units[l], d, rng, config_.ln_eps);
      layer.block = CrossScaleBlock::create(store_, name, config_, rng);
      temporal_.push_back(std::move(layer));
    }
    const auto grids = scales::assign_grids(sensors, {config_.spatial_grids});
    for (std::size_t l = 0; l < config_.spatial_grids.size(); ++l) {
      const std::string name = "spatial" + std::to_string(l);
      SpatialLayer layer;
      layer.scale = scales::SpatialScaleParams::create(store_, name + ".scale", n_nodes_, d,
                                                       config_.share_spatial_weights, rng, config_.ln_eps);
      layer.assignment = grids.scales[l];
      layer.block = CrossScaleBlock::create(store_, name, config_, rng);
      spatial_.push_back(std::move(layer));
    }
    head_ = nn::Linear::create(store_, "head", config_.input_len * d, config_.horizon, rng);
  }

  DcstModel(const DcstModel&) = delete;
  DcstModel& operator=(const DcstModel&) = delete;

  const DcstConfig& config() const { return config_; }
  const DcstConfig& base_config() const { return base_config_; }
  AblationMode mode() const { return mode_; }
  std::size_t node_count() const { return n_nodes_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  const std::vector<TemporalLayer>& temporal_layers() const { return temporal_; }
  const std::vector<SpatialLayer>& spatial_layers() const { return spatial_; }

  /// x: [B, N, T] -> [B, N, T, D].
  Var embed(Var x) const {
    const auto& s = x.shape();
    Var h = embed_(reshape(x, {s[0], s[1], s[2], 1}));
    if (step_embedding_) h = add_broadcast(h, x.tape().param(*step_embedding_));
    return h;
  }

  /// h: [B, N, T, D] -> [B, N, T, D].
  Var temporal_layer(Var h, std::size_t l, Array* weights = nullptr) const {
    const auto& layer = temporal_.at(l);
    return layer.block(h, scales::temporal_scale_repr(h, layer.scale), weights);
  }

  /// h: [B, T, N, D] (node axis second to last) -> [B, T, N, D].
  Var spatial_layer(Var h, std::size_t l, Array* weights = nullptr) const {
    const auto& layer = spatial_.at(l);
    return layer.block(h, scales::spatial_scale_repr(h, layer.assignment, layer.scale), weights);
  }

  /// x: [B, N, T] normalised speeds -> [B, N, H].
  Var forward(Var x, AttentionTrace* trace = nullptr) const {
    const auto& s = x.shape();
    if (s.size() != 3 || s[1] != n_nodes_ || s[2] != config_.input_len) {
      throw DimensionError("dcst forward: expected [B," + std::to_string(n_nodes_) + "," +
                           std::to_string(config_.input_len) + "], got " + shape_string(s));
    }
    const std::size_t b = s[0], d = config_.d_model;
    Var h = embed(x);
    for (std::size_t l = 0; l < temporal_.size(); ++l) {
      Array w;
      h = temporal_layer(h, l, trace ? &w : nullptr);
      if (trace) trace->temporal.push_back(std::move(w));
    }
    if (!spatial_.empty()) {
      h = permute(h, {0, 2, 1, 3});
      for (std::size_t l = 0; l < spatial_.size(); ++l) {
        Array w;
        h = spatial_layer(h, l, trace ? &w : nullptr);
        if (trace) trace->spatial.push_back(std::move(w));
      }
      h = permute(h, {0, 2, 1, 3});
    }
    return head_(reshape(h, {b, n_nodes_, config_.input_len * d}));
  }

  /// Single window: [N, T] -> [N, H].
  Array predict(const Array& x) const {
    Tape t;
    t.set_grad_enabled(false);
    Var y = forward(t.constant(x.reshaped({1, x.dim(0), x.dim(1)})));
    return y.value().reshaped({n_nodes_, config_.horizon});
  }

 private:
  DcstConfig base_config_;
  DcstConfig config_;
  AblationMode mode_;
  std::size_t n_nodes_;
  ParameterStore store_;
  nn::Linear embed_;
  Parameter* step_embedding_ = nullptr;
  std::vector<TemporalLayer> temporal_;
  std::vector<SpatialLayer> spatial_;
  nn::Linear head_;
};

/// Closed-form parameter count for a config (after ablation) on `n_nodes` sensors.
inline std::size_t parameter_count(const DcstConfig& c, std::size_t n_nodes) {
  const std::size_t d = c.d_model, t = c.input_len;
  const std::size_t block = 4 * d * d + d      // q, k, v, out projection + out bias
                            + 2 * (2 * d)      // two layer norms
                            + d * c.d_ff + c.d_ff + c.d_ff * d + d;  // mlp
  std::size_t total = 2 * d;  // embedding 1 -> D
  if (c.step_embeddings) total += t * d;
  for (auto unit : c.temporal_units) {
    const std::size_t segments = t / unit;
    total += segments * unit * d * d + segments * d + 2 * d + block;
  }
  for (std::size_t l = 0; l < c.spatial_grids.size(); ++l) {
    const std::size_t copies = c.share_spatial_weights ? 1 : n_nodes;
    total += copies * (d * d + d) + 2 * d + block;
  }
  total += t * d * c.horizon + c.horizon;
  return total;
}

}  // namespace dcst::model
