#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "dcst/diffcore/array.hpp"

namespace dcst {

inline std::uint64_t next_parameter_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

/// Learnable tensor plus its accumulated gradient. Ids are unique process-wide.
class Parameter {
 public:
  Parameter(std::string name, Array value)
      : name_(std::move(name)), value_(std::move(value)), grad_(value_.shape()), id_(next_parameter_id()) {}

  const std::string& name() const { return name_; }
  std::uint64_t id() const { return id_; }
  const Shape& shape() const { return value_.shape(); }
  std::size_t size() const { return value_.size(); }

  Array& value() { return value_; }
  const Array& value() const { return value_; }
  Array& grad() { return grad_; }
  const Array& grad() const { return grad_; }

  /// Frozen parameters never receive gradients and are skipped by optimizers.
  bool frozen() const { return frozen_; }
  void set_frozen(bool frozen) { frozen_ = frozen; }

  void zero_grad() { grad_.fill(0.0); }

  void assign(const Array& v) {
    require_same_shape(value_, v, "Parameter::assign");
    value_ = v;
  }

 private:
  std::string name_;
  Array value_;
  Array grad_;
  std::uint64_t id_;
  bool frozen_ = false;
};

/// Owns a model's parameters. Addresses stay stable as parameters are added.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter& add(std::string name, Array init) {
    for (const auto& p : params_) {
      if (p.name() == name) throw ConfigError("duplicate parameter name: " + name);
    }
    return params_.emplace_back(std::move(name), std::move(init));
  }

  std::size_t size() const { return params_.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  Parameter* find(const std::string& name) {
    for (auto& p : params_) {
      if (p.name() == name) return &p;
    }
    return nullptr;
  }

  std::vector<Parameter*> all() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  std::vector<const Parameter*> all() const {
    std::vector<const Parameter*> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(&p);
    return out;
  }

  std::vector<Array> snapshot() const {
    std::vector<Array> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.value());
    return out;
  }

  void restore(const std::vector<Array>& values) {
    if (values.size() != params_.size()) throw DimensionError("snapshot size does not match parameter count");
    for (std::size_t i = 0; i < values.size(); ++i) params_[i].assign(values[i]);
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void set_frozen(bool frozen) {
    for (auto& p : params_) p.set_frozen(frozen);
  }

  /// FNV-1a over the raw parameter bytes, used to verify immutability.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : params_) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(p.value().raw());
      for (std::size_t i = 0; i < p.size() * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
      }
    }
    return h;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter> params_;
};

}  // namespace dcst
