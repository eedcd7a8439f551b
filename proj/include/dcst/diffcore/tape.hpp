#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dcst/diffcore/array.hpp"
#include "dcst/diffcore/parameter.hpp"

namespace dcst {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape& tape() const { return *tape_; }
  std::size_t index() const { return index_; }
  bool valid() const { return tape_ != nullptr; }

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

/// Propagates the output gradient of one recorded node into its inputs. Receives the
/// node's own gradient and forward value.
using BackwardFn = std::function<void(Tape&, const Array& out_grad, const Array& out_value)>;

/// Append-only record of executed operations. Nodes are stored in execution order, so
/// the record is topologically sorted by construction and a reverse sweep visits each
/// node once.
class Tape {
 public:
  Tape() {
#ifndef NDEBUG
    check_finite_ = true;
#endif
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// With gradients disabled no backward closures are stored.
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  /// Reject NaN/Inf after every op. On by default in debug builds.
  void set_check_finite(bool enabled) { check_finite_ = enabled; }

  std::size_t size() const { return nodes_.size(); }

  Var constant(Array value) { return push("constant", std::move(value), false, nullptr, nullptr); }

  /// Registers a parameter as a leaf; repeated calls return the same node.
  Var param(Parameter& p) {
    if (auto it = param_nodes_.find(p.id()); it != param_nodes_.end()) return Var(this, it->second);
    Var v = push("param", p.value(), grad_enabled_ && !p.frozen(), nullptr, &p);
    param_nodes_.emplace(p.id(), v.index());
    return v;
  }

  /// Records an op output. `backward` is dropped when no input needs a gradient.
  Var record(const char* op, Array value, bool inputs_require_grad, BackwardFn backward) {
    const bool rg = grad_enabled_ && inputs_require_grad;
    return push(op, std::move(value), rg, rg ? std::move(backward) : nullptr, nullptr);
  }

  const Array& value(std::size_t i) const { return nodes_[i].value; }
  bool requires_grad(std::size_t i) const { return nodes_[i].requires_grad; }

  /// Gradient buffer of node i, zero-initialised on first access.
  Array& grad(std::size_t i) {
    auto& n = nodes_[i];
    if (n.grad.empty()) n.grad = Array(n.value.shape());
    return n.grad;
  }

  /// Whether node i has received a gradient contribution in the current sweep.
  bool has_grad(std::size_t i) const { return !nodes_[i].grad.empty(); }

  /// Gradient buffer of node i with unspecified contents, for a first contribution that
  /// overwrites every element. Only valid while has_grad(i) is false.
  Array& fresh_grad(std::size_t i) {
    auto& n = nodes_[i];
    n.grad = Array::uninitialized(n.value.shape());
    return n.grad;
  }

  /// grad(i) += g elementwise (g may differ in shape but not in size). A first
  /// contribution is copied rather than added to zeros.
  void add_grad(std::size_t i, const Array& g) {
    auto& n = nodes_[i];
    if (n.grad.empty()) {
      n.grad = g.reshaped(n.value.shape());
      return;
    }
    double* dst = n.grad.raw();
    const double* src = g.raw();
    for (std::size_t k = 0; k < n.grad.size(); ++k) dst[k] += src[k];
  }

  /// Reverse sweep from a scalar loss; parameter leaves add their gradient into
  /// Parameter::grad (accumulating across calls).
  void backward(Var loss) {
    if (!loss.valid() || &loss.tape() != this) throw DimensionError("backward: loss is not on this tape");
    if (nodes_[loss.index()].value.size() != 1) {
      throw DimensionError("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
    }
    for (auto& n : nodes_) n.grad = Array();
    grad(loss.index()).fill(1.0);
    for (std::size_t k = loss.index() + 1; k-- > 0;) {
      auto& n = nodes_[k];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) {
        // Closures only write to input nodes, which precede k.
        n.backward(*this, n.grad, n.value);
      }
      if (n.param != nullptr) {
        auto& pg = n.param->grad();
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
      }
    }
  }

 private:
  struct Node {
    const char* op;
    Array value;
    Array grad;
    bool requires_grad;
    BackwardFn backward;
    Parameter* param;
  };

  Var push(const char* op, Array value, bool rg, BackwardFn fn, Parameter* p) {
    if (check_finite_ && !value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
    nodes_.push_back(Node{op, std::move(value), Array(), rg, std::move(fn), p});
    return Var(this, nodes_.size() - 1);
  }

  friend class Var;
  // deque: references returned by value()/grad() survive later pushes.
  std::deque<Node> nodes_;
  std::unordered_map<std::uint64_t, std::size_t> param_nodes_;
  bool grad_enabled_ = true;
  bool check_finite_ = false;
};

inline const Array& Var::value() const { return tape_->value(index_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(index_); }

}  // namespace dcst
