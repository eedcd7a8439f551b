#pragma once

#include <algorithm>
#include <new>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "dcst/diffcore/errors.hpp"

namespace dcst {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Resolves a possibly negative axis against a rank.
inline std::size_t resolve_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

/// Allocator with 64-byte alignment. Vectorised kernels peel unaligned heads with scalar
/// code, so rounding must not depend on where the heap placed a buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }

  // Default-initialise rather than value-initialise, so sizing a buffer does not zero it.
  // Array zero-fills explicitly unless asked not to.
  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major array of doubles. Rank 0 (empty shape) is a scalar.
class Array {
 public:
  Array() = default;

  explicit Array(Shape shape, double fill = 0.0) : shape_(std::move(shape)), data_(shape_size(shape_)) {
    check_dims();
    std::fill(data_.begin(), data_.end(), fill);
  }

  /// Array with unspecified contents, for outputs the caller overwrites completely.
  static Array uninitialized(Shape shape) {
    Array a;
    a.shape_ = std::move(shape);
    a.check_dims();
    a.data_ = Storage(shape_size(a.shape_));
    return a;
  }

  Array(Shape shape, const std::vector<double>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_dims();
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("array data length " + std::to_string(data_.size()) + " does not match shape " +
                           shape_string(shape_));
    }
    if (!all_finite()) throw NumericError("array created with non-finite element");
  }

  static Array scalar(double v) { return Array(Shape{}, std::vector<double>{v}); }

  static Array vector(std::initializer_list<double> values) {
    return Array(Shape{values.size()}, std::vector<double>(values));
  }

  static Array matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Array(Shape{rows, cols}, std::move(values));
  }

  static Array identity(std::size_t n) {
    Array a(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) a.data_[i * n + i] = 1.0;
    return a;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(int axis) const { return shape_[resolve_axis(axis, rank())]; }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }
  std::vector<double> values() const { return {data_.begin(), data_.end()}; }
  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double item() const {
    if (data_.size() != 1) throw DimensionError("item() on array of shape " + shape_string(shape_));
    return data_[0];
  }

  /// Same data, new shape with equal element count.
  Array reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    Array out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool operator==(const Array& other) const { return shape_ == other.shape_ && data_ == other.data_; }

 private:
  void check_dims() const {
    for (auto d : shape_) {
      if (d == 0) throw DimensionError("array dimensions must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  Storage data_;
};

inline void require_same_shape(const Array& a, const Array& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

inline double max_abs_diff(const Array& a, const Array& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace dcst
