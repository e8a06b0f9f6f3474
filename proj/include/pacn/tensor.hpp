#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pacn/error.hpp"

namespace pacn {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         [](std::int64_t a, std::int64_t b) { return a * b; });
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

/// Dense row-major tensor. `Tensor` (f32) is the production type; the f64
/// instantiation backs finite-difference gradient checks.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(checked_numel(shape_), fill) {}

  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != checked_numel(shape_)) {
      throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  template <class... I>
  T& at(I... idx) {
    return data_[offset({static_cast<std::int64_t>(idx)...})];
  }
  template <class... I>
  const T& at(I... idx) const {
    return data_[offset({static_cast<std::int64_t>(idx)...})];
  }

  BasicTensor reshaped(Shape shape) const {
    if (checked_numel(shape) != size()) {
      throw ConfigError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::int64_t checked_numel(const Shape& shape) {
    for (auto d : shape) {
      if (d <= 0) throw ConfigError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    return numel(shape);
  }

  std::size_t offset(std::initializer_list<std::int64_t> idx) const {
    std::int64_t off = 0;
    std::size_t axis = 0;
    for (auto i : idx) off = off * shape_[axis++] + i;
    return static_cast<std::size_t>(off);
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

}  // namespace pacn
