#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "towerphys/error.hpp"

namespace towerphys::nn {

// 64-byte aligned storage. Vectorized kernels pick their peeling from the
// buffer address, so alignment must not vary between runs for results to be
// bit-reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

// Dense row-major tensor. Element type is float (training) or double
// (gradient checks).
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape, T fill = T(0)) : shape_(std::move(shape)) {
    for (int d : shape_) require(d >= 0, "tensor: negative dimension");
    data_.assign(count(shape_), fill);
  }
  Tensor(std::vector<int> shape, const std::vector<T>& data)
      : Tensor(std::move(shape), std::span<const T>(data)) {}
  Tensor(std::vector<int> shape, std::span<const T> data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (data_.size() != count(shape_)) {
      fail(ErrorKind::shape_mismatch, "tensor: data length " + std::to_string(data_.size()) +
                                          " does not match shape " + shape_string(shape_));
    }
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  AlignedVector<T>& values() { return data_; }
  const AlignedVector<T>& values() const { return data_; }
  std::vector<T> to_vector() const { return {data_.begin(), data_.end()}; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Same data, new shape of equal element count.
  Tensor reshaped(std::vector<int> shape) const {
    return Tensor(std::move(shape), std::span<const T>(data_));
  }
  void reshape(std::vector<int> shape) {
    if (count(shape) != data_.size()) {
      fail(ErrorKind::shape_mismatch, "tensor: cannot reshape " + shape_string(shape_) + " to " +
                                          shape_string(shape));
    }
    shape_ = std::move(shape);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  // Rows [begin, end) of the leading dimension.
  Tensor slice(int begin, int end) const;
  // Copies of leading-dimension rows at the given indices.
  Tensor gather(std::span<const int> rows) const;

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

  static std::size_t count(const std::vector<int>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }
  static std::string shape_string(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ", ";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }

 private:
  std::vector<int> shape_;
  AlignedVector<T> data_;
};

template <class T>
Tensor<T> Tensor<T>::slice(int begin, int end) const {
  require(rank() >= 1 && 0 <= begin && begin <= end && end <= dim(0), "tensor: bad slice");
  const std::size_t row = dim(0) ? size() / static_cast<std::size_t>(dim(0)) : 0;
  std::vector<int> shape = shape_;
  shape[0] = end - begin;
  return Tensor(shape, std::span<const T>(data_.data() + begin * row, (end - begin) * row));
}

template <class T>
Tensor<T> Tensor<T>::gather(std::span<const int> rows) const {
  require(rank() >= 1, "tensor: gather needs rank >= 1");
  const std::size_t row = dim(0) ? size() / static_cast<std::size_t>(dim(0)) : 0;
  std::vector<int> shape = shape_;
  shape[0] = static_cast<int>(rows.size());
  Tensor out(shape);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    require(rows[k] >= 0 && rows[k] < dim(0), "tensor: gather index out of range");
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(rows[k] * row), row,
                out.data_.begin() + static_cast<std::ptrdiff_t>(k * row));
  }
  return out;
}

// Throws Error(numerical) naming `what` if any element is NaN or infinite.
template <class T>
void check_finite(const Tensor<T>& t, const std::string& what);

template <class T>
void expect_shape(const Tensor<T>& t, const std::vector<int>& shape, const std::string& what) {
  if (t.shape() != shape) {
    fail(ErrorKind::shape_mismatch, what + ": expected shape " + Tensor<T>::shape_string(shape) +
                                        ", got " + Tensor<T>::shape_string(t.shape()));
  }
}

template <class T>
void expect_rank(const Tensor<T>& t, int rank, const std::string& what) {
  if (t.rank() != rank) {
    fail(ErrorKind::shape_mismatch, what + ": expected rank " + std::to_string(rank) + ", got " +
                                        Tensor<T>::shape_string(t.shape()));
  }
}

}  // namespace towerphys::nn
