#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "paed/error.hpp"

namespace paed {

/// Numeric precision of a run. `high` is 64-bit and mandatory for oracle
/// tests; `fast` is 32-bit and used for training.
enum class Precision { high, fast };

using Shape = std::vector<std::size_t>;

/// Alignment of every numeric buffer. Vectorized kernels choose how many
/// leading elements to process one at a time from the address alignment, which
/// changes the summation order; a fixed alignment keeps results bit-identical
/// from one allocation (and one process) to the next.
inline constexpr std::size_t kBufferAlignment = 64;

template <typename T>
struct AlignedAllocator {
  using value_type = T;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kBufferAlignment}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kBufferAlignment}); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

/// Contiguous storage with kBufferAlignment-aligned data.
template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_to_string(const Shape& shape);

/// Dense row-major array. Feature maps use axis order (batch, time, frequency,
/// channel); the last axis is always the fastest-varying one.
template <typename T>
class NdBuffer {
 public:
  using value_type = T;

  NdBuffer() = default;

  explicit NdBuffer(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_extents();
  }

  NdBuffer(Shape shape, std::initializer_list<T> data)
      : NdBuffer(std::move(shape), AlignedVector<T>(data.begin(), data.end())) {}

  NdBuffer(Shape shape, const std::vector<T>& data) : NdBuffer(std::move(shape), AlignedVector<T>(data.begin(), data.end())) {}

  NdBuffer(Shape shape, AlignedVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("NdBuffer: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_to_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  /// Extent of axis `axis`; negative values count from the back.
  std::size_t extent(int axis) const {
    const int r = static_cast<int>(shape_.size());
    const int a = axis < 0 ? r + axis : axis;
    if (a < 0 || a >= r) {
      throw ShapeError("NdBuffer: axis " + std::to_string(axis) + " out of range for shape " +
                       shape_to_string(shape_));
    }
    return shape_[static_cast<std::size_t>(a)];
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }
  AlignedVector<T>& storage() noexcept { return data_; }
  const AlignedVector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Multi-index access, checked against the rank.
  template <typename... I>
  T& at(I... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... I>
  const T& at(I... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  /// Same data, new extents (element count must match).
  NdBuffer reshaped(Shape shape) const& { return NdBuffer(std::move(shape), data_); }
  NdBuffer reshaped(Shape shape) && { return NdBuffer(std::move(shape), std::move(data_)); }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <typename U>
  NdBuffer<U> cast() const {
    return NdBuffer<U>(shape_, AlignedVector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const NdBuffer& a, const NdBuffer& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (std::size_t e : shape_) {
      if (e == 0) throw ShapeError("NdBuffer: zero extent in shape " + shape_to_string(shape_));
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) {
      throw ShapeError("NdBuffer: index rank " + std::to_string(idx.size()) + " vs shape " +
                       shape_to_string(shape_));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[axis]) {
        throw ShapeError("NdBuffer: index " + std::to_string(i) + " out of range on axis " +
                         std::to_string(axis) + " of " + shape_to_string(shape_));
      }
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  AlignedVector<T> data_;
};

}  // namespace paed
