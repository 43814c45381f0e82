#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "voxseg/error.hpp"

namespace voxseg {

/// Voxel counts along (z, y, x).
struct Extent3 {
  std::size_t z = 0;
  std::size_t y = 0;
  std::size_t x = 0;

  constexpr std::size_t voxel_count() const { return z * y * x; }
  constexpr std::size_t operator[](int axis) const { return axis == 0 ? z : axis == 1 ? y : x; }
  friend constexpr bool operator==(const Extent3&, const Extent3&) = default;

  /// True when every component of this extent fits inside `outer`.
  constexpr bool fits_in(const Extent3& outer) const {
    return z <= outer.z && y <= outer.y && x <= outer.x;
  }
  std::string str() const {
    return std::to_string(z) + "x" + std::to_string(y) + "x" + std::to_string(x);
  }
};

/// A voxel position (z, y, x).
using Index3 = Extent3;

/// Millimeters per voxel along (z, y, x).
struct Spacing3 {
  double z = 1.0;
  double y = 1.0;
  double x = 1.0;

  constexpr double operator[](int axis) const { return axis == 0 ? z : axis == 1 ? y : x; }
  friend constexpr bool operator==(const Spacing3&, const Spacing3&) = default;
  constexpr bool valid() const { return z > 0.0 && y > 0.0 && x > 0.0; }
};

/// Dense 3D grid, z-major with x fastest.
template <typename T>
class Grid3 {
 public:
  using value_type = T;

  Grid3() = default;

  explicit Grid3(Extent3 dims, Spacing3 spacing = {}, T fill = T{})
      : dims_(dims), spacing_(spacing), data_(dims.voxel_count(), fill) {
    if (!spacing_.valid()) throw ParameterError("grid spacing must be strictly positive");
  }

  Grid3(Extent3 dims, Spacing3 spacing, std::vector<T> data)
      : dims_(dims), spacing_(spacing), data_(std::move(data)) {
    if (!spacing_.valid()) throw ParameterError("grid spacing must be strictly positive");
    if (data_.size() != dims_.voxel_count())
      throw DimensionError("grid data length " + std::to_string(data_.size()) +
                           " does not match dims " + dims_.str());
  }

  const Extent3& dims() const { return dims_; }
  const Spacing3& spacing() const { return spacing_; }
  void set_spacing(Spacing3 s) {
    if (!s.valid()) throw ParameterError("grid spacing must be strictly positive");
    spacing_ = s;
  }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t linear(std::size_t z, std::size_t y, std::size_t x) const {
    return (z * dims_.y + y) * dims_.x + x;
  }
  T& operator()(std::size_t z, std::size_t y, std::size_t x) { return data_[linear(z, y, x)]; }
  const T& operator()(std::size_t z, std::size_t y, std::size_t x) const {
    return data_[linear(z, y, x)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Reads with coordinates clamped into the grid (replicate border).
  const T& clamped(std::ptrdiff_t z, std::ptrdiff_t y, std::ptrdiff_t x) const {
    auto clampi = [](std::ptrdiff_t v, std::size_t n) {
      return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n) - 1));
    };
    return (*this)(clampi(z, dims_.z), clampi(y, dims_.y), clampi(x, dims_.x));
  }

  bool contains(std::ptrdiff_t z, std::ptrdiff_t y, std::ptrdiff_t x) const {
    return z >= 0 && y >= 0 && x >= 0 && z < static_cast<std::ptrdiff_t>(dims_.z) &&
           y < static_cast<std::ptrdiff_t>(dims_.y) && x < static_cast<std::ptrdiff_t>(dims_.x);
  }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  friend bool operator==(const Grid3& a, const Grid3& b) {
    return a.dims_ == b.dims_ && a.spacing_ == b.spacing_ && a.data_ == b.data_;
  }

 private:
  Extent3 dims_{};
  Spacing3 spacing_{};
  std::vector<T> data_;
};

/// Scan intensities, 32-bit float.
using Volume3 = Grid3<float>;
/// Binary labels, one byte per voxel holding 0 or 1.
using BinaryMask3 = Grid3<std::uint8_t>;

inline bool all_finite(const Volume3& v) {
  return std::all_of(v.data().begin(), v.data().end(), [](float f) { return std::isfinite(f); });
}

inline bool is_binary(const BinaryMask3& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](std::uint8_t b) { return b <= 1; });
}

inline std::size_t count_foreground(const BinaryMask3& m) {
  return static_cast<std::size_t>(std::count(m.data().begin(), m.data().end(), std::uint8_t{1}));
}

inline void require_same_dims(const Extent3& a, const Extent3& b, const char* what) {
  if (!(a == b)) throw DimensionError(std::string(what) + ": dims " + a.str() + " vs " + b.str());
}

}  // namespace voxseg
