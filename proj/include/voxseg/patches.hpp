#pragma once

#include <span>
#include <vector>

#include "voxseg/grid.hpp"

namespace voxseg {

/// A sub-block of a volume: shape, origin in the source and the values in
/// z-major/x-fastest order.
struct Patch3 {
  Extent3 shape;
  Index3 origin;
  std::vector<float> values;
};

/// Origins along one axis: multiples of stride that fit, plus a final
/// edge-aligned origin at (dim - size) when the stride grid misses the edge.
/// A stride larger than the patch leaves gaps; those get back-to-back fill
/// origins so every voxel is still covered.
inline std::vector<std::size_t> axis_origins(std::size_t dim, std::size_t size, std::size_t stride) {
  if (size == 0 || size > dim) throw DimensionError("patch extent exceeds volume extent");
  if (stride == 0) throw ParameterError("patch stride must be at least 1");
  std::vector<std::size_t> out;
  std::size_t covered = 0;
  for (std::size_t o = 0; o + size <= dim; o += stride) {
    for (; covered < o; covered += size) out.push_back(covered);
    out.push_back(o);
    covered = o + size;
  }
  for (; covered + size < dim; covered += size) out.push_back(covered);
  if (covered < dim) out.push_back(dim - size);
  return out;
}

/// All patch origins covering `dims`, lexicographic with z major.
inline std::vector<Index3> patch_origins(const Extent3& dims, const Extent3& shape, const Extent3& stride) {
  if (!shape.fits_in(dims))
    throw DimensionError("patch shape " + shape.str() + " exceeds volume dims " + dims.str());
  const auto oz = axis_origins(dims.z, shape.z, stride.z);
  const auto oy = axis_origins(dims.y, shape.y, stride.y);
  const auto ox = axis_origins(dims.x, shape.x, stride.x);
  std::vector<Index3> out;
  out.reserve(oz.size() * oy.size() * ox.size());
  for (auto z : oz)
    for (auto y : oy)
      for (auto x : ox) out.push_back({z, y, x});
  return out;
}

/// Copies the block at `origin` of shape `shape` into `out` (resized).
template <typename T, typename U>
void copy_block(const Grid3<T>& src, const Index3& origin, const Extent3& shape, std::vector<U>& out) {
  out.resize(shape.voxel_count());
  std::size_t k = 0;
  for (std::size_t z = 0; z < shape.z; ++z)
    for (std::size_t y = 0; y < shape.y; ++y) {
      const T* row = &src(origin.z + z, origin.y + y, origin.x);
      for (std::size_t x = 0; x < shape.x; ++x) out[k++] = static_cast<U>(row[x]);
    }
}

inline std::vector<Patch3> extract_patches(const Volume3& volume, const Extent3& shape, const Extent3& stride) {
  std::vector<Patch3> out;
  for (const auto& o : patch_origins(volume.dims(), shape, stride)) {
    Patch3 p{shape, o, {}};
    copy_block(volume, o, shape, p.values);
    out.push_back(std::move(p));
  }
  return out;
}

/// Sum-and-count accumulator for combining overlapping patch values by their
/// unweighted mean.
class PatchAccumulator {
 public:
  explicit PatchAccumulator(Extent3 dims) : dims_(dims), sum_(dims.voxel_count(), 0.0), count_(dims.voxel_count(), 0) {}

  template <typename Values>
  void add(const Index3& origin, const Extent3& shape, const Values& values) {
    if (origin.z + shape.z > dims_.z || origin.y + shape.y > dims_.y || origin.x + shape.x > dims_.x)
      throw DimensionError("patch at origin does not fit in stitch dims " + dims_.str());
    if (static_cast<std::size_t>(std::size(values)) != shape.voxel_count())
      throw DimensionError("patch value grid does not match patch shape " + shape.str());
    std::size_t k = 0;
    for (std::size_t z = 0; z < shape.z; ++z)
      for (std::size_t y = 0; y < shape.y; ++y) {
        const std::size_t base = ((origin.z + z) * dims_.y + origin.y + y) * dims_.x + origin.x;
        for (std::size_t x = 0; x < shape.x; ++x) {
          sum_[base + x] += static_cast<double>(values[k++]);
          ++count_[base + x];
        }
      }
  }

  /// Per-voxel mean; throws CoverageError if any voxel was never covered.
  Volume3 mean(Spacing3 spacing = {}) const {
    Volume3 out(dims_, spacing);
    for (std::size_t i = 0; i < sum_.size(); ++i) {
      if (count_[i] == 0) throw CoverageError("voxel " + std::to_string(i) + " not covered by any patch");
      out[i] = static_cast<float>(sum_[i] / static_cast<double>(count_[i]));
    }
    return out;
  }

  /// Mask of voxels whose unrounded mean is strictly above `th`.
  BinaryMask3 threshold(double th, Spacing3 spacing = {}) const {
    BinaryMask3 out(dims_, spacing);
    for (std::size_t i = 0; i < sum_.size(); ++i) {
      if (count_[i] == 0) throw CoverageError("voxel " + std::to_string(i) + " not covered by any patch");
      out[i] = sum_[i] / static_cast<double>(count_[i]) > th ? 1 : 0;
    }
    return out;
  }

 private:
  Extent3 dims_;
  std::vector<double> sum_;
  std::vector<std::uint32_t> count_;
};

/// Combines patches into a volume; each voxel is the mean of all covering
/// patch values, accumulated in list order.
inline Volume3 stitch_patches(std::span<const Patch3> patches, const Extent3& dims, Spacing3 spacing = {}) {
  PatchAccumulator acc(dims);
  for (const auto& p : patches) acc.add(p.origin, p.shape, p.values);
  return acc.mean(spacing);
}

}  // namespace voxseg
