#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "voxseg/grid.hpp"

namespace voxseg {

struct PreprocessParams {
  /// Blur is applied when the Laplacian variance exceeds this value.
  double sharpness_threshold = 0.02;
  /// Gaussian standard deviation in voxels.
  double blur_sigma = 0.8;

  void validate() const {
    if (!(blur_sigma > 0.0)) throw ParameterError("blur_sigma must be > 0");
    if (!(sharpness_threshold >= 0.0)) throw ParameterError("sharpness_threshold must be >= 0");
  }
};

namespace detail {

/// 7-point Laplacian in double precision, replicate borders.
inline std::vector<double> laplacian_values(const Volume3& v) {
  const auto& d = v.dims();
  if (d.z < 3 || d.y < 3 || d.x < 3) throw DimensionError("laplacian needs at least 3 voxels per axis, got " + d.str());
  std::vector<double> out;
  out.reserve(v.size());
  for (std::size_t z = 0; z < d.z; ++z)
    for (std::size_t y = 0; y < d.y; ++y)
      for (std::size_t x = 0; x < d.x; ++x) {
        const auto zi = static_cast<std::ptrdiff_t>(z), yi = static_cast<std::ptrdiff_t>(y),
                   xi = static_cast<std::ptrdiff_t>(x);
        const double c = v(z, y, x);
        const double s = static_cast<double>(v.clamped(zi - 1, yi, xi)) + v.clamped(zi + 1, yi, xi) +
                         v.clamped(zi, yi - 1, xi) + v.clamped(zi, yi + 1, xi) + v.clamped(zi, yi, xi - 1) +
                         v.clamped(zi, yi, xi + 1);
        out.push_back(s - 6.0 * c);
      }
  return out;
}

}  // namespace detail

/// 7-point discrete Laplacian with replicate borders.
inline Volume3 laplacian_response(const Volume3& v) {
  const auto r = detail::laplacian_values(v);
  Volume3 out(v.dims(), v.spacing());
  for (std::size_t i = 0; i < r.size(); ++i) out[i] = static_cast<float>(r[i]);
  return out;
}

/// Variance (population) of the Laplacian response over all voxels.
/// Computed from the unrounded response.
inline double sharpness_score(const Volume3& v) {
  const auto r = detail::laplacian_values(v);
  double mean = 0.0;
  for (double f : r) mean += f;
  mean /= static_cast<double>(r.size());
  double var = 0.0;
  for (double f : r) var += (f - mean) * (f - mean);
  return var / static_cast<double>(r.size());
}

/// Normalized taps for offsets -radius..radius, radius = ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw ParameterError("gaussian sigma must be > 0");
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = w;
    sum += w;
  }
  for (auto& w : k) w /= sum;
  return k;
}

namespace detail {

// One 1D pass along `axis` with replicate borders.
inline std::vector<double> blur_axis(const std::vector<double>& in, const Extent3& d, int axis,
                                     const std::vector<double>& k) {
  const auto radius = static_cast<std::ptrdiff_t>(k.size() / 2);
  const std::size_t n = d[axis];
  const std::size_t step = axis == 0 ? d.y * d.x : axis == 1 ? d.x : 1;
  std::vector<double> out(in.size(), 0.0);
  for (std::size_t z = 0; z < d.z; ++z)
    for (std::size_t y = 0; y < d.y; ++y)
      for (std::size_t x = 0; x < d.x; ++x) {
        const std::size_t idx = (z * d.y + y) * d.x + x;
        const std::size_t pos = axis == 0 ? z : axis == 1 ? y : x;
        const std::size_t line0 = idx - pos * step;
        double acc = 0.0;
        for (std::ptrdiff_t t = -radius; t <= radius; ++t) {
          const auto q = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(pos) + t, 0,
                                                    static_cast<std::ptrdiff_t>(n) - 1);
          acc += k[static_cast<std::size_t>(t + radius)] * in[line0 + static_cast<std::size_t>(q) * step];
        }
        out[idx] = acc;
      }
  return out;
}

}  // namespace detail

/// Separable Gaussian blur: x, y, then z passes, replicate borders.
inline Volume3 gaussian_blur(const Volume3& v, double sigma) {
  const auto k = gaussian_kernel(sigma);
  std::vector<double> buf(v.data().begin(), v.data().end());
  buf = detail::blur_axis(buf, v.dims(), 2, k);
  buf = detail::blur_axis(buf, v.dims(), 1, k);
  buf = detail::blur_axis(buf, v.dims(), 0, k);
  Volume3 out(v.dims(), v.spacing());
  for (std::size_t i = 0; i < buf.size(); ++i) out[i] = static_cast<float>(buf[i]);
  return out;
}

struct ConditionalBlurResult {
  Volume3 volume;
  bool applied = false;
  double sharpness = 0.0;
};

inline ConditionalBlurResult conditional_blur(const Volume3& v, const PreprocessParams& p) {
  p.validate();
  const double score = sharpness_score(v);
  if (score > p.sharpness_threshold) return {gaussian_blur(v, p.blur_sigma), true, score};
  return {v, false, score};
}

}  // namespace voxseg
