#pragma once

#include <array>
#include <string>
#include <vector>

#include "voxseg/grid.hpp"

namespace voxseg {

enum class StructuringElement {
  cross,  ///< center plus 6 face neighbors
  cube,   ///< full 3x3x3
};

inline StructuringElement parse_structuring_element(const std::string& s) {
  if (s == "cross") return StructuringElement::cross;
  if (s == "cube") return StructuringElement::cube;
  throw ParameterError("unknown structuring element '" + s + "' (expected cross or cube)");
}

inline const char* to_string(StructuringElement se) { return se == StructuringElement::cross ? "cross" : "cube"; }

/// Offsets (dz, dy, dx) of the element; both elements are symmetric.
inline std::vector<std::array<int, 3>> element_offsets(StructuringElement se) {
  std::vector<std::array<int, 3>> out;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int manhattan = std::abs(dz) + std::abs(dy) + std::abs(dx);
        if (se == StructuringElement::cube || manhattan <= 1) out.push_back({dz, dy, dx});
      }
  return out;
}

namespace detail {

// Erosion skips out-of-volume neighbors; dilation sees them as background.
// This pair is an adjunction on the clipped grid, so opening and closing stay
// idempotent up to the border.
template <bool Erode>
BinaryMask3 morph(const BinaryMask3& m, StructuringElement se) {
  const auto offs = element_offsets(se);
  const auto& d = m.dims();
  BinaryMask3 out(d, m.spacing());
  for (std::size_t z = 0; z < d.z; ++z)
    for (std::size_t y = 0; y < d.y; ++y)
      for (std::size_t x = 0; x < d.x; ++x) {
        bool v = Erode;
        for (const auto& o : offs) {
          const auto zz = static_cast<std::ptrdiff_t>(z) + o[0];
          const auto yy = static_cast<std::ptrdiff_t>(y) + o[1];
          const auto xx = static_cast<std::ptrdiff_t>(x) + o[2];
          if (!m.contains(zz, yy, xx)) continue;
          const bool on = m(static_cast<std::size_t>(zz), static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) != 0;
          if constexpr (Erode) {
            if (!on) { v = false; break; }
          } else {
            if (on) { v = true; break; }
          }
        }
        out(z, y, x) = v ? 1 : 0;
      }
  return out;
}

}  // namespace detail

inline BinaryMask3 erode(const BinaryMask3& m, StructuringElement se) { return detail::morph<true>(m, se); }
inline BinaryMask3 dilate(const BinaryMask3& m, StructuringElement se) { return detail::morph<false>(m, se); }
inline BinaryMask3 open(const BinaryMask3& m, StructuringElement se) { return dilate(erode(m, se), se); }
inline BinaryMask3 close(const BinaryMask3& m, StructuringElement se) { return erode(dilate(m, se), se); }

/// Opening then closing.
inline BinaryMask3 cleanup_labels(const BinaryMask3& m, StructuringElement se = StructuringElement::cross) {
  return close(open(m, se), se);
}

}  // namespace voxseg
