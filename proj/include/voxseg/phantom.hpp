#pragma once

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxseg/grid.hpp"
#include "voxseg/preprocess.hpp"
#include "voxseg/rng.hpp"

namespace voxseg {

struct Lesion {
  std::array<double, 3> center{};  ///< voxel coordinates (z, y, x)
  std::array<double, 3> radii{};   ///< per-axis, voxels
  double intensity = 1.0;
};

struct PhantomSpec {
  std::string name = "phantom";
  Extent3 dims{32, 32, 32};
  Spacing3 spacing{};
  double background_intensity = 0.0;
  std::vector<Lesion> lesions;
  double psf_sigma = 0.0;    ///< voxels; 0 disables blurring
  double noise_sigma = 0.0;  ///< intensity units
  std::uint64_t seed = 0;

  void validate() const {
    if (dims.voxel_count() == 0) throw SpecError("phantom dims must be positive");
    if (!spacing.valid()) throw SpecError("phantom spacing must be positive");
    if (psf_sigma < 0.0) throw SpecError("psf_sigma must be >= 0");
    if (noise_sigma < 0.0) throw SpecError("noise_sigma must be >= 0");
    for (const auto& l : lesions) {
      if (!(l.intensity > background_intensity)) throw SpecError("lesion intensity must exceed background");
      for (int a = 0; a < 3; ++a) {
        if (!(l.radii[a] > 0.0)) throw SpecError("lesion radii must be > 0");
        const double n = static_cast<double>(dims[a]);
        if (l.center[a] - l.radii[a] < -0.5 || l.center[a] + l.radii[a] > n - 0.5)
          throw SpecError("lesion in '" + name + "' extends outside the volume");
      }
    }
  }
};

struct PhantomCase {
  std::string name;
  std::string group;
  Volume3 volume;
  BinaryMask3 mask;
};

inline bool inside_lesion(const Lesion& l, double z, double y, double x) {
  const double a = (z - l.center[0]) / l.radii[0];
  const double b = (y - l.center[1]) / l.radii[1];
  const double c = (x - l.center[2]) / l.radii[2];
  return a * a + b * b + c * c < 1.0;
}

/// Ellipsoid-union ground truth plus blurred, noisy intensities.
inline std::pair<Volume3, BinaryMask3> generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const auto& d = spec.dims;
  BinaryMask3 mask(d, spec.spacing);
  Volume3 clean(d, spec.spacing, static_cast<float>(spec.background_intensity));
  for (std::size_t z = 0; z < d.z; ++z)
    for (std::size_t y = 0; y < d.y; ++y)
      for (std::size_t x = 0; x < d.x; ++x) {
        double value = spec.background_intensity;
        bool hit = false;
        for (const auto& l : spec.lesions)
          if (inside_lesion(l, static_cast<double>(z), static_cast<double>(y), static_cast<double>(x))) {
            value = hit ? std::max(value, l.intensity) : l.intensity;
            hit = true;
          }
        mask(z, y, x) = hit ? 1 : 0;
        clean(z, y, x) = static_cast<float>(value);
      }
  Volume3 vol = spec.psf_sigma > 0.0 ? gaussian_blur(clean, spec.psf_sigma) : clean;
  if (spec.noise_sigma > 0.0) {
    Rng rng(derive_seed(spec.seed, "phantom-noise"));
    for (auto& v : vol.storage()) v = static_cast<float>(v + spec.noise_sigma * rng.normal());
  }
  return {std::move(vol), std::move(mask)};
}

enum class SuiteDifficulty { easy, noisy };

/// Six fixed 64^3 cases per difficulty. Lesion intensity 1, background set by
/// the contrast (easy 5:1, noisy 2:1). Geometry is shared; seeds differ.
inline std::vector<PhantomSpec> standard_suite_specs(SuiteDifficulty difficulty) {
  const bool easy = difficulty == SuiteDifficulty::easy;
  const double bg = easy ? 0.2 : 0.5;
  const double psf = easy ? 1.0 : 1.5;
  const double noise = easy ? 0.02 : 0.08;
  const std::uint64_t seed_base = easy ? 1000 : 2000;
  struct Geometry {
    const char* name;
    const char* group;
    std::vector<Lesion> lesions;
  };
  const std::vector<Geometry> geoms = {
      {"sphere_r8", "single", {{{32, 32, 32}, {8, 8, 8}, 1.0}}},
      {"ellipsoid", "single", {{{30, 34, 31}, {6, 9, 7}, 1.0}}},
      {"sphere_r10", "single", {{{33, 30, 35}, {10, 10, 10}, 1.0}}},
      {"two_spheres", "multi", {{{20, 22, 22}, {7, 7, 7}, 1.0}, {{42, 42, 40}, {6, 6, 6}, 1.0}}},
      {"three_lesions", "multi",
       {{{18, 20, 44}, {6, 6, 6}, 1.0}, {{40, 44, 20}, {7, 7, 7}, 1.0}, {{44, 20, 40}, {8, 7, 8}, 1.0}}},
      {"offcenter_ellipsoid", "multi", {{{22, 40, 24}, {8, 6, 10}, 1.0}, {{46, 18, 46}, {6, 6, 6}, 1.0}}},
  };
  std::vector<PhantomSpec> out;
  std::uint64_t i = 0;
  for (const auto& g : geoms) {
    PhantomSpec s;
    s.name = std::string(easy ? "easy_" : "noisy_") + g.name;
    s.dims = {64, 64, 64};
    s.spacing = {2.0, 2.0, 2.0};
    s.background_intensity = bg;
    s.lesions = g.lesions;
    s.psf_sigma = psf;
    s.noise_sigma = noise;
    s.seed = seed_base + i++;
    out.push_back(s);
  }
  return out;
}

inline const char* suite_group(std::size_t index) { return index < 3 ? "single" : "multi"; }

inline std::vector<PhantomCase> standard_suite(SuiteDifficulty difficulty) {
  std::vector<PhantomCase> out;
  const auto specs = standard_suite_specs(difficulty);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    auto [v, m] = generate_phantom(specs[i]);
    out.push_back({specs[i].name, suite_group(i), std::move(v), std::move(m)});
  }
  return out;
}

inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known{"name", "dims", "spacing", "background_intensity", "lesions",
                                              "psf_sigma", "noise_sigma", "seed"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown phantom key '" + k + "'");
  PhantomSpec s;
  try {
    s.name = j.value("name", s.name);
    const auto d = j.at("dims");
    s.dims = {d.at(0).get<std::size_t>(), d.at(1).get<std::size_t>(), d.at(2).get<std::size_t>()};
    if (j.contains("spacing")) {
      const auto sp = j.at("spacing");
      s.spacing = {sp.at(0).get<double>(), sp.at(1).get<double>(), sp.at(2).get<double>()};
    }
    s.background_intensity = j.value("background_intensity", 0.0);
    s.psf_sigma = j.value("psf_sigma", 0.0);
    s.noise_sigma = j.value("noise_sigma", 0.0);
    s.seed = j.value("seed", std::uint64_t{0});
    for (const auto& l : j.value("lesions", nlohmann::json::array())) {
      Lesion les;
      les.center = l.at("center").get<std::array<double, 3>>();
      les.radii = l.at("radii").get<std::array<double, 3>>();
      les.intensity = l.at("intensity").get<double>();
      s.lesions.push_back(les);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad phantom spec: ") + e.what());
  }
  return s;
}

}  // namespace voxseg
