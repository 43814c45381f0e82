#pragma once

#include <cmath>
#include <filesystem>
#include <limits>
#include <memory>
#include <numeric>
#include <vector>

#include "voxseg/io.hpp"
#include "voxseg/patches.hpp"
#include "voxseg/rng.hpp"

namespace voxseg {

struct DictParams {
  Extent3 patch_shape{3, 3, 3};
  double seed_fraction = 0.1;
  double label_sim_threshold = 0.5;
  std::size_t train_iterations = 10;
  double step_tau = 0.05;
  double label_threshold_th = 0.5;

  void validate() const {
    if (patch_shape.voxel_count() == 0) throw ParameterError("dictionary patch shape must be positive");
    if (!(seed_fraction > 0.0 && seed_fraction <= 1.0)) throw ParameterError("seed_fraction must be in (0, 1]");
    if (!(label_sim_threshold >= 0.0 && label_sim_threshold <= 1.0))
      throw ParameterError("label_sim_threshold must be in [0, 1]");
    if (!(step_tau >= 0.0 && step_tau <= 1.0)) throw ParameterError("step_tau must be in [0, 1]");
    if (!(label_threshold_th > 0.0 && label_threshold_th < 1.0))
      throw ParameterError("label_threshold_th must be in (0, 1)");
  }
};

struct DictionaryAtom {
  std::vector<float> intensity;
  std::vector<float> label;  ///< entries in [0, 1]
  std::size_t member_count = 1;

  friend bool operator==(const DictionaryAtom&, const DictionaryAtom&) = default;
};

struct PatchDictionary {
  std::vector<DictionaryAtom> atoms;
  DictParams params;
};

/// Intensity/label patch pairs drawn from whole volumes without copying them
/// out. Explicit pairs are stored as patch-sized volumes at origin zero.
class PatchPairSet {
 public:
  explicit PatchPairSet(Extent3 shape) : shape_(shape) {}

  /// Adds every patch at the given stride (edge aligned) from one case.
  void add_volume(const Volume3& v, const BinaryMask3& m, Extent3 stride = {1, 1, 1}) {
    require_same_dims(v.dims(), m.dims(), "training pair");
    const auto origins = patch_origins(v.dims(), shape_, stride);
    const auto id = static_cast<std::uint32_t>(sources_.size());
    sources_.push_back(std::make_shared<Source>(Source{v, m}));
    for (const auto& o : origins) entries_.push_back({id, o});
  }

  void add_pair(const std::vector<float>& intensity, const std::vector<float>& label) {
    if (intensity.size() != shape_.voxel_count() || label.size() != shape_.voxel_count())
      throw DimensionError("training pair does not match patch shape " + shape_.str());
    Volume3 v(shape_, {}, intensity);
    BinaryMask3 m(shape_);
    for (std::size_t i = 0; i < label.size(); ++i) {
      if (label[i] != 0.0f && label[i] != 1.0f) throw InputError("training label patches must be binary");
      m[i] = label[i] != 0.0f;
    }
    const auto id = static_cast<std::uint32_t>(sources_.size());
    sources_.push_back(std::make_shared<Source>(Source{std::move(v), std::move(m)}));
    entries_.push_back({id, {0, 0, 0}});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const Extent3& shape() const { return shape_; }

  void intensity(std::size_t i, std::vector<float>& out) const {
    const auto& e = entries_[i];
    copy_block(sources_[e.source]->volume, e.origin, shape_, out);
  }
  void label(std::size_t i, std::vector<float>& out) const {
    const auto& e = entries_[i];
    copy_block(sources_[e.source]->mask, e.origin, shape_, out);
  }

 private:
  struct Source {
    Volume3 volume;
    BinaryMask3 mask;
  };
  struct Entry {
    std::uint32_t source;
    Index3 origin;
  };
  Extent3 shape_;
  std::vector<std::shared_ptr<const Source>> sources_;
  std::vector<Entry> entries_;
};

/// Mean squared intensity difference.
inline double patch_distance(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

/// 1 - mean absolute label difference.
inline double label_similarity(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a[i]) - b[i]);
  return 1.0 - s / static_cast<double>(a.size());
}

/// Index of the atom nearest in intensity; ties go to the lowest index.
inline std::size_t nearest_atom(const std::vector<DictionaryAtom>& atoms, const std::vector<float>& patch,
                                double* best_distance = nullptr) {
  std::size_t best = 0;
  double best_sum = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < atoms.size(); ++a) {
    const auto& v = atoms[a].intensity;
    double s = 0.0;
    std::size_t i = 0;
    for (; i < patch.size(); ++i) {
      const double d = static_cast<double>(patch[i]) - v[i];
      s += d * d;
      if (s >= best_sum) break;  // partial sums only grow
    }
    if (i == patch.size() && s < best_sum) {
      best_sum = s;
      best = a;
    }
  }
  if (best_distance) *best_distance = best_sum / static_cast<double>(patch.size());
  return best;
}

/// Greedy online seeding from a random sample of the training pairs.
inline PatchDictionary seed_dictionary(const PatchPairSet& training, const DictParams& params, std::uint64_t seed) {
  params.validate();
  if (training.empty()) throw InputError("dictionary seeding needs at least one training pair");
  if (!(training.shape() == params.patch_shape)) throw DimensionError("training patches do not match patch_shape");
  const std::size_t n = training.size();
  const auto draws = static_cast<std::size_t>(std::ceil(params.seed_fraction * static_cast<double>(n) - 1e-9));
  std::vector<std::uint32_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<std::uint32_t>(i);
  Rng rng(seed);
  for (std::size_t i = 0; i < draws; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);

  PatchDictionary dict;
  dict.params = params;
  std::vector<float> p, y;
  for (std::size_t t = 0; t < draws; ++t) {
    training.intensity(idx[t], p);
    training.label(idx[t], y);
    if (!dict.atoms.empty()) {
      const std::size_t a = nearest_atom(dict.atoms, p);
      auto& atom = dict.atoms[a];
      if (label_similarity(atom.label, y) >= params.label_sim_threshold) {
        const double w = static_cast<double>(atom.member_count);
        for (std::size_t i = 0; i < p.size(); ++i) {
          atom.intensity[i] = static_cast<float>((w * atom.intensity[i] + p[i]) / (w + 1.0));
          atom.label[i] = static_cast<float>((w * atom.label[i] + y[i]) / (w + 1.0));
        }
        ++atom.member_count;
        continue;
      }
    }
    dict.atoms.push_back({p, y, 1});
  }
  return dict;
}

/// Vector-quantization passes: the nearest atom moves toward each training
/// pair by step tau, in intensity and in label. Every pass visits the pairs
/// in one fixed order, a permutation drawn once from `seed`.
inline PatchDictionary train_dictionary(PatchDictionary dict, const PatchPairSet& training, const DictParams& params,
                                        std::uint64_t seed = 0) {
  params.validate();
  if (dict.atoms.empty()) throw StateError("dictionary must be seeded before training");
  if (!(training.shape() == params.patch_shape) || dict.atoms.front().intensity.size() != params.patch_shape.voxel_count())
    throw DimensionError("training patches do not match dictionary shape");
  dict.params = params;
  const float tau = static_cast<float>(params.step_tau);
  if (tau == 0.0f) return dict;
  std::vector<std::uint32_t> order(training.size());
  std::iota(order.begin(), order.end(), 0u);
  Rng rng(derive_seed(seed, "dict-train-order"));
  rng.shuffle(order);
  std::vector<float> p, y;
  for (std::size_t pass = 0; pass < params.train_iterations; ++pass)
    for (const auto j : order) {
      training.intensity(j, p);
      training.label(j, y);
      auto& atom = dict.atoms[nearest_atom(dict.atoms, p)];
      for (std::size_t i = 0; i < p.size(); ++i) {
        atom.intensity[i] += tau * (p[i] - atom.intensity[i]);
        atom.label[i] = std::clamp(atom.label[i] + tau * (y[i] - atom.label[i]), 0.0f, 1.0f);
      }
    }
  return dict;
}

/// Mean intensity distance from each training patch to its nearest atom.
inline double quantization_error(const PatchDictionary& dict, const PatchPairSet& training) {
  std::vector<float> p;
  double total = 0.0;
  for (std::size_t j = 0; j < training.size(); ++j) {
    training.intensity(j, p);
    double d = 0.0;
    nearest_atom(dict.atoms, p, &d);
    total += d;
  }
  return total / static_cast<double>(training.size());
}

namespace detail {

inline PatchAccumulator dict_accumulate(const PatchDictionary& dict, const Volume3& volume) {
  if (dict.atoms.empty()) throw StateError("empty dictionary");
  const auto& shape = dict.params.patch_shape;
  if (!shape.fits_in(volume.dims()))
    throw DimensionError("volume " + volume.dims().str() + " smaller than patch " + shape.str());
  PatchAccumulator acc(volume.dims());
  std::vector<float> p;
  for (const auto& o : patch_origins(volume.dims(), shape, {1, 1, 1})) {
    copy_block(volume, o, shape, p);
    acc.add(o, shape, dict.atoms[nearest_atom(dict.atoms, p)].label);
  }
  return acc;
}

}  // namespace detail

/// Soft label per voxel: mean of the nearest-atom labels over every window
/// covering it (stride 1).
inline Volume3 dict_soft_labels(const PatchDictionary& dict, const Volume3& volume) {
  return detail::dict_accumulate(dict, volume).mean(volume.spacing());
}

/// Soft labels binarized at th (strict), before rounding to float.
inline BinaryMask3 dict_label_volume(const PatchDictionary& dict, const Volume3& volume) {
  return detail::dict_accumulate(dict, volume).threshold(dict.params.label_threshold_th, volume.spacing());
}

inline nlohmann::json dict_params_to_json(const DictParams& p) {
  return {{"patch_shape", {p.patch_shape.z, p.patch_shape.y, p.patch_shape.x}},
          {"seed_fraction", p.seed_fraction},
          {"label_sim_threshold", p.label_sim_threshold},
          {"train_iterations", p.train_iterations},
          {"step_tau", p.step_tau},
          {"label_threshold_th", p.label_threshold_th}};
}

inline DictParams dict_params_from_json(const nlohmann::json& j, DictParams p = {}) {
  static const std::vector<std::string> known{"patch_shape", "seed_fraction", "label_sim_threshold",
                                              "train_iterations", "step_tau", "label_threshold_th"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown dict key '" + k + "'");
  try {
    if (j.contains("patch_shape")) {
      const auto s = j.at("patch_shape");
      p.patch_shape = {s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>(), s.at(2).get<std::size_t>()};
    }
    p.seed_fraction = j.value("seed_fraction", p.seed_fraction);
    p.label_sim_threshold = j.value("label_sim_threshold", p.label_sim_threshold);
    p.train_iterations = j.value("train_iterations", p.train_iterations);
    p.step_tau = j.value("step_tau", p.step_tau);
    p.label_threshold_th = j.value("label_threshold_th", p.label_threshold_th);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad dict params: ") + e.what());
  }
  p.validate();
  return p;
}

/// Header JSON plus f32le payload: per atom, intensity then label.
inline void write_dictionary(const PatchDictionary& dict, const fs::path& header) {
  const fs::path payload = default_payload_name(header);
  std::vector<float> flat;
  std::vector<std::size_t> counts;
  for (const auto& a : dict.atoms) {
    flat.insert(flat.end(), a.intensity.begin(), a.intensity.end());
    flat.insert(flat.end(), a.label.begin(), a.label.end());
    counts.push_back(a.member_count);
  }
  const nlohmann::json h = {{"kind", "patch_dictionary"},
                            {"params", dict_params_to_json(dict.params)},
                            {"atom_count", dict.atoms.size()},
                            {"patch_shape", {dict.params.patch_shape.z, dict.params.patch_shape.y, dict.params.patch_shape.x}},
                            {"member_counts", counts},
                            {"dtype", "f32le"},
                            {"payload", payload.string()}};
  write_file_atomic(header.parent_path() / payload, encode_payload<float>(flat));
  write_json_file(header, h);
}

inline PatchDictionary read_dictionary(const fs::path& header) {
  if (!fs::exists(header)) throw MissingFileError("dictionary header not found: " + header.string());
  const auto h = read_json_file(header);
  PatchDictionary dict;
  std::size_t count = 0;
  std::vector<std::size_t> members;
  std::string payload;
  try {
    if (h.at("kind").get<std::string>() != "patch_dictionary") throw FormatError("not a dictionary file: " + header.string());
    if (h.at("dtype").get<std::string>() != "f32le") throw UnsupportedDtypeError("dictionary dtype must be f32le");
    dict.params = dict_params_from_json(h.at("params"));
    count = h.at("atom_count").get<std::size_t>();
    members = h.at("member_counts").get<std::vector<std::size_t>>();
    payload = h.at("payload").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad dictionary header " + header.string() + ": " + e.what());
  }
  if (members.size() != count) throw FormatError("member_counts length does not match atom_count");
  const std::size_t pv = dict.params.patch_shape.voxel_count();
  const fs::path pp = header.parent_path() / payload;
  if (!fs::exists(pp)) throw MissingFileError("dictionary payload not found: " + pp.string());
  const auto flat = decode_payload<float>(read_file(pp), count * 2 * pv, pp);
  for (float f : flat)
    if (!std::isfinite(f)) throw NonFiniteError("non-finite value in dictionary payload");
  for (std::size_t a = 0; a < count; ++a) {
    const auto base = flat.begin() + static_cast<std::ptrdiff_t>(a * 2 * pv);
    DictionaryAtom atom{{base, base + static_cast<std::ptrdiff_t>(pv)},
                        {base + static_cast<std::ptrdiff_t>(pv), base + static_cast<std::ptrdiff_t>(2 * pv)},
                        members[a]};
    dict.atoms.push_back(std::move(atom));
  }
  return dict;
}

}  // namespace voxseg
