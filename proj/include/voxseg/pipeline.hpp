#pragma once

// Config-driven runs: segment, train, evaluate and k-fold splitting.
//
// A single config seed feeds every stochastic stage. Each stage draws its own
// sub-seed as derive_seed(seed, "<stage>"), with stage names
//   segment:km, segment:gmm, segment:fcm, segment:sdwfcm,
//   train:dict-seed, train:dict-vq, train:cnn-init, train:cnn, kfold.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxseg/clustering.hpp"
#include "voxseg/cnn.hpp"
#include "voxseg/dictseg.hpp"
#include "voxseg/io.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/morphology.hpp"
#include "voxseg/preprocess.hpp"

namespace voxseg {

enum class Method { km, gmm, fcm, sdwfcm, dict, cnn };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::km: return "km";
    case Method::gmm: return "gmm";
    case Method::fcm: return "fcm";
    case Method::sdwfcm: return "sdwfcm";
    case Method::dict: return "dict";
    case Method::cnn: return "cnn";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::km, Method::gmm, Method::fcm, Method::sdwfcm, Method::dict, Method::cnn})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown method '" + s + "' (expected km, gmm, fcm, sdwfcm, dict or cnn)");
}

/// Conditional blur runs for every method except GMM and CNN.
inline bool uses_preprocessing(Method m) { return m != Method::gmm && m != Method::cnn; }
/// Morphological cleanup runs for every method except CNN.
inline bool uses_cleanup(Method m) { return m != Method::cnn; }
inline bool has_training(Method m) { return m == Method::dict || m == Method::cnn; }
inline bool is_clustering(Method m) { return !has_training(m); }

/// Per-method clustering defaults: KM k=2 f=1, GMM n=4 f=1, FCM c=2 f=1 m=2,
/// SDWFCM c=2 f=1 m=2 lambda=0.5 nb=1.
inline ClusterParams default_cluster_params(Method m) {
  ClusterParams p;
  p.n_clusters = m == Method::gmm ? 4 : 2;
  p.f_select = 1;
  p.fuzziness_m = 2.0;
  p.spatial_lambda = 0.5;
  p.neighborhood_nb = 1;
  return p;
}

inline ClusterParams cluster_params_from_json(Method m, const nlohmann::json& j) {
  std::vector<std::string> known{"n_clusters", "f_select", "max_iter", "tol"};
  if (m == Method::fcm || m == Method::sdwfcm) known.push_back("fuzziness_m");
  if (m == Method::sdwfcm) {
    known.push_back("spatial_lambda");
    known.push_back("neighborhood_nb");
  }
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw ConfigError("unknown " + std::string(to_string(m)) + " parameter '" + k + "'");
  ClusterParams p = default_cluster_params(m);
  try {
    p.n_clusters = j.value("n_clusters", p.n_clusters);
    p.f_select = j.value("f_select", p.f_select);
    p.max_iter = j.value("max_iter", p.max_iter);
    p.tol = j.value("tol", p.tol);
    p.fuzziness_m = j.value("fuzziness_m", p.fuzziness_m);
    p.spatial_lambda = j.value("spatial_lambda", p.spatial_lambda);
    p.neighborhood_nb = j.value("neighborhood_nb", p.neighborhood_nb);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad cluster params: ") + e.what());
  }
  if (m == Method::fcm || m == Method::sdwfcm) p.validate_fuzzy();
  else p.validate();
  return p;
}

inline nlohmann::json cluster_params_to_json(Method m, const ClusterParams& p) {
  nlohmann::json j = {{"n_clusters", p.n_clusters}, {"f_select", p.f_select}, {"max_iter", p.max_iter}, {"tol", p.tol}};
  if (m == Method::fcm || m == Method::sdwfcm) j["fuzziness_m"] = p.fuzziness_m;
  if (m == Method::sdwfcm) {
    j["spatial_lambda"] = p.spatial_lambda;
    j["neighborhood_nb"] = p.neighborhood_nb;
  }
  return j;
}

/// Table-style parameter summary, e.g. "k=2, f=1".
inline std::string parameter_summary(Method m, const ClusterParams& p) {
  auto num = [](double v) {
    std::ostringstream os;
    os << v;
    return os.str();
  };
  switch (m) {
    case Method::km: return "k=" + std::to_string(p.n_clusters) + ", f=" + std::to_string(p.f_select);
    case Method::gmm: return "n=" + std::to_string(p.n_clusters) + ", f=" + std::to_string(p.f_select);
    case Method::fcm:
      return "c=" + std::to_string(p.n_clusters) + ", f=" + std::to_string(p.f_select) + ", m=" + num(p.fuzziness_m);
    case Method::sdwfcm:
      return "c=" + std::to_string(p.n_clusters) + ", f=" + std::to_string(p.f_select) + ", m=" + num(p.fuzziness_m) +
             ", lambda=" + num(p.spatial_lambda) + ", nb=" + std::to_string(p.neighborhood_nb);
    default: return "";
  }
}

inline PreprocessParams preprocess_params_from_json(const nlohmann::json& j) {
  for (const auto& [k, v] : j.items())
    if (k != "sharpness_threshold" && k != "blur_sigma") throw ConfigError("unknown preprocess key '" + k + "'");
  PreprocessParams p;
  try {
    p.sharpness_threshold = j.value("sharpness_threshold", p.sharpness_threshold);
    p.blur_sigma = j.value("blur_sigma", p.blur_sigma);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad preprocess params: ") + e.what());
  }
  p.validate();
  return p;
}

/// One labeled training case on disk.
struct CaseFiles {
  std::string name;
  std::string group;
  fs::path volume;
  fs::path mask;
};

inline fs::path resolve_path(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

/// Case list JSON: {"cases": [{"name", "group", "volume", "mask"}, ...]} or a
/// bare array of such objects. Relative paths resolve against `base`.
inline std::vector<CaseFiles> case_files_from_json(const nlohmann::json& j, const fs::path& base) {
  const nlohmann::json& arr = j.is_object() && j.contains("cases") ? j.at("cases") : j;
  if (!arr.is_array()) throw ConfigError("case list must be an array");
  std::vector<CaseFiles> out;
  try {
    for (const auto& c : arr) {
      for (const auto& [k, v] : c.items())
        if (k != "name" && k != "group" && k != "volume" && k != "mask") throw ConfigError("unknown case key '" + k + "'");
      CaseFiles f;
      f.volume = resolve_path(base, c.at("volume").get<std::string>());
      f.mask = resolve_path(base, c.at("mask").get<std::string>());
      f.name = c.value("name", f.volume.stem().string());
      f.group = c.value("group", std::string("all"));
      out.push_back(std::move(f));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad case list: ") + e.what());
  }
  return out;
}

inline std::vector<CaseFiles> read_case_files(const fs::path& file) {
  return case_files_from_json(read_json_file(file), file.parent_path());
}

struct PipelineConfig {
  Method method = Method::km;
  ClusterParams cluster = default_cluster_params(Method::km);
  DictParams dict;
  CnnParams cnn;
  nlohmann::json method_params = nlohmann::json::object();  ///< as written, for overlaying model defaults
  PreprocessParams preprocess;
  StructuringElement element = StructuringElement::cross;
  std::uint64_t seed = 0;
  std::size_t kfold = 0;
  fs::path input;
  fs::path output;
  fs::path manifest;
  fs::path model;
  fs::path trace;
  std::vector<CaseFiles> train;
  nlohmann::json raw;  ///< the config as read
};

/// Strict parse; relative paths resolve against `base`.
inline PipelineConfig parse_config(const nlohmann::json& j, const fs::path& base = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::vector<std::string> known{"method", "params", "preprocess", "postprocess", "seed", "kfold", "input",
                                              "output", "manifest", "model", "trace", "train"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown config key '" + k + "'");
  PipelineConfig c;
  c.raw = j;
  try {
    if (!j.contains("method")) throw ConfigError("config needs a 'method'");
    c.method = parse_method(j.at("method").get<std::string>());
    c.method_params = j.value("params", nlohmann::json::object());
    if (!c.method_params.is_object()) throw ConfigError("'params' must be an object");
    if (is_clustering(c.method)) c.cluster = cluster_params_from_json(c.method, c.method_params);
    else if (c.method == Method::dict) c.dict = dict_params_from_json(c.method_params);
    else c.cnn = cnn_params_from_json(c.method_params);
    c.preprocess = preprocess_params_from_json(j.value("preprocess", nlohmann::json::object()));
    const auto post = j.value("postprocess", nlohmann::json::object());
    for (const auto& [k, v] : post.items())
      if (k != "element") throw ConfigError("unknown postprocess key '" + k + "'");
    if (post.contains("element")) {
      try {
        c.element = parse_structuring_element(post.at("element").get<std::string>());
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
    }
    c.seed = j.value("seed", std::uint64_t{0});
    c.kfold = j.value("kfold", std::size_t{0});
    if (c.kfold == 1) throw ConfigError("kfold must be 0 (off) or >= 2");
    auto path = [&](const char* key) { return j.contains(key) ? resolve_path(base, j.at(key).get<std::string>()) : fs::path{}; };
    c.input = path("input");
    c.output = path("output");
    c.manifest = path("manifest");
    c.model = path("model");
    c.trace = path("trace");
    if (j.contains("train")) {
      const auto& t = j.at("train");
      c.train = t.is_string() ? read_case_files(resolve_path(base, t.get<std::string>())) : case_files_from_json(t, base);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  }
  if (c.manifest.empty() && !c.output.empty()) {
    c.manifest = c.output;
    c.manifest.replace_extension(".manifest.json");
  }
  if (c.trace.empty() && !c.model.empty()) {
    c.trace = c.model;
    c.trace.replace_extension(".trace.json");
  }
  return c;
}

inline PipelineConfig load_config(const fs::path& file) {
  if (!fs::exists(file)) throw MissingFileError("config not found: " + file.string());
  json j;
  try {
    j = json::parse(read_file(file));
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + file.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j, file.parent_path());
}

/// Trained state a segmentation may need.
struct TrainedModels {
  const PatchDictionary* dict = nullptr;
  const CnnModel<float>* cnn = nullptr;
};

struct SegmentationRun {
  BinaryMask3 mask;
  BinaryMask3 raw_mask;  ///< before cleanup
  bool preprocessing_ran = false;
  bool blur_applied = false;
  std::optional<double> sharpness;
  bool cleanup_applied = false;
  std::optional<std::size_t> iterations;
  std::optional<bool> converged;
  std::vector<double> objective_trace;
  std::vector<double> centers;
};

/// Preprocessing gate, segmenter, cleanup gate; in memory.
inline SegmentationRun segment_volume(const PipelineConfig& c, const Volume3& volume, const TrainedModels& models = {}) {
  SegmentationRun run;
  Volume3 work = volume;
  if (uses_preprocessing(c.method)) {
    auto pre = conditional_blur(volume, c.preprocess);
    run.preprocessing_ran = true;
    run.blur_applied = pre.applied;
    run.sharpness = pre.sharpness;
    work = std::move(pre.volume);
  }
  const std::uint64_t seed = derive_seed(c.seed, std::string("segment:") + to_string(c.method));
  auto from_clusters = [&](const ClusterResult& r) {
    run.iterations = r.iterations;
    run.converged = r.converged;
    run.objective_trace = r.objective_trace;
    run.centers = r.centers;
    return select_tumor_clusters(r, c.cluster.f_select, work.dims(), work.spacing());
  };
  const auto x = flatten(work);
  switch (c.method) {
    case Method::km: run.raw_mask = from_clusters(kmeans(x, c.cluster, seed)); break;
    case Method::gmm: run.raw_mask = from_clusters(gmm_em(x, c.cluster, seed)); break;
    case Method::fcm: run.raw_mask = from_clusters(fcm(x, c.cluster, seed)); break;
    case Method::sdwfcm: run.raw_mask = from_clusters(sdwfcm(work, c.cluster, seed)); break;
    case Method::dict:
      if (!models.dict) throw ConfigError("dict segmentation needs a trained dictionary");
      run.raw_mask = dict_label_volume(*models.dict, work);
      break;
    case Method::cnn:
      if (!models.cnn) throw ConfigError("cnn segmentation needs a trained model");
      run.raw_mask = cnn_segment_volume(*models.cnn, work, c.cnn.binarize_threshold);
      break;
  }
  if (uses_cleanup(c.method)) {
    run.mask = cleanup_labels(run.raw_mask, c.element);
    run.cleanup_applied = true;
  } else {
    run.mask = run.raw_mask;
  }
  return run;
}

inline nlohmann::json run_manifest(const PipelineConfig& c, const SegmentationRun& r, double seconds) {
  auto opt = [](const auto& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"config", c.raw},
          {"method", to_string(c.method)},
          {"seed", c.seed},
          {"preprocessing",
           {{"ran", r.preprocessing_ran},
            {"sharpness_score", opt(r.sharpness)},
            {"sharpness_threshold", c.preprocess.sharpness_threshold},
            {"blur_applied", r.blur_applied},
            {"blur_sigma", c.preprocess.blur_sigma}}},
          {"postprocessing", {{"ran", r.cleanup_applied}, {"element", to_string(c.element)}}},
          {"iterations", opt(r.iterations)},
          {"converged", opt(r.converged)},
          {"objective_trace", r.objective_trace},
          {"centers", r.centers},
          {"foreground_voxels", count_foreground(r.mask)},
          {"wall_time_s", seconds}};
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Applies config overrides on top of parameters stored with a model.
inline CnnParams effective_cnn_params(const PipelineConfig& c, const nlohmann::json& stored) {
  nlohmann::json merged = stored.is_object() ? stored : nlohmann::json::object();
  for (const auto& [k, v] : c.method_params.items()) merged[k] = v;
  return cnn_params_from_json(merged);
}

/// Loads the volume, segments, writes the mask and manifest.
inline nlohmann::json run_segment(PipelineConfig c) {
  if (c.input.empty()) throw ConfigError("segment needs an 'input' volume");
  if (c.output.empty()) throw ConfigError("segment needs an 'output' mask path");
  if (has_training(c.method) && (c.model.empty() || !fs::exists(c.model)))
    throw ConfigError(std::string(to_string(c.method)) + " segmentation needs an existing 'model' file" +
                      (c.model.empty() ? "" : ": " + c.model.string()));
  const auto t0 = std::chrono::steady_clock::now();
  const Volume3 volume = read_volume(c.input);
  std::optional<PatchDictionary> dict;
  std::optional<CnnModel<float>> cnn;
  if (c.method == Method::dict) {
    dict = read_dictionary(c.model);
    if (c.method_params.contains("label_threshold_th")) dict->params.label_threshold_th = c.dict.label_threshold_th;
  } else if (c.method == Method::cnn) {
    nlohmann::json stored;
    cnn = read_cnn_model(c.model, &stored);
    c.cnn = effective_cnn_params(c, stored);
  }
  const auto run = segment_volume(c, volume, {dict ? &*dict : nullptr, cnn ? &*cnn : nullptr});
  write_mask(run.mask, c.output);
  auto manifest = run_manifest(c, run, seconds_since(t0));
  write_json_file(c.manifest, manifest);
  return manifest;
}

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Seeded shuffle, then k near-equal contiguous test folds (the first n % k
/// folds take one extra case). Indices within a fold are sorted.
inline std::vector<Fold> kfold_split(std::size_t n_cases, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ParameterError("kfold needs k >= 2");
  if (n_cases < k) throw InputError("kfold needs at least k cases (" + std::to_string(n_cases) + " < " + std::to_string(k) + ")");
  std::vector<std::size_t> order(n_cases);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "kfold"));
  rng.shuffle(order);
  std::vector<Fold> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n_cases / k + (f < n_cases % k ? 1 : 0);
    folds[f].test.assign(order.begin() + static_cast<std::ptrdiff_t>(pos), order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    pos += size;
  }
  for (auto& f : folds) {
    std::sort(f.test.begin(), f.test.end());
    for (std::size_t i = 0; i < n_cases; ++i)
      if (!std::binary_search(f.test.begin(), f.test.end(), i)) f.train.push_back(i);
  }
  return folds;
}

struct LoadedCase {
  std::string name;
  std::string group;
  LabeledVolume data;
};

inline std::vector<LoadedCase> load_cases(const std::vector<CaseFiles>& files) {
  std::vector<LoadedCase> out;
  for (const auto& f : files) {
    LoadedCase c{f.name, f.group, {read_volume(f.volume), read_mask(f.mask)}};
    require_same_dims(c.data.volume.dims(), c.data.mask.dims(), ("training case '" + f.name + "'").c_str());
    out.push_back(std::move(c));
  }
  return out;
}

struct DictTraining {
  PatchDictionary dict;
  double quantization_before = 0.0;
  double quantization_after = 0.0;
  std::size_t training_pairs = 0;
};

/// Seeds and VQ-trains a dictionary on conditionally blurred cases.
inline DictTraining train_dict_model(const PipelineConfig& c, const std::vector<LabeledVolume>& cases) {
  if (cases.empty()) throw InputError("dict training needs at least one case");
  PatchPairSet set(c.dict.patch_shape);
  for (const auto& lv : cases) {
    const Volume3 v = uses_preprocessing(Method::dict) ? conditional_blur(lv.volume, c.preprocess).volume : lv.volume;
    set.add_volume(v, lv.mask, {1, 1, 1});
  }
  DictTraining t;
  t.training_pairs = set.size();
  PatchDictionary seeded = seed_dictionary(set, c.dict, derive_seed(c.seed, "train:dict-seed"));
  t.quantization_before = quantization_error(seeded, set);
  t.dict = train_dictionary(std::move(seeded), set, c.dict, derive_seed(c.seed, "train:dict-vq"));
  t.quantization_after = quantization_error(t.dict, set);
  return t;
}

struct CnnTraining {
  CnnModel<float> model;
  std::vector<double> loss_trace;
};

inline CnnTraining train_cnn_model(const PipelineConfig& c, const std::vector<LabeledVolume>& cases) {
  CnnTraining t{make_cnn<float>(c.cnn, derive_seed(c.seed, "train:cnn-init")), {}};
  t.loss_trace = cnn_train(t.model, cases, c.cnn, derive_seed(c.seed, "train:cnn"));
  return t;
}

/// Trains on `cases`; returns the trace fields for that run.
inline nlohmann::json train_once(const PipelineConfig& c, const std::vector<LabeledVolume>& cases,
                                 std::optional<PatchDictionary>* dict_out, std::optional<CnnModel<float>>* cnn_out) {
  if (c.method == Method::dict) {
    auto t = train_dict_model(c, cases);
    nlohmann::json j = {{"atoms", t.dict.atoms.size()},
                        {"training_pairs", t.training_pairs},
                        {"quantization_error_seeded", t.quantization_before},
                        {"quantization_error_trained", t.quantization_after}};
    *dict_out = std::move(t.dict);
    return j;
  }
  auto t = train_cnn_model(c, cases);
  nlohmann::json j = {{"epochs", c.cnn.epochs}, {"loss", t.loss_trace}, {"parameters", t.model.parameter_count()}};
  *cnn_out = std::move(t.model);
  return j;
}

/// Trains the dict or cnn model, persists it, and writes a JSON trace. With
/// kfold >= 2 a cross-validation pass runs first and its Dice scores are
/// added to the trace.
inline nlohmann::json run_train(const PipelineConfig& c) {
  if (!has_training(c.method))
    throw ConfigError(std::string("method '") + to_string(c.method) + "' has no training phase");
  if (c.model.empty()) throw ConfigError("train needs a 'model' output path");
  if (c.train.empty()) throw ConfigError("train needs a non-empty 'train' case list");
  const auto t0 = std::chrono::steady_clock::now();
  const auto loaded = load_cases(c.train);
  std::vector<LabeledVolume> all;
  for (const auto& l : loaded) all.push_back(l.data);

  nlohmann::json trace = {{"method", to_string(c.method)}, {"seed", c.seed}, {"config", c.raw}};
  if (c.kfold >= 2) {
    const auto folds = kfold_split(all.size(), c.kfold, c.seed);
    nlohmann::json jf = nlohmann::json::array();
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& f : folds) {
      std::vector<LabeledVolume> part;
      for (auto i : f.train) part.push_back(all[i]);
      std::optional<PatchDictionary> dict;
      std::optional<CnnModel<float>> cnn;
      train_once(c, part, &dict, &cnn);
      nlohmann::json names_train = nlohmann::json::array(), names_test = nlohmann::json::array(), dices = nlohmann::json::array();
      for (auto i : f.train) names_train.push_back(loaded[i].name);
      for (auto i : f.test) {
        const auto run = segment_volume(c, all[i].volume, {dict ? &*dict : nullptr, cnn ? &*cnn : nullptr});
        const double d = dice(run.mask, all[i].mask);
        names_test.push_back(loaded[i].name);
        dices.push_back(d);
        sum += d;
        ++count;
      }
      jf.push_back({{"train", names_train}, {"test", names_test}, {"dice", dices}});
    }
    trace["cross_validation"] = {{"k", c.kfold}, {"folds", jf}, {"mean_dice", sum / static_cast<double>(count)}};
  }

  std::optional<PatchDictionary> dict;
  std::optional<CnnModel<float>> cnn;
  trace["training"] = train_once(c, all, &dict, &cnn);
  if (dict) write_dictionary(*dict, c.model);
  else write_cnn_model(*cnn, c.model, cnn_params_to_json(c.cnn));
  trace["wall_time_s"] = seconds_since(t0);
  write_json_file(c.trace, trace);
  return trace;
}

struct EvaluateOutcome {
  EvalReport report;
  std::size_t failed = 0;
};

/// Per-case metrics plus aggregates; cases that cannot be compared are kept
/// as failed records.
inline EvaluateOutcome evaluate_files(const std::vector<fs::path>& pred, const std::vector<fs::path>& gt,
                                      const std::vector<std::string>& groups, bool symmetric_contour = true) {
  if (pred.size() != gt.size())
    throw InputError("prediction and ground-truth lists differ in length (" + std::to_string(pred.size()) + " vs " +
                     std::to_string(gt.size()) + ")");
  if (!groups.empty() && groups.size() != pred.size())
    throw InputError("group list length does not match the case lists");
  EvaluateOutcome out;
  std::vector<CaseRecord> records;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    CaseRecord r;
    try {
      const auto p = read_mask(pred[i]);
      const auto g = read_mask(gt[i]);
      r = evaluate_case(p, g, g.spacing(), symmetric_contour);
    } catch (const DimensionError& e) {
      r.error = e.what();
      ++out.failed;
    }
    r.name = gt[i].stem().string();
    r.group = groups.empty() ? "all" : groups[i];
    records.push_back(std::move(r));
  }
  out.report = aggregate(std::move(records));
  return out;
}

}  // namespace voxseg
