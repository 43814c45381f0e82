// voxseg command-line entry point.
//
// Exit codes: 0 success, 2 usage or config, 3 I/O, 4 numeric failure.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "voxseg/voxseg.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace voxseg;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

int exit_code_for(const Error& e) {
  if (dynamic_cast<const IoError*>(&e)) return kExitIo;
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const DegenerateInputError*>(&e) ||
      dynamic_cast<const UndefinedMetricError*>(&e) || dynamic_cast<const CoverageError*>(&e))
    return kExitNumeric;
  return kExitUsage;
}

// List files: a JSON array of strings, or plain text with one entry per
// line (blank lines and '#' comments skipped).
std::vector<std::string> read_list(const fs::path& file) {
  const std::string text = read_file(file);
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '[') {
    try {
      return json::parse(text).get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw ConfigError("bad list file " + file.string() + ": " + e.what());
    }
  }
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto e = line.find_last_not_of(" \t\r");
    out.push_back(line.substr(b, e - b + 1));
  }
  return out;
}

std::vector<fs::path> read_path_list(const fs::path& file) {
  std::vector<fs::path> out;
  for (const auto& s : read_list(file)) out.push_back(resolve_path(file.parent_path(), s));
  return out;
}

// Phantom spec file: {"suite": "easy"|"noisy"}, a single spec object, or
// {"phantoms": [spec, ...]} where each spec may carry a "group" tag.
std::vector<PhantomCase> phantoms_from_spec(const json& j) {
  std::vector<PhantomCase> out;
  if (j.is_object() && j.contains("suite")) {
    if (j.size() != 1) throw ConfigError("a suite spec takes no other keys");
    const auto name = j.at("suite").get<std::string>();
    if (name != "easy" && name != "noisy") throw ConfigError("suite must be 'easy' or 'noisy'");
    return standard_suite(name == "easy" ? SuiteDifficulty::easy : SuiteDifficulty::noisy);
  }
  std::vector<json> specs;
  if (j.is_object() && j.contains("phantoms")) {
    if (j.size() != 1) throw ConfigError("a phantom list takes no other keys");
    for (const auto& s : j.at("phantoms")) specs.push_back(s);
  } else {
    specs.push_back(j);
  }
  for (auto s : specs) {
    std::string group = "phantom";
    if (s.is_object() && s.contains("group")) {
      group = s.at("group").get<std::string>();
      s.erase("group");
    }
    const auto spec = phantom_spec_from_json(s);
    auto [vol, mask] = generate_phantom(spec);
    out.push_back({spec.name, group, std::move(vol), std::move(mask)});
  }
  return out;
}

int cmd_generate(const fs::path& spec_file, const fs::path& out_dir) {
  json spec;
  try {
    spec = json::parse(read_file(spec_file));
  } catch (const json::parse_error& e) {
    throw ConfigError("spec " + spec_file.string() + " is not valid JSON: " + e.what());
  }
  const auto cases = phantoms_from_spec(spec);
  json listing = json::array();
  for (const auto& c : cases) {
    const std::string vol = c.name + "_volume.json";
    const std::string mask = c.name + "_mask.json";
    write_volume(c.volume, out_dir / vol);
    write_mask(c.mask, out_dir / mask);
    listing.push_back({{"name", c.name}, {"group", c.group}, {"volume", vol}, {"mask", mask}});
    std::cout << c.name << " (" << c.group << "): " << count_foreground(c.mask) << " lesion voxels\n";
  }
  write_json_file(out_dir / "cases.json", {{"cases", listing}});
  return kExitOk;
}

int cmd_train(const fs::path& config) {
  const auto trace = run_train(load_config(config));
  if (trace.contains("cross_validation"))
    std::cout << "cross-validation mean dice " << trace["cross_validation"]["mean_dice"].get<double>() << "\n";
  std::cout << "trained " << trace["method"].get<std::string>() << " in " << trace["wall_time_s"].get<double>() << " s\n";
  return kExitOk;
}

int cmd_segment(const fs::path& config) {
  const auto m = run_segment(load_config(config));
  std::cout << m["method"].get<std::string>() << ": " << m["foreground_voxels"].get<std::size_t>() << " voxels, "
            << m["wall_time_s"].get<double>() << " s\n";
  return kExitOk;
}

int cmd_evaluate(const fs::path& pred, const fs::path& gt, const fs::path& groups, const fs::path& out,
                 const std::string& method, const std::string& params, bool one_way) {
  const auto p = read_path_list(pred);
  const auto g = read_path_list(gt);
  const auto tags = groups.empty() ? std::vector<std::string>{} : read_list(groups);
  const auto outcome = evaluate_files(p, g, tags, !one_way);
  for (const auto& c : outcome.report.cases)
    if (c.error) std::cerr << "case " << c.name << " failed: " << *c.error << "\n";
  write_json_file(out / "report.json", report_to_json(outcome.report, method, params));
  const auto table = report_to_table(outcome.report, method, params);
  write_file_atomic(out / "report.txt", table);
  std::cout << table;
  if (!p.empty() && outcome.failed == p.size()) {
    std::cerr << "every case failed\n";
    return kExitUsage;
  }
  return kExitOk;
}

int cmd_kfold(const fs::path& cases_file, std::size_t k, std::uint64_t seed, const fs::path& out) {
  std::vector<std::string> names;
  if (cases_file.extension() == ".json") {
    const auto j = read_json_file(cases_file);
    if (j.is_object() && j.contains("cases")) {
      for (const auto& c : read_case_files(cases_file)) names.push_back(c.name);
    } else {
      names = read_list(cases_file);
    }
  } else {
    names = read_list(cases_file);
  }
  const auto folds = kfold_split(names.size(), k, seed);
  json jf = json::array();
  for (const auto& f : folds) {
    json tr = json::array(), te = json::array();
    for (auto i : f.train) tr.push_back(names[i]);
    for (auto i : f.test) te.push_back(names[i]);
    jf.push_back({{"train", tr}, {"test", te}});
  }
  const json result = {{"k", k}, {"seed", seed}, {"folds", jf}};
  if (!out.empty()) write_json_file(out, result);
  std::cout << result.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"voxseg: 3D tumor segmentation on volumetric scans"};
  app.require_subcommand(1);

  fs::path spec, out_dir;
  auto* gen = app.add_subcommand("generate-phantom", "Write synthetic phantom volumes and masks");
  gen->add_option("--spec", spec, "Phantom spec JSON")->required();
  gen->add_option("--out-dir", out_dir, "Output directory")->required();

  fs::path train_cfg;
  auto* train = app.add_subcommand("train", "Train a dictionary or CNN model");
  train->add_option("--config", train_cfg, "Pipeline config JSON")->required();

  fs::path seg_cfg;
  auto* seg = app.add_subcommand("segment", "Segment one volume");
  seg->add_option("--config", seg_cfg, "Pipeline config JSON")->required();

  fs::path pred, gt, groups, eval_out;
  std::string method, params;
  bool one_way = false;
  auto* eval = app.add_subcommand("evaluate", "Score predicted masks against ground truth");
  eval->add_option("--pred", pred, "List file of predicted mask headers")->required();
  eval->add_option("--gt", gt, "List file of ground-truth mask headers")->required();
  eval->add_option("--groups", groups, "List file of group tags, one per case");
  eval->add_option("--out", eval_out, "Output directory")->required();
  eval->add_option("--method", method, "Method label for the report");
  eval->add_option("--params", params, "Parameter label for the report");
  eval->add_flag("--one-way-contour", one_way, "Contour distance from prediction to ground truth only");

  fs::path cases_file, kfold_out;
  std::size_t k = 5;
  std::uint64_t seed = 0;
  auto* kf = app.add_subcommand("kfold", "Split a case list into k folds");
  kf->add_option("--cases", cases_file, "Case list (cases.json, JSON array or text)")->required();
  kf->add_option("--k", k, "Number of folds")->required();
  kf->add_option("--seed", seed, "Shuffle seed");
  kf->add_option("--out", kfold_out, "Also write the folds to this JSON file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return cmd_generate(spec, out_dir);
    if (*train) return cmd_train(train_cfg);
    if (*seg) return cmd_segment(seg_cfg);
    if (*eval) return cmd_evaluate(pred, gt, groups, eval_out, method, params, one_way);
    if (*kf) return cmd_kfold(cases_file, k, seed, kfold_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
