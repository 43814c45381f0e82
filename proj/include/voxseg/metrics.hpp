#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxseg/grid.hpp"

namespace voxseg {

struct OverlapCounts {
  std::size_t tp = 0, fp = 0, fn = 0, pred = 0, gt = 0;
};

inline OverlapCounts overlap_counts(const BinaryMask3& pred, const BinaryMask3& gt) {
  require_same_dims(pred.dims(), gt.dims(), "overlap");
  OverlapCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
    c.pred += p;
    c.gt += g;
  }
  return c;
}

/// 2|P & G| / (|P| + |G|); 1 when both masks are empty.
inline double dice(const BinaryMask3& pred, const BinaryMask3& gt) {
  const auto c = overlap_counts(pred, gt);
  if (c.pred + c.gt == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(c.pred + c.gt);
}

inline double sensitivity(const BinaryMask3& pred, const BinaryMask3& gt) {
  const auto c = overlap_counts(pred, gt);
  if (c.gt == 0) throw UndefinedMetricError("sensitivity undefined for empty ground truth");
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

inline double precision(const BinaryMask3& pred, const BinaryMask3& gt) {
  const auto c = overlap_counts(pred, gt);
  if (c.pred == 0) throw UndefinedMetricError("precision undefined for empty prediction");
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
}

/// Signed (|P| - |G|) / |G|; positive means overestimate.
inline double volume_error(const BinaryMask3& pred, const BinaryMask3& gt) {
  const auto c = overlap_counts(pred, gt);
  if (c.gt == 0) throw UndefinedMetricError("volume error undefined for empty ground truth");
  return (static_cast<double>(c.pred) - static_cast<double>(c.gt)) / static_cast<double>(c.gt);
}

/// Foreground voxels with at least one face neighbor in background; the
/// volume border counts as background.
inline std::vector<Index3> surface_voxels(const BinaryMask3& m) {
  const auto& d = m.dims();
  std::vector<Index3> out;
  constexpr std::array<std::array<int, 3>, 6> faces{{{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}}};
  for (std::size_t z = 0; z < d.z; ++z)
    for (std::size_t y = 0; y < d.y; ++y)
      for (std::size_t x = 0; x < d.x; ++x) {
        if (!m(z, y, x)) continue;
        for (const auto& f : faces) {
          const auto zz = static_cast<std::ptrdiff_t>(z) + f[0], yy = static_cast<std::ptrdiff_t>(y) + f[1],
                     xx = static_cast<std::ptrdiff_t>(x) + f[2];
          if (!m.contains(zz, yy, xx) ||
              !m(static_cast<std::size_t>(zz), static_cast<std::size_t>(yy), static_cast<std::size_t>(xx))) {
            out.push_back({z, y, x});
            break;
          }
        }
      }
  return out;
}

namespace detail {

inline double mean_nearest_distance(const std::vector<Index3>& from, const std::vector<Index3>& to, const Spacing3& s) {
  double total = 0.0;
  for (const auto& a : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : to) {
      const double dz = (static_cast<double>(a.z) - static_cast<double>(b.z)) * s.z;
      const double dy = (static_cast<double>(a.y) - static_cast<double>(b.y)) * s.y;
      const double dx = (static_cast<double>(a.x) - static_cast<double>(b.x)) * s.x;
      best = std::min(best, dz * dz + dy * dy + dx * dx);
    }
    total += std::sqrt(best);
  }
  return total / static_cast<double>(from.size());
}

}  // namespace detail

/// Mean surface distance in millimeters. Symmetric by default: the average
/// of the pred->gt and gt->pred mean nearest-surface distances.
inline double contour_mean_distance(const BinaryMask3& pred, const BinaryMask3& gt, const Spacing3& spacing,
                                    bool symmetric = true) {
  require_same_dims(pred.dims(), gt.dims(), "contour distance");
  const auto sp = surface_voxels(pred);
  const auto sg = surface_voxels(gt);
  if (sp.empty() || sg.empty()) throw UndefinedMetricError("contour distance undefined for an empty mask");
  const double forward = detail::mean_nearest_distance(sp, sg, spacing);
  if (!symmetric) return forward;
  return 0.5 * (forward + detail::mean_nearest_distance(sg, sp, spacing));
}

enum class Metric { dice, sensitivity, precision, volume_error, contour_mean_distance };
inline constexpr std::array<Metric, 5> kAllMetrics{Metric::dice, Metric::sensitivity, Metric::precision,
                                                   Metric::volume_error, Metric::contour_mean_distance};

inline const char* metric_name(Metric m) {
  switch (m) {
    case Metric::dice: return "dice";
    case Metric::sensitivity: return "sensitivity";
    case Metric::precision: return "precision";
    case Metric::volume_error: return "volume_error_fraction";
    case Metric::contour_mean_distance: return "contour_mean_distance_mm";
  }
  return "?";
}

/// One case; undefined metrics are left empty.
struct CaseRecord {
  std::string name;
  std::string group;
  std::array<std::optional<double>, 5> values{};
  std::optional<std::string> error;  ///< whole case failed (e.g. dims mismatch)

  std::optional<double> get(Metric m) const { return values[static_cast<std::size_t>(m)]; }
};

inline CaseRecord evaluate_case(const BinaryMask3& pred, const BinaryMask3& gt, const Spacing3& spacing,
                                bool symmetric_contour = true) {
  CaseRecord r;
  auto attempt = [&](Metric m, auto fn) {
    try {
      r.values[static_cast<std::size_t>(m)] = fn();
    } catch (const UndefinedMetricError&) {
    }
  };
  require_same_dims(pred.dims(), gt.dims(), "evaluate_case");
  attempt(Metric::dice, [&] { return dice(pred, gt); });
  attempt(Metric::sensitivity, [&] { return sensitivity(pred, gt); });
  attempt(Metric::precision, [&] { return precision(pred, gt); });
  attempt(Metric::volume_error, [&] { return volume_error(pred, gt); });
  attempt(Metric::contour_mean_distance, [&] { return contour_mean_distance(pred, gt, spacing, symmetric_contour); });
  return r;
}

struct MetricSummary {
  std::optional<double> mean;
  std::optional<double> median;
  std::map<std::string, double> group_means;
  std::optional<double> balanced;  ///< mean of group means
  std::size_t missing = 0;
};

struct EvalReport {
  std::vector<CaseRecord> cases;
  std::array<MetricSummary, 5> summary{};
  std::vector<std::string> groups;  ///< distinct tags, first-seen order
  std::size_t warnings = 0;         ///< absent values excluded from aggregates

  const MetricSummary& of(Metric m) const { return summary[static_cast<std::size_t>(m)]; }
};

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline EvalReport aggregate(std::vector<CaseRecord> records) {
  EvalReport rep;
  for (const auto& c : records)
    if (std::find(rep.groups.begin(), rep.groups.end(), c.group) == rep.groups.end()) rep.groups.push_back(c.group);
  for (Metric m : kAllMetrics) {
    auto& s = rep.summary[static_cast<std::size_t>(m)];
    std::vector<double> all;
    std::map<std::string, std::vector<double>> by_group;
    for (const auto& c : records) {
      const auto v = c.get(m);
      if (!v) { ++s.missing; continue; }
      all.push_back(*v);
      by_group[c.group].push_back(*v);
    }
    rep.warnings += s.missing;
    if (all.empty()) continue;
    double sum = 0.0;
    for (double v : all) sum += v;
    s.mean = sum / static_cast<double>(all.size());
    s.median = median_of(all);
    double bal = 0.0;
    for (const auto& [g, vals] : by_group) {
      double gs = 0.0;
      for (double v : vals) gs += v;
      s.group_means[g] = gs / static_cast<double>(vals.size());
      bal += s.group_means[g];
    }
    s.balanced = bal / static_cast<double>(by_group.size());
  }
  rep.cases = std::move(records);
  return rep;
}

inline nlohmann::json report_to_json(const EvalReport& rep, const std::string& method = "", const std::string& params = "") {
  using nlohmann::json;
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json cases = json::array();
  for (const auto& c : rep.cases) {
    json jc = {{"name", c.name}, {"group", c.group}};
    for (Metric m : kAllMetrics) jc[metric_name(m)] = opt(c.get(m));
    if (c.error) jc["error"] = *c.error;
    cases.push_back(jc);
  }
  json agg;
  for (Metric m : kAllMetrics) {
    const auto& s = rep.of(m);
    agg[metric_name(m)] = {{"mean", opt(s.mean)}, {"median", opt(s.median)}, {"groups", s.group_means},
                           {"balanced", opt(s.balanced)}, {"missing", s.missing}};
  }
  return {{"method", method}, {"parameters", params}, {"cases", cases}, {"aggregates", agg}, {"warnings", rep.warnings}};
}

/// Aligned text table: method, parameters, metric, avg, med., one column per
/// group, balanced.
inline std::string report_to_table(const EvalReport& rep, const std::string& method = "", const std::string& params = "") {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> head{"method", "parameters", "metric", "avg", "med."};
  for (const auto& g : rep.groups) head.push_back(g);
  head.push_back("balanced");
  rows.push_back(head);
  auto fmt = [](const std::optional<double>& v) {
    if (!v) return std::string("-");
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << *v;
    return os.str();
  };
  for (Metric m : kAllMetrics) {
    const auto& s = rep.of(m);
    std::vector<std::string> row{method, params, metric_name(m), fmt(s.mean), fmt(s.median)};
    for (const auto& g : rep.groups) {
      auto it = s.group_means.find(g);
      row.push_back(it == s.group_means.end() ? "-" : fmt(it->second));
    }
    row.push_back(fmt(s.balanced));
    rows.push_back(row);
  }
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  std::ostringstream os;
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      const bool numeric = i >= 3;
      os << (numeric ? std::right : std::left) << std::setw(static_cast<int>(width[i])) << r[i];
      os << (i + 1 < r.size() ? "  " : "\n");
    }
  }
  return os.str();
}

}  // namespace voxseg
