#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "voxseg/metrics.hpp"

using namespace voxseg;

namespace {

BinaryMask3 block(const Extent3& d, Index3 lo, Index3 hi) {
  BinaryMask3 m(d);
  for (std::size_t z = lo.z; z < hi.z; ++z)
    for (std::size_t y = lo.y; y < hi.y; ++y)
      for (std::size_t x = lo.x; x < hi.x; ++x) m(z, y, x) = 1;
  return m;
}

CaseRecord record(std::string group, double d) {
  CaseRecord r;
  r.group = std::move(group);
  r.values[static_cast<std::size_t>(Metric::dice)] = d;
  return r;
}

}  // namespace

TEST(Dice, IdentityDisjointAndShift) {
  const auto a = block({4, 4, 4}, {0, 0, 0}, {2, 2, 2});
  EXPECT_EQ(dice(a, a), 1.0);
  const auto far = block({4, 4, 4}, {2, 2, 2}, {4, 4, 4});
  EXPECT_EQ(dice(a, far), 0.0);
  const auto shifted = block({4, 4, 4}, {0, 0, 1}, {2, 2, 3});
  EXPECT_EQ(dice(a, shifted), 0.5);
}

TEST(Dice, BothEmptyIsOne) { EXPECT_EQ(dice(BinaryMask3({2, 2, 2}), BinaryMask3({2, 2, 2})), 1.0); }

TEST(Dice, DimsMismatchIsDimensionError) {
  EXPECT_THROW(dice(BinaryMask3({2, 2, 2}), BinaryMask3({2, 2, 3})), DimensionError);
}

TEST(SensitivityPrecision, CountsFalsePositives) {
  const auto gt = block({4, 4, 4}, {0, 0, 0}, {2, 2, 2});
  EXPECT_EQ(sensitivity(gt, gt), 1.0);
  EXPECT_EQ(precision(gt, gt), 1.0);
  const auto pred = block({4, 4, 4}, {0, 0, 0}, {4, 2, 2});
  EXPECT_EQ(sensitivity(pred, gt), 1.0);
  EXPECT_EQ(precision(pred, gt), 0.5);
}

TEST(SensitivityPrecision, EmptyDenominatorsAreUndefined) {
  const BinaryMask3 empty({2, 2, 2});
  const auto one = block({2, 2, 2}, {0, 0, 0}, {1, 1, 1});
  EXPECT_THROW(sensitivity(one, empty), UndefinedMetricError);
  EXPECT_THROW(precision(empty, one), UndefinedMetricError);
}

TEST(VolumeError, SignedFraction) {
  const auto gt = block({4, 4, 4}, {0, 0, 0}, {2, 2, 2});
  EXPECT_EQ(volume_error(block({4, 4, 4}, {2, 2, 2}, {4, 4, 4}), gt), 0.0);
  EXPECT_EQ(volume_error(block({4, 4, 4}, {0, 0, 0}, {4, 2, 2}), gt), 1.0);
  EXPECT_EQ(volume_error(BinaryMask3({4, 4, 4}), gt), -1.0);
  EXPECT_THROW(volume_error(gt, BinaryMask3({4, 4, 4})), UndefinedMetricError);
}

TEST(ContourDistance, SelfIsZero) {
  const auto a = block({6, 6, 6}, {1, 1, 1}, {4, 5, 4});
  EXPECT_EQ(contour_mean_distance(a, a, {}), 0.0);
}

TEST(ContourDistance, SingleVoxelsThreeApart) {
  BinaryMask3 a({1, 1, 8}), b({1, 1, 8});
  a(0, 0, 1) = 1;
  b(0, 0, 4) = 1;
  EXPECT_DOUBLE_EQ(contour_mean_distance(a, b, {}), 3.0);
  EXPECT_DOUBLE_EQ(contour_mean_distance(a, b, {1.0, 1.0, 2.0}), 6.0);
}

TEST(ContourDistance, EmptyMaskIsUndefined) {
  const auto a = block({3, 3, 3}, {0, 0, 0}, {1, 1, 1});
  EXPECT_THROW(contour_mean_distance(a, BinaryMask3({3, 3, 3}), {}), UndefinedMetricError);
}

TEST(ContourDistance, OneWayDiffersFromSymmetric) {
  BinaryMask3 a({1, 1, 10}), b({1, 1, 10});
  a(0, 0, 0) = 1;
  b(0, 0, 2) = 1;
  b(0, 0, 8) = 1;
  EXPECT_DOUBLE_EQ(contour_mean_distance(a, b, {}, false), 2.0);
  EXPECT_DOUBLE_EQ(contour_mean_distance(b, a, {}, false), 5.0);
  EXPECT_DOUBLE_EQ(contour_mean_distance(a, b, {}), 3.5);
}

TEST(SurfaceVoxels, BorderCountsAsBackground) {
  const BinaryMask3 full({3, 3, 3}, {}, 1);
  EXPECT_EQ(surface_voxels(full).size(), 26u);
}

TEST(MetricsOracle, RandomPairsMatchBruteForce) {
  std::mt19937_64 gen(101);
  const Spacing3 sp{2.0, 1.5, 0.75};
  for (int t = 0; t < 50; ++t) {
    const auto a = oracle::random_mask({8, 8, 8}, 0.4, gen);
    const auto b = oracle::random_mask({8, 8, 8}, 0.3, gen);
    const auto c = oracle::count(a, b);
    EXPECT_EQ(dice(a, b), oracle::dice(a, b));
    EXPECT_EQ(sensitivity(a, b), static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn));
    EXPECT_EQ(precision(a, b), static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp));
    EXPECT_EQ(volume_error(a, b), static_cast<double>(c.p - c.g) / static_cast<double>(c.g));
    EXPECT_NEAR(contour_mean_distance(a, b, sp), oracle::contour_distance(a, b, sp), 1e-9);
  }
}

TEST(MetricsProperties, SymmetryRelations) {
  std::mt19937_64 gen(5);
  for (int t = 0; t < 20; ++t) {
    const auto a = oracle::random_mask({6, 6, 6}, 0.5, gen);
    const auto b = oracle::random_mask({6, 6, 6}, 0.5, gen);
    EXPECT_EQ(dice(a, b), dice(b, a));
    EXPECT_EQ(sensitivity(a, b), precision(b, a));
    EXPECT_DOUBLE_EQ(contour_mean_distance(a, b, {}), contour_mean_distance(b, a, {}));
  }
}

TEST(MetricsProperties, TranslationInvariantInPaddedGrid) {
  std::mt19937_64 gen(6);
  for (int t = 0; t < 10; ++t) {
    const auto a = oracle::random_mask({5, 5, 5}, 0.5, gen);
    const auto b = oracle::random_mask({5, 5, 5}, 0.5, gen);
    auto place = [](const BinaryMask3& m, std::size_t off) {
      BinaryMask3 out({9, 9, 9});
      for (std::size_t z = 0; z < 5; ++z)
        for (std::size_t y = 0; y < 5; ++y)
          for (std::size_t x = 0; x < 5; ++x) out(z + off, y + off, x + 1) = m(z, y, x);
      return out;
    };
    const auto a1 = place(a, 1), b1 = place(b, 1), a3 = place(a, 3), b3 = place(b, 3);
    EXPECT_EQ(dice(a1, b1), dice(a3, b3));
    EXPECT_EQ(precision(a1, b1), precision(a3, b3));
    EXPECT_NEAR(contour_mean_distance(a1, b1, {}), contour_mean_distance(a3, b3, {}), 1e-12);
  }
}

TEST(EvaluateCase, PerfectPredictionGivesPerfectMetrics) {
  const auto gt = block({5, 5, 5}, {1, 1, 1}, {4, 4, 4});
  const auto r = evaluate_case(gt, gt, {});
  EXPECT_EQ(r.get(Metric::dice), 1.0);
  EXPECT_EQ(r.get(Metric::sensitivity), 1.0);
  EXPECT_EQ(r.get(Metric::precision), 1.0);
  EXPECT_EQ(r.get(Metric::volume_error), 0.0);
  EXPECT_EQ(r.get(Metric::contour_mean_distance), 0.0);
  const auto rep = aggregate({r});
  EXPECT_EQ(rep.of(Metric::dice).mean, 1.0);
  EXPECT_EQ(rep.of(Metric::dice).median, 1.0);
}

TEST(EvaluateCase, EmptyPredictionLeavesUndefinedMetricsAbsent) {
  const auto gt = block({5, 5, 5}, {1, 1, 1}, {4, 4, 4});
  const auto r = evaluate_case(BinaryMask3({5, 5, 5}), gt, {});
  EXPECT_EQ(r.get(Metric::dice), 0.0);
  EXPECT_FALSE(r.get(Metric::precision).has_value());
  EXPECT_FALSE(r.get(Metric::contour_mean_distance).has_value());
  const auto rep = aggregate({r});
  EXPECT_EQ(rep.of(Metric::contour_mean_distance).missing, 1u);
  EXPECT_FALSE(rep.of(Metric::contour_mean_distance).mean.has_value());
  EXPECT_EQ(rep.warnings, 2u);
}

TEST(Aggregate, MeanMedianAndBalanced) {
  const auto rep = aggregate({record("a", 0.7), record("a", 0.9), record("b", 0.8)});
  EXPECT_NEAR(*rep.of(Metric::dice).mean, 0.8, 1e-15);
  EXPECT_NEAR(*rep.of(Metric::dice).median, 0.8, 1e-15);
  EXPECT_NEAR(rep.of(Metric::dice).group_means.at("a"), 0.8, 1e-15);
  const auto two = aggregate({record("clin", 0.8), record("phan", 0.9)});
  EXPECT_NEAR(*two.of(Metric::dice).balanced, 0.85, 1e-15);
}

TEST(Report, TableHasGroupAndBalancedColumns) {
  const auto rep = aggregate({record("clin", 0.8), record("phan", 0.9)});
  const auto table = report_to_table(rep, "KM", "k=2, f=1");
  EXPECT_NE(table.find("balanced"), std::string::npos);
  EXPECT_NE(table.find("clin"), std::string::npos);
  EXPECT_NE(table.find("0.85"), std::string::npos);
  EXPECT_NE(table.find("k=2, f=1"), std::string::npos);
  const auto j = report_to_json(rep, "KM");
  EXPECT_NEAR(j["aggregates"]["dice"]["balanced"].get<double>(), 0.85, 1e-15);
  EXPECT_TRUE(j["aggregates"]["precision"]["mean"].is_null());
}
