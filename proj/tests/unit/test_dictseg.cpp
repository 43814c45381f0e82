#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "test_support.hpp"
#include "voxseg/dictseg.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/preprocess.hpp"

using namespace voxseg;
using testing_support::TempDir;

namespace {

DictParams small_params() {
  DictParams p;
  p.patch_shape = {2, 2, 2};
  return p;
}

std::vector<float> filled(std::size_t n, float v) { return std::vector<float>(n, v); }

std::pair<Volume3, BinaryMask3> bright_cube() {
  Volume3 v({8, 8, 8}, {}, 0.2f);
  BinaryMask3 m({8, 8, 8});
  for (std::size_t z = 2; z < 6; ++z)
    for (std::size_t y = 2; y < 6; ++y)
      for (std::size_t x = 2; x < 6; ++x) {
        v(z, y, x) = 1.0f;
        m(z, y, x) = 1;
      }
  return {v, m};
}

DictParams memorize_params() {
  DictParams p;
  p.seed_fraction = 1.0;
  p.label_sim_threshold = 0.99;
  p.step_tau = 1.0;
  p.train_iterations = 1;
  return p;
}

PatchPairSet random_pairs(std::size_t n, std::uint64_t s) {
  PatchPairSet set({2, 2, 2});
  std::mt19937_64 gen(s);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> in(8), lab(8);
    for (std::size_t k = 0; k < 8; ++k) {
      lab[k] = u(gen) < 0.5f ? 1.0f : 0.0f;
      in[k] = 0.3f * lab[k] + u(gen);
    }
    set.add_pair(in, lab);
  }
  return set;
}

}  // namespace

TEST(SeedDictionary, DuplicatePairsMerge) {
  PatchPairSet set({2, 2, 2});
  const auto in = filled(8, 0.4f), lab = filled(8, 1.0f);
  set.add_pair(in, lab);
  set.add_pair(in, lab);
  auto p = small_params();
  p.seed_fraction = 1.0;
  const auto d = seed_dictionary(set, p, 1);
  ASSERT_EQ(d.atoms.size(), 1u);
  EXPECT_EQ(d.atoms[0].member_count, 2u);
  EXPECT_EQ(d.atoms[0].intensity, in);
  EXPECT_EQ(d.atoms[0].label, lab);
}

TEST(SeedDictionary, ComplementaryLabelsSplit) {
  PatchPairSet set({2, 2, 2});
  set.add_pair(filled(8, 0.4f), filled(8, 1.0f));
  set.add_pair(filled(8, 0.4f), filled(8, 0.0f));
  auto p = small_params();
  p.seed_fraction = 1.0;
  EXPECT_EQ(seed_dictionary(set, p, 1).atoms.size(), 2u);
}

TEST(SeedDictionary, SamplesExactlyTenPercent) {
  const auto set = random_pairs(1000, 3);
  auto p = small_params();
  p.seed_fraction = 0.1;
  p.label_sim_threshold = 1.0;  // only exact label matches merge
  const auto d = seed_dictionary(set, p, 7);
  std::size_t members = 0;
  for (const auto& a : d.atoms) members += a.member_count;
  EXPECT_EQ(members, 100u);
  EXPECT_GE(d.atoms.size(), 1u);
  EXPECT_LE(d.atoms.size(), 100u);
}

TEST(SeedDictionary, AtomCountBetweenOneAndSample) {
  const auto set = random_pairs(200, 4);
  for (double th : {0.0, 0.5, 1.0}) {
    auto p = small_params();
    p.seed_fraction = 0.25;
    p.label_sim_threshold = th;
    const auto d = seed_dictionary(set, p, 2);
    EXPECT_GE(d.atoms.size(), 1u);
    EXPECT_LE(d.atoms.size(), 50u);
  }
  auto p = small_params();
  p.seed_fraction = 0.25;
  p.label_sim_threshold = 0.0;
  EXPECT_EQ(seed_dictionary(set, p, 2).atoms.size(), 1u);
}

TEST(SeedDictionary, EmptyTrainingIsInputError) {
  EXPECT_THROW(seed_dictionary(PatchPairSet({2, 2, 2}), small_params(), 0), InputError);
}

TEST(SeedDictionary, NonBinaryLabelsRejected) {
  PatchPairSet set({2, 2, 2});
  EXPECT_THROW(set.add_pair(filled(8, 0.0f), filled(8, 0.5f)), InputError);
  EXPECT_THROW(set.add_pair(filled(7, 0.0f), filled(8, 0.0f)), DimensionError);
}

TEST(SeedDictionary, SameSeedSameDictionary) {
  const auto set = random_pairs(300, 5);
  const auto a = seed_dictionary(set, small_params(), 11);
  const auto b = seed_dictionary(set, small_params(), 11);
  EXPECT_EQ(a.atoms, b.atoms);
}

TEST(TrainDictionary, ZeroStepIsIdentity) {
  const auto set = random_pairs(100, 6);
  auto p = small_params();
  const auto d = seed_dictionary(set, p, 1);
  p.step_tau = 0.0;
  p.train_iterations = 5;
  EXPECT_EQ(train_dictionary(d, set, p).atoms, d.atoms);
}

TEST(TrainDictionary, FullStepReachesTarget) {
  PatchPairSet seed_set({2, 2, 2});
  seed_set.add_pair(filled(8, 0.0f), filled(8, 0.0f));
  auto p = small_params();
  p.seed_fraction = 1.0;
  auto d = seed_dictionary(seed_set, p, 0);
  PatchPairSet train({2, 2, 2});
  std::vector<float> in{0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f, 0.7f, 0.8f};
  std::vector<float> lab{1, 0, 1, 0, 1, 1, 0, 0};
  train.add_pair(in, lab);
  p.step_tau = 1.0;
  p.train_iterations = 1;
  d = train_dictionary(d, train, p);
  EXPECT_EQ(d.atoms[0].intensity, in);
  EXPECT_EQ(d.atoms[0].label, lab);
}

TEST(TrainDictionary, DefaultConfigurationRuns) {
  const auto cases = standard_suite(SuiteDifficulty::easy);
  PatchPairSet set({3, 3, 3});
  set.add_volume(cases[0].volume, cases[0].mask, {2, 2, 2});
  const DictParams p;
  const auto d = seed_dictionary(set, p, 1);
  const auto t = train_dictionary(d, set, p, 1);
  EXPECT_EQ(t.atoms.size(), d.atoms.size());
  EXPECT_TRUE(std::isfinite(quantization_error(t, set)));
}

TEST(TrainDictionary, QuantizationErrorDoesNotGrowOnPhantomSuites) {
  for (auto difficulty : {SuiteDifficulty::easy, SuiteDifficulty::noisy}) {
    const auto suite = standard_suite(difficulty);
    PatchPairSet set({3, 3, 3});
    for (std::size_t i : {0u, 2u, 4u})
      set.add_volume(conditional_blur(suite[i].volume, PreprocessParams{}).volume, suite[i].mask);
    const DictParams p;
    const auto d = seed_dictionary(set, p, 1);
    const auto t = train_dictionary(d, set, p, 1);
    EXPECT_LE(quantization_error(t, set), quantization_error(d, set)) << suite[0].name;
  }
}

TEST(TrainDictionary, LabelsStayInUnitInterval) {
  const auto set = random_pairs(400, 8);
  auto p = small_params();
  p.step_tau = 0.3;
  p.train_iterations = 4;
  const auto d = train_dictionary(seed_dictionary(set, p, 3), set, p, 3);
  for (const auto& a : d.atoms)
    for (float l : a.label) {
      EXPECT_GE(l, 0.0f);
      EXPECT_LE(l, 1.0f);
    }
}

TEST(TrainDictionary, ShapeMismatchIsDimensionError) {
  const auto set = random_pairs(10, 9);
  auto p = small_params();
  const auto d = seed_dictionary(set, p, 0);
  p.patch_shape = {3, 3, 3};
  EXPECT_THROW(train_dictionary(d, set, p), DimensionError);
}

TEST(DictLabel, SingleAllOnesAtomLabelsEverything) {
  PatchDictionary d;
  d.params = small_params();
  d.atoms.push_back({filled(8, 0.0f), filled(8, 1.0f), 1});
  const auto m = dict_label_volume(d, Volume3({4, 5, 6}));
  EXPECT_EQ(count_foreground(m), m.size());
}

TEST(DictLabel, SoftLabelAtThresholdIsBackground) {
  PatchDictionary d;
  d.params = small_params();
  d.params.label_threshold_th = 0.5;
  d.atoms.push_back({filled(8, 0.0f), filled(8, 0.5f), 1});
  EXPECT_EQ(count_foreground(dict_label_volume(d, Volume3({4, 4, 4}))), 0u);
}

TEST(DictLabel, TooSmallVolumeIsDimensionError) {
  PatchDictionary d;
  d.params.patch_shape = {3, 3, 3};
  d.atoms.push_back({filled(27, 0.0f), filled(27, 1.0f), 1});
  EXPECT_THROW(dict_label_volume(d, Volume3({2, 5, 5})), DimensionError);
}

TEST(DictLabel, MemorizesTrainingVolume) {
  const auto [v, m] = bright_cube();
  const auto p = memorize_params();
  PatchPairSet set(p.patch_shape);
  set.add_volume(v, m);
  const auto d = train_dictionary(seed_dictionary(set, p, 4), set, p, 4);
  const auto pred = dict_label_volume(d, v);
  EXPECT_GE(dice(pred, m), 0.95);
  std::vector<oracle::Atom> atoms;
  for (const auto& a : d.atoms) atoms.push_back({a.intensity, a.label});
  EXPECT_EQ(pred, oracle::dict_label(atoms, v, p.patch_shape, p.label_threshold_th));
}

TEST(DictLabel, MatchesBruteForceOnRandomDictionary) {
  std::mt19937_64 gen(13);
  const auto v = oracle::random_volume({7, 6, 5}, gen);
  const auto set = random_pairs(200, 14);
  auto p = small_params();
  p.seed_fraction = 0.2;
  const auto d = seed_dictionary(set, p, 15);
  std::vector<oracle::Atom> atoms;
  for (const auto& a : d.atoms) atoms.push_back({a.intensity, a.label});
  EXPECT_EQ(dict_label_volume(d, v), oracle::dict_label(atoms, v, p.patch_shape, p.label_threshold_th));
}

TEST(DictLabel, NearestTieGoesToLowestIndex) {
  std::vector<DictionaryAtom> atoms{{filled(8, 1.0f), filled(8, 0.0f), 1}, {filled(8, -1.0f), filled(8, 1.0f), 1}};
  EXPECT_EQ(nearest_atom(atoms, filled(8, 0.0f)), 0u);
}

TEST(DictPersistence, RoundtripIsExact) {
  TempDir dir;
  const auto set = random_pairs(150, 16);
  auto p = small_params();
  p.step_tau = 0.2;
  const auto d = train_dictionary(seed_dictionary(set, p, 1), set, p, 1);
  write_dictionary(d, dir / "dict.json");
  const auto r = read_dictionary(dir / "dict.json");
  EXPECT_EQ(r.atoms, d.atoms);
  EXPECT_EQ(r.params.patch_shape, d.params.patch_shape);
  EXPECT_EQ(r.params.step_tau, d.params.step_tau);
  EXPECT_THROW(read_dictionary(dir / "absent.json"), MissingFileError);
}

TEST(DictParamsJson, UnknownKeyAndRangeErrors) {
  EXPECT_THROW(dict_params_from_json(json{{"tau", 0.1}}), ConfigError);
  EXPECT_THROW(dict_params_from_json(json{{"step_tau", 1.5}}), ParameterError);
  EXPECT_THROW(dict_params_from_json(json{{"label_threshold_th", 1.0}}), ParameterError);
  EXPECT_THROW(dict_params_from_json(json{{"seed_fraction", 0.0}}), ParameterError);
  EXPECT_EQ(dict_params_from_json(json{{"train_iterations", 3}}).train_iterations, 3u);
}
