#include <gtest/gtest.h>

#include <random>

#include "raigen/toy_generator.hpp"

using namespace raigen;

namespace {

ToyConfig small_config() {
  ToyConfig c;
  c.depth = 3;
  c.branching = 3;
  c.dim = 16;
  return c;
}

}  // namespace

TEST(BuildTree, DecayDisabledGivesEqualProbs) {
  ToyConfig c;
  c.depth = 1;
  c.branching = 2;
  c.prob_decay = 1.0;
  c.base_prob = 0.7;
  FeatureTree t = build_tree(c, 1);
  ASSERT_EQ(t.size(), 3u);
  for (const auto& n : t.nodes) EXPECT_DOUBLE_EQ(n.activation_prob, 0.7);
  EXPECT_EQ(t.nodes[0].children, (std::vector<unsigned>{1, 2}));
  EXPECT_EQ(*t.nodes[1].parent, 0u);
}

TEST(BuildTree, FortyFeaturesAndGeometricDecay) {
  ToyConfig c = small_config();
  FeatureTree t = build_tree(c, 4);
  ASSERT_EQ(t.size(), 40u);
  EXPECT_EQ(c.feature_count(), 40u);
  t.validate();
  for (const auto& n : t.nodes) {
    EXPECT_NEAR(n.direction.norm(), 1.0, 1e-12);
    EXPECT_DOUBLE_EQ(n.activation_prob, c.base_prob * std::pow(c.prob_decay, n.level));
    if (n.parent) EXPECT_EQ(t.nodes[*n.parent].level + 1, n.level);
  }
}

TEST(BuildTree, Deterministic) {
  ToyConfig c = small_config();
  c.exclusive_fraction = 0.5;
  c.prob_jitter = 0.3;
  EXPECT_EQ(tree_to_json(build_tree(c, 9)), tree_to_json(build_tree(c, 9)));
  EXPECT_NE(tree_to_json(build_tree(c, 9)), tree_to_json(build_tree(c, 10)));
}

TEST(BuildTree, RejectsInvalidConfig) {
  for (auto mutate : std::vector<void (*)(ToyConfig&)>{
           [](ToyConfig& c) { c.depth = 0; }, [](ToyConfig& c) { c.branching = 1; },
           [](ToyConfig& c) { c.prob_decay = 0.0; }, [](ToyConfig& c) { c.prob_decay = 1.5; },
           [](ToyConfig& c) { c.magnitude_lo = 0.0; }, [](ToyConfig& c) { c.magnitude_hi = 0.1; },
           [](ToyConfig& c) { c.exclusive_fraction = 2.0; }}) {
    ToyConfig c = small_config();
    mutate(c);
    try {
      build_tree(c, 0);
      ADD_FAILURE();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::Config);
    }
  }
}

TEST(SampleDataset, ForcedRootReproducesDirection) {
  FeatureTree t;
  t.dim = 4;
  FeatureNode root;
  root.direction = Vector::Unit(4, 2);
  root.activation_prob = 1.0;
  root.magnitude_lo = root.magnitude_hi = 1.0;
  t.nodes.push_back(root);
  t.root_ids = {0};
  ToyDataset ds = sample_dataset(t, 25, 3);
  for (Eigen::Index s = 0; s < 25; ++s) EXPECT_EQ(ds.observed.row(s), root.direction.transpose());
  EXPECT_EQ(ds.feature_frequencies, (std::vector<std::uint64_t>{25}));
}

TEST(SampleDataset, InvariantsHold) {
  ToyConfig c = small_config();
  c.exclusive_fraction = 0.5;
  c.base_prob = 1.0;
  c.prob_decay = 0.9;
  FeatureTree t = build_tree(c, 12);
  ASSERT_FALSE(t.exclusive_groups.empty());
  const std::size_t N = 5000;
  ToyDataset ds = sample_dataset(t, N, 13);
  for (Eigen::Index s = 0; s < static_cast<Eigen::Index>(N); ++s) {
    Vector expect = Vector::Zero(c.dim);
    for (const auto& n : t.nodes) {
      double a = ds.true_activations(s, n.id);
      ASSERT_GE(a, 0.0);
      if (a > 0.0) {
        EXPECT_GE(a, n.magnitude_lo);
        EXPECT_LE(a, n.magnitude_hi);
        if (n.parent) EXPECT_GT(ds.true_activations(s, *n.parent), 0.0) << "child active without parent";
      }
      expect += a * n.direction;
    }
    EXPECT_LE((ds.observed.row(s).transpose() - expect).cwiseAbs().maxCoeff(), 1e-5);
    for (const auto& group : t.exclusive_groups) {
      int active = 0;
      for (unsigned id : group) active += ds.true_activations(s, id) > 0.0;
      EXPECT_LE(active, 1);
    }
  }
  for (const auto& n : t.nodes) {
    EXPECT_EQ(ds.feature_frequencies[n.id], static_cast<std::uint64_t>((ds.true_activations.col(n.id).array() > 0).count()));
  }
}

TEST(SampleDataset, ExclusiveGroupOfThreeAtMostOne) {
  ToyConfig c;
  c.depth = 1;
  c.branching = 3;
  c.dim = 8;
  c.base_prob = 1.0;
  c.prob_decay = 1.0;  // sum of sibling probs is 3, renormalized to a categorical
  c.exclusive_fraction = 1.0;
  FeatureTree t = build_tree(c, 2);
  ASSERT_EQ(t.exclusive_groups.size(), 1u);
  ToyDataset ds = sample_dataset(t, 3000, 5);
  for (Eigen::Index s = 0; s < 3000; ++s) {
    int active = (ds.true_activations.row(s).tail(3).array() > 0).count();
    EXPECT_EQ(active, 1);
  }
  for (unsigned id = 1; id <= 3; ++id) EXPECT_NEAR(static_cast<double>(ds.feature_frequencies[id]) / 3000.0, 1.0 / 3.0, 0.04);
}

TEST(SampleDataset, Deterministic) {
  ToyConfig c = small_config();
  c.exclusive_fraction = 0.4;
  FeatureTree t = build_tree(c, 1);
  ToyDataset a = sample_dataset(t, 500, 77), b = sample_dataset(t, 500, 77);
  EXPECT_EQ(to_tensor(a.observed), to_tensor(b.observed));
  EXPECT_TRUE(a.observed == b.observed);
  EXPECT_TRUE(a.true_activations == b.true_activations);
  EXPECT_FALSE(a.observed == sample_dataset(t, 500, 78).observed);
}

TEST(SampleDataset, LongTailAtFiftyThousand) {
  ToyConfig c;  // defaults: depth 3, branching 3, decay 0.6
  FeatureTree t = build_tree(c, 21);
  ToyDataset ds = sample_dataset(t, 50000, 22);
  auto sorted = empirical_frequencies(ds.true_activations);
  ASSERT_EQ(sorted.size(), 40u);
  for (std::size_t i = 1; i < sorted.size(); ++i) EXPECT_GE(sorted[i - 1].second, sorted[i].second);
  ASSERT_GT(sorted.back().second, 0u);
  EXPECT_GT(static_cast<double>(sorted.front().second) / static_cast<double>(sorted.back().second), 10.0);
}

TEST(EmpiricalFrequencies, Examples) {
  Matrix zero = Matrix::Zero(4, 3);
  for (auto [id, count] : empirical_frequencies(zero)) EXPECT_EQ(count, 0u);
  // ties keep ascending id order
  auto z = empirical_frequencies(zero);
  EXPECT_EQ(z[0].first, 0u);
  EXPECT_EQ(z[2].first, 2u);

  Matrix seven = Matrix::Zero(10, 2);
  for (int s = 0; s < 7; ++s) seven(s, 1) = 0.3;
  auto f = empirical_frequencies(seven);
  EXPECT_EQ(f[0], (std::pair<unsigned, std::uint64_t>{1, 7}));
  EXPECT_EQ(f[1], (std::pair<unsigned, std::uint64_t>{0, 0}));
}

TEST(EmpiricalFrequencies, MatchesLoopCount) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix m(9, 6);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::max(0.0, u(rng));
    auto f = empirical_frequencies(m);
    std::vector<std::uint64_t> counts(6, 0);
    for (Eigen::Index s = 0; s < 9; ++s)
      for (Eigen::Index j = 0; j < 6; ++j)
        if (m(s, j) > 0.0) ++counts[j];
    for (std::size_t i = 0; i < f.size(); ++i) {
      EXPECT_EQ(f[i].second, counts[f[i].first]);
      if (i > 0) {
        EXPECT_TRUE(f[i - 1].second > f[i].second || (f[i - 1].second == f[i].second && f[i - 1].first < f[i].first));
      }
    }
  }
}

TEST(ToyConfigJson, RoundTrip) {
  ToyConfig c = small_config();
  c.prob_jitter = 0.25;
  c.exclusive_fraction = 0.5;
  EXPECT_EQ(toy_config_to_json(toy_config_from_json(toy_config_to_json(c))), toy_config_to_json(c));
}
