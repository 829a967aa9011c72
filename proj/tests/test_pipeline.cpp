#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "raigen/pipeline.hpp"
#include "raigen/report.hpp"

using namespace raigen;

namespace {

ToyValidateConfig tiny_validate() {
  ToyValidateConfig c;
  c.toy.dim = 32;
  c.toy.depth = 2;
  c.samples = 2000;
  c.seeds = {0, 1, 2};
  c.train.epochs = 3;
  c.train.latent_dim = 24;
  c.train.levels = {4, 24};
  c.train.aux_k = 8;
  return c;
}

}  // namespace

TEST(DeriveSeed, DistinctStreams) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 20; ++s)
    for (std::uint64_t k = 0; k < 4; ++k) seen.insert(derive_seed(s, k));
  EXPECT_EQ(seen.size(), 80u);
  EXPECT_EQ(derive_seed(3, 1), derive_seed(3, 1));
}

TEST(ParallelFor, VisitsEveryIndexOnce) {
  std::vector<int> hits(57, 0);
  parallel_for(hits.size(), 3, [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) EXPECT_EQ(h, 1);
}

TEST(ToyValidate, DeterministicAcrossWorkerCounts) {
  ToyValidateConfig c = tiny_validate();
  json a = rarity_report_to_json(run_toy_validate(c, 1));
  json b = rarity_report_to_json(run_toy_validate(c, 3));
  EXPECT_EQ(a.dump(), b.dump());
  ASSERT_EQ(a["quantiles"].size(), 3u);
  for (const auto& q : a["quantiles"]) {
    EXPECT_GE(q["mean_p_least_active"].get<double>(), 0.0);
    EXPECT_LE(q["mean_p_least_active"].get<double>(), 1.0);
  }
  EXPECT_EQ(a["seeds"], (json{0, 1, 2}));
}

TEST(ToyValidate, ConfigJsonRoundTrip) {
  ToyValidateConfig c = tiny_validate();
  c.match.similarity = SimilarityKind::Correlation;
  json j = toy_validate_config_to_json(c);
  EXPECT_FALSE(j["train"].contains("seed"));
  EXPECT_EQ(toy_validate_config_to_json(toy_validate_config_from_json(j)), j);
}

TEST(ToyValidate, RejectsBadConfig) {
  ToyValidateConfig c = tiny_validate();
  c.quantiles = {0.0};
  EXPECT_THROW(run_toy_validate(c), Error);
  c = tiny_validate();
  c.samples = 100;
  EXPECT_THROW(run_toy_validate(c), Error);
  c = tiny_validate();
  c.seeds.clear();
  EXPECT_THROW(run_toy_validate(c), Error);
}

TEST(ToyValidate, SeedKeepsArtifacts) {
  ToyValidateConfig c = tiny_validate();
  ToySeedArtifacts keep;
  SeedOutcome o = run_toy_seed(c, 4, &keep);
  EXPECT_EQ(keep.tree.size(), c.toy.feature_count());
  EXPECT_EQ(o.assigned, keep.match.assignment.size());
  EXPECT_LT(o.final_loss, o.initial_loss);
  EXPECT_EQ(o.feature_frequencies, keep.dataset.feature_frequencies);
}

TEST(RarityTable, Formatting) {
  RarityReport r;
  r.quantiles.push_back({0.1, 0.5, 0.1, 0.25, 0.75, 4.0});
  r.mean_spearman = 0.9;
  std::string t = rarity_table(r);
  EXPECT_NE(t.find("0.10  0.5000"), std::string::npos);
  EXPECT_NE(t.find("0.1000\n"), std::string::npos);
  EXPECT_NE(t.find("over 0 seeds"), std::string::npos);
}

TEST(Jaccard, Examples) {
  EXPECT_DOUBLE_EQ(jaccard({1, 2, 3}, {2, 3, 4}), 0.5);
  EXPECT_DOUBLE_EQ(jaccard({}, {}), 0.0);
  EXPECT_DOUBLE_EQ(jaccard({5}, {5}), 1.0);
}

TEST(Audit, PlantedFixtureFromFiles) {
  auto dir = oracle::fresh_dir("pipeline_audit");
  auto manifest = fixture::write_planted(dir);
  LoadedDataset ds = load_dataset(manifest, true);
  ASSERT_TRUE(ds.embeddings);
  MsaeParams params = params_from_artifact(load_artifact(dir / "params.json"));
  AuditResult r = run_audit(ds, params, {});
  EXPECT_EQ(r.coarse_k, 2u);
  ASSERT_FALSE(r.scores.selected.empty());
  EXPECT_EQ(r.scores.selected.front(), fixture::kRareDistinct);
  EXPECT_EQ(r.table.h, 2u);
  RunArtifact a = scores_to_artifact(r, ds.manifest, {});
  EXPECT_EQ(a.payload["selected"][0]["id"], fixture::kRareDistinct);
  EXPECT_EQ(a.payload["empty"], false);
  EXPECT_EQ(a.payload["timestep"], 49);
  EXPECT_EQ(a.attachments.at("centroids").shape, (std::vector<std::uint64_t>{8, 4}));
  // default count of 10; the three planted images lead, the rest are inactive
  auto top = r.top_samples.at(fixture::kRareDistinct);
  ASSERT_EQ(top.size(), 10u);
  std::set<std::string> ids;
  for (std::size_t i = 0; i < 3; ++i) ids.insert(top[i].sample_id);
  EXPECT_EQ(ids, (std::set<std::string>{"img0", "img1", "img2"}));
  EXPECT_EQ(top[3].activation, 0.0);
  EXPECT_DOUBLE_EQ(top[0].heatmap(0, 1), 2.0);
  EXPECT_NE(render_scores_html(a.payload).find("img0"), std::string::npos);
}

TEST(Audit, ParamWidthMismatchIsShapeError) {
  auto dir = oracle::fresh_dir("pipeline_mismatch");
  LoadedDataset ds = load_dataset(fixture::write_planted(dir), true);
  MsaeParams p = init_params(6, 8, {2, 8}, {1.0, 1.0}, 1);
  try {
    run_audit(ds, p, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Shape);
  }
}

TEST(Audit, MissingEmbeddingsIsConfigError) {
  auto dir = oracle::fresh_dir("pipeline_noemb");
  auto manifest = fixture::write_planted(dir, false, false);
  try {
    load_dataset(manifest, true);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Config);
    EXPECT_NE(std::string(e.what()).find("embedding_file"), std::string::npos);
  }
}

TEST(Audit, BadCoarseKIsConfigError) {
  auto dir = oracle::fresh_dir("pipeline_coarsek");
  LoadedDataset ds = load_dataset(fixture::write_planted(dir), true);
  AuditConfig c;
  c.coarse_k = 9;
  EXPECT_THROW(run_audit(ds, fixture::make_planted().params, c), Error);
}

TEST(Ablation, PlantedSweepAndJson) {
  auto dir = oracle::fresh_dir("pipeline_ablate");
  LoadedDataset ds = load_dataset(fixture::write_planted(dir), true);
  auto runs = run_ablation(ds, fixture::make_planted().params, {2, 8}, {}, 5);
  ASSERT_EQ(runs.size(), 2u);
  EXPECT_EQ(runs[0].lists.combined.front(), fixture::kRareDistinct);
  EXPECT_LE(runs[0].lists.combined.size(), 5u);
  json j = ablation_to_json(runs);
  EXPECT_EQ(j[0]["coarse_k"], 2);
  EXPECT_EQ(j[0]["empty"], false);
  EXPECT_GE(j[0]["overlap"]["frequency_vs_combined"].get<double>(), 0.0);
}

TEST(Ablation, FlatEmbeddingsAreEmpty) {
  auto dir = oracle::fresh_dir("pipeline_ablate_flat");
  LoadedDataset ds = load_dataset(fixture::write_planted(dir, true), true);
  auto runs = run_ablation(ds, fixture::make_planted().params, {2}, {}, 5);
  EXPECT_TRUE(runs[0].scores.selected.empty());
  EXPECT_EQ(ablation_to_json(runs)[0]["empty"], true);
}
