#pragma once

// End-to-end runs behind the command-line tool: toy rarity validation,
// minority audits of ingested representations and score ablations.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "raigen/data_io.hpp"
#include "raigen/error.hpp"
#include "raigen/latent_matching.hpp"
#include "raigen/minority_scoring.hpp"
#include "raigen/msae.hpp"
#include "raigen/toy_generator.hpp"

namespace raigen {

/// Worker count from RAIGEN_WORKERS, else hardware concurrency.
inline unsigned worker_count() {
  if (const char* env = std::getenv("RAIGEN_WORKERS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, count) over up to `workers` threads. Exceptions are rethrown in index order.
template <typename Fn>
void parallel_for(std::size_t count, unsigned workers, Fn fn) {
  std::vector<std::exception_ptr> errors(count);
  auto run = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (workers <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < std::min<std::size_t>(workers, count); ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) run(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Toy validation

struct ToyValidateConfig {
  ToyConfig toy = desk_toy_config();
  TrainConfig train = desk_train_config();
  MatchConfig match;
  std::size_t samples = 50000;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<double> quantiles = {0.1, 0.2, 0.3};

  static ToyConfig desk_toy_config() {
    ToyConfig c;
    c.depth = 3;
    c.branching = 3;
    c.dim = 64;
    c.base_prob = 1.0;
    c.prob_decay = 0.6;
    c.prob_jitter = 0.5;
    return c;
  }

  static TrainConfig desk_train_config() {
    TrainConfig c;
    c.epochs = 20;
    c.batch_size = 256;
    c.learning_rate = 1e-3;
    c.aux_weight = 1.0 / 32.0;
    c.aux_k = 16;
    c.dead_threshold_steps = 200;
    c.sparsifier = Sparsifier::PerSampleTopK;
    c.latent_dim = 64;
    c.levels = {8, 64};
    return c;
  }

  void validate() const {
    toy.validate();
    train.validate();
    require(train.latent_dim >= 1, ErrorKind::Config, "latent_dim must be >= 1");
    require(samples >= train.batch_size, ErrorKind::Config, "samples must be >= batch_size");
    require(!seeds.empty(), ErrorKind::Config, "at least one seed is required");
    for (double q : quantiles) require(q > 0.0 && q < 1.0, ErrorKind::Config, "quantiles must be in (0, 1)");
  }
};

inline json toy_validate_config_to_json(const ToyValidateConfig& c) {
  json train = train_config_to_json(c.train);
  train.erase("seed");  // per-seed, derived
  return json{{"toy", toy_config_to_json(c.toy)},
              {"train", train},
              {"match", {{"similarity", to_string(c.match.similarity)}, {"similarity_floor", c.match.similarity_floor}}},
              {"samples", c.samples},
              {"seeds", c.seeds},
              {"quantiles", c.quantiles}};
}

inline ToyValidateConfig toy_validate_config_from_json(const json& j) {
  ToyValidateConfig c;
  if (j.contains("toy")) c.toy = toy_config_from_json(j["toy"]);
  if (j.contains("train")) c.train = train_config_from_json(j["train"]);
  if (j.contains("match")) {
    c.match.similarity = similarity_from_string(j["match"].value("similarity", std::string("cosine")));
    c.match.similarity_floor = j["match"].value("similarity_floor", c.match.similarity_floor);
  }
  c.samples = j.value("samples", c.samples);
  c.seeds = j.value("seeds", c.seeds);
  c.quantiles = j.value("quantiles", c.quantiles);
  return c;
}

struct SeedOutcome {
  std::uint64_t seed = 0;
  std::vector<RarityProbability> per_quantile;
  double spearman = 0.0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::size_t matched_latents = 0;
  std::size_t assigned = 0;
  std::vector<std::uint64_t> feature_frequencies;
};

struct QuantileSummary {
  double q = 0.0;
  double mean_p_least_active = 0.0;
  double mean_p_random_baseline = 0.0;
  double p_least_active_lo = 0.0;  // 5th percentile across seeds
  double p_least_active_hi = 0.0;  // 95th percentile across seeds
  double mean_n_least_active = 0.0;
};

struct RarityReport {
  std::vector<QuantileSummary> quantiles;
  double mean_spearman = 0.0;
  double spearman_lo = 0.0, spearman_hi = 0.0;
  std::vector<SeedOutcome> seeds;
};

struct ToySeedArtifacts {
  FeatureTree tree;
  ToyDataset dataset;
  TrainResult trained;
  MatchResult match;
};

/// generate -> train -> match -> rarity statistics for one seed.
inline SeedOutcome run_toy_seed(const ToyValidateConfig& config, std::uint64_t seed,
                                ToySeedArtifacts* keep = nullptr) {
  ToySeedArtifacts local;
  ToySeedArtifacts& a = keep ? *keep : local;
  a.tree = build_tree(config.toy, derive_seed(seed, 0));
  a.dataset = sample_dataset(a.tree, config.samples, derive_seed(seed, 1));
  TrainConfig train = config.train;
  train.seed = derive_seed(seed, 2);
  a.trained = train_msae(a.dataset.observed, train);
  Matrix coarse = encode_batch(a.trained.params, a.dataset.observed, train.levels.front());
  a.match = match_latents(coarse, a.dataset.true_activations, config.match, seed);

  SeedOutcome out;
  out.seed = seed;
  for (double q : config.quantiles) out.per_quantile.push_back(rarity_conditional_probability(a.match, q));
  out.spearman = matched_spearman(a.match);
  out.initial_loss = a.trained.log.initial_total;
  out.final_loss = a.trained.log.final_total;
  out.matched_latents = a.match.matched_latents.size();
  out.assigned = a.match.assignment.size();
  out.feature_frequencies = a.dataset.feature_frequencies;
  return out;
}

inline RarityReport summarize(const ToyValidateConfig& config, std::vector<SeedOutcome> seeds) {
  RarityReport r;
  const double n = static_cast<double>(seeds.size());
  for (std::size_t qi = 0; qi < config.quantiles.size(); ++qi) {
    QuantileSummary s;
    s.q = config.quantiles[qi];
    std::vector<double> ps;
    for (const auto& o : seeds) {
      s.mean_p_least_active += o.per_quantile[qi].p_least_active / n;
      s.mean_p_random_baseline += o.per_quantile[qi].p_random_baseline / n;
      s.mean_n_least_active += static_cast<double>(o.per_quantile[qi].n_least_active) / n;
      ps.push_back(o.per_quantile[qi].p_least_active);
    }
    s.p_least_active_lo = percentile(ps, 5.0);
    s.p_least_active_hi = percentile(ps, 95.0);
    r.quantiles.push_back(s);
  }
  std::vector<double> rhos;
  for (const auto& o : seeds) {
    r.mean_spearman += o.spearman / n;
    rhos.push_back(o.spearman);
  }
  r.spearman_lo = percentile(rhos, 5.0);
  r.spearman_hi = percentile(rhos, 95.0);
  r.seeds = std::move(seeds);
  return r;
}

inline RarityReport run_toy_validate(const ToyValidateConfig& config, unsigned workers = 1) {
  config.validate();
  std::vector<SeedOutcome> outcomes(config.seeds.size());
  parallel_for(config.seeds.size(), workers, [&](std::size_t i) { outcomes[i] = run_toy_seed(config, config.seeds[i]); });
  return summarize(config, std::move(outcomes));
}

inline json rarity_report_to_json(const RarityReport& r) {
  json quantiles = json::array();
  for (const auto& q : r.quantiles) {
    quantiles.push_back({{"q", q.q},
                         {"mean_p_least_active", q.mean_p_least_active},
                         {"mean_p_random_baseline", q.mean_p_random_baseline},
                         {"p_least_active_interval", {q.p_least_active_lo, q.p_least_active_hi}},
                         {"mean_n_least_active", q.mean_n_least_active}});
  }
  json seeds = json::array();
  for (const auto& s : r.seeds) {
    json per_q = json::array();
    for (const auto& p : s.per_quantile) {
      per_q.push_back({{"p_least_active", p.p_least_active},
                       {"p_random_baseline", p.p_random_baseline},
                       {"n_least_active", p.n_least_active}});
    }
    seeds.push_back({{"seed", s.seed},
                     {"per_quantile", per_q},
                     {"spearman_rho", s.spearman},
                     {"initial_loss", s.initial_loss},
                     {"final_loss", s.final_loss},
                     {"matched_latents", s.matched_latents},
                     {"assigned", s.assigned}});
  }
  std::vector<std::uint64_t> seed_ids;
  for (const auto& s : r.seeds) seed_ids.push_back(s.seed);
  return json{{"quantiles", quantiles},
              {"mean_spearman_rho", r.mean_spearman},
              {"spearman_rho_interval", {r.spearman_lo, r.spearman_hi}},
              {"seeds", seed_ids},
              {"per_seed", seeds}};
}

/// Plain-text table: q, least-active probability, random baseline.
inline std::string rarity_table(const RarityReport& r) {
  std::ostringstream out;
  out << "q     P(rare | least-active)  [5%, 95%]        P(rare | random)\n";
  char line[160];
  for (const auto& q : r.quantiles) {
    std::snprintf(line, sizeof(line), "%.2f  %.4f                  [%.4f, %.4f]   %.4f\n", q.q, q.mean_p_least_active,
                  q.p_least_active_lo, q.p_least_active_hi, q.mean_p_random_baseline);
    out << line;
  }
  std::snprintf(line, sizeof(line), "mean Spearman rho %.4f  [%.4f, %.4f] over %zu seeds\n", r.mean_spearman,
                r.spearman_lo, r.spearman_hi, r.seeds.size());
  out << line;
  return out.str();
}

// ---------------------------------------------------------------------------
// Audit

struct AuditConfig {
  ScoringConfig scoring;
  std::optional<unsigned> coarse_k;  // defaults to the params' first level
  TrainConfig train;                 // used only when no params are supplied
};

inline json scoring_config_to_json(const ScoringConfig& s) {
  return json{{"percentile", s.percentile},
              {"dist_threshold", s.dist_threshold},
              {"percentile_over_active_only", s.percentile_over_active_only},
              {"top_count", s.top_count}};
}

inline ScoringConfig scoring_config_from_json(const json& j) {
  ScoringConfig s;
  s.percentile = j.value("percentile", s.percentile);
  s.dist_threshold = j.value("dist_threshold", s.dist_threshold);
  s.percentile_over_active_only = j.value("percentile_over_active_only", s.percentile_over_active_only);
  s.top_count = j.value("top_count", s.top_count);
  return s;
}

struct LoadedDataset {
  DatasetManifest manifest;
  TensorFile representations;
  std::optional<EmbeddingSet> embeddings;
};

inline LoadedDataset load_dataset(const std::filesystem::path& manifest_path, bool need_embeddings) {
  LoadedDataset ds;
  ds.manifest = load_manifest(manifest_path);
  if (need_embeddings) {
    require(ds.manifest.embedding_file.has_value(), ErrorKind::Config,
            "manifest " + manifest_path.string() +
                " has no 'embedding_file'; scoring needs semantic embeddings, set that field to an N x m tensor");
  }
  ds.representations = load_tensor(ds.manifest.resolve(ds.manifest.representation_file));
  require(ds.representations.rank() == 2 || ds.representations.rank() == 4, ErrorKind::Shape,
          "representations must be N x n or N x h x w x n");
  if (ds.manifest.embedding_file) {
    EmbeddingSet e;
    TensorFile t = load_tensor(ds.manifest.resolve(*ds.manifest.embedding_file));
    require(t.rank() == 2, ErrorKind::Shape, "embeddings must be an N x m tensor");
    e.vectors = to_matrix(t);
    e.model_tag = "ingested";
    ds.embeddings = std::move(e);
  }
  return ds;
}

/// Every spatial position as one training row.
inline Matrix flatten_positions(const TensorFile& reps) {
  const std::uint64_t width = reps.shape.back();
  Matrix m(static_cast<Eigen::Index>(reps.element_count() / width), static_cast<Eigen::Index>(width));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = reps.data[i];
  return m;
}

inline void check_params_fit(const MsaeParams& p, const TensorFile& reps) {
  require(static_cast<Eigen::Index>(reps.shape.back()) == p.n(), ErrorKind::Shape,
          "params expect n = " + std::to_string(p.n()) + " but representations have width " +
              std::to_string(reps.shape.back()));
}

struct AuditResult {
  MsaeParams params;
  std::optional<TrainingLog> training_log;
  unsigned coarse_k = 0;
  ActivationTable table;
  NeuronScoreSet scores;
  std::map<std::size_t, std::vector<TopSample>> top_samples;
};

inline AuditResult run_audit(const LoadedDataset& ds, std::optional<MsaeParams> params, const AuditConfig& config) {
  require(ds.embeddings.has_value(), ErrorKind::Config, "manifest field 'embedding_file' is required for scoring");
  AuditResult r;
  if (params) {
    check_params_fit(*params, ds.representations);
    r.params = std::move(*params);
  } else {
    auto trained = train_msae(flatten_positions(ds.representations), config.train);
    r.params = std::move(trained.params);
    r.training_log = std::move(trained.log);
  }
  r.coarse_k = config.coarse_k.value_or(r.params.levels.front());
  require(r.coarse_k >= 1 && r.coarse_k <= r.params.d(), ErrorKind::Config,
          "coarse k " + std::to_string(r.coarse_k) + " must be in [1, " + std::to_string(r.params.d()) + "]");
  r.table = aggregate_neuron_activations(ds.representations, r.params, r.coarse_k, true, ds.manifest.image_ids);
  r.scores = score_neurons(r.table, *ds.embeddings, config.scoring);
  for (std::size_t id : r.scores.selected) {
    r.top_samples[id] = top_activating_samples(r.table, id, config.scoring.top_count);
  }
  return r;
}

inline RunArtifact scores_to_artifact(const AuditResult& r, const DatasetManifest& manifest,
                                      const ScoringConfig& scoring) {
  RunArtifact a;
  a.kind = ArtifactKind::Scores;
  json selected = json::array();
  for (std::size_t id : r.scores.selected) {
    selected.push_back({{"id", id},
                        {"score", r.scores.score[id]},
                        {"nu", r.scores.nu_raw[id]},
                        {"d", r.scores.d_raw[id]},
                        {"top_samples", top_samples_json(r.top_samples.at(id))}});
  }
  a.payload = json{{"prompt", manifest.prompt},
                   {"timestep", manifest.timestep},
                   {"sample_count", manifest.sample_count},
                   {"coarse_k", r.coarse_k},
                   {"latent_dim", r.params.d()},
                   {"spatial", {r.table.h, r.table.w}},
                   {"scoring", scoring_config_to_json(scoring)},
                   {"gate", r.scores.gate},
                   {"candidates", r.scores.candidates},
                   {"selected", selected},
                   {"empty", r.scores.selected.empty()},
                   {"neurons", neuron_scores_json(r.scores)}};
  a.attachments["centroids"] = to_tensor(r.scores.centroids.per_neuron);
  a.attachments["global_centroid"] = to_tensor(r.scores.centroids.global);
  return a;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRun {
  unsigned coarse_k = 0;
  NeuronScoreSet scores;
  AblationLists lists;
};

inline double jaccard(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::set<std::size_t> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::size_t inter = 0;
  for (auto x : sa) inter += sb.count(x);
  std::size_t uni = sa.size() + sb.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline std::vector<AblationRun> run_ablation(const LoadedDataset& ds, const MsaeParams& params,
                                             const std::vector<unsigned>& coarse_ks, const ScoringConfig& scoring,
                                             std::size_t top_k) {
  require(ds.embeddings.has_value(), ErrorKind::Config, "manifest field 'embedding_file' is required for scoring");
  check_params_fit(params, ds.representations);
  std::vector<AblationRun> runs;
  for (unsigned k : coarse_ks) {
    require(k >= 1 && k <= params.d(), ErrorKind::Config,
            "coarse k " + std::to_string(k) + " must be in [1, " + std::to_string(params.d()) + "]");
    AblationRun run;
    run.coarse_k = k;
    ActivationTable table = aggregate_neuron_activations(ds.representations, params, k, false, ds.manifest.image_ids);
    run.scores = score_neurons(table, *ds.embeddings, scoring);
    run.lists = ablate_score_variants(run.scores, top_k);
    runs.push_back(std::move(run));
  }
  return runs;
}

inline json ablation_to_json(const std::vector<AblationRun>& runs) {
  json out = json::array();
  for (const auto& r : runs) {
    const auto& l = r.lists;
    bool empty = r.scores.candidates.empty();
    out.push_back({{"coarse_k", r.coarse_k},
                   {"empty", empty},
                   {"frequency_only", l.frequency_only},
                   {"distinctiveness_only", l.distinctiveness_only},
                   {"combined", l.combined},
                   {"overlap",
                    {{"frequency_vs_combined", jaccard(l.frequency_only, l.combined)},
                     {"distinctiveness_vs_combined", jaccard(l.distinctiveness_only, l.combined)},
                     {"frequency_vs_distinctiveness", jaccard(l.frequency_only, l.distinctiveness_only)}}},
                   {"selected", r.scores.selected}});
  }
  return out;
}

}  // namespace raigen
