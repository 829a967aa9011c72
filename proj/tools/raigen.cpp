// raigen: command-line front end for toy validation, MSAE training and
// minority-neuron audits.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "raigen/data_io.hpp"
#include "raigen/error.hpp"
#include "raigen/minority_scoring.hpp"
#include "raigen/msae.hpp"
#include "raigen/pipeline.hpp"
#include "raigen/report.hpp"
#include "raigen/toy_generator.hpp"

namespace fs = std::filesystem;
using namespace raigen;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << text;
  require(static_cast<bool>(out), ErrorKind::Io, "write failed for " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Config, path.string() + " is not valid JSON: " + e.what());
  }
}

// Runs one pipeline stage, prefixing any error with the stage name.
template <typename Fn>
auto stage(const char* name, Fn fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.kind(), std::string("stage '") + name + "': " + e.message());
  } catch (const std::exception& e) {
    throw Error(ErrorKind::Numeric, std::string("stage '") + name + "': " + e.what());
  }
}

void echo_config(const fs::path& out, const std::string& command, json config) {
  fs::create_directories(out);
  write_text(out / "config.json", dump_json(json{{"command", command}, {"config", std::move(config)}}));
}

// Looks for `--config <file>` in argv and returns the echoed config when
// `command` is the requested subcommand.
std::optional<json> prescan_config(int argc, char** argv, const std::string& command) {
  if (argc < 2 || command != argv[1]) return std::nullopt;
  for (int i = 2; i + 1 < argc; ++i) {
    if (std::strcmp(argv[i], "--config") == 0) {
      json doc = read_json(argv[i + 1]);
      require(doc.value("command", std::string()) == command, ErrorKind::Config,
              std::string(argv[i + 1]) + " was written by '" + doc.value("command", std::string()) + "', not '" +
                  command + "'");
      return doc.at("config");
    }
  }
  return std::nullopt;
}

struct TrainFlags {
  TrainConfig config;
  std::string sparsifier;

  void bind(CLI::App* app) {
    sparsifier = to_string(config.sparsifier);
    app->add_option("--epochs", config.epochs, "training epochs");
    app->add_option("--batch-size", config.batch_size, "mini-batch size");
    app->add_option("--learning-rate,--lr", config.learning_rate, "Adam learning rate");
    app->add_option("--aux-weight", config.aux_weight, "auxiliary dead-neuron loss weight");
    app->add_option("--aux-k", config.aux_k, "dead neurons used by the auxiliary loss");
    app->add_option("--dead-threshold-steps", config.dead_threshold_steps, "steps without firing before dead");
    app->add_option("--sparsifier", sparsifier, "per_sample_topk or batch_topk");
    app->add_option("--latent-dim", config.latent_dim, "latent dimension d");
    app->add_option("--levels", config.levels, "ascending sparsity levels, last = latent dim")->delimiter(',');
    app->add_option("--level-weights", config.level_weights, "loss weight per level")->delimiter(',');
  }

  void finish() { config.sparsifier = sparsifier_from_string(sparsifier); }
};

struct ToyFlags {
  void bind(CLI::App* app, ToyConfig& c) {
    app->add_option("--depth", c.depth, "tree depth");
    app->add_option("--branching", c.branching, "children per node");
    app->add_option("--dim", c.dim, "observed dimension");
    app->add_option("--root-count", c.root_count, "number of root features");
    app->add_option("--base-prob", c.base_prob, "activation probability at level 0");
    app->add_option("--prob-decay", c.prob_decay, "per-level probability decay");
    app->add_option("--prob-jitter", c.prob_jitter, "per-node probability jitter in [0, 1)");
    app->add_option("--exclusive-fraction", c.exclusive_fraction, "fraction of sibling sets made exclusive");
    app->add_option("--magnitude-lo", c.magnitude_lo, "lowest activation magnitude");
    app->add_option("--magnitude-hi", c.magnitude_hi, "highest activation magnitude");
  }
};

void bind_scoring(CLI::App* app, ScoringConfig& s) {
  app->add_option("--percentile", s.percentile, "score percentile gate");
  app->add_option("--dist-threshold", s.dist_threshold, "centroid cosine distance for redundancy pruning");
  app->add_flag("--percentile-active-only", s.percentile_over_active_only,
                "compute the gate over ever-active neurons only");
  app->add_option("--top-count", s.top_count, "top-activating samples per selected neuron");
}

MsaeParams obtain_params(const std::string& params_path, const LoadedDataset& ds, TrainConfig train,
                         std::optional<std::uint64_t> seed, const fs::path& out, json& echo) {
  if (!params_path.empty()) {
    MsaeParams p = stage("load-params", [&] { return params_from_artifact(load_artifact(params_path, ArtifactKind::Params)); });
    stage("load-params", [&] { check_params_fit(p, ds.representations); });
    echo["params"] = params_path;
    return p;
  }
  require(seed.has_value(), ErrorKind::Config, "--seed is required when training (no --params given)");
  train.seed = *seed;
  echo["train"] = train_config_to_json(train);
  auto trained = stage("train", [&] { return train_msae(flatten_positions(ds.representations), train); });
  save_artifact(out, "params", params_to_artifact(trained.params));
  write_text(out / "training_log.json", dump_json(training_log_to_json(trained.log)));
  return trained.params;
}

}  // namespace

int main(int argc, char** argv) try {
  CLI::App app{"Rare-attribute discovery with Matryoshka sparse autoencoders"};
  app.require_subcommand(1);

  std::string out_dir;
  std::string config_path;
  std::optional<std::uint64_t> seed;

  // gen-toy ------------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-toy", "generate a hierarchical synthetic dataset");
  ToyValidateConfig gen_cfg;
  std::size_t gen_samples = 50000;
  if (auto c = prescan_config(argc, argv, "gen-toy")) {
    gen_cfg.toy = toy_config_from_json(c->at("toy"));
    gen_samples = c->value("samples", gen_samples);
    if (c->contains("seed")) seed = c->at("seed").get<std::uint64_t>();
  }
  ToyFlags{}.bind(gen, gen_cfg.toy);
  gen->add_option("--samples", gen_samples, "number of samples");

  // train --------------------------------------------------------------------
  auto* train = app.add_subcommand("train", "train an MSAE on a manifest's representations");
  TrainFlags train_flags;
  std::string train_manifest;
  if (auto c = prescan_config(argc, argv, "train")) {
    train_flags.config = train_config_from_json(c->at("train"));
    seed = train_flags.config.seed;
    train_manifest = c->value("manifest", std::string());
  }
  train_flags.bind(train);
  train->add_option("--manifest", train_manifest, "dataset manifest");

  // toy-validate -------------------------------------------------------------
  auto* toyv = app.add_subcommand("toy-validate", "rarity validation on synthetic ground truth");
  ToyValidateConfig tv_cfg;
  unsigned seed_count = static_cast<unsigned>(tv_cfg.seeds.size());
  bool tv_from_config = false;
  if (auto c = prescan_config(argc, argv, "toy-validate")) {
    tv_cfg = toy_validate_config_from_json(*c);
    seed_count = static_cast<unsigned>(tv_cfg.seeds.size());
    tv_from_config = true;
  }
  TrainFlags tv_train;
  tv_train.config = tv_cfg.train;
  ToyFlags{}.bind(toyv, tv_cfg.toy);
  tv_train.bind(toyv);
  std::string similarity = to_string(tv_cfg.match.similarity);
  toyv->add_option("--samples", tv_cfg.samples, "samples per seed");
  toyv->add_option("--seeds", seed_count, "number of consecutive seeds starting at --seed");
  toyv->add_option("--quantiles", tv_cfg.quantiles, "quantile levels")->delimiter(',');
  toyv->add_option("--similarity", similarity, "cosine or correlation");
  toyv->add_option("--similarity-floor", tv_cfg.match.similarity_floor, "minimum similarity for a matched latent");

  // audit --------------------------------------------------------------------
  auto* audit = app.add_subcommand("audit", "score and select minority neurons for a manifest");
  AuditConfig audit_cfg;
  std::string audit_manifest, audit_params;
  unsigned audit_coarse_k = 0;
  TrainFlags audit_train;
  audit_train.config = ToyValidateConfig::desk_train_config();
  audit_train.config.sparsifier = Sparsifier::BatchTopK;
  if (auto c = prescan_config(argc, argv, "audit")) {
    audit_manifest = c->value("manifest", std::string());
    audit_params = c->value("params", std::string());
    audit_coarse_k = c->value("coarse_k", 0u);
    audit_cfg.scoring = scoring_config_from_json(c->at("scoring"));
    if (c->contains("train")) {
      audit_train.config = train_config_from_json(c->at("train"));
      seed = audit_train.config.seed;
    }
  }
  audit->add_option("--manifest", audit_manifest, "dataset manifest");
  audit->add_option("--params", audit_params, "params artifact (params.json); trains when omitted");
  audit->add_option("--coarse-k", audit_coarse_k, "coarse Top-k (default: first level of the params)");
  bind_scoring(audit, audit_cfg.scoring);
  audit_train.bind(audit);

  // ablate -------------------------------------------------------------------
  auto* ablate = app.add_subcommand("ablate", "frequency-only / distinctiveness-only / combined rankings");
  ScoringConfig ablate_scoring;
  std::string ablate_manifest, ablate_params;
  std::vector<unsigned> ablate_ks;
  std::size_t ablate_top_k = 10;
  TrainFlags ablate_train;
  ablate_train.config = audit_train.config;
  if (auto c = prescan_config(argc, argv, "ablate")) {
    ablate_manifest = c->value("manifest", std::string());
    ablate_params = c->value("params", std::string());
    ablate_ks = c->value("coarse_ks", ablate_ks);
    ablate_top_k = c->value("top_k", ablate_top_k);
    ablate_scoring = scoring_config_from_json(c->at("scoring"));
    if (c->contains("train")) {
      ablate_train.config = train_config_from_json(c->at("train"));
      seed = ablate_train.config.seed;
    }
  }
  ablate->add_option("--manifest", ablate_manifest, "dataset manifest");
  ablate->add_option("--params", ablate_params, "params artifact; trains when omitted");
  ablate->add_option("--coarse-k", ablate_ks, "coarse Top-k sweep")->delimiter(',');
  ablate->add_option("--top-k", ablate_top_k, "length of each ranked list");
  bind_scoring(ablate, ablate_scoring);
  ablate_train.bind(ablate);

  // report -------------------------------------------------------------------
  auto* report = app.add_subcommand("report", "render an artifact as static HTML");
  std::string report_artifact;
  report->add_option("--artifact", report_artifact, "scores.json or a report artifact")->required();

  for (auto* sub : {gen, train, toyv, audit, ablate, report}) {
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--config", config_path, "replay an echoed config.json");
  }
  for (auto* sub : {gen, train, toyv, audit, ablate}) sub->add_option("--seed", seed, "random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    const fs::path out(out_dir);
    fs::create_directories(out);

    if (gen->parsed()) {
      require(seed.has_value(), ErrorKind::Config, "--seed is required");
      echo_config(out, "gen-toy",
                  json{{"toy", toy_config_to_json(gen_cfg.toy)}, {"samples", gen_samples}, {"seed", *seed}});
      FeatureTree tree = stage("build-tree", [&] { return build_tree(gen_cfg.toy, derive_seed(*seed, 0)); });
      ToyDataset ds = stage("sample", [&] { return sample_dataset(tree, gen_samples, derive_seed(*seed, 1)); });
      save_tensor(out / "observed.rgt", to_tensor(ds.observed));
      save_tensor(out / "true_activations.rgt", to_tensor(ds.true_activations));
      write_text(out / "tree.json", dump_json(tree_to_json(tree)));
      json freqs = json::array();
      for (auto [id, count] : empirical_frequencies(ds.true_activations)) freqs.push_back({{"feature", id}, {"count", count}});
      write_text(out / "frequencies.json", dump_json(freqs));
      DatasetManifest m;
      m.prompt = "toy";
      m.sample_count = gen_samples;
      m.timestep = 0;
      m.total_timesteps = 1;
      m.representation_file = "observed.rgt";
      m.image_ids = default_sample_ids(gen_samples);
      m.seed = *seed;
      save_manifest(out / "manifest.json", m);
      std::cout << "wrote " << tree.size() << " features x " << gen_samples << " samples to " << out << "\n";
    } else if (train->parsed()) {
      require(!train_manifest.empty(), ErrorKind::Config, "--manifest is required");
      require(seed.has_value(), ErrorKind::Config, "--seed is required");
      train_flags.finish();
      train_flags.config.seed = *seed;
      echo_config(out, "train", json{{"manifest", train_manifest}, {"train", train_config_to_json(train_flags.config)}});
      LoadedDataset ds = stage("load", [&] { return load_dataset(train_manifest, false); });
      auto trained = stage("train", [&] { return train_msae(flatten_positions(ds.representations), train_flags.config); });
      save_artifact(out, "params", params_to_artifact(trained.params));
      write_text(out / "training_log.json", dump_json(training_log_to_json(trained.log)));
      std::cout << "loss " << trained.log.initial_total << " -> " << trained.log.final_total << "\n";
    } else if (toyv->parsed()) {
      tv_train.finish();
      tv_cfg.train = tv_train.config;
      tv_cfg.match.similarity = similarity_from_string(similarity);
      if (seed) {
        tv_cfg.seeds.clear();
        for (unsigned i = 0; i < seed_count; ++i) tv_cfg.seeds.push_back(*seed + i);
      } else {
        require(tv_from_config, ErrorKind::Config, "--seed is required");
      }
      echo_config(out, "toy-validate", toy_validate_config_to_json(tv_cfg));
      RarityReport r = stage("toy-validate", [&] { return run_toy_validate(tv_cfg, worker_count()); });
      RunArtifact a;
      a.kind = ArtifactKind::Report;
      a.payload = rarity_report_to_json(r);
      a.payload["report_type"] = "rarity";
      save_artifact(out, "rarity_report", a);
      write_text(out / "rarity_table.txt", rarity_table(r));
      write_text(out / "report.html", render_rarity_html(a.payload));
      std::cout << rarity_table(r);
    } else if (audit->parsed()) {
      require(!audit_manifest.empty(), ErrorKind::Config, "--manifest is required");
      audit_train.finish();
      json echo{{"manifest", audit_manifest}, {"scoring", scoring_config_to_json(audit_cfg.scoring)}};
      if (audit_coarse_k != 0) {
        audit_cfg.coarse_k = audit_coarse_k;
        echo["coarse_k"] = audit_coarse_k;
      }
      LoadedDataset ds = stage("load", [&] { return load_dataset(audit_manifest, true); });
      MsaeParams params = obtain_params(audit_params, ds, audit_train.config, seed, out, echo);
      echo_config(out, "audit", echo);
      AuditResult r = stage("score", [&] { return run_audit(ds, params, audit_cfg); });
      RunArtifact a = scores_to_artifact(r, ds.manifest, audit_cfg.scoring);
      save_artifact(out, "scores", a);
      write_text(out / "report.html", render_scores_html(a.payload));
      std::cout << r.scores.selected.size() << " minority neurons selected";
      if (!r.scores.selected.empty()) std::cout << "; top neuron " << r.scores.selected.front();
      std::cout << "\n";
    } else if (ablate->parsed()) {
      require(!ablate_manifest.empty(), ErrorKind::Config, "--manifest is required");
      ablate_train.finish();
      json echo{{"manifest", ablate_manifest}, {"scoring", scoring_config_to_json(ablate_scoring)},
                {"top_k", ablate_top_k}};
      LoadedDataset ds = stage("load", [&] { return load_dataset(ablate_manifest, true); });
      MsaeParams params = obtain_params(ablate_params, ds, ablate_train.config, seed, out, echo);
      if (ablate_ks.empty()) ablate_ks = {params.levels.front()};
      echo["coarse_ks"] = ablate_ks;
      echo_config(out, "ablate", echo);
      auto runs = stage("ablate", [&] { return run_ablation(ds, params, ablate_ks, ablate_scoring, ablate_top_k); });
      RunArtifact a;
      a.kind = ArtifactKind::Report;
      a.payload = json{{"report_type", "ablation"}, {"runs", ablation_to_json(runs)}};
      save_artifact(out, "ablation", a);
      write_text(out / "ablation.html", render_ablation_html(a.payload));
      for (const auto& run : runs) {
        std::cout << "k=" << run.coarse_k << (run.scores.candidates.empty() ? " EMPTY" : "") << " combined:";
        for (auto id : run.lists.combined) std::cout << " " << id;
        std::cout << "\n";
      }
    } else if (report->parsed()) {
      RunArtifact a = stage("load", [&] { return load_artifact(report_artifact); });
      write_text(out / "report.html", render_artifact_html(a));
    }
  } catch (const Error& e) {
    std::cerr << "raigen: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "raigen: " << e.what() << "\n";
    return 1;
  }
  return 0;
} catch (const Error& e) {
  std::cerr << "raigen: " << e.what() << "\n";
  return exit_code(e.kind());
}
