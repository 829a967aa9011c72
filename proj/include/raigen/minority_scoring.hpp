#pragma once

// Minority-attribute scoring over coarse-level neuron activations.
//
//   nu_i  = fraction of samples whose spatially averaged activation is > 0
//   mu_i  = activation-weighted mean embedding, mu_D = plain mean embedding
//   d_i   = 1 - cos(mu_i, mu_D)
//   s_i   = minmax(d)_i * (1 - minmax(nu)_i)

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "raigen/data_io.hpp"
#include "raigen/error.hpp"
#include "raigen/linalg.hpp"
#include "raigen/msae.hpp"

namespace raigen {

struct SpatialEntry {
  std::uint32_t neuron;
  double value;
};

struct ActivationTable {
  Matrix per_sample_neuron;  // N x d, spatial means of coarse codes
  // Optional per-(sample, position) sparse coarse codes, index s * h * w + y * w + x.
  std::optional<std::vector<std::vector<SpatialEntry>>> spatial_maps;
  std::vector<std::string> sample_ids;
  std::size_t h = 1, w = 1;

  std::size_t samples() const { return static_cast<std::size_t>(per_sample_neuron.rows()); }
  std::size_t neurons() const { return static_cast<std::size_t>(per_sample_neuron.cols()); }
};

struct EmbeddingSet {
  Matrix vectors;  // N x m
  std::string model_tag;
};

inline std::vector<std::string> default_sample_ids(std::size_t n) {
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = std::to_string(i);
  return ids;
}

/// Encodes every spatial position with per-sample Top-k at `coarse_k` and averages per sample.
/// `reps` is N x h x w x n (or N x n, read as h = w = 1).
inline ActivationTable aggregate_neuron_activations(const TensorFile& reps, const MsaeParams& params, unsigned coarse_k,
                                                    bool keep_maps, std::vector<std::string> sample_ids = {}) {
  reps.validate();
  require(reps.rank() == 2 || reps.rank() == 4, ErrorKind::Shape,
          "representations must be N x n or N x h x w x n, got rank " + std::to_string(reps.rank()));
  const std::size_t n_samples = reps.shape[0];
  const std::size_t h = reps.rank() == 4 ? reps.shape[1] : 1;
  const std::size_t w = reps.rank() == 4 ? reps.shape[2] : 1;
  const std::size_t width = reps.shape.back();
  require(static_cast<Eigen::Index>(width) == params.n(), ErrorKind::Shape,
          "representation width " + std::to_string(width) + " does not match model n " + std::to_string(params.n()));
  if (sample_ids.empty()) sample_ids = default_sample_ids(n_samples);
  require(sample_ids.size() == n_samples, ErrorKind::Shape, "sample id count does not match representations");

  const std::size_t positions = h * w;
  ActivationTable table;
  table.h = h;
  table.w = w;
  table.sample_ids = std::move(sample_ids);
  table.per_sample_neuron = Matrix::Zero(static_cast<Eigen::Index>(n_samples), params.d());
  if (keep_maps) table.spatial_maps.emplace(n_samples * positions);

  Matrix rows(static_cast<Eigen::Index>(positions), static_cast<Eigen::Index>(width));
  for (std::size_t s = 0; s < n_samples; ++s) {
    const float* src = reps.data.data() + s * positions * width;
    for (Eigen::Index i = 0; i < rows.size(); ++i) rows.data()[i] = src[i];
    Matrix codes = encode_batch(params, rows, coarse_k);
    table.per_sample_neuron.row(static_cast<Eigen::Index>(s)) =
        codes.colwise().sum() / static_cast<double>(positions);
    if (keep_maps) {
      for (std::size_t pos = 0; pos < positions; ++pos) {
        auto& cell = (*table.spatial_maps)[s * positions + pos];
        for (Eigen::Index j = 0; j < codes.cols(); ++j) {
          double v = codes(static_cast<Eigen::Index>(pos), j);
          if (v > 0.0) cell.push_back({static_cast<std::uint32_t>(j), v});
        }
      }
    }
  }
  return table;
}

inline Vector activation_frequency(const ActivationTable& table) {
  require(table.samples() >= 1, ErrorKind::Shape, "activation table has no samples");
  Vector nu(table.per_sample_neuron.cols());
  for (Eigen::Index i = 0; i < nu.size(); ++i) {
    nu[i] = static_cast<double>((table.per_sample_neuron.col(i).array() > 0.0).count()) /
            static_cast<double>(table.samples());
  }
  return nu;
}

struct Centroids {
  Matrix per_neuron;          // d x m; rows of undefined neurons are zero
  std::vector<bool> defined;  // false when the neuron's total activation is zero
  Vector global;              // m
};

inline Centroids semantic_centroids(const ActivationTable& table, const EmbeddingSet& embeddings) {
  require(static_cast<std::size_t>(embeddings.vectors.rows()) == table.samples(), ErrorKind::Shape,
          "embedding rows " + std::to_string(embeddings.vectors.rows()) + " do not match samples " +
              std::to_string(table.samples()));
  require(embeddings.vectors.allFinite(), ErrorKind::Numeric, "embeddings contain non-finite values");
  Centroids c;
  const Matrix& a = table.per_sample_neuron;
  Matrix weighted = a.transpose() * embeddings.vectors;
  Vector totals = a.colwise().sum().transpose();
  c.per_neuron = Matrix::Zero(weighted.rows(), weighted.cols());
  c.defined.assign(static_cast<std::size_t>(weighted.rows()), false);
  for (Eigen::Index i = 0; i < weighted.rows(); ++i) {
    if (totals[i] > 0.0) {
      c.per_neuron.row(i) = weighted.row(i) / totals[i];
      c.defined[i] = true;
    }
  }
  c.global = embeddings.vectors.colwise().mean().transpose();
  return c;
}

inline double cosine_distance(const Vector& a, const Vector& b) { return 1.0 - cosine_similarity(a, b); }

/// d_i = 1 - cos(mu_i, mu_D); undefined centroids get 0.
inline Vector distinctiveness(const Centroids& c) {
  require(c.global.norm() > 0.0, ErrorKind::Numeric, "global embedding centroid has zero norm");
  Vector d = Vector::Zero(c.per_neuron.rows());
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    if (c.defined[i]) d[i] = std::clamp(cosine_distance(c.per_neuron.row(i).transpose(), c.global), 0.0, 2.0);
  }
  return d;
}

/// (v - min) / (max - min); a constant vector maps to all zeros.
inline Vector minmax_normalize(const Vector& v) {
  require(v.size() >= 1, ErrorKind::Shape, "cannot normalize an empty vector");
  double lo = v.minCoeff(), hi = v.maxCoeff();
  if (hi == lo) return Vector::Zero(v.size());
  return ((v.array() - lo) / (hi - lo)).matrix();
}

inline Vector minority_score(const Vector& d_norm, const Vector& nu_norm) {
  require(d_norm.size() == nu_norm.size(), ErrorKind::Shape, "score inputs differ in length");
  return d_norm.cwiseProduct((1.0 - nu_norm.array()).matrix());
}

/// Linear-interpolation percentile (numpy's default definition), p in [0, 100].
inline double percentile(std::vector<double> values, double p) {
  require(!values.empty(), ErrorKind::Shape, "percentile of an empty set");
  std::sort(values.begin(), values.end());
  double pos = p / 100.0 * static_cast<double>(values.size() - 1);
  auto lo = static_cast<std::size_t>(std::floor(pos));
  auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

struct ScoringConfig {
  double percentile = 90.0;
  double dist_threshold = 0.003;
  bool percentile_over_active_only = false;
  unsigned top_count = 10;
};

struct NeuronScoreSet {
  Vector nu_raw, nu_norm, d_raw, d_norm, score;
  Centroids centroids;
  std::vector<std::size_t> rank;  // 1-based, by descending score then ascending id
  double gate = 0.0;              // score percentile used for gating
  std::vector<std::size_t> candidates;
  std::vector<std::size_t> selected;

  std::size_t size() const { return static_cast<std::size_t>(score.size()); }
};

/// Neuron ids ordered by descending value, ties by ascending id.
inline std::vector<std::size_t> order_descending(const Vector& v) {
  std::vector<std::size_t> ids(static_cast<std::size_t>(v.size()));
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  return ids;
}

/// Greedy redundancy pruning over `candidates` (any order): walk in descending score,
/// keep the current neuron and drop every remaining one within `dist_threshold`.
inline std::vector<std::size_t> prune_redundant(const std::vector<std::size_t>& candidates, const Vector& score,
                                                const Matrix& centroids, double dist_threshold) {
  std::vector<std::size_t> order = candidates;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return score[a] != score[b] ? score[a] > score[b] : a < b;
  });
  std::vector<char> removed(order.size(), 0);
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (removed[i]) continue;
    kept.push_back(order[i]);
    Vector ci = centroids.row(static_cast<Eigen::Index>(order[i])).transpose();
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      if (removed[j]) continue;
      Vector cj = centroids.row(static_cast<Eigen::Index>(order[j])).transpose();
      if (cosine_distance(ci, cj) < dist_threshold) removed[j] = 1;
    }
  }
  return kept;
}

/// Percentile gate over scores (candidates need a defined centroid and s above the gate), then pruning.
inline std::vector<std::size_t> select_minority_neurons(NeuronScoreSet& scores, double pct, double dist_threshold,
                                                        bool over_active_only = false) {
  require(pct >= 0.0 && pct < 100.0, ErrorKind::Config, "percentile must be in [0, 100)");
  require(dist_threshold >= 0.0, ErrorKind::Config, "distance threshold must be >= 0");
  std::vector<double> pool;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!over_active_only || scores.centroids.defined[i]) pool.push_back(scores.score[i]);
  }
  scores.candidates.clear();
  scores.selected.clear();
  if (pool.empty()) return {};
  scores.gate = percentile(pool, pct);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores.centroids.defined[i] && scores.score[i] > scores.gate) scores.candidates.push_back(i);
  }
  scores.selected = prune_redundant(scores.candidates, scores.score, scores.centroids.per_neuron, dist_threshold);
  return scores.selected;
}

/// Full scoring pass: frequency, centroids, distinctiveness, normalized score, ranking and selection.
inline NeuronScoreSet score_neurons(const ActivationTable& table, const EmbeddingSet& embeddings,
                                    const ScoringConfig& config) {
  NeuronScoreSet s;
  s.nu_raw = activation_frequency(table);
  s.centroids = semantic_centroids(table, embeddings);
  s.d_raw = distinctiveness(s.centroids);
  s.nu_norm = minmax_normalize(s.nu_raw);
  s.d_norm = minmax_normalize(s.d_raw);
  s.score = minority_score(s.d_norm, s.nu_norm);
  auto order = order_descending(s.score);
  s.rank.assign(order.size(), 0);
  for (std::size_t r = 0; r < order.size(); ++r) s.rank[order[r]] = r + 1;
  select_minority_neurons(s, config.percentile, config.dist_threshold, config.percentile_over_active_only);
  return s;
}

struct TopSample {
  std::size_t index = 0;
  std::string sample_id;
  double activation = 0.0;
  Matrix heatmap;  // h x w raw activations of the neuron
};

inline std::vector<TopSample> top_activating_samples(const ActivationTable& table, std::size_t neuron,
                                                     std::size_t count) {
  require(neuron < table.neurons(), ErrorKind::Shape, "neuron " + std::to_string(neuron) + " out of range");
  require(count >= 1, ErrorKind::Config, "top sample count must be >= 1");
  require(table.spatial_maps.has_value(), ErrorKind::Capability,
          "spatial maps were not retained; re-run aggregation with heatmaps enabled");
  Vector column = table.per_sample_neuron.col(static_cast<Eigen::Index>(neuron));
  auto order = order_descending(column);
  order.resize(std::min(count, order.size()));
  const std::size_t positions = table.h * table.w;
  std::vector<TopSample> out;
  for (std::size_t s : order) {
    TopSample t;
    t.index = s;
    t.sample_id = table.sample_ids[s];
    t.activation = column[static_cast<Eigen::Index>(s)];
    t.heatmap = Matrix::Zero(static_cast<Eigen::Index>(table.h), static_cast<Eigen::Index>(table.w));
    for (std::size_t pos = 0; pos < positions; ++pos) {
      for (const auto& e : (*table.spatial_maps)[s * positions + pos]) {
        if (e.neuron == neuron) t.heatmap.data()[pos] = e.value;
      }
    }
    out.push_back(std::move(t));
  }
  return out;
}

struct AblationLists {
  std::vector<std::size_t> frequency_only;        // ascending nu
  std::vector<std::size_t> distinctiveness_only;  // descending d
  std::vector<std::size_t> combined;              // descending s
};

/// Three rankings over the same candidates (neurons with a defined centroid), truncated to top_k.
inline AblationLists ablate_score_variants(const NeuronScoreSet& s, std::size_t top_k) {
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.centroids.defined[i]) pool.push_back(i);
  }
  auto ranked = [&](auto better) {
    std::vector<std::size_t> ids = pool;
    std::stable_sort(ids.begin(), ids.end(), better);
    if (ids.size() > top_k) ids.resize(top_k);
    return ids;
  };
  AblationLists out;
  out.frequency_only = ranked([&](std::size_t a, std::size_t b) { return s.nu_raw[a] < s.nu_raw[b]; });
  out.distinctiveness_only = ranked([&](std::size_t a, std::size_t b) { return s.d_raw[a] > s.d_raw[b]; });
  out.combined = ranked([&](std::size_t a, std::size_t b) { return s.score[a] > s.score[b]; });
  return out;
}

inline AblationLists ablate_score_variants(const ActivationTable& table, const EmbeddingSet& embeddings,
                                           std::size_t top_k, const ScoringConfig& config = {}) {
  return ablate_score_variants(score_neurons(table, embeddings, config), top_k);
}

// ---------------------------------------------------------------------------
// Serialization

inline json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline json matrix_rows_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    rows.push_back(std::vector<double>(m.row(r).data(), m.row(r).data() + m.cols()));
  }
  return rows;
}

inline json top_samples_json(const std::vector<TopSample>& samples) {
  json out = json::array();
  for (const auto& t : samples) {
    out.push_back({{"index", t.index}, {"sample_id", t.sample_id}, {"activation", t.activation},
                   {"heatmap", matrix_rows_json(t.heatmap)}});
  }
  return out;
}

inline json neuron_scores_json(const NeuronScoreSet& s) {
  json neurons = json::array();
  for (std::size_t i = 0; i < s.size(); ++i) {
    neurons.push_back({{"id", i},
                       {"nu_raw", s.nu_raw[i]},
                       {"nu_norm", s.nu_norm[i]},
                       {"d_raw", s.d_raw[i]},
                       {"d_norm", s.d_norm[i]},
                       {"score", s.score[i]},
                       {"rank", s.rank[i]},
                       {"centroid_defined", static_cast<bool>(s.centroids.defined[i])}});
  }
  return neurons;
}

}  // namespace raigen
