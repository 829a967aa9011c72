#pragma once

// Aligning learned latents with ground-truth features and measuring whether
// rarely firing latents pick up rare features.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include "raigen/error.hpp"
#include "raigen/linalg.hpp"

namespace raigen {

enum class SimilarityKind { Cosine, Correlation };

inline const char* to_string(SimilarityKind k) { return k == SimilarityKind::Cosine ? "cosine" : "correlation"; }

inline SimilarityKind similarity_from_string(const std::string& s) {
  if (s == "cosine") return SimilarityKind::Cosine;
  if (s == "correlation") return SimilarityKind::Correlation;
  fail(ErrorKind::Config, "unknown similarity '" + s + "'");
}

/// Similarity between every latent activation column and every feature activation column.
/// Columns with zero norm (after centering, for correlation) have similarity 0.
inline Matrix activation_similarity_matrix(const Matrix& latent_acts, const Matrix& true_acts,
                                           SimilarityKind kind = SimilarityKind::Cosine) {
  require(latent_acts.rows() == true_acts.rows(), ErrorKind::Shape,
          "latent activations have " + std::to_string(latent_acts.rows()) + " rows, feature activations " +
              std::to_string(true_acts.rows()));
  require(latent_acts.rows() >= 2, ErrorKind::Shape, "at least two samples are required");
  Matrix a = latent_acts;
  Matrix b = true_acts;
  if (kind == SimilarityKind::Correlation) {
    a.rowwise() -= a.colwise().mean();
    b.rowwise() -= b.colwise().mean();
  }
  Vector na = a.colwise().norm().transpose();
  Vector nb = b.colwise().norm().transpose();
  Matrix sim = a.transpose() * b;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    for (Eigen::Index j = 0; j < sim.cols(); ++j) {
      sim(i, j) = (na[i] == 0.0 || nb[j] == 0.0) ? 0.0 : sim(i, j) / (na[i] * nb[j]);
    }
  }
  return sim;
}

/// Cost matrix latent x feature, cost = 1 - similarity.
inline Matrix activation_similarity(const Matrix& latent_acts, const Matrix& true_acts,
                                    SimilarityKind kind = SimilarityKind::Cosine) {
  Matrix sim = activation_similarity_matrix(latent_acts, true_acts, kind);
  return (1.0 - sim.array()).matrix();
}

// ---------------------------------------------------------------------------
// Hungarian assignment

struct Assignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (row, col), ascending row
  double total_cost = 0.0;
};

namespace detail {

// Shortest augmenting path Hungarian on a square matrix. Returns the row->col
// permutation and the dual potentials (u for rows, v for cols).
struct SquareSolution {
  std::vector<std::size_t> row_to_col;
  std::vector<double> u, v;
};

inline SquareSolution hungarian_square(const Matrix& c) {
  const std::size_t n = static_cast<std::size_t>(c.rows());
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based with a virtual column 0, after the classic e-maxx formulation.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      std::size_t i0 = p[j0], j1 = 0;
      double delta = inf;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = c(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  SquareSolution sol;
  sol.row_to_col.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) sol.row_to_col[p[j] - 1] = j - 1;
  sol.u.assign(u.begin() + 1, u.end());
  sol.v.assign(v.begin() + 1, v.end());
  return sol;
}

// Among all optimal permutations (perfect matchings on zero reduced-cost
// edges), picks the lexicographically smallest row->col vector.
inline std::vector<std::size_t> lexicographic_optimum(const Matrix& c, const SquareSolution& sol) {
  const std::size_t n = sol.row_to_col.size();
  double scale = std::max(1.0, c.cwiseAbs().maxCoeff());
  const double tol = 1e-9 * scale;
  std::vector<std::vector<char>> tight(n, std::vector<char>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      tight[i][j] = c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - sol.u[i] - sol.v[j] <= tol;
    }
  }
  std::vector<std::size_t> row_to_col = sol.row_to_col;
  std::vector<std::size_t> col_to_row(n);
  for (std::size_t i = 0; i < n; ++i) col_to_row[row_to_col[i]] = i;

  constexpr std::size_t kFree = std::numeric_limits<std::size_t>::max();
  std::vector<char> visited(n);
  // Rows <= locked keep their columns; augment from `row` into any free column.
  std::function<bool(std::size_t, std::size_t)> augment = [&](std::size_t row, std::size_t locked) {
    for (std::size_t j = 0; j < n; ++j) {
      if (!tight[row][j] || visited[j]) continue;
      std::size_t owner = col_to_row[j];
      if (owner != kFree && owner <= locked) continue;
      visited[j] = 1;
      if (owner == kFree || augment(owner, locked)) {
        row_to_col[row] = j;
        col_to_row[j] = row;
        return true;
      }
    }
    return false;
  };

  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (!tight[i][j]) continue;
      if (row_to_col[i] == j) break;
      std::size_t owner = col_to_row[j];
      if (owner < i) continue;
      auto saved_rc = row_to_col;
      auto saved_cr = col_to_row;
      std::size_t freed = row_to_col[i];
      row_to_col[i] = j;
      col_to_row[j] = i;
      col_to_row[freed] = kFree;
      row_to_col[owner] = kFree;
      std::fill(visited.begin(), visited.end(), 0);
      if (augment(owner, i)) break;
      row_to_col = std::move(saved_rc);
      col_to_row = std::move(saved_cr);
    }
  }
  return row_to_col;
}

}  // namespace detail

/// Minimum-cost one-to-one assignment of size min(R, C). Among optimal
/// assignments the lexicographically smallest row->col vector wins, with
/// "unassigned" ordered after every real column.
inline Assignment hungarian_assign(const Matrix& cost) {
  require(cost.allFinite(), ErrorKind::Numeric, "cost matrix contains non-finite entries");
  Assignment out;
  if (cost.rows() == 0 || cost.cols() == 0) return out;
  const Eigen::Index s = std::max(cost.rows(), cost.cols());
  Matrix square = Matrix::Zero(s, s);
  square.topLeftCorner(cost.rows(), cost.cols()) = cost;
  auto sol = detail::hungarian_square(square);
  auto perm = detail::lexicographic_optimum(square, sol);
  for (Eigen::Index r = 0; r < cost.rows(); ++r) {
    auto c = static_cast<Eigen::Index>(perm[static_cast<std::size_t>(r)]);
    if (c < cost.cols()) {
      out.pairs.emplace_back(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
      out.total_cost += cost(r, c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rank statistics

/// Ranks starting at 1; tied values share their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size(), ErrorKind::Shape, "correlation inputs differ in length");
  require(x.size() >= 2, ErrorKind::Shape, "correlation needs at least two points");
  const double n = static_cast<double>(x.size());
  double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  require(sxx > 0.0 && syy > 0.0, ErrorKind::Numeric, "correlation undefined for a constant vector");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline double spearman_rho(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size(), ErrorKind::Shape, "spearman inputs differ in length");
  require(x.size() >= 2, ErrorKind::Shape, "spearman needs at least two points");
  return pearson(average_ranks(x), average_ranks(y));
}

// ---------------------------------------------------------------------------
// Match results and rarity statistics

struct MatchResult {
  // (latent id, feature id) pairs in original index space, ascending latent id.
  std::vector<std::pair<std::size_t, std::size_t>> assignment;
  std::vector<std::size_t> matched_latents;  // latents admitted by the similarity floor
  Matrix cost_matrix;                        // matched_latents.size() x F
  std::vector<double> latent_firing_rates;   // all latents
  std::vector<double> true_feature_frequencies;
  std::uint64_t seed = 0;
};

struct MatchConfig {
  SimilarityKind similarity = SimilarityKind::Cosine;
  double similarity_floor = 0.1;
};

/// Fraction of rows with a strictly positive entry, per column.
inline std::vector<double> firing_rates(const Matrix& acts) {
  std::vector<double> out(static_cast<std::size_t>(acts.cols()));
  for (Eigen::Index j = 0; j < acts.cols(); ++j) {
    out[j] = static_cast<double>((acts.col(j).array() > 0.0).count()) / static_cast<double>(acts.rows());
  }
  return out;
}

inline MatchResult match_latents(const Matrix& latent_acts, const Matrix& true_acts, const MatchConfig& config,
                                 std::uint64_t seed = 0) {
  Matrix sim = activation_similarity_matrix(latent_acts, true_acts, config.similarity);
  MatchResult m;
  m.seed = seed;
  m.latent_firing_rates = firing_rates(latent_acts);
  m.true_feature_frequencies = firing_rates(true_acts);
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    if (sim.cols() > 0 && sim.row(i).maxCoeff() > config.similarity_floor) {
      m.matched_latents.push_back(static_cast<std::size_t>(i));
    }
  }
  m.cost_matrix = Matrix(static_cast<Eigen::Index>(m.matched_latents.size()), sim.cols());
  for (std::size_t r = 0; r < m.matched_latents.size(); ++r) {
    m.cost_matrix.row(static_cast<Eigen::Index>(r)) =
        (1.0 - sim.row(static_cast<Eigen::Index>(m.matched_latents[r])).array()).matrix();
  }
  Assignment a = hungarian_assign(m.cost_matrix);
  for (auto [row, col] : a.pairs) m.assignment.emplace_back(m.matched_latents[row], col);
  return m;
}

struct RarityProbability {
  double p_least_active = 0.0;
  double p_random_baseline = 0.0;
  std::size_t n_least_active = 0;
};

/// Bottom-ceil(q*M) of the M assigned pairs by latent firing rate versus bottom-ceil(q*M) by
/// true feature frequency. The baseline is the exact expectation under uniform sampling.
inline RarityProbability rarity_conditional_probability(const MatchResult& match, double q) {
  require(q > 0.0 && q < 1.0, ErrorKind::Config, "quantile q must be in (0, 1)");
  const std::size_t m = match.assignment.size();
  require(m >= 1, ErrorKind::Config, "assignment is empty");
  const auto count = static_cast<std::size_t>(std::ceil(q * static_cast<double>(m) - 1e-9));

  std::vector<std::size_t> by_rate(m), by_freq(m);
  std::iota(by_rate.begin(), by_rate.end(), 0);
  std::iota(by_freq.begin(), by_freq.end(), 0);
  std::sort(by_rate.begin(), by_rate.end(), [&](std::size_t a, std::size_t b) {
    auto la = match.assignment[a].first, lb = match.assignment[b].first;
    double ra = match.latent_firing_rates[la], rb = match.latent_firing_rates[lb];
    return ra != rb ? ra < rb : la < lb;
  });
  std::sort(by_freq.begin(), by_freq.end(), [&](std::size_t a, std::size_t b) {
    auto fa = match.assignment[a].second, fb = match.assignment[b].second;
    double ra = match.true_feature_frequencies[fa], rb = match.true_feature_frequencies[fb];
    return ra != rb ? ra < rb : fa < fb;
  });
  std::vector<char> rare(m, 0);
  for (std::size_t i = 0; i < count; ++i) rare[by_freq[i]] = 1;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < count; ++i) hits += rare[by_rate[i]];

  RarityProbability out;
  out.n_least_active = count;
  out.p_least_active = static_cast<double>(hits) / static_cast<double>(count);
  out.p_random_baseline = static_cast<double>(count) / static_cast<double>(m);
  return out;
}

/// Spearman correlation between latent firing rates and matched feature frequencies.
inline double matched_spearman(const MatchResult& match) {
  std::vector<double> rates, freqs;
  for (auto [latent, feature] : match.assignment) {
    rates.push_back(match.latent_firing_rates[latent]);
    freqs.push_back(match.true_feature_frequencies[feature]);
  }
  return spearman_rho(rates, freqs);
}

inline RunArtifact match_to_artifact(const MatchResult& m) {
  RunArtifact a;
  a.kind = ArtifactKind::MatchResult;
  json pairs = json::array();
  for (auto [l, f] : m.assignment) pairs.push_back({l, f});
  a.payload = json{{"assignment", pairs},
                   {"matched_latents", m.matched_latents},
                   {"latent_firing_rates", m.latent_firing_rates},
                   {"true_feature_frequencies", m.true_feature_frequencies},
                   {"seed", m.seed}};
  if (m.cost_matrix.size() > 0) a.attachments["cost_matrix"] = to_tensor(m.cost_matrix);
  return a;
}

}  // namespace raigen
