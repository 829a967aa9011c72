#pragma once

// Matryoshka sparse autoencoder.
//
//   pre      = ReLU(W_enc (r - b_pre) + b_enc)
//   z^(k_i)  = pre restricted to the level-i selection
//   r^(k_i)  = W_dec z^(k_i) + b_pre
//   loss     = sum_i alpha_i * mean_b |r - r^(k_i)|^2 + aux_weight * aux
//
// Selections are nested: whatever is kept at level i is kept at every level j > i.
// The auxiliary term reconstructs the finest-level residual from the aux_k
// largest preactivations among dead neurons.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "raigen/data_io.hpp"
#include "raigen/error.hpp"
#include "raigen/linalg.hpp"

namespace raigen {

using Mask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using LevelIndex = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Sparsifier { PerSampleTopK, BatchTopK };

inline const char* to_string(Sparsifier s) {
  return s == Sparsifier::BatchTopK ? "batch_topk" : "per_sample_topk";
}

inline Sparsifier sparsifier_from_string(const std::string& s) {
  if (s == "batch_topk") return Sparsifier::BatchTopK;
  if (s == "per_sample_topk") return Sparsifier::PerSampleTopK;
  fail(ErrorKind::Config, "unknown sparsifier '" + s + "'");
}

struct MsaeParams {
  Matrix W_enc;  // d x n
  Matrix W_dec;  // n x d
  Vector b_enc;  // d
  Vector b_pre;  // n
  std::vector<unsigned> levels;
  std::vector<double> level_weights;

  Eigen::Index n() const { return W_dec.rows(); }
  Eigen::Index d() const { return W_enc.rows(); }

  void validate() const {
    require(W_enc.rows() >= 1 && W_enc.cols() >= 1, ErrorKind::Shape, "W_enc is empty");
    require(W_dec.rows() == W_enc.cols() && W_dec.cols() == W_enc.rows(), ErrorKind::Shape,
            "W_dec must be n x d to match W_enc d x n");
    require(b_enc.size() == d(), ErrorKind::Shape, "b_enc must have length d");
    require(b_pre.size() == n(), ErrorKind::Shape, "b_pre must have length n");
    validate_levels(levels, level_weights, static_cast<unsigned>(d()));
  }

  static void validate_levels(const std::vector<unsigned>& levels, const std::vector<double>& weights, unsigned d) {
    require(!levels.empty(), ErrorKind::Config, "at least one sparsity level is required");
    require(levels.front() > 0, ErrorKind::Config, "sparsity levels must be positive");
    for (std::size_t i = 1; i < levels.size(); ++i) {
      require(levels[i - 1] < levels[i], ErrorKind::Config, "sparsity levels must be strictly increasing");
    }
    require(levels.back() == d, ErrorKind::Config,
            "the finest sparsity level must equal the latent dim " + std::to_string(d));
    require(weights.size() == levels.size(), ErrorKind::Config, "one level weight per sparsity level is required");
    for (double w : weights) require(w > 0.0 && std::isfinite(w), ErrorKind::Config, "level weights must be > 0");
  }
};

/// Random unit-norm dictionary with the encoder tied to its transpose.
inline MsaeParams init_params(unsigned n, unsigned d, std::vector<unsigned> levels, std::vector<double> weights,
                              std::uint64_t seed) {
  if (weights.empty()) weights.assign(levels.size(), 1.0);
  MsaeParams p;
  p.levels = std::move(levels);
  p.level_weights = std::move(weights);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  p.W_dec = Matrix(n, d);
  for (Eigen::Index i = 0; i < p.W_dec.size(); ++i) p.W_dec.data()[i] = gauss(rng);
  for (Eigen::Index j = 0; j < p.W_dec.cols(); ++j) p.W_dec.col(j).normalize();
  p.W_enc = p.W_dec.transpose();
  p.b_enc = Vector::Zero(d);
  p.b_pre = Vector::Zero(n);
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------
// Selection

namespace detail {

// Strict total order: larger value first, lower index on ties.
struct RankByValue {
  const double* values;
  bool operator()(Eigen::Index a, Eigen::Index b) const {
    if (values[a] != values[b]) return values[a] > values[b];
    return a < b;
  }
};

// Indices of the k largest positive entries of values[0..len), in rank order.
inline std::vector<Eigen::Index> top_positive(const double* values, Eigen::Index len, Eigen::Index k) {
  std::vector<Eigen::Index> idx;
  idx.reserve(static_cast<std::size_t>(len));
  for (Eigen::Index j = 0; j < len; ++j) {
    if (values[j] > 0.0) idx.push_back(j);
  }
  RankByValue cmp{values};
  if (static_cast<Eigen::Index>(idx.size()) > k) {
    std::nth_element(idx.begin(), idx.begin() + k, idx.end(), cmp);
    idx.resize(static_cast<std::size_t>(k));
  }
  std::sort(idx.begin(), idx.end(), cmp);
  return idx;
}

}  // namespace detail

inline Matrix preactivations(const MsaeParams& p, const Matrix& batch) {
  require(batch.cols() == p.n(), ErrorKind::Shape,
          "input width " + std::to_string(batch.cols()) + " does not match model n " + std::to_string(p.n()));
  Matrix pre = (batch.rowwise() - p.b_pre.transpose()) * p.W_enc.transpose();
  pre.rowwise() += p.b_enc.transpose();
  return pre.cwiseMax(0.0);
}

/// Keeps the min(k*B, #positive) globally largest entries, ties by (sample, neuron).
inline Mask batch_topk_select(const Matrix& preacts, unsigned k) {
  require(preacts.rows() >= 1, ErrorKind::Shape, "batch must have at least one row");
  require(k <= preacts.cols(), ErrorKind::Config, "k exceeds latent dim");
  Mask mask = Mask::Constant(preacts.rows(), preacts.cols(), false);
  Eigen::Index budget = static_cast<Eigen::Index>(k) * preacts.rows();
  // Row-major flattening makes flat index order equal (sample, neuron) order.
  auto kept = detail::top_positive(preacts.data(), preacts.size(), budget);
  for (auto flat : kept) mask.data()[flat] = true;
  return mask;
}

/// Per-sample Top-k on positive entries, ties by lower neuron index.
inline Mask per_sample_topk_select(const Matrix& preacts, unsigned k) {
  Mask mask = Mask::Constant(preacts.rows(), preacts.cols(), false);
  for (Eigen::Index b = 0; b < preacts.rows(); ++b) {
    auto kept = detail::top_positive(preacts.row(b).data(), preacts.cols(), k);
    for (auto j : kept) mask(b, j) = true;
  }
  return mask;
}

/// For every entry, the first level index whose selection keeps it; levels.size() when never kept.
inline LevelIndex select_levels(const Matrix& preacts, const std::vector<unsigned>& levels, Sparsifier sparsifier) {
  const int f = static_cast<int>(levels.size());
  LevelIndex first = LevelIndex::Constant(preacts.rows(), preacts.cols(), f);
  auto assign = [&](const double* values, Eigen::Index len, Eigen::Index per_row_budget, int* out) {
    // One ranking serves every level: a level keeps a prefix of the ranked positives.
    auto ranked = detail::top_positive(values, len, per_row_budget * levels.back());
    for (int i = f - 1; i >= 0; --i) {
      auto budget = std::min<std::size_t>(ranked.size(), static_cast<std::size_t>(per_row_budget * levels[i]));
      for (std::size_t r = 0; r < budget; ++r) out[ranked[r]] = i;
    }
  };
  if (sparsifier == Sparsifier::BatchTopK) {
    assign(preacts.data(), preacts.size(), preacts.rows(), first.data());
  } else {
    for (Eigen::Index b = 0; b < preacts.rows(); ++b) assign(preacts.row(b).data(), preacts.cols(), 1, first.row(b).data());
  }
  return first;
}

inline Matrix level_codes(const Matrix& preacts, const LevelIndex& first, int level) {
  return (first.array() <= level).select(preacts, 0.0);
}

// ---------------------------------------------------------------------------
// Single-sample inference

struct LevelCodes {
  Vector preacts;
  std::vector<Vector> codes;
  std::vector<std::vector<unsigned>> active_sets;  // ascending neuron ids
};

inline LevelCodes encode_levels(const Vector& r, const MsaeParams& p) {
  require(r.size() == p.n(), ErrorKind::Shape, "input length does not match model n");
  require(r.allFinite(), ErrorKind::Numeric, "input contains non-finite values");
  Matrix row = r.transpose();
  Matrix pre = preactivations(p, row);
  LevelIndex first = select_levels(pre, p.levels, Sparsifier::PerSampleTopK);
  LevelCodes out;
  out.preacts = pre.row(0).transpose();
  for (int i = 0; i < static_cast<int>(p.levels.size()); ++i) {
    Vector code = Vector::Zero(p.d());
    std::vector<unsigned> active;
    for (Eigen::Index j = 0; j < p.d(); ++j) {
      if (first(0, j) <= i) {
        code[j] = out.preacts[j];
        active.push_back(static_cast<unsigned>(j));
      }
    }
    out.codes.push_back(std::move(code));
    out.active_sets.push_back(std::move(active));
  }
  return out;
}

/// Codes for every row at one level with per-sample Top-k (inference path).
inline Matrix encode_batch(const MsaeParams& p, const Matrix& batch, unsigned k) {
  require(k >= 1 && k <= p.d(), ErrorKind::Config, "coarse k must be in [1, d]");
  Matrix pre = preactivations(p, batch);
  Mask keep = per_sample_topk_select(pre, k);
  return keep.select(pre, 0.0);
}

inline Vector decode(const Vector& z, const MsaeParams& p) {
  require(z.size() == p.d(), ErrorKind::Shape, "code length does not match model d");
  Vector out = p.b_pre;
  for (Eigen::Index j = 0; j < z.size(); ++j) {
    if (z[j] != 0.0) out += z[j] * p.W_dec.col(j);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss and gradients

struct TrainConfig {
  unsigned epochs = 5;
  unsigned batch_size = 4096;
  double learning_rate = 3e-4;
  double aux_weight = 1.0 / 32.0;
  unsigned aux_k = 512;
  unsigned dead_threshold_steps = 1000;
  std::uint64_t seed = 0;
  Sparsifier sparsifier = Sparsifier::BatchTopK;
  unsigned latent_dim = 64;
  std::vector<unsigned> levels = {8, 64};
  std::vector<double> level_weights;  // empty means 1 for every level

  std::vector<double> weights_or_default() const {
    return level_weights.empty() ? std::vector<double>(levels.size(), 1.0) : level_weights;
  }

  void validate() const {
    require(epochs >= 1, ErrorKind::Config, "epochs must be >= 1");
    require(batch_size >= 1, ErrorKind::Config, "batch_size must be >= 1");
    require(learning_rate > 0.0 && std::isfinite(learning_rate), ErrorKind::Config, "learning_rate must be > 0");
    require(aux_weight >= 0.0 && std::isfinite(aux_weight), ErrorKind::Config, "aux_weight must be >= 0");
    MsaeParams::validate_levels(levels, weights_or_default(), latent_dim);
  }
};

struct LossBreakdown {
  std::vector<double> per_level;  // alpha_i * mean_b |r - r^(k_i)|^2
  double aux = 0.0;               // unweighted auxiliary reconstruction loss
  double total = 0.0;
};

struct Gradients {
  Matrix W_enc, W_dec;
  Vector b_enc, b_pre;
};

struct Selection {
  LevelIndex first_level;
  Mask aux;  // empty when no neuron is dead
};

/// Per-sample Top-aux_k among dead neurons.
inline Mask select_aux(const Matrix& preacts, const std::vector<bool>& dead, unsigned aux_k) {
  if (dead.empty() || aux_k == 0 || std::none_of(dead.begin(), dead.end(), [](bool b) { return b; })) return Mask();
  require(static_cast<Eigen::Index>(dead.size()) == preacts.cols(), ErrorKind::Shape, "dead mask length mismatch");
  Matrix dead_only = preacts;
  for (Eigen::Index j = 0; j < preacts.cols(); ++j) {
    if (!dead[j]) dead_only.col(j).setZero();
  }
  return per_sample_topk_select(dead_only, aux_k);
}

inline Selection select(const MsaeParams& p, const Matrix& pre, const TrainConfig& config,
                        const std::vector<bool>& dead) {
  return {select_levels(pre, p.levels, config.sparsifier), select_aux(pre, dead, config.aux_k)};
}

/// Loss for fixed selections. Fills `grad` with the analytic gradient when non-null.
inline LossBreakdown loss_with_selection(const MsaeParams& p, const Matrix& batch, const Matrix& pre,
                                         const Selection& sel, double aux_weight, Gradients* grad) {
  const double inv_b = 1.0 / static_cast<double>(batch.rows());
  const int f = static_cast<int>(p.levels.size());
  LossBreakdown out;
  out.per_level.resize(static_cast<std::size_t>(f));

  Matrix d_pre;
  if (grad) {
    grad->W_dec = Matrix::Zero(p.W_dec.rows(), p.W_dec.cols());
    grad->b_pre = Vector::Zero(p.n());
    d_pre = Matrix::Zero(pre.rows(), pre.cols());
  }

  Matrix residual_finest;
  for (int i = 0; i < f; ++i) {
    Matrix z = level_codes(pre, sel.first_level, i);
    Matrix err = batch - ((z * p.W_dec.transpose()).rowwise() + p.b_pre.transpose());
    out.per_level[i] = p.level_weights[i] * inv_b * err.squaredNorm();
    if (i == f - 1) residual_finest = err;
    if (grad) {
      Matrix g = (-2.0 * p.level_weights[i] * inv_b) * err;  // dL/d r^(k_i)
      grad->W_dec.noalias() += g.transpose() * z;
      grad->b_pre += g.colwise().sum().transpose();
      Matrix dz = g * p.W_dec;
      d_pre += (sel.first_level.array() <= i).select(dz, 0.0);
    }
  }

  if (sel.aux.size() != 0) {
    Matrix z_aux = sel.aux.select(pre, 0.0);
    Matrix diff = residual_finest - z_aux * p.W_dec.transpose();
    out.aux = inv_b * diff.squaredNorm();
    if (grad && aux_weight > 0.0) {
      // diff = r - r^(k_f) - W_dec z_aux, so both reconstructions receive -h.
      Matrix h = (2.0 * aux_weight * inv_b) * diff;
      Matrix z_f = level_codes(pre, sel.first_level, f - 1);
      grad->W_dec.noalias() -= h.transpose() * (z_f + z_aux);
      grad->b_pre -= h.colwise().sum().transpose();
      Matrix dz = -h * p.W_dec;
      d_pre += (sel.first_level.array() <= f - 1).select(dz, 0.0);
      d_pre += sel.aux.select(dz, 0.0);
    }
  }
  out.total = std::accumulate(out.per_level.begin(), out.per_level.end(), 0.0) + aux_weight * out.aux;

  if (grad) {
    // Selected entries are strictly positive, so the ReLU passes their gradient through.
    Matrix centered = batch.rowwise() - p.b_pre.transpose();
    grad->W_enc = d_pre.transpose() * centered;
    grad->b_enc = d_pre.colwise().sum().transpose();
    grad->b_pre -= p.W_enc.transpose() * grad->b_enc;
  }
  return out;
}

inline LossBreakdown msae_loss(const Matrix& batch, const MsaeParams& p, const TrainConfig& config,
                               const std::vector<bool>& dead = {}) {
  require(batch.allFinite(), ErrorKind::Numeric, "batch contains non-finite values");
  Matrix pre = preactivations(p, batch);
  return loss_with_selection(p, batch, pre, select(p, pre, config, dead), config.aux_weight, nullptr);
}

inline LossBreakdown msae_loss_and_gradient(const Matrix& batch, const MsaeParams& p, const TrainConfig& config,
                                            const std::vector<bool>& dead, Gradients& grad) {
  Matrix pre = preactivations(p, batch);
  return loss_with_selection(p, batch, pre, select(p, pre, config, dead), config.aux_weight, &grad);
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  std::vector<double> per_level;
  double aux = 0.0;
  double total = 0.0;
  std::size_t dead_neurons = 0;
};

struct TrainingLog {
  json config;
  double initial_total = 0.0;
  double final_total = 0.0;
  std::size_t steps = 0;
  std::vector<EpochLog> epochs;
};

inline json train_config_to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"aux_weight", c.aux_weight},
              {"aux_k", c.aux_k},
              {"dead_threshold_steps", c.dead_threshold_steps},
              {"seed", c.seed},
              {"sparsifier", to_string(c.sparsifier)},
              {"latent_dim", c.latent_dim},
              {"levels", c.levels},
              {"level_weights", c.weights_or_default()}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.aux_weight = j.value("aux_weight", c.aux_weight);
  c.aux_k = j.value("aux_k", c.aux_k);
  c.dead_threshold_steps = j.value("dead_threshold_steps", c.dead_threshold_steps);
  c.seed = j.value("seed", c.seed);
  c.sparsifier = sparsifier_from_string(j.value("sparsifier", std::string(to_string(c.sparsifier))));
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.levels = j.value("levels", c.levels);
  c.level_weights = j.value("level_weights", c.level_weights);
  return c;
}

inline json training_log_to_json(const TrainingLog& log) {
  json epochs = json::array();
  for (const auto& e : log.epochs) {
    epochs.push_back({{"per_level", e.per_level}, {"aux", e.aux}, {"total", e.total}, {"dead_neurons", e.dead_neurons}});
  }
  return json{{"config", log.config},
              {"initial_total", log.initial_total},
              {"final_total", log.final_total},
              {"steps", log.steps},
              {"epochs", epochs}};
}

/// Mean total loss over the dataset in consecutive chunks of batch_size.
inline double dataset_loss(const Matrix& data, const MsaeParams& p, const TrainConfig& config) {
  double sum = 0.0;
  for (Eigen::Index begin = 0; begin < data.rows(); begin += config.batch_size) {
    Eigen::Index rows = std::min<Eigen::Index>(config.batch_size, data.rows() - begin);
    sum += msae_loss(data.middleRows(begin, rows), p, config).total * static_cast<double>(rows);
  }
  return sum / static_cast<double>(data.rows());
}

namespace detail {

struct AdamState {
  Matrix m, v;
  void init(Eigen::Index rows, Eigen::Index cols) {
    m = Matrix::Zero(rows, cols);
    v = Matrix::Zero(rows, cols);
  }
};

template <typename Param, typename Grad>
void adam_update(Param& param, const Grad& grad, AdamState& s, double lr, std::size_t t) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  auto g = grad.reshaped();
  auto m = s.m.reshaped();
  auto v = s.v.reshaped();
  auto x = param.reshaped();
  m = beta1 * m + (1.0 - beta1) * g;
  v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
  double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  x.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

inline void normalize_decoder(Matrix& W_dec) {
  for (Eigen::Index j = 0; j < W_dec.cols(); ++j) {
    double norm = W_dec.col(j).norm();
    if (norm > 0.0) W_dec.col(j) /= norm;
  }
}

template <typename M>
void snap_to_float(M& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
}

}  // namespace detail

struct TrainResult {
  MsaeParams params;
  TrainingLog log;
};

// Called after every optimizer step with the 1-based step index.
using StepObserver = std::function<void(std::size_t, const MsaeParams&)>;

/// Adam over shuffled mini-batches; decoder columns renormalized after every step.
/// Final parameters are rounded to float32 so a saved artifact reloads bit-identically.
inline TrainResult train_msae(const Matrix& data, const TrainConfig& config, const StepObserver& observer = {}) {
  config.validate();
  require(data.rows() >= static_cast<Eigen::Index>(config.batch_size), ErrorKind::Config,
          "dataset has " + std::to_string(data.rows()) + " rows, fewer than batch_size " +
              std::to_string(config.batch_size));
  require(data.allFinite(), ErrorKind::Numeric, "training data contains non-finite values");

  const auto n = static_cast<unsigned>(data.cols());
  const unsigned d = config.latent_dim;
  MsaeParams p = init_params(n, d, config.levels, config.weights_or_default(), config.seed);
  p.b_pre = data.colwise().mean().transpose();

  TrainResult result;
  result.log.config = train_config_to_json(config);
  result.log.initial_total = dataset_loss(data, p, config);

  detail::AdamState s_enc, s_dec, s_benc, s_bpre;
  s_enc.init(p.W_enc.rows(), p.W_enc.cols());
  s_dec.init(p.W_dec.rows(), p.W_dec.cols());
  s_benc.init(d, 1);
  s_bpre.init(n, 1);

  std::vector<std::size_t> since_active(d, 0);
  std::vector<bool> dead(d, false);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(data.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

  std::size_t step = 0;
  Gradients grad;
  Matrix batch(config.batch_size, n);
  for (unsigned epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog elog;
    elog.per_level.assign(config.levels.size(), 0.0);
    double weight_sum = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      std::size_t rows = std::min<std::size_t>(config.batch_size, order.size() - begin);
      batch.resize(static_cast<Eigen::Index>(rows), n);
      for (std::size_t r = 0; r < rows; ++r) batch.row(static_cast<Eigen::Index>(r)) = data.row(order[begin + r]);

      Matrix pre = preactivations(p, batch);
      Selection sel = select(p, pre, config, dead);
      LossBreakdown loss = loss_with_selection(p, batch, pre, sel, config.aux_weight, &grad);
      ++step;
      if (!std::isfinite(loss.total)) throw TrainingError(step, "loss is not finite");

      detail::adam_update(p.W_enc, grad.W_enc, s_enc, config.learning_rate, step);
      detail::adam_update(p.W_dec, grad.W_dec, s_dec, config.learning_rate, step);
      detail::adam_update(p.b_enc, grad.b_enc, s_benc, config.learning_rate, step);
      detail::adam_update(p.b_pre, grad.b_pre, s_bpre, config.learning_rate, step);
      detail::normalize_decoder(p.W_dec);
      if (observer) observer(step, p);

      const int finest = static_cast<int>(config.levels.size()) - 1;
      for (unsigned j = 0; j < d; ++j) {
        bool fired = (sel.first_level.col(j).array() <= finest).any();
        since_active[j] = fired ? 0 : since_active[j] + 1;
        dead[j] = config.dead_threshold_steps > 0 && since_active[j] >= config.dead_threshold_steps;
      }

      double w = static_cast<double>(rows);
      for (std::size_t i = 0; i < loss.per_level.size(); ++i) elog.per_level[i] += w * loss.per_level[i];
      elog.aux += w * loss.aux;
      elog.total += w * loss.total;
      weight_sum += w;
    }
    for (auto& v : elog.per_level) v /= weight_sum;
    elog.aux /= weight_sum;
    elog.total /= weight_sum;
    elog.dead_neurons = static_cast<std::size_t>(std::count(dead.begin(), dead.end(), true));
    result.log.epochs.push_back(std::move(elog));
  }

  detail::snap_to_float(p.W_enc);
  detail::snap_to_float(p.W_dec);
  detail::snap_to_float(p.b_enc);
  detail::snap_to_float(p.b_pre);
  result.log.steps = step;
  result.log.final_total = dataset_loss(data, p, config);
  result.params = std::move(p);
  return result;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradcheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::vector<std::string> unstable;  // coordinates whose selection flipped at every eps tried
};

namespace detail {

inline double relative_error(double analytic, double numeric) {
  double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / scale;
}

inline bool same_selection(const Selection& a, const Selection& b) {
  if (a.first_level != b.first_level) return false;
  if (a.aux.size() != b.aux.size()) return false;
  return a.aux.size() == 0 || a.aux == b.aux;
}

}  // namespace detail

/// Compares the analytic gradient of the total loss with central differences for every parameter.
inline GradcheckResult finite_diff_gradcheck(const MsaeParams& params, const Matrix& batch, const TrainConfig& config,
                                             double eps, const std::vector<bool>& dead = {}) {
  require(params.n() <= 32 && params.d() <= 32, ErrorKind::Config, "gradcheck is limited to n, d <= 32");
  require(eps >= 1e-5 && eps <= 1e-3, ErrorKind::Config, "gradcheck eps must be in [1e-5, 1e-3]");

  Matrix pre = preactivations(params, batch);
  const Selection base = select(params, pre, config, dead);
  Gradients grad;
  loss_with_selection(params, batch, pre, base, config.aux_weight, &grad);

  GradcheckResult result;
  MsaeParams probe = params;

  auto check = [&](auto& probe_param, const auto& analytic, const std::string& name) {
    for (Eigen::Index i = 0; i < probe_param.size(); ++i) {
      const double original = probe_param.data()[i];
      bool stable = false;
      double numeric = 0.0;
      for (double h = eps; h >= eps / 64.0; h /= 4.0) {
        probe_param.data()[i] = original + h;
        Matrix pre_plus = preactivations(probe, batch);
        Selection sel_plus = select(probe, pre_plus, config, dead);
        double plus = loss_with_selection(probe, batch, pre_plus, base, config.aux_weight, nullptr).total;
        probe_param.data()[i] = original - h;
        Matrix pre_minus = preactivations(probe, batch);
        Selection sel_minus = select(probe, pre_minus, config, dead);
        double minus = loss_with_selection(probe, batch, pre_minus, base, config.aux_weight, nullptr).total;
        probe_param.data()[i] = original;
        if (detail::same_selection(sel_plus, base) && detail::same_selection(sel_minus, base)) {
          numeric = (plus - minus) / (2.0 * h);
          stable = true;
          break;
        }
      }
      if (!stable) {
        result.unstable.push_back(name + "[" + std::to_string(i) + "]");
        continue;
      }
      result.max_relative_error =
          std::max(result.max_relative_error, detail::relative_error(analytic.data()[i], numeric));
      ++result.checked;
    }
  };
  check(probe.W_enc, grad.W_enc, "W_enc");
  check(probe.W_dec, grad.W_dec, "W_dec");
  check(probe.b_enc, grad.b_enc, "b_enc");
  check(probe.b_pre, grad.b_pre, "b_pre");
  return result;
}

// ---------------------------------------------------------------------------
// Serialization

inline RunArtifact params_to_artifact(const MsaeParams& p) {
  RunArtifact a;
  a.kind = ArtifactKind::Params;
  a.payload = json{{"n", p.n()}, {"d", p.d()}, {"levels", p.levels}, {"level_weights", p.level_weights}};
  a.attachments["W_enc"] = to_tensor(p.W_enc);
  a.attachments["W_dec"] = to_tensor(p.W_dec);
  a.attachments["b_enc"] = to_tensor(p.b_enc);
  a.attachments["b_pre"] = to_tensor(p.b_pre);
  return a;
}

inline MsaeParams params_from_artifact(const RunArtifact& a) {
  require(a.kind == ArtifactKind::Params, ErrorKind::Format, "artifact is not a params artifact");
  for (const char* name : {"W_enc", "W_dec", "b_enc", "b_pre"}) {
    require(a.attachments.count(name) == 1, ErrorKind::Format, std::string("params artifact lacks tensor ") + name);
  }
  MsaeParams p;
  p.W_enc = to_matrix(a.attachments.at("W_enc"));
  p.W_dec = to_matrix(a.attachments.at("W_dec"));
  p.b_enc = to_vector(a.attachments.at("b_enc"));
  p.b_pre = to_vector(a.attachments.at("b_pre"));
  p.levels = a.payload.at("levels").get<std::vector<unsigned>>();
  p.level_weights = a.payload.at("level_weights").get<std::vector<double>>();
  require(a.payload.at("n").get<Eigen::Index>() == p.n() && a.payload.at("d").get<Eigen::Index>() == p.d(),
          ErrorKind::Shape, "params payload dims disagree with tensors");
  p.validate();
  return p;
}

}  // namespace raigen
