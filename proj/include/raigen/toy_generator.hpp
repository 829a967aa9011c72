#pragma once

// Hierarchical synthetic features with a long-tailed frequency profile.
//
// Nodes are laid out breadth-first. A node at level l fires with probability
// base_prob * prob_decay^l conditional on its parent firing, so marginal
// frequencies shrink geometrically with depth. Sibling sets may be marked
// exclusive, in which case at most one sibling fires per sample.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "raigen/error.hpp"
#include "raigen/linalg.hpp"

namespace raigen {

struct ToyConfig {
  unsigned depth = 3;
  unsigned branching = 3;
  unsigned dim = 64;
  unsigned root_count = 1;
  double base_prob = 0.8;
  double prob_decay = 0.6;
  // Multiplies each node's probability by a factor drawn from [1 - jitter, 1].
  double prob_jitter = 0.0;
  double exclusive_fraction = 0.0;
  double magnitude_lo = 0.5;
  double magnitude_hi = 1.5;

  void validate() const {
    require(depth >= 1, ErrorKind::Config, "toy depth must be >= 1");
    require(branching >= 2, ErrorKind::Config, "toy branching must be >= 2");
    require(dim >= 1, ErrorKind::Config, "toy dim must be >= 1");
    require(root_count >= 1, ErrorKind::Config, "toy root_count must be >= 1");
    require(base_prob > 0.0 && base_prob <= 1.0, ErrorKind::Config, "toy base_prob must be in (0, 1]");
    require(prob_decay > 0.0 && prob_decay <= 1.0, ErrorKind::Config, "toy prob_decay must be in (0, 1]");
    require(prob_jitter >= 0.0 && prob_jitter < 1.0, ErrorKind::Config, "toy prob_jitter must be in [0, 1)");
    require(exclusive_fraction >= 0.0 && exclusive_fraction <= 1.0, ErrorKind::Config,
            "toy exclusive_fraction must be in [0, 1]");
    require(magnitude_lo > 0.0 && magnitude_lo <= magnitude_hi, ErrorKind::Config,
            "toy magnitude range must satisfy 0 < lo <= hi");
  }

  std::size_t feature_count() const {
    std::size_t per_root = 0;
    std::size_t level = 1;
    for (unsigned l = 0; l <= depth; ++l) {
      per_root += level;
      level *= branching;
    }
    return per_root * root_count;
  }
};

struct FeatureNode {
  unsigned id = 0;
  unsigned level = 0;
  Vector direction;
  std::optional<unsigned> parent;
  std::vector<unsigned> children;
  double activation_prob = 1.0;
  std::optional<unsigned> exclusive_group;
  double magnitude_lo = 1.0;
  double magnitude_hi = 1.0;
};

struct FeatureTree {
  std::vector<FeatureNode> nodes;
  unsigned dim = 0;
  std::vector<unsigned> root_ids;
  // exclusive group id -> member ids (always a full sibling set)
  std::vector<std::vector<unsigned>> exclusive_groups;

  std::size_t size() const { return nodes.size(); }

  void validate() const {
    for (const auto& node : nodes) {
      require(std::abs(node.direction.norm() - 1.0) < 1e-9, ErrorKind::Validation,
              "feature " + std::to_string(node.id) + " direction is not unit norm");
      require(node.activation_prob > 0.0 && node.activation_prob <= 1.0, ErrorKind::Validation,
              "feature " + std::to_string(node.id) + " activation_prob out of range");
      require(node.magnitude_lo > 0.0 && node.magnitude_lo <= node.magnitude_hi, ErrorKind::Validation,
              "feature " + std::to_string(node.id) + " magnitude range invalid");
      if (node.parent) {
        // Breadth-first ids make parent < child, which rules out cycles.
        require(*node.parent < node.id, ErrorKind::Validation,
                "feature " + std::to_string(node.id) + " has a non-preceding parent");
      }
    }
  }
};

inline FeatureTree build_tree(const ToyConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  FeatureTree tree;
  tree.dim = config.dim;

  auto make_node = [&](unsigned level, std::optional<unsigned> parent) {
    FeatureNode node;
    node.id = static_cast<unsigned>(tree.nodes.size());
    node.level = level;
    node.parent = parent;
    node.direction = Vector(config.dim);
    do {
      for (unsigned i = 0; i < config.dim; ++i) node.direction[i] = gauss(rng);
    } while (node.direction.norm() == 0.0);
    node.direction.normalize();
    double jitter = config.prob_jitter > 0.0 ? 1.0 - config.prob_jitter * unit(rng) : 1.0;
    node.activation_prob = config.base_prob * std::pow(config.prob_decay, level) * jitter;
    node.magnitude_lo = config.magnitude_lo;
    node.magnitude_hi = config.magnitude_hi;
    tree.nodes.push_back(std::move(node));
    return tree.nodes.back().id;
  };

  std::vector<unsigned> frontier;
  for (unsigned r = 0; r < config.root_count; ++r) {
    unsigned id = make_node(0, std::nullopt);
    tree.root_ids.push_back(id);
    frontier.push_back(id);
  }
  for (unsigned level = 1; level <= config.depth; ++level) {
    std::vector<unsigned> next;
    for (unsigned parent : frontier) {
      bool exclusive = config.exclusive_fraction > 0.0 && unit(rng) < config.exclusive_fraction;
      std::vector<unsigned> siblings;
      for (unsigned b = 0; b < config.branching; ++b) {
        unsigned id = make_node(level, parent);
        siblings.push_back(id);
        next.push_back(id);
      }
      tree.nodes[parent].children = siblings;
      if (exclusive) {
        auto group = static_cast<unsigned>(tree.exclusive_groups.size());
        for (unsigned id : siblings) tree.nodes[id].exclusive_group = group;
        tree.exclusive_groups.push_back(std::move(siblings));
      }
    }
    frontier = std::move(next);
  }
  return tree;
}

struct ToyDataset {
  Matrix observed;          // N x dim
  Matrix true_activations;  // N x F, nonnegative magnitudes
  std::vector<std::uint64_t> feature_frequencies;
};

inline ToyDataset sample_dataset(const FeatureTree& tree, std::size_t sample_count, std::uint64_t seed) {
  require(sample_count >= 1, ErrorKind::Config, "sample count must be >= 1");
  require(!tree.nodes.empty(), ErrorKind::Config, "feature tree is empty");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const std::size_t features = tree.size();
  ToyDataset ds;
  ds.observed = Matrix::Zero(static_cast<Eigen::Index>(sample_count), tree.dim);
  ds.true_activations = Matrix::Zero(static_cast<Eigen::Index>(sample_count), static_cast<Eigen::Index>(features));
  ds.feature_frequencies.assign(features, 0);

  auto magnitude = [&](const FeatureNode& node) {
    double u = unit(rng);
    return node.magnitude_lo == node.magnitude_hi ? node.magnitude_lo
                                                  : node.magnitude_lo + u * (node.magnitude_hi - node.magnitude_lo);
  };

  std::vector<unsigned> stack;
  std::vector<char> active(features);
  for (std::size_t s = 0; s < sample_count; ++s) {
    std::fill(active.begin(), active.end(), 0);
    stack.clear();

    // Resolves one sibling set whose parent (if any) fired.
    auto fire_siblings = [&](const std::vector<unsigned>& siblings) {
      if (siblings.empty()) return;
      const auto& first = tree.nodes[siblings.front()];
      if (first.exclusive_group) {
        double total = 0.0;
        for (unsigned id : siblings) total += tree.nodes[id].activation_prob;
        double scale = total > 1.0 ? 1.0 / total : 1.0;
        double u = unit(rng);
        double acc = 0.0;
        for (unsigned id : siblings) {
          acc += tree.nodes[id].activation_prob * scale;
          if (u < acc) {
            stack.push_back(id);
            break;
          }
        }
      } else {
        for (unsigned id : siblings) {
          if (unit(rng) < tree.nodes[id].activation_prob) stack.push_back(id);
        }
      }
    };

    fire_siblings(tree.root_ids);
    // Depth-first in id order keeps the random stream layout fixed.
    std::reverse(stack.begin(), stack.end());
    while (!stack.empty()) {
      unsigned id = stack.back();
      stack.pop_back();
      const FeatureNode& node = tree.nodes[id];
      active[id] = 1;
      double mag = magnitude(node);
      ds.true_activations(static_cast<Eigen::Index>(s), id) = mag;
      ds.observed.row(static_cast<Eigen::Index>(s)) += mag * node.direction.transpose();
      ++ds.feature_frequencies[id];
      std::size_t before = stack.size();
      fire_siblings(node.children);
      std::reverse(stack.begin() + static_cast<std::ptrdiff_t>(before), stack.end());
    }
  }
  return ds;
}

/// Per-feature count of strictly positive entries, sorted by descending count then ascending id.
inline std::vector<std::pair<unsigned, std::uint64_t>> empirical_frequencies(const Matrix& acts) {
  std::vector<std::pair<unsigned, std::uint64_t>> out(static_cast<std::size_t>(acts.cols()));
  for (Eigen::Index f = 0; f < acts.cols(); ++f) {
    out[f] = {static_cast<unsigned>(f), static_cast<std::uint64_t>((acts.col(f).array() > 0.0).count())};
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

inline json tree_to_json(const FeatureTree& tree) {
  json nodes = json::array();
  for (const auto& n : tree.nodes) {
    json j;
    j["id"] = n.id;
    j["level"] = n.level;
    j["parent"] = n.parent ? json(*n.parent) : json(nullptr);
    j["activation_prob"] = n.activation_prob;
    j["exclusive_group"] = n.exclusive_group ? json(*n.exclusive_group) : json(nullptr);
    j["magnitude_range"] = {n.magnitude_lo, n.magnitude_hi};
    j["direction"] = std::vector<double>(n.direction.data(), n.direction.data() + n.direction.size());
    nodes.push_back(std::move(j));
  }
  json out;
  out["dim"] = tree.dim;
  out["root_ids"] = tree.root_ids;
  out["nodes"] = std::move(nodes);
  return out;
}

inline json toy_config_to_json(const ToyConfig& c) {
  return json{{"depth", c.depth},
              {"branching", c.branching},
              {"dim", c.dim},
              {"root_count", c.root_count},
              {"base_prob", c.base_prob},
              {"prob_decay", c.prob_decay},
              {"prob_jitter", c.prob_jitter},
              {"exclusive_fraction", c.exclusive_fraction},
              {"magnitude_lo", c.magnitude_lo},
              {"magnitude_hi", c.magnitude_hi}};
}

inline ToyConfig toy_config_from_json(const json& j) {
  ToyConfig c;
  c.depth = j.value("depth", c.depth);
  c.branching = j.value("branching", c.branching);
  c.dim = j.value("dim", c.dim);
  c.root_count = j.value("root_count", c.root_count);
  c.base_prob = j.value("base_prob", c.base_prob);
  c.prob_decay = j.value("prob_decay", c.prob_decay);
  c.prob_jitter = j.value("prob_jitter", c.prob_jitter);
  c.exclusive_fraction = j.value("exclusive_fraction", c.exclusive_fraction);
  c.magnitude_lo = j.value("magnitude_lo", c.magnitude_lo);
  c.magnitude_hi = j.value("magnitude_hi", c.magnitude_hi);
  return c;
}

}  // namespace raigen
