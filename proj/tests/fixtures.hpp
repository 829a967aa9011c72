#pragma once

// Planted audit fixture: 100 samples on a 2x2 grid, identity MSAE with n = d = 8.
//   neurons 0-3  fillers, frequent and typical
//   neuron 4     rare (3 samples) with a distinct embedding direction
//   neuron 5     rare (2 samples) with typical embeddings
//   neuron 6     frequent (20 samples) with a moderately distinct direction
//   neuron 7     never active

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "raigen/data_io.hpp"
#include "raigen/linalg.hpp"
#include "raigen/msae.hpp"

namespace fixture {

using namespace raigen;

inline constexpr std::size_t kSamples = 100, kGrid = 2, kWidth = 8, kEmbed = 4;
inline constexpr std::size_t kRareDistinct = 4, kRareNoise = 5, kFrequentDistinct = 6, kNeverActive = 7;

struct Planted {
  TensorFile reps;  // N x 2 x 2 x 8
  Matrix embeddings;
  MsaeParams params;
  std::vector<std::string> ids;
};

inline Planted make_planted(bool flat_embeddings = false) {
  Planted p;
  p.reps.shape = {kSamples, kGrid, kGrid, kWidth};
  p.reps.data.assign(kSamples * kGrid * kGrid * kWidth, 0.0f);
  auto at = [&](std::size_t s, std::size_t pos, std::size_t j) -> float& {
    return p.reps.data[(s * kGrid * kGrid + pos) * kWidth + j];
  };
  p.embeddings = Matrix::Zero(kSamples, kEmbed);
  std::mt19937_64 rng(17);
  std::normal_distribution<double> noise(0.0, 0.02);
  for (std::size_t s = 0; s < kSamples; ++s) {
    at(s, 0, s % 3) = 1.0f;
    if (s % 2 == 0) at(s, 0, 3) = 0.5f;
    p.embeddings(s, 0) = 1.0;
    p.embeddings(s, 3) = noise(rng);
    p.ids.push_back("img" + std::to_string(s));
  }
  for (std::size_t s : {0, 1, 2}) {
    at(s, 1, kRareDistinct) = 2.0f;
    p.embeddings.row(s) << 0.1, 1.0, 0.0, 0.0;
  }
  for (std::size_t s : {10, 11}) at(s, 2, kRareNoise) = 2.0f;
  for (std::size_t s = 50; s < 70; ++s) {
    at(s, 3, kFrequentDistinct) = 1.0f;
    p.embeddings(s, 2) = 2.0;
  }
  if (flat_embeddings) p.embeddings = Matrix::Constant(kSamples, kEmbed, 0.5);

  p.params.W_enc = Matrix::Identity(kWidth, kWidth);
  p.params.W_dec = Matrix::Identity(kWidth, kWidth);
  p.params.b_enc = Vector::Zero(kWidth);
  p.params.b_pre = Vector::Zero(kWidth);
  p.params.levels = {2, 8};
  p.params.level_weights = {1.0, 1.0};
  p.params.validate();
  return p;
}

// Writes reps.rgt, emb.rgt, manifest.json and params.json (+ tensors) into dir.
inline std::filesystem::path write_planted(const std::filesystem::path& dir, bool flat_embeddings = false,
                                           bool with_embeddings = true) {
  Planted p = make_planted(flat_embeddings);
  std::filesystem::create_directories(dir);
  save_tensor(dir / "reps.rgt", p.reps);
  save_tensor(dir / "emb.rgt", to_tensor(p.embeddings));
  DatasetManifest m;
  m.prompt = "a photo of a person";
  m.sample_count = kSamples;
  m.timestep = 49;
  m.total_timesteps = 50;
  m.representation_file = "reps.rgt";
  if (with_embeddings) m.embedding_file = "emb.rgt";
  m.image_ids = p.ids;
  m.seed = 0;
  save_manifest(dir / "manifest.json", m);
  save_artifact(dir, "params", params_to_artifact(p.params));
  return dir / "manifest.json";
}

}  // namespace fixture
