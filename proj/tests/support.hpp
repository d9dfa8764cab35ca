// SPDX-License-Identifier: Apache-2.0
// Shared fixtures for the unit tests: a tiny random transformer, tiny theta,
// temporary directories and naive reference implementations.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "mcvlm/model.hpp"

namespace mcvlm::testing {

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.dim = 8;
  c.layers = 2;
  c.heads = 2;
  c.head_dim = 4;
  c.ffn = 16;
  c.vocab = 300;
  c.context = 64;
  c.image_tokens = 4;
  return c;
}

/// Seeded random model with moderate weights; every array is float-exact.
inline BaseModel tiny_model(std::uint64_t seed = 7, ModelConfig c = tiny_config()) {
  Rng rng(seed);
  BaseModel m;
  m.cfg = c;
  m.vision.model_dim = c.dim;
  m.vision.channels = 6;
  const int inner = c.heads * c.head_dim;
  m.token_embedding = gaussian_matrix(rng, c.vocab, c.dim, 1.0);
  m.position_embedding = gaussian_matrix(rng, c.context, c.dim, 0.3);
  m.image_embedding = gaussian_matrix(rng, c.image_tokens, c.dim, 0.3);
  m.identifier_embedding = gaussian_matrix(rng, 1, c.dim, 0.3).row(0);
  m.image_norm = 1.5;
  for (int l = 0; l < c.layers; ++l) {
    Layer ly;
    ly.attn_norm = (RowVector::Ones(c.dim) + gaussian_matrix(rng, 1, c.dim, 0.1).row(0)).eval();
    ly.wq = gaussian_matrix(rng, c.dim, inner, 0.5);
    ly.wk = gaussian_matrix(rng, c.dim, inner, 0.5);
    ly.wv = gaussian_matrix(rng, c.dim, inner, 0.5);
    ly.wo = gaussian_matrix(rng, inner, c.dim, 0.3);
    ly.mlp_norm = (RowVector::Ones(c.dim) + gaussian_matrix(rng, 1, c.dim, 0.1).row(0)).eval();
    ly.w1 = gaussian_matrix(rng, c.dim, c.ffn, 0.4);
    ly.b1 = gaussian_matrix(rng, 1, c.ffn, 0.1).row(0);
    ly.w2 = gaussian_matrix(rng, c.ffn, c.dim, 0.3);
    ly.b2 = gaussian_matrix(rng, 1, c.dim, 0.1).row(0);
    m.layers.push_back(std::move(ly));
  }
  m.final_norm = (RowVector::Ones(c.dim) + gaussian_matrix(rng, 1, c.dim, 0.1).row(0)).eval();
  m.classifier = gaussian_matrix(rng, c.dim, c.vocab, 0.5);
  m.projector = gaussian_matrix(rng, c.dim, m.vision.channels, 0.5);
  round_to_f32(m);
  return m;
}

/// Tiny model that accepts 64x64 scenario images (64 image slots).
inline BaseModel scene_model(std::uint64_t seed = 7) {
  ModelConfig c = tiny_config();
  c.context = 256;
  c.image_tokens = 64;
  return tiny_model(seed, c);
}

inline Theta tiny_theta(int concepts, int k, int dim, std::uint64_t seed = 3) {
  Rng rng(seed);
  std::vector<ConceptTokenBlock> blocks;
  for (int j = 0; j < concepts; ++j)
    blocks.push_back({"c" + std::to_string(j + 1), gaussian_matrix(rng, k + 1, dim, 1.0)});
  Theta t = make_theta(std::move(blocks));
  t.columns = gaussian_matrix(rng, dim, concepts, 0.5);
  return t;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("mcvlm-" + tag + "-" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

/// log-softmax by direct summation, no max shift tricks beyond the obvious.
inline double naive_log_softmax(const RowVector& row, int target) {
  double mx = row[0];
  for (Eigen::Index i = 1; i < row.size(); ++i) mx = std::max(mx, row[i]);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < row.size(); ++i) sum += std::exp(row[i] - mx);
  return row[target] - mx - std::log(sum);
}

}  // namespace mcvlm::testing
