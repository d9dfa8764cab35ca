// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mcvlm/errors.hpp"
#include "mcvlm/image.hpp"
#include "mcvlm/linalg.hpp"

namespace mcvlm {

struct VisionConfig {
  int patch = 8;
  int channels = 64;   // encoder feature dim c
  int model_dim = 64;  // projector output dim D
  std::uint64_t seed = 0x5eed'0001;
};

/// h x w grid of c-dim patch features, stored row-major as an (h*w) x c matrix.
struct FeatureGrid {
  int height = 0;
  int width = 0;
  Matrix features;

  int channels() const { return static_cast<int>(features.cols()); }
  int cells() const { return height * width; }
  auto cell(int row, int col) const { return features.row(static_cast<Eigen::Index>(row) * width + col); }
};

enum class FeatureSpace { Encoder, Projector };

inline const char* space_name(FeatureSpace s) { return s == FeatureSpace::Encoder ? "encoder" : "projector"; }

inline FeatureSpace space_from_name(const std::string& s) {
  if (s == "encoder") return FeatureSpace::Encoder;
  if (s == "projector") return FeatureSpace::Projector;
  fail(ErrorKind::Input, "unknown feature space '" + s + "'");
}

struct FeatureBank {
  std::string concept_id;
  FeatureSpace space = FeatureSpace::Encoder;
  Matrix vectors;  // l x c

  Eigen::Index count() const { return vectors.rows(); }
  Eigen::Index dim() const { return vectors.cols(); }
};

/// Number of scalar statistics summarising one patch: centred channel means,
/// channel standard deviations, and a 2x2 downsample per channel.
inline constexpr int kPatchStatDim = 3 + 3 + 12;

/// Raw statistic vector of the patch whose top-left pixel is (x0, y0).
inline Vector patch_statistics(const Image& img, int x0, int y0, int patch) {
  Vector s = Vector::Zero(kPatchStatDim);
  const int half = patch / 2;
  const double n = static_cast<double>(patch) * patch;
  const double quarter = static_cast<double>(half) * half;
  for (int y = 0; y < patch; ++y)
    for (int x = 0; x < patch; ++x) {
      const Rgb px = img.at(x0 + x, y0 + y);
      const double v[3] = {px.r / 255.0, px.g / 255.0, px.b / 255.0};
      const int q = (y / half) * 2 + (x / half);
      for (int ch = 0; ch < 3; ++ch) {
        s[ch] += v[ch] / n;
        s[3 + ch] += v[ch] * v[ch] / n;
        s[6 + q * 3 + ch] += v[ch] / quarter;
      }
    }
  for (int ch = 0; ch < 3; ++ch) {
    s[3 + ch] = std::sqrt(std::max(0.0, s[3 + ch] - s[ch] * s[ch]));
    s[ch] -= 0.5;
  }
  for (int i = 6; i < kPatchStatDim; ++i) s[i] -= 0.5;
  return s;
}

/// Deterministic stand-in for a frozen vision encoder: a seeded linear
/// projection of per-patch statistics, L2-normalised per patch.
class Encoder {
 public:
  explicit Encoder(const VisionConfig& cfg = {}) : cfg_(cfg) {
    require(cfg.patch >= 2 && cfg.patch % 2 == 0, ErrorKind::Input, "patch size must be even and >= 2");
    require(cfg.channels >= 1, ErrorKind::Input, "encoder channels must be >= 1");
    Rng rng(cfg.seed);
    weights_ = gaussian_matrix(rng, cfg.channels, kPatchStatDim, 1.0 / std::sqrt(double(kPatchStatDim)));
  }

  const VisionConfig& config() const { return cfg_; }
  const Matrix& weights() const { return weights_; }

  FeatureGrid encode(const Image& img) const {
    require(!img.empty(), ErrorKind::Input, "empty image");
    require(img.width % cfg_.patch == 0 && img.height % cfg_.patch == 0, ErrorKind::Dimension,
            "image " + std::to_string(img.width) + "x" + std::to_string(img.height) + " not divisible by patch " +
                std::to_string(cfg_.patch));
    FeatureGrid grid;
    grid.height = img.height / cfg_.patch;
    grid.width = img.width / cfg_.patch;
    grid.features.resize(grid.cells(), cfg_.channels);
    for (int r = 0; r < grid.height; ++r)
      for (int c = 0; c < grid.width; ++c) {
        Vector f = weights_ * patch_statistics(img, c * cfg_.patch, r * cfg_.patch, cfg_.patch);
        const double norm = f.norm();
        require(norm > 0.0 && std::isfinite(norm), ErrorKind::DegenerateInput, "patch feature has zero norm");
        grid.features.row(static_cast<Eigen::Index>(r) * grid.width + c) = (f / norm).transpose();
      }
    return grid;
  }

 private:
  VisionConfig cfg_;
  Matrix weights_;  // c x kPatchStatDim
};

/// Frozen linear map from encoder space (c) to the language model width (D).
class Projector {
 public:
  explicit Projector(const VisionConfig& cfg = {}) {
    Rng rng(cfg.seed ^ 0x9e37'79b9'7f4a'7c15ULL);
    weights_ = gaussian_matrix(rng, cfg.model_dim, cfg.channels, 1.0 / std::sqrt(double(cfg.channels)));
  }

  static Projector identity(int dim) {
    Projector p;
    p.weights_ = Matrix::Identity(dim, dim);
    return p;
  }

  static Projector from_weights(Matrix w) {
    Projector p;
    p.weights_ = std::move(w);
    return p;
  }

  int in_dim() const { return static_cast<int>(weights_.cols()); }
  int out_dim() const { return static_cast<int>(weights_.rows()); }
  const Matrix& weights() const { return weights_; }

  FeatureGrid project(const FeatureGrid& grid) const {
    require(grid.channels() == in_dim(), ErrorKind::Dimension,
            "projector expects " + std::to_string(in_dim()) + " channels, got " + std::to_string(grid.channels()));
    FeatureGrid out;
    out.height = grid.height;
    out.width = grid.width;
    out.features = grid.features * weights_.transpose();
    return out;
  }

 private:
  Matrix weights_;  // D x c
};

/// True when strictly more than half of the patch's pixels are set.
inline bool patch_selected(const ConceptMask& mask, int row, int col, int patch) {
  int set = 0;
  for (int y = 0; y < patch; ++y)
    for (int x = 0; x < patch; ++x) set += mask.at(col * patch + x, row * patch + y) ? 1 : 0;
  return 2 * set > patch * patch;
}

/// Features of the patches a mask selects, row-major.
inline Matrix filter_by_mask(const FeatureGrid& grid, const ConceptMask& mask) {
  require(grid.width > 0 && grid.height > 0, ErrorKind::Input, "empty grid");
  require(mask.width % grid.width == 0 && mask.height % grid.height == 0 &&
              mask.width / grid.width == mask.height / grid.height,
          ErrorKind::Dimension, "mask does not tile the feature grid");
  const int patch = mask.width / grid.width;
  std::vector<Eigen::Index> keep;
  for (int r = 0; r < grid.height; ++r)
    for (int c = 0; c < grid.width; ++c)
      if (patch_selected(mask, r, c, patch)) keep.push_back(static_cast<Eigen::Index>(r) * grid.width + c);
  require(!keep.empty(), ErrorKind::EmptySelection, "mask selects no patches");
  Matrix out(static_cast<Eigen::Index>(keep.size()), grid.channels());
  for (std::size_t i = 0; i < keep.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = grid.features.row(keep[i]);
  return out;
}

inline FeatureBank build_bank(const Encoder& encoder, const Projector& projector, std::span<const Image> images,
                              std::span<const ConceptMask> masks, FeatureSpace space, std::string concept_id = {}) {
  require(!images.empty(), ErrorKind::Input, "feature bank needs at least one image");
  require(images.size() == masks.size(), ErrorKind::Input, "image and mask counts differ");
  std::vector<Matrix> parts;
  Eigen::Index rows = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    FeatureGrid grid = encoder.encode(images[i]);
    if (space == FeatureSpace::Projector) grid = projector.project(grid);
    parts.push_back(filter_by_mask(grid, masks[i]));
    rows += parts.back().rows();
  }
  FeatureBank bank;
  bank.concept_id = std::move(concept_id);
  bank.space = space;
  bank.vectors.resize(rows, parts.front().cols());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    bank.vectors.middleRows(at, p.rows()) = p;
    at += p.rows();
  }
  return bank;
}

}  // namespace mcvlm
