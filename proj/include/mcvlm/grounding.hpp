// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcvlm/errors.hpp"
#include "mcvlm/image.hpp"
#include "mcvlm/linalg.hpp"
#include "mcvlm/vision.hpp"

namespace mcvlm {

struct GroundingConfig {
  double tau = 0.32;
  double gamma = 100.0 / (256.0 * 256.0);

  void validate() const {
    require(tau > -1.0 && tau < 1.0, ErrorKind::Validation, "tau must lie in (-1, 1)");
    require(gamma > 0.0 && gamma < 1.0, ErrorKind::Validation, "gamma must lie in (0, 1)");
  }
};

/// One cosine-similarity map per bank vector: maps(i, p) = cos(bank_i, patch_p).
struct SimilarityStack {
  std::string concept_id;
  int height = 0;
  int width = 0;
  Matrix maps;  // l x (h*w)

  /// Average over the bank, i.e. the mean similarity map of this concept.
  RowVector mean_map() const { return maps.colwise().mean(); }
};

struct ConfidenceMap {
  std::string concept_id;
  int height = 0;
  int width = 0;
  RowVector values;  // h*w, row-major

  double at(int row, int col) const { return values[static_cast<Eigen::Index>(row) * width + col]; }
};

inline SimilarityStack similarity_stack(const FeatureBank& bank, const FeatureGrid& test) {
  require(bank.count() >= 1, ErrorKind::Input, "empty feature bank");
  require(bank.dim() == test.channels(), ErrorKind::Dimension,
          "bank dim " + std::to_string(bank.dim()) + " != grid channels " + std::to_string(test.channels()));
  const Vector bank_norms = bank.vectors.rowwise().norm();
  const Vector grid_norms = test.features.rowwise().norm();
  require((bank_norms.array() > 0.0).all() && (grid_norms.array() > 0.0).all(), ErrorKind::DegenerateInput,
          "zero-norm feature vector in similarity computation");
  SimilarityStack s;
  s.concept_id = bank.concept_id;
  s.height = test.height;
  s.width = test.width;
  s.maps = bank.vectors * test.features.transpose();
  s.maps.array().colwise() /= bank_norms.array();
  s.maps.array().rowwise() /= grid_norms.transpose().array();
  return s;
}

/// Mean map of each concept minus the across-concept mean of those maps.
inline std::vector<ConfidenceMap> confidence_maps(std::span<const SimilarityStack> stacks) {
  require(!stacks.empty(), ErrorKind::Input, "no similarity stacks");
  const int h = stacks.front().height, w = stacks.front().width;
  std::vector<RowVector> means;
  for (const auto& s : stacks) {
    require(s.maps.rows() >= 1, ErrorKind::Input, "empty similarity stack for '" + s.concept_id + "'");
    require(s.height == h && s.width == w, ErrorKind::Dimension, "similarity stacks differ in shape");
    means.push_back(s.mean_map());
  }
  // Written as ((n-1) S_j - sum of the others) / n so that one concept gives
  // exactly zero and two concepts give exact negatives of each other.
  const double n = static_cast<double>(stacks.size());
  std::vector<ConfidenceMap> out;
  for (std::size_t j = 0; j < stacks.size(); ++j) {
    RowVector others = RowVector::Zero(static_cast<Eigen::Index>(h) * w);
    for (std::size_t i = 0; i < stacks.size(); ++i)
      if (i != j) others += means[i];
    out.push_back({stacks[j].concept_id, h, w, ((n - 1.0) * means[j] - others) / n});
  }
  return out;
}

struct PixelPoint {
  int x = 0;
  int y = 0;
  friend bool operator==(const PixelPoint&, const PixelPoint&) = default;
};

struct Detection {
  std::string concept_id;
  bool present = false;
  std::optional<PixelPoint> location;
  double max_confidence = 0.0;
  double exceedance_ratio = 0.0;
};

/// Presence: fraction of cells above tau exceeds gamma. Location: centre of the
/// first (row-major) maximal cell, in pixels of an image with `patch`-sized cells.
inline Detection detect(const ConfidenceMap& map, const GroundingConfig& cfg, int patch) {
  require(map.values.size() == static_cast<Eigen::Index>(map.height) * map.width && map.values.size() > 0,
          ErrorKind::Dimension, "confidence map shape mismatch");
  require(map.values.allFinite(), ErrorKind::NonFinite, "confidence map contains non-finite values");
  Detection d;
  d.concept_id = map.concept_id;
  Eigen::Index above = 0, arg = 0;
  double best = map.values[0];
  for (Eigen::Index i = 0; i < map.values.size(); ++i) {
    if (map.values[i] > cfg.tau) ++above;
    if (map.values[i] > best) {
      best = map.values[i];
      arg = i;
    }
  }
  d.max_confidence = best;
  d.exceedance_ratio = static_cast<double>(above) / static_cast<double>(map.values.size());
  d.present = d.exceedance_ratio > cfg.gamma;
  if (d.present) {
    const int row = static_cast<int>(arg / map.width), col = static_cast<int>(arg % map.width);
    d.location = PixelPoint{col * patch + patch / 2, row * patch + patch / 2};
  }
  return d;
}

struct Mark {
  std::string concept_id;
  std::string identifier;  // display form used in the location prompt
  PixelPoint at;
  int number = 0;
};

struct MarkSet {
  std::vector<Mark> marks;
  std::size_t size() const { return marks.size(); }
};

/// The location clause appended to the system prompt for one mark.
inline std::string location_clause(const std::string& identifier, int number) {
  return identifier + " is located at \"Mark Number " + std::to_string(number) + "\".";
}

struct Annotated {
  Image image;
  std::string prompt;
};

inline Annotated annotate(const Image& img, const MarkSet& marks) {
  for (const auto& m : marks.marks)
    require(img.contains(m.at.x, m.at.y), ErrorKind::Input,
            "mark " + std::to_string(m.number) + " at (" + std::to_string(m.at.x) + "," + std::to_string(m.at.y) +
                ") is outside the image");
  Annotated out{img, {}};
  for (const auto& m : marks.marks) {
    draw_mark(out.image, m.at.x, m.at.y, m.number);
    if (!out.prompt.empty()) out.prompt += ' ';
    out.prompt += location_clause(m.identifier, m.number);
  }
  return out;
}

struct GroundingResult {
  std::vector<Detection> detections;  // one per bank, in bank order
  MarkSet marks;
  Annotated annotated;
};

/// Encoder-space banks, one per concept, plus the identifier strings used in
/// prompts. A single concept is thresholded on its raw mean map, since the
/// bias-corrected map is identically zero in that case.
inline GroundingResult ground(std::span<const FeatureBank> banks, std::span<const std::string> identifiers,
                              const Encoder& encoder, const Image& img, const GroundingConfig& cfg) {
  require(!banks.empty(), ErrorKind::Input, "grounding needs at least one feature bank");
  require(identifiers.size() == banks.size(), ErrorKind::Input, "one identifier per bank required");
  cfg.validate();
  const FeatureGrid grid = encoder.encode(img);
  std::vector<SimilarityStack> stacks;
  for (const auto& b : banks) stacks.push_back(similarity_stack(b, grid));
  std::vector<ConfidenceMap> maps;
  if (stacks.size() == 1)
    maps.push_back({stacks[0].concept_id, grid.height, grid.width, stacks[0].mean_map()});
  else
    maps = confidence_maps(stacks);

  GroundingResult res;
  for (std::size_t j = 0; j < maps.size(); ++j) {
    res.detections.push_back(detect(maps[j], cfg, encoder.config().patch));
    const auto& d = res.detections.back();
    if (d.present)
      res.marks.marks.push_back({d.concept_id, identifiers[j], *d.location, static_cast<int>(res.marks.size()) + 1});
  }
  res.annotated = annotate(img, res.marks);
  return res;
}

}  // namespace mcvlm
