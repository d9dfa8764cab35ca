// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic scenes: flat noisy backgrounds, saturated concept shapes and
// neutral-gray distractors.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mcvlm/errors.hpp"
#include "mcvlm/image.hpp"
#include "mcvlm/linalg.hpp"

namespace mcvlm {

inline constexpr int kSceneSize = 64;

struct ConceptLook {
  ShapeKind shape = ShapeKind::Circle;
  Rgb color;
  std::string color_name;
};

/// The fixed scenario palette: one distinct colored shape per concept slot.
inline const std::array<ConceptLook, 4>& concept_palette() {
  static const std::array<ConceptLook, 4> p = {{
      {ShapeKind::Circle, {220, 30, 30}, "red"},
      {ShapeKind::Square, {30, 50, 220}, "blue"},
      {ShapeKind::Triangle, {30, 200, 40}, "green"},
      {ShapeKind::Diamond, {230, 210, 30}, "yellow"},
  }};
  return p;
}

inline constexpr std::array<std::uint8_t, 5> kDistractorGrays = {245, 20, 200, 60, 110};

/// Where one shape was drawn.
struct Placement {
  double cx = 0.0;
  double cy = 0.0;
  double r = 0.0;

  bool overlaps(const Placement& o, double margin = 1.0) const {
    return std::abs(cx - o.cx) < r + o.r + margin && std::abs(cy - o.cy) < r + o.r + margin;
  }
};

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
inline int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

/// Flat background away from mid-gray, with per-pixel noise.
inline Image background(Rng& rng, int size = kSceneSize) {
  double level = uniform(rng, 0.2, 0.38);
  if (uniform(rng, 0.0, 1.0) < 0.5) level = 1.0 - level;
  std::normal_distribution<double> noise(0.0, 0.02);
  Image img(size, size);
  for (auto& px : img.pixels) px = static_cast<std::uint8_t>(std::clamp(std::round((level + noise(rng)) * 255.0), 0.0, 255.0));
  return img;
}

/// HSV (all in [0,1]) to 8-bit RGB.
inline Rgb hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double f = h * 6.0;
  const int i = static_cast<int>(f) % 6;
  const double fr = f - std::floor(f);
  const double p = v * (1 - s), q = v * (1 - s * fr), t = v * (1 - s * (1 - fr));
  double r = 0, g = 0, b = 0;
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
  auto c = [](double x) { return static_cast<std::uint8_t>(std::clamp(std::round(x * 255.0), 0.0, 255.0)); };
  return {c(r), c(g), c(b)};
}

inline double hue_of(Rgb c) {
  const double r = c.r / 255.0, g = c.g / 255.0, b = c.b / 255.0;
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
  if (d <= 0.0) return 0.0;
  double h;
  if (mx == r)
    h = std::fmod((g - b) / d, 6.0);
  else if (mx == g)
    h = (b - r) / d + 2.0;
  else
    h = (r - g) / d + 4.0;
  h /= 6.0;
  return h < 0.0 ? h + 1.0 : h;
}

/// Nearest basic color word by hue.
inline std::string color_name_of(Rgb c) {
  static const std::array<std::pair<double, const char*>, 9> names = {{{0.0, "red"},
                                                                       {30.0 / 360, "orange"},
                                                                       {55.0 / 360, "yellow"},
                                                                       {120.0 / 360, "green"},
                                                                       {180.0 / 360, "cyan"},
                                                                       {230.0 / 360, "blue"},
                                                                       {280.0 / 360, "purple"},
                                                                       {320.0 / 360, "pink"},
                                                                       {1.0, "red"}}};
  const double h = hue_of(c);
  const char* best = "red";
  double bd = 2.0;
  for (const auto& [hh, name] : names)
    if (std::abs(h - hh) < bd) {
      bd = std::abs(h - hh);
      best = name;
    }
  return best;
}

/// A random saturated look, used for the base model's training corpus.
inline ConceptLook random_look(Rng& rng) {
  const double h = uniform(rng, 0.0, 1.0);
  ConceptLook look;
  look.color = hsv_to_rgb(h, uniform(rng, 0.8, 1.0), uniform(rng, 0.75, 0.95));
  look.shape = static_cast<ShapeKind>(uniform_int(rng, 0, 3));
  look.color_name = color_name_of(look.color);
  return look;
}

inline double hue_distance(Rgb a, Rgb b) {
  const double d = std::abs(hue_of(a) - hue_of(b));
  return std::min(d, 1.0 - d);
}

// ---------------------------------------------------------------------------
// Scene composition

/// One concept alone at a random position, as in training photos.
inline Placement draw_single(Image& img, Rng& rng, const ConceptLook& look, ConceptMask* mask = nullptr) {
  const double r = uniform(rng, 9.0, 12.0);
  const double s = img.width;
  Placement p{uniform(rng, r + 1, s - r - 1), uniform(rng, r + 1, s - r - 1), r};
  ConceptMask m = draw_shape(img, look.shape, look.color, p.cx, p.cy, p.r);
  if (mask) *mask = std::move(m);
  return p;
}

/// Positions for `count` shapes: distinct horizontal thirds for up to three,
/// a 3x2 grid beyond that. Bounding boxes never touch.
inline std::vector<Placement> multi_layout(Rng& rng, int count, int size = kSceneSize) {
  require(count >= 1 && count <= 6, ErrorKind::Input, "multi-concept layout supports 1..6 shapes");
  const double third = size / 3.0;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::vector<int> cells(count <= 3 ? 3 : 6);
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
    std::shuffle(cells.begin(), cells.end(), rng);
    std::vector<Placement> out;
    for (int c = 0; c < count; ++c) {
      const int col = cells[static_cast<std::size_t>(c)] % 3;
      const int row = cells[static_cast<std::size_t>(c)] / 3;
      Placement p;
      p.r = count <= 3 ? uniform(rng, 8.0, 10.0) : uniform(rng, 7.0, 9.0);
      p.cx = col * third + third / 2 + uniform(rng, -2.0, 2.0);
      p.cy = count <= 3 ? uniform(rng, 14.0, size - 14.0) : (row == 0 ? 18.0 : size - 18.0) + uniform(rng, -2.0, 2.0);
      out.push_back(p);
    }
    bool ok = true;
    for (std::size_t i = 0; i < out.size() && ok; ++i)
      for (std::size_t j = i + 1; j < out.size() && ok; ++j) ok = !out[i].overlaps(out[j]);
    if (ok) return out;
  }
  fail(ErrorKind::DegenerateInput, "could not place non-overlapping shapes");
}

/// Neutral-gray shape at a spot clear of `avoid`; returns nullopt when no spot fits.
inline std::optional<Placement> draw_distractor(Image& img, Rng& rng, const std::vector<Placement>& avoid) {
  for (int attempt = 0; attempt < 200; ++attempt) {
    const double r = uniform(rng, 7.0, 10.0);
    Placement p{uniform(rng, r, img.width - r), uniform(rng, r, img.height - r), r};
    if (std::any_of(avoid.begin(), avoid.end(), [&](const Placement& a) { return p.overlaps(a); })) continue;
    const std::uint8_t g = kDistractorGrays[static_cast<std::size_t>(uniform_int(rng, 0, kDistractorGrays.size() - 1))];
    draw_shape(img, static_cast<ShapeKind>(uniform_int(rng, 0, 3)), {g, g, g}, p.cx, p.cy, p.r);
    return p;
  }
  return std::nullopt;
}

/// Background with one or more neutral distractors and no concept.
inline Image distractor_image(Rng& rng, int shapes) {
  Image img = background(rng);
  std::vector<Placement> placed;
  for (int i = 0; i < shapes; ++i)
    if (auto p = draw_distractor(img, rng, placed)) placed.push_back(*p);
  return img;
}

}  // namespace mcvlm
