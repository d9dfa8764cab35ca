#include <gtest/gtest.h>

#include "mcvlm/data.hpp"
#include "mcvlm/grounding.hpp"

using namespace mcvlm;

namespace {

FeatureBank bank(std::string id, Matrix v) { return {std::move(id), FeatureSpace::Encoder, std::move(v)}; }

SimilarityStack random_stack(Rng& rng, std::string id, int l, int h, int w) {
  SimilarityStack s{std::move(id), h, w, Matrix(l, h * w)};
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (Eigen::Index i = 0; i < s.maps.size(); ++i) s.maps.data()[i] = u(rng);
  return s;
}

ConfidenceMap map_of(std::vector<double> v, int h, int w) {
  ConfidenceMap m{"c", h, w, RowVector(static_cast<Eigen::Index>(v.size()))};
  for (std::size_t i = 0; i < v.size(); ++i) m.values[static_cast<Eigen::Index>(i)] = v[i];
  return m;
}

FeatureBank scenario_bank(const Scenario& s, int j) {
  const auto& c = s.concepts[static_cast<std::size_t>(j)];
  std::vector<Image> imgs;
  std::vector<ConceptMask> masks;
  for (std::size_t i = 0; i < c.train_images.size(); ++i) {
    imgs.push_back(s.image(c.train_images[i]));
    masks.push_back(s.mask(c.train_masks[i]));
  }
  return build_bank(Encoder(), Projector(), imgs, masks, FeatureSpace::Encoder, c.id);
}

}  // namespace

TEST(Similarity, SelfCosineIsOne) {
  Rng rng(1);
  FeatureGrid g{2, 2, gaussian_matrix(rng, 4, 6, 1.0)};
  const SimilarityStack s = similarity_stack(bank("a", Matrix(g.features.row(3) * 2.5)), g);
  EXPECT_NEAR(s.maps(0, 3), 1.0, 1e-12);
  EXPECT_EQ(s.maps.rows(), 1);
  EXPECT_EQ(s.maps.cols(), 4);
}

TEST(Similarity, OrthogonalIsZero) {
  FeatureGrid g{1, 2, Matrix::Zero(2, 3)};
  g.features(0, 0) = 1.0;
  g.features(1, 1) = -2.0;
  Matrix v = Matrix::Zero(1, 3);
  v(0, 2) = 4.0;
  const SimilarityStack s = similarity_stack(bank("a", v), g);
  EXPECT_EQ(s.maps(0, 0), 0.0);
  EXPECT_EQ(s.maps(0, 1), 0.0);
}

TEST(Similarity, MatchesTripleLoopOracle) {
  Rng rng(2);
  FeatureGrid g{4, 4, gaussian_matrix(rng, 16, 5, 1.0)};
  const Matrix v = gaussian_matrix(rng, 3, 5, 1.0);
  const SimilarityStack s = similarity_stack(bank("a", v), g);
  for (int i = 0; i < 3; ++i)
    for (int p = 0; p < 16; ++p) {
      double dot = 0, na = 0, nb = 0;
      for (int c = 0; c < 5; ++c) {
        dot += v(i, c) * g.features(p, c);
        na += v(i, c) * v(i, c);
        nb += g.features(p, c) * g.features(p, c);
      }
      EXPECT_NEAR(s.maps(i, p), dot / std::sqrt(na * nb), 1e-12);
      EXPECT_LE(std::abs(s.maps(i, p)), 1.0 + 1e-6);
    }
}

TEST(Similarity, ZeroVectorIsDegenerate) {
  Rng rng(3);
  FeatureGrid g{2, 2, gaussian_matrix(rng, 4, 3, 1.0)};
  try {
    similarity_stack(bank("a", Matrix::Zero(1, 3)), g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateInput);
  }
}

TEST(Confidence, SingleConceptIsIdenticallyZero) {
  Rng rng(4);
  const std::vector<SimilarityStack> one{random_stack(rng, "a", 5, 3, 3)};
  const auto maps = confidence_maps(one);
  ASSERT_EQ(maps.size(), 1u);
  EXPECT_EQ(maps[0].values.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Confidence, TwoConceptsAreAntisymmetric) {
  Rng rng(5);
  const std::vector<SimilarityStack> two{random_stack(rng, "a", 4, 3, 5), random_stack(rng, "b", 7, 3, 5)};
  const auto maps = confidence_maps(two);
  for (Eigen::Index p = 0; p < 15; ++p) EXPECT_EQ(maps[0].values[p], -maps[1].values[p]);
}

TEST(Confidence, ThreeConceptsMatchPointwiseOracleAndSumToZero) {
  Rng rng(6);
  const std::vector<SimilarityStack> three{random_stack(rng, "a", 2, 4, 4), random_stack(rng, "b", 5, 4, 4),
                                           random_stack(rng, "c", 3, 4, 4)};
  const auto maps = confidence_maps(three);
  for (int p = 0; p < 16; ++p) {
    double mean[3];
    for (int j = 0; j < 3; ++j) {
      double acc = 0;
      for (Eigen::Index i = 0; i < three[static_cast<std::size_t>(j)].maps.rows(); ++i) acc += three[static_cast<std::size_t>(j)].maps(i, p);
      mean[j] = acc / static_cast<double>(three[static_cast<std::size_t>(j)].maps.rows());
    }
    const double global = (mean[0] + mean[1] + mean[2]) / 3.0;
    double sum = 0.0;
    for (int j = 0; j < 3; ++j) {
      EXPECT_NEAR(maps[static_cast<std::size_t>(j)].values[p], mean[j] - global, 1e-9);
      sum += maps[static_cast<std::size_t>(j)].values[p];
    }
    EXPECT_NEAR(sum, 0.0, 1e-9);
  }
}

TEST(Confidence, EmptyInputIsAnError) {
  try {
    confidence_maps(std::vector<SimilarityStack>{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Input);
  }
}

TEST(Detect, AllBelowThresholdIsAbsent) {
  const Detection d = detect(map_of(std::vector<double>(64, 0.1), 8, 8), GroundingConfig{}, 8);
  EXPECT_FALSE(d.present);
  EXPECT_FALSE(d.location.has_value());
  EXPECT_EQ(d.exceedance_ratio, 0.0);
}

TEST(Detect, OnePatchAboveTauIsEnoughOnAnEightByEightGrid) {
  std::vector<double> v(64, 0.0);
  v[19] = 0.5;  // row 2, col 3
  const GroundingConfig cfg;
  const Detection d = detect(map_of(v, 8, 8), cfg, 8);
  const double ratio = 1.0 / 64.0;
  EXPECT_DOUBLE_EQ(d.exceedance_ratio, ratio);
  EXPECT_GT(ratio, 100.0 / 65536.0);
  ASSERT_TRUE(d.present);
  EXPECT_EQ(*d.location, (PixelPoint{3 * 8 + 4, 2 * 8 + 4}));
  EXPECT_EQ(d.max_confidence, 0.5);
}

TEST(Detect, GammaComparesStrictly) {
  std::vector<double> v(10, 0.0);
  v[0] = 0.9;
  GroundingConfig cfg;
  cfg.gamma = 0.1;  // ratio 1/10 is not > 0.1
  EXPECT_FALSE(detect(map_of(v, 2, 5), cfg, 8).present);
  cfg.gamma = 0.099;
  EXPECT_TRUE(detect(map_of(v, 2, 5), cfg, 8).present);
}

TEST(Detect, TiesGoToRowMajorFirst) {
  std::vector<double> v(16, 0.0);
  v[6] = 0.7;
  v[9] = 0.7;
  const Detection d = detect(map_of(v, 4, 4), GroundingConfig{}, 10);
  EXPECT_EQ(*d.location, (PixelPoint{2 * 10 + 5, 1 * 10 + 5}));
}

TEST(Detect, RaisingTauNeverCreatesPresence) {
  Rng rng(7);
  std::uniform_real_distribution<double> u(-0.6, 0.6);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(64);
    for (auto& x : v) x = u(rng);
    bool was_present = true;
    for (double tau = -0.9; tau < 0.95; tau += 0.05) {
      GroundingConfig cfg;
      cfg.tau = tau;
      cfg.gamma = 0.05;
      const bool present = detect(map_of(v, 8, 8), cfg, 8).present;
      EXPECT_FALSE(present && !was_present);
      was_present = present;
    }
  }
}

TEST(Annotate, NoMarksLeavesImageAndPromptEmpty) {
  const Image img(32, 32, {10, 20, 30});
  const Annotated a = annotate(img, MarkSet{});
  EXPECT_TRUE(a.image == img);
  EXPECT_TRUE(a.prompt.empty());
}

TEST(Annotate, ClausesInMarkOrderAndPixelsOnlyInGlyphBoxes) {
  Rng rng(8);
  const Image img = background(rng);
  MarkSet marks;
  marks.marks.push_back({"c1", "<sks_1>", {10, 40}, 1});
  marks.marks.push_back({"c2", "<sks_2>", {50, 12}, 2});
  const Annotated a = annotate(img, marks);
  EXPECT_EQ(a.prompt, "<sks_1> is located at \"Mark Number 1\". <sks_2> is located at \"Mark Number 2\".");
  const PixelBox b1 = mark_box(img, 10, 40, 1), b2 = mark_box(img, 50, 12, 2);
  int changed = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (!(a.image.at(x, y) == img.at(x, y))) {
        ++changed;
        EXPECT_TRUE(b1.contains(x, y) || b2.contains(x, y)) << x << "," << y;
      }
  EXPECT_GT(changed, 0);
}

TEST(Annotate, OutOfBoundsMarkIsAnInputError) {
  MarkSet marks;
  marks.marks.push_back({"c1", "<sks_1>", {64, 3}, 1});
  try {
    annotate(Image(64, 64), marks);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Input);
  }
}

TEST(Ground, TwoConceptsLandInTheirThirds) {
  const Scenario s = generate_synthetic_scenario(2, 10, 9);
  const std::vector<FeatureBank> banks{scenario_bank(s, 0), scenario_bank(s, 1)};
  const auto ids = s.identifiers();
  for (const auto& t : s.test_multi) {
    const GroundingResult r = ground(banks, ids, Encoder(), s.image(t.path), GroundingConfig{});
    ASSERT_EQ(r.detections.size(), 2u);
    for (int j = 0; j < 2; ++j) {
      const auto& d = r.detections[static_cast<std::size_t>(j)];
      ASSERT_TRUE(d.present) << t.path << " concept " << j;
      EXPECT_EQ(third_of(d.location->x, kSceneSize), third_of(t.at[static_cast<std::size_t>(j)].cx, kSceneSize)) << t.path;
    }
    EXPECT_EQ(r.marks.size(), 2u);
    EXPECT_EQ(r.marks.marks[0].number, 1);
    EXPECT_EQ(r.marks.marks[1].number, 2);
  }
}

TEST(Ground, DistractorsProduceNoMarks) {
  const Scenario s = generate_synthetic_scenario(2, 10, 10);
  const std::vector<FeatureBank> banks{scenario_bank(s, 0), scenario_bank(s, 1)};
  const auto ids = s.identifiers();
  int empty = 0;
  for (const auto& path : s.external_multi)
    empty += ground(banks, ids, Encoder(), s.image(path), GroundingConfig{}).marks.size() == 0;
  EXPECT_GE(empty, static_cast<int>(0.95 * static_cast<double>(s.external_multi.size())));
}

TEST(Ground, SingleConceptUsesRawMeanMap) {
  const Scenario s = generate_synthetic_scenario(1, 10, 11);
  const std::vector<FeatureBank> banks{scenario_bank(s, 0)};
  const auto ids = s.identifiers();
  for (const auto& t : s.test_single) {
    const GroundingResult r = ground(banks, ids, Encoder(), s.image(t.path), GroundingConfig{});
    ASSERT_TRUE(r.detections[0].present) << t.path;
    const PixelPoint p = *r.detections[0].location;
    const auto& at = t.at[0];
    EXPECT_LE(std::abs(p.x - at.cx), at.r + 8) << t.path;
    EXPECT_LE(std::abs(p.y - at.cy), at.r + 8) << t.path;
  }
}

TEST(Ground, DeterministicNumbering) {
  const Scenario s = generate_synthetic_scenario(3, 4, 12);
  std::vector<FeatureBank> banks;
  for (int j = 0; j < 3; ++j) banks.push_back(scenario_bank(s, j));
  const auto ids = s.identifiers();
  const Image& img = s.image(s.test_multi[0].path);
  const auto a = ground(banks, ids, Encoder(), img, GroundingConfig{});
  const auto b = ground(banks, ids, Encoder(), img, GroundingConfig{});
  EXPECT_EQ(a.annotated.prompt, b.annotated.prompt);
  EXPECT_TRUE(a.annotated.image == b.annotated.image);
  for (std::size_t i = 0; i < a.marks.size(); ++i) EXPECT_EQ(a.marks.marks[i].number, static_cast<int>(i) + 1);
}
