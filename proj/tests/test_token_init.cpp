#include <gtest/gtest.h>

#include <algorithm>
#include <limits>

#include "mcvlm/token_init.hpp"

using namespace mcvlm;

namespace {

Matrix random_points(std::uint64_t seed, int n, int d) {
  Rng rng(seed);
  return gaussian_matrix(rng, n, d, 1.0);
}

FeatureBank bank_of(Matrix v) {
  FeatureBank b;
  b.concept_id = "c";
  b.space = FeatureSpace::Projector;
  b.vectors = std::move(v);
  return b;
}

}  // namespace

TEST(KMeans, SingleCenterIsTheMean) {
  const Matrix pts = random_points(1, 50, 5);
  const ClusterResult r = kmeans(pts, 1, 9);
  const RowVector mean = pts.colwise().mean();
  for (int d = 0; d < 5; ++d) EXPECT_NEAR(r.centers(0, d), mean[d], 1e-9);
}

TEST(KMeans, SaturatedCaseHasZeroInertia) {
  Matrix pts(6, 2);
  pts << 0, 0, 5, 5, -3, 2, 0, 0, 5, 5, 9, -1;  // 4 distinct points
  const ClusterResult r = kmeans(pts, 4, 3);
  EXPECT_EQ(r.inertia, 0.0);
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    bool found = false;
    for (int j = 0; j < 4; ++j) found |= r.centers.row(j) == pts.row(i);
    EXPECT_TRUE(found);
  }
}

TEST(KMeans, TwoBlobsMatchBruteForcePartition) {
  Matrix pts(8, 2);
  pts << 0.1, 0.2, -0.3, 0.0, 0.2, -0.1, 0.0, 0.3, 10.0, 10.2, 9.7, 10.1, 10.3, 9.8, 10.0, 9.9;
  double best = std::numeric_limits<double>::infinity();
  unsigned best_mask = 0;
  for (unsigned mask = 1; mask < 255; ++mask) {
    RowVector c[2] = {RowVector::Zero(2), RowVector::Zero(2)};
    int n[2] = {0, 0};
    for (int i = 0; i < 8; ++i) {
      const int g = (mask >> i) & 1;
      c[g] += pts.row(i);
      ++n[g];
    }
    c[0] /= n[0];
    c[1] /= n[1];
    double cost = 0.0;
    for (int i = 0; i < 8; ++i) cost += (pts.row(i) - c[(mask >> i) & 1]).squaredNorm();
    if (cost < best) {
      best = cost;
      best_mask = mask;
    }
  }
  const ClusterResult r = kmeans(pts, 2, 5);
  EXPECT_NEAR(r.inertia, best, 1e-9);
  for (int i = 1; i < 8; ++i) {
    const bool same_brute = ((best_mask >> i) & 1) == (best_mask & 1);
    const bool same_km = r.assignments[static_cast<std::size_t>(i)] == r.assignments[0];
    EXPECT_EQ(same_brute, same_km) << i;
  }
}

TEST(KMeans, InertiaNeverIncreases) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ClusterResult r = kmeans(random_points(seed, 120, 6), 7, seed);
    ASSERT_GE(r.inertia_trace.size(), 2u);
    for (std::size_t i = 1; i < r.inertia_trace.size(); ++i)
      EXPECT_LE(r.inertia_trace[i], r.inertia_trace[i - 1] + 1e-12) << "seed " << seed << " iter " << i;
    EXPECT_GE(r.inertia, 0.0);
  }
}

TEST(KMeans, TooFewPoints) {
  try {
    kmeans(random_points(2, 3, 2), 4, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Input);
  }
}

TEST(InitBlock, KOneIdentifierIsBankMean) {
  const FeatureBank b = bank_of(random_points(3, 40, 8));
  const ConceptTokenBlock raw = raw_block(b, 1, 4);
  const RowVector mean = b.vectors.colwise().mean();
  for (int d = 0; d < 8; ++d) {
    EXPECT_NEAR(raw.identifier()[d], mean[d], 1e-9);
    EXPECT_NEAR(raw.token(0)[d], mean[d], 1e-9);
  }
}

TEST(InitBlock, KTwoIdentifierIsMidpoint) {
  const ConceptTokenBlock raw = raw_block(bank_of(random_points(4, 30, 4)), 2, 7);
  const RowVector mid = (raw.token(0) + raw.token(1)) / 2.0;
  for (int d = 0; d < 4; ++d) EXPECT_NEAR(raw.identifier()[d], mid[d], 1e-12);
}

TEST(InitBlock, AllRowsAlignedToReferenceNorm) {
  const FeatureBank b = bank_of(random_points(5, 200, 64));
  const ConceptTokenBlock blk = init_block(b, 16, 11, 2.75);
  ASSERT_EQ(blk.k(), 16);
  ASSERT_EQ(blk.rows.rows(), 17);
  for (Eigen::Index i = 0; i < blk.rows.rows(); ++i) EXPECT_NEAR(blk.rows.row(i).norm(), 2.75, 1e-6);
}

TEST(InitBlock, DeterministicGivenSeed) {
  const FeatureBank b = bank_of(random_points(6, 100, 16));
  EXPECT_EQ(init_block(b, 8, 3, 1.0).rows, init_block(b, 8, 3, 1.0).rows);
}

TEST(InitBlock, AlignmentKeepsNearestBankNeighbour) {
  const FeatureBank b = bank_of(random_points(7, 150, 12));
  const ConceptTokenBlock raw = raw_block(b, 6, 2);
  const ConceptTokenBlock aligned = init_block(b, 6, 2, 3.0);
  auto nearest = [&](const RowVector& v) {
    Eigen::Index arg = 0;
    double best = -2.0;
    for (Eigen::Index i = 0; i < b.count(); ++i) {
      const double c = v.dot(b.vectors.row(i)) / (v.norm() * b.vectors.row(i).norm());
      if (c > best) {
        best = c;
        arg = i;
      }
    }
    return arg;
  };
  for (Eigen::Index r = 0; r < raw.rows.rows(); ++r) EXPECT_EQ(nearest(raw.rows.row(r)), nearest(aligned.rows.row(r)));
}

TEST(InitBlock, BankSmallerThanK) {
  try {
    init_block(bank_of(random_points(8, 5, 4)), 6, 1, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Input);
  }
}

TEST(NormAlign, HalvesANormTwoVector) {
  RowVector v(3);
  v << 0.0, 2.0, 0.0;
  const RowVector out = norm_align(v, 1.0);
  EXPECT_EQ(out, RowVector(v / 2.0));
}

TEST(NormAlign, FixedPointAtTargetNorm) {
  RowVector v(2);
  v << 3.0, 4.0;
  const RowVector out = norm_align(v, 5.0);
  for (int i = 0; i < 2; ++i) EXPECT_NEAR(out[i], v[i], 1e-9);
}

TEST(NormAlign, PreservesDirection) {
  const RowVector v = random_points(9, 1, 32).row(0);
  const RowVector out = norm_align(v, 0.7);
  EXPECT_NEAR(out.norm(), 0.7, 1e-12);
  EXPECT_NEAR(v.dot(out) / (v.norm() * out.norm()), 1.0, 1e-12);
}

TEST(NormAlign, ZeroVectorIsDegenerate) {
  try {
    norm_align(RowVector::Zero(4), 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateInput);
  }
}

TEST(ReferenceNorm, MeanOfRowNorms) {
  Matrix m = Matrix::Zero(3, 2);
  m(0, 0) = 1.0;
  m(1, 1) = 2.0;
  m(2, 0) = 3.0;
  EXPECT_DOUBLE_EQ(reference_norm(m), 2.0);
  Matrix unit = Matrix::Zero(4, 3);
  for (int i = 0; i < 4; ++i) unit(i, i % 3) = 1.0;
  EXPECT_DOUBLE_EQ(reference_norm(unit), 1.0);
}

TEST(ReferenceNorm, MatchesNaiveLoop) {
  const Matrix m = random_points(10, 512, 64);
  double total = 0.0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    double sq = 0.0;
    for (Eigen::Index j = 0; j < m.cols(); ++j) sq += m(i, j) * m(i, j);
    total += std::sqrt(sq);
  }
  EXPECT_NEAR(reference_norm(m), total / 512.0, 1e-12);
}

TEST(ReferenceNorm, EmptyVocabulary) {
  try {
    reference_norm(Matrix(0, 4));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Input);
  }
}

TEST(RandomBlock, AlignedAndSeeded) {
  const ConceptTokenBlock a = random_block("c", 4, 16, 1, 2.0), b = random_block("c", 4, 16, 1, 2.0);
  EXPECT_EQ(a.rows, b.rows);
  for (Eigen::Index i = 0; i < a.rows.rows(); ++i) EXPECT_NEAR(a.rows.row(i).norm(), 2.0, 1e-9);
}
