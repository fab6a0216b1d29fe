#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "robustlens/metrics.h"
#include "test_support.h"

namespace rl {
namespace {

Eigen::MatrixXd random_spd(Index d, std::mt19937_64& rng, double shift = 0.1) {
  std::normal_distribution<double> g;
  Eigen::MatrixXd a(d, d);
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < d; ++j) a(i, j) = g(rng);
  return a * a.transpose() / static_cast<double>(d) + shift * Eigen::MatrixXd::Identity(d, d);
}

GaussianStats stats_of(Eigen::VectorXd mean, Eigen::MatrixXd cov) {
  GaussianStats s;
  s.mean = std::move(mean);
  s.cov = std::move(cov);
  s.count = 100;
  return s;
}

TEST(MatrixSqrt, DiagonalCase) {
  Eigen::MatrixXd m = Eigen::Vector2d(4, 9).asDiagonal();
  const auto s = matrix_sqrt_psd(m);
  EXPECT_NEAR((s - Eigen::Matrix2d(Eigen::Vector2d(2, 3).asDiagonal())).norm(), 0.0, 1e-12);
}

TEST(MatrixSqrt, IdentityIsFixed) {
  const Eigen::MatrixXd i = Eigen::MatrixXd::Identity(5, 5);
  EXPECT_NEAR((matrix_sqrt_psd(i) - i).norm(), 0.0, 1e-12);
}

TEST(MatrixSqrt, ReconstructsRandomSpdMatrix) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = random_spd(16, rng);
    const auto s = matrix_sqrt_psd(m);
    EXPECT_LE((s * s - m).norm() / m.norm(), 1e-6);
    EXPECT_LE((s - s.transpose()).norm(), 1e-12);
  }
}

TEST(MatrixSqrt, HomogeneousInScale) {
  std::mt19937_64 rng(2);
  const auto m = random_spd(8, rng);
  for (double c : {0.01, 2.0, 100.0}) {
    const Eigen::MatrixXd diff = matrix_sqrt_psd(c * m) - std::sqrt(c) * matrix_sqrt_psd(m);
    EXPECT_LE(diff.cwiseAbs().maxCoeff(), 1e-8) << "c = " << c;
  }
}

TEST(MatrixSqrt, NegativeEigenvaluesAreClampedAndCounted) {
  Eigen::MatrixXd m = Eigen::Vector3d(4.0, -1e-9, 1.0).asDiagonal();
  SqrtInfo info;
  const auto s = matrix_sqrt_psd(m, &info);
  EXPECT_EQ(info.clamped_eigenvalues, 1);
  EXPECT_NEAR(info.most_negative_eigenvalue, -1e-9, 1e-15);
  EXPECT_EQ(s(1, 1), 0.0);
}

TEST(MatrixSqrt, AsymmetricInputIsRejected) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Identity(3, 3);
  m(0, 1) = 0.5;
  EXPECT_THROW(matrix_sqrt_psd(m), NumericError);
}

TEST(Frechet, IdenticalStatsGiveZero) {
  std::mt19937_64 rng(3);
  const auto a = stats_of(Eigen::VectorXd::Random(12), random_spd(12, rng));
  EXPECT_LE(std::abs(frechet_distance(a, a)), 1e-6);
}

TEST(Frechet, IdentityCovariancesReduceToSquaredMeanGap) {
  std::mt19937_64 rng(4);
  const Eigen::VectorXd mu = Eigen::VectorXd::Random(10);
  const Eigen::VectorXd v = Eigen::VectorXd::Random(10);
  const Eigen::MatrixXd i = Eigen::MatrixXd::Identity(10, 10);
  EXPECT_NEAR(frechet_distance(mu, i, mu + v, i), v.squaredNorm(), 1e-6);
}

TEST(Frechet, OneDimensionalClosedForm) {
  // (0, 1) vs (0, 4): 1 + 4 - 2 * sqrt(4) = 1.
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(1);
  EXPECT_NEAR(frechet_distance(zero, Eigen::MatrixXd::Constant(1, 1, 1.0), zero, Eigen::MatrixXd::Constant(1, 1, 4.0)),
              1.0, 1e-9);
  // General scalar case: (m1 - m2)^2 + (s1 - s2)^2.
  const Eigen::VectorXd m1 = Eigen::VectorXd::Constant(1, 0.3), m2 = Eigen::VectorXd::Constant(1, -1.1);
  EXPECT_NEAR(frechet_distance(m1, Eigen::MatrixXd::Constant(1, 1, 2.25), m2, Eigen::MatrixXd::Constant(1, 1, 0.49)),
              1.4 * 1.4 + 0.8 * 0.8, 1e-9);
}

TEST(Frechet, CommutingCovariancesMatchPerAxisFormula) {
  // Diagonal covariances commute, so the trace term is sum (sqrt a - sqrt b)^2.
  const Eigen::VectorXd a = Eigen::Vector4d(1.0, 0.25, 9.0, 2.0);
  const Eigen::VectorXd b = Eigen::Vector4d(4.0, 1.0, 1.0, 2.0);
  const Eigen::VectorXd mu = Eigen::Vector4d(0.1, 0.2, 0.3, 0.4);
  double expected = 0.0;
  for (int i = 0; i < 4; ++i) expected += std::pow(std::sqrt(a(i)) - std::sqrt(b(i)), 2);
  EXPECT_NEAR(frechet_distance(mu, a.asDiagonal(), mu, b.asDiagonal()), expected, 1e-9);
}

TEST(Frechet, SymmetricInArguments) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const auto a = stats_of(Eigen::VectorXd::Random(16), random_spd(16, rng));
    const auto b = stats_of(Eigen::VectorXd::Random(16), random_spd(16, rng, 0.01));
    EXPECT_NEAR(frechet_distance(a, b), frechet_distance(b, a), 1e-6);
    EXPECT_GE(frechet_distance(a, b), 0.0);
  }
}

TEST(Frechet, DimensionMismatchIsAnError) {
  const auto a = stats_of(Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3));
  const auto b = stats_of(Eigen::VectorXd::Zero(4), Eigen::MatrixXd::Identity(4, 4));
  EXPECT_THROW(frechet_distance(a, b), DimensionError);
}

TEST(Frechet, DetailsAddUp) {
  std::mt19937_64 rng(6);
  const auto a = stats_of(Eigen::VectorXd::Random(6), random_spd(6, rng));
  const auto b = stats_of(Eigen::VectorXd::Random(6), random_spd(6, rng));
  const auto d = frechet_details(a, b);
  EXPECT_NEAR(d.mean_term, (a.mean - b.mean).squaredNorm(), 1e-12);
  EXPECT_NEAR(d.distance, d.mean_term + d.trace_term, 1e-12);
}

TEST(GaussianFit, UsesPopulationCovariance) {
  Eigen::MatrixXd obs(4, 2);
  obs << 1, 2, 3, 2, 5, 6, 7, 6;
  const auto s = fit_gaussian(obs);
  EXPECT_NEAR(s.mean(0), 4.0, 1e-12);
  EXPECT_NEAR(s.mean(1), 4.0, 1e-12);
  EXPECT_NEAR(s.cov(0, 0), (9 + 1 + 1 + 9) / 4.0, 1e-12);
  EXPECT_NEAR(s.cov(0, 1), (3 * 2 + 1 * 2 + 1 * 2 + 3 * 2) / 4.0, 1e-12);
  EXPECT_EQ(s.count, 4);
}

TEST(Fid, FromFeaturesAppliesRidgeAndReportsCounts) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g;
  Eigen::MatrixXd a(50, 4), b(80, 4);
  for (Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
  for (Index i = 0; i < b.size(); ++i) b.data()[i] = 2.0 + g(rng);
  const auto r = fid_from_features(a, b);
  auto sa = fit_gaussian(a), sb = fit_gaussian(b);
  sa.cov += kFidRidge * Eigen::MatrixXd::Identity(4, 4);
  sb.cov += kFidRidge * Eigen::MatrixXd::Identity(4, 4);
  EXPECT_NEAR(r.value, frechet_distance(sa, sb), 1e-12);
  EXPECT_EQ(r.real_count, 50);
  EXPECT_EQ(r.generated_count, 80);
  EXPECT_EQ(r.dim, 4);
  EXPECT_LE(fid_from_features(a, a).value, 1e-6);
  EXPECT_THROW(fid_from_features(Eigen::MatrixXd(0, 4), b), ConfigError);
}

TEST(Fid, InvariantToPermutingBothSets) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  Eigen::MatrixXd a(40, 5), b(40, 5);
  for (Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng), b.data()[i] = 0.5 * g(rng) + 0.3;
  Eigen::PermutationMatrix<Eigen::Dynamic> p(40);
  p.setIdentity();
  std::shuffle(p.indices().data(), p.indices().data() + 40, rng);
  EXPECT_NEAR(fid_from_features(p * a, p * b).value, fid_from_features(a, b).value, 1e-9);
}

class Extractor : public ::testing::Test {
 protected:
  static const FeatureExtractor& extractor() {
    static const FeatureExtractor e(build_network<float>(testing::micro_spec(8), 21), "untrained-8x8");
    return e;
  }
};

TEST_F(Extractor, FeaturesAreDeterministicAndMatchTheNetwork) {
  const auto data = testing::shapes(3, 8, 1);
  const auto f = extractor().features(data.images);
  EXPECT_EQ(f.rows(), data.size());
  EXPECT_EQ(f.cols(), extractor().dim());
  EXPECT_EQ(f, extractor().features(data.images, 5));
  const auto net = build_network<float>(testing::micro_spec(8), 21).cast<double>();
  const auto r = forward_representation(net, data.images.cast<double>());
  for (Index i = 0; i < f.rows(); ++i)
    for (Index j = 0; j < f.cols(); ++j) EXPECT_EQ(f(i, j), r[i * f.cols() + j]);
  EXPECT_EQ(extractor().id(), "untrained-8x8");
}

TEST_F(Extractor, SelfFidIsZero) {
  const auto data = testing::shapes(20, 8, 2);
  EXPECT_LE(std::abs(fid(extractor(), data.images, data.images).value), 1e-4);
}

TEST_F(Extractor, FidIsSymmetric) {
  const auto a = testing::shapes(20, 8, 3).images;
  const auto b = testing::shapes(20, 8, 4).images;
  EXPECT_NEAR(fid(extractor(), a, b).value, fid(extractor(), b, a).value, 1e-6);
}

TEST_F(Extractor, FeatureDistanceIsAMetric) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = testing::random_tensor<float>({3, 8, 8}, rng, 0, 1);
    const auto b = testing::random_tensor<float>({3, 8, 8}, rng, 0, 1);
    const auto c = testing::random_tensor<float>({3, 8, 8}, rng, 0, 1);
    EXPECT_EQ(feature_l2_distance(extractor(), a, a), 0.0);
    EXPECT_DOUBLE_EQ(feature_l2_distance(extractor(), a, b), feature_l2_distance(extractor(), b, a));
    EXPECT_LE(feature_l2_distance(extractor(), a, c),
              feature_l2_distance(extractor(), a, b) + feature_l2_distance(extractor(), b, c) + 1e-6);
  }
}

TEST(FeatureSets, FileRoundTripIsExact) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> g;
  Eigen::MatrixXd m(7, 3);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  const auto path = std::filesystem::temp_directory_path() / ("rl-feat-" + std::to_string(::getpid()) + ".feat");
  write_feature_set(m, path);
  EXPECT_EQ(std::filesystem::file_size(path), 16u + 7 * 3 * 8);
  EXPECT_EQ(read_feature_set(path), m);
  std::filesystem::resize_file(path, 16 + 10);
  EXPECT_THROW(read_feature_set(path), FormatError);
  std::filesystem::remove(path);
}

TEST(FidOrdering, RealHalvesAreCloserThanNoise) {
  const auto& fx = testing::standard_fixture();
  const FeatureExtractor extractor(fx.network, "fixture");
  const auto& images = fx.train_set.images;
  const Index half = images.dim(0) / 2;
  const auto a = slice_rows(images, 0, half);
  const auto b = slice_rows(images, half, 2 * half);
  std::mt19937_64 rng(11);
  const auto noise = testing::random_tensor<float>(b.shape(), rng, 0, 1);
  const double halves = fid(extractor, a, b).value;
  EXPECT_GT(halves, 0.0);
  EXPECT_LT(halves, fid(extractor, a, noise).value);
}

}  // namespace
}  // namespace rl
