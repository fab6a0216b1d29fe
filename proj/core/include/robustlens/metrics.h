#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>

#include <Eigen/Core>

#include "robustlens/attacks.h"
#include "robustlens/network.h"

namespace rl {

// Mean and covariance of a set of d-dimensional observations.
struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  Index count = 0;

  Index dim() const { return mean.size(); }
};

// Rows of `observations` are samples. Covariance uses 1/n.
GaussianStats fit_gaussian(const Eigen::MatrixXd& observations);

// Gaussian over flattened pixel vectors of [N,C,H,W] images (N >= 2).
GaussianStats mvn_fit(const Tensor<float>& images);

// Draws mean + L z with L L^T = cov + ridge*I and z standard normal. Falls
// back to an eigen factorisation (negative eigenvalues clamped) when the
// Cholesky factorisation fails.
class MvnSampler {
 public:
  explicit MvnSampler(GaussianStats stats, double ridge = 1e-6);

  Index dim() const { return stats_.dim(); }
  const GaussianStats& stats() const { return stats_; }
  bool used_cholesky() const { return cholesky_; }

  Eigen::VectorXd draw(std::mt19937_64& rng) const;
  // One image shaped `sample_shape`, clipped to `range` when given.
  Tensor<float> sample(std::mt19937_64& rng, const Shape& sample_shape,
                       const std::optional<PixelRange>& range = PixelRange{}) const;
  // `count` images stacked into [count, ...].
  Tensor<float> sample_batch(std::mt19937_64& rng, Index count, const Shape& sample_shape,
                             const std::optional<PixelRange>& range = PixelRange{}) const;

 private:
  GaussianStats stats_;
  Eigen::MatrixXd factor_;
  bool cholesky_ = true;
};

// Seeded single draw, clipped to [0,1].
Tensor<float> mvn_sample(const GaussianStats& stats, std::uint64_t seed, const Shape& sample_shape);

struct SqrtInfo {
  int clamped_eigenvalues = 0;
  double most_negative_eigenvalue = 0.0;
};

// S = V diag(sqrt(max(lambda, 0))) V^T of a symmetric matrix. Throws
// NumericError if M departs from symmetry by more than 1e-8 (relative to
// max(1, max|M|)).
Eigen::MatrixXd matrix_sqrt_psd(const Eigen::MatrixXd& m, SqrtInfo* info = nullptr);

// Tr((A B)^{1/2}) evaluated as Tr((A^{1/2} B A^{1/2})^{1/2}).
double trace_sqrt_product(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, SqrtInfo* info = nullptr);

struct FrechetResult {
  double distance = 0.0;
  double mean_term = 0.0;
  double trace_term = 0.0;
  int clamped_eigenvalues = 0;
};

// ||mu - mu1||^2 + Tr(S + S1 - 2 (S S1)^{1/2}), clamped at 0.
FrechetResult frechet_details(const GaussianStats& a, const GaussianStats& b);
double frechet_distance(const GaussianStats& a, const GaussianStats& b);
double frechet_distance(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma, const Eigen::VectorXd& mu1,
                        const Eigen::MatrixXd& sigma1);

// Penultimate-layer features of a fixed trained network, computed in 64-bit.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(const Network<float>& net, std::string id = {});

  Index dim() const { return net_.spec.representation_width(); }
  const std::string& id() const { return id_; }
  const NetworkSpec& spec() const { return net_.spec; }
  // [N, d] feature rows.
  Eigen::MatrixXd features(const Tensor<float>& images, Index chunk = 64) const;
  Eigen::VectorXd feature(const Tensor<float>& image) const;

 private:
  Network<double> net_;
  std::string id_;
};

inline constexpr double kFidRidge = 1e-6;

struct FidReport {
  double value = 0.0;
  Index real_count = 0;
  Index generated_count = 0;
  Index dim = 0;
  int clamped_eigenvalues = 0;
};

// Frechet distance between Gaussians fitted to extractor features of both
// sets, with kFidRidge added to each covariance. Warns when a set has fewer
// than d+1 images.
FidReport fid(const FeatureExtractor& extractor, const Tensor<float>& real, const Tensor<float>& generated);
FidReport fid_from_features(const Eigen::MatrixXd& real, const Eigen::MatrixXd& generated);

double feature_l2_distance(const FeatureExtractor& extractor, const Tensor<float>& a, const Tensor<float>& b);

// u64 d | u64 count | count*d f64 values, row-major, little-endian.
void write_feature_set(const Eigen::MatrixXd& features, const std::filesystem::path& path);
Eigen::MatrixXd read_feature_set(const std::filesystem::path& path);

}  // namespace rl
