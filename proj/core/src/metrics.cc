#include "robustlens/metrics.h"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

#include <spdlog/spdlog.h>

namespace rl {

static_assert(std::endian::native == std::endian::little, "feature-set I/O assumes a little-endian host");

GaussianStats fit_gaussian(const Eigen::MatrixXd& observations) {
  if (observations.rows() < 1) throw ConfigError("cannot fit a Gaussian to zero observations");
  GaussianStats stats;
  stats.count = observations.rows();
  stats.mean = observations.colwise().mean().transpose();
  const Eigen::MatrixXd centered = observations.rowwise() - stats.mean.transpose();
  stats.cov = (centered.transpose() * centered) / static_cast<double>(observations.rows());
  return stats;
}

GaussianStats mvn_fit(const Tensor<float>& images) {
  if (images.rank() < 2) throw DimensionError("mvn_fit expects a stack of images, got " + to_string(images.shape()));
  if (images.dim(0) < 2) throw ConfigError("mvn_fit needs at least 2 images, got " + std::to_string(images.dim(0)));
  const Index n = images.dim(0), d = images.row_size();
  Eigen::MatrixXd rows(n, d);
  for (Index i = 0; i < n; ++i) {
    auto r = images.row(i);
    for (Index j = 0; j < d; ++j) rows(i, j) = r[static_cast<std::size_t>(j)];
  }
  return fit_gaussian(rows);
}

MvnSampler::MvnSampler(GaussianStats stats, double ridge) : stats_(std::move(stats)) {
  if (stats_.cov.rows() != stats_.dim() || stats_.cov.cols() != stats_.dim()) {
    throw DimensionError("covariance is not d x d for d = " + std::to_string(stats_.dim()));
  }
  Eigen::MatrixXd reg = 0.5 * (stats_.cov + stats_.cov.transpose());
  reg.diagonal().array() += ridge;
  Eigen::LLT<Eigen::MatrixXd> llt(reg);
  if (llt.info() == Eigen::Success) {
    factor_ = llt.matrixL();
    return;
  }
  cholesky_ = false;
  spdlog::warn("MVN covariance not positive definite after ridge; using eigen factorisation");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(reg);
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  factor_ = eig.eigenvectors() * root.asDiagonal();
}

Eigen::VectorXd MvnSampler::draw(std::mt19937_64& rng) const {
  std::normal_distribution<double> gauss;
  Eigen::VectorXd z(dim());
  for (Index i = 0; i < dim(); ++i) z[i] = gauss(rng);
  return stats_.mean + factor_ * z;
}

Tensor<float> MvnSampler::sample(std::mt19937_64& rng, const Shape& sample_shape,
                                 const std::optional<PixelRange>& range) const {
  if (numel(sample_shape) != dim()) {
    throw DimensionError("sample shape " + to_string(sample_shape) + " does not hold " + std::to_string(dim()) +
                         " values");
  }
  const Eigen::VectorXd v = draw(rng);
  Tensor<float> out(sample_shape);
  for (Index i = 0; i < dim(); ++i) {
    double x = v[i];
    if (range) x = std::clamp(x, range->lo, range->hi);
    out[i] = static_cast<float>(x);
  }
  return out;
}

Tensor<float> MvnSampler::sample_batch(std::mt19937_64& rng, Index count, const Shape& sample_shape,
                                       const std::optional<PixelRange>& range) const {
  std::vector<Tensor<float>> samples;
  samples.reserve(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) samples.push_back(sample(rng, sample_shape, range));
  return stack<float>(samples);
}

Tensor<float> mvn_sample(const GaussianStats& stats, std::uint64_t seed, const Shape& sample_shape) {
  std::mt19937_64 rng(seed);
  return MvnSampler(stats).sample(rng, sample_shape);
}

Eigen::MatrixXd matrix_sqrt_psd(const Eigen::MatrixXd& m, SqrtInfo* info) {
  if (m.rows() != m.cols()) throw DimensionError("matrix_sqrt_psd needs a square matrix");
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-8 * scale) {
    throw NumericError("matrix_sqrt_psd: input asymmetric by " + std::to_string(asym));
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
  if (eig.info() != Eigen::Success) throw NumericError("symmetric eigendecomposition failed");
  Eigen::VectorXd lambda = eig.eigenvalues();
  for (Index i = 0; i < lambda.size(); ++i) {
    if (lambda[i] < 0.0) {
      if (info) {
        ++info->clamped_eigenvalues;
        info->most_negative_eigenvalue = std::min(info->most_negative_eigenvalue, lambda[i]);
      }
      lambda[i] = 0.0;
    }
  }
  return eig.eigenvectors() * lambda.cwiseSqrt().asDiagonal() * eig.eigenvectors().transpose();
}

double trace_sqrt_product(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, SqrtInfo* info) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("trace_sqrt_product: dimension mismatch");
  const Eigen::MatrixXd root = matrix_sqrt_psd(a, info);
  Eigen::MatrixXd inner = root * b * root;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(inner, Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) throw NumericError("symmetric eigendecomposition failed");
  double trace = 0.0;
  for (Index i = 0; i < eig.eigenvalues().size(); ++i) {
    const double l = eig.eigenvalues()[i];
    if (l < 0.0) {
      if (info) {
        ++info->clamped_eigenvalues;
        info->most_negative_eigenvalue = std::min(info->most_negative_eigenvalue, l);
      }
      continue;
    }
    trace += std::sqrt(l);
  }
  return trace;
}

FrechetResult frechet_details(const GaussianStats& a, const GaussianStats& b) {
  if (a.dim() != b.dim() || a.cov.rows() != a.dim() || b.cov.rows() != b.dim()) {
    throw DimensionError("frechet_distance: dimensions " + std::to_string(a.dim()) + " and " +
                         std::to_string(b.dim()) + " differ");
  }
  SqrtInfo info;
  FrechetResult r;
  r.mean_term = (a.mean - b.mean).squaredNorm();
  r.trace_term = a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt_product(a.cov, b.cov, &info);
  r.clamped_eigenvalues = info.clamped_eigenvalues;
  if (info.clamped_eigenvalues > 0) {
    spdlog::warn("frechet_distance clamped {} negative eigenvalue(s), most negative {:.3e}", info.clamped_eigenvalues,
                 info.most_negative_eigenvalue);
  }
  r.distance = std::max(0.0, r.mean_term + r.trace_term);
  return r;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) { return frechet_details(a, b).distance; }

double frechet_distance(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma, const Eigen::VectorXd& mu1,
                        const Eigen::MatrixXd& sigma1) {
  return frechet_distance(GaussianStats{mu, sigma, 0}, GaussianStats{mu1, sigma1, 0});
}

FeatureExtractor::FeatureExtractor(const Network<float>& net, std::string id)
    : net_(net.cast<double>()), id_(std::move(id)) {}

Eigen::MatrixXd FeatureExtractor::features(const Tensor<float>& images, Index chunk) const {
  if (images.rank() != 4) throw DimensionError("feature extraction expects [N,C,H,W], got " + to_string(images.shape()));
  const Tensor<double> reps = predict_representation(net_, images.cast<double>(), chunk);
  Eigen::MatrixXd out(reps.dim(0), reps.dim(1));
  for (Index i = 0; i < reps.dim(0); ++i) {
    for (Index j = 0; j < reps.dim(1); ++j) out(i, j) = reps[i * reps.dim(1) + j];
  }
  return out;
}

Eigen::VectorXd FeatureExtractor::feature(const Tensor<float>& image) const {
  return features(as_batch(image)).row(0).transpose();
}

FidReport fid_from_features(const Eigen::MatrixXd& real, const Eigen::MatrixXd& generated) {
  if (real.rows() == 0 || generated.rows() == 0) throw ConfigError("FID needs two non-empty image sets");
  if (real.cols() != generated.cols()) throw DimensionError("FID feature dimensions differ");
  const Index d = real.cols();
  for (const auto* set : {&real, &generated}) {
    if (set->rows() < d + 1) {
      spdlog::warn("FID set of {} images is smaller than feature dimension + 1 ({})", set->rows(), d + 1);
    }
  }
  GaussianStats a = fit_gaussian(real), b = fit_gaussian(generated);
  a.cov.diagonal().array() += kFidRidge;
  b.cov.diagonal().array() += kFidRidge;
  const auto r = frechet_details(a, b);
  return FidReport{r.distance, real.rows(), generated.rows(), d, r.clamped_eigenvalues};
}

FidReport fid(const FeatureExtractor& extractor, const Tensor<float>& real, const Tensor<float>& generated) {
  if (real.rank() < 1 || real.dim(0) == 0 || generated.rank() < 1 || generated.dim(0) == 0) {
    throw ConfigError("FID needs two non-empty image sets");
  }
  return fid_from_features(extractor.features(real), extractor.features(generated));
}

double feature_l2_distance(const FeatureExtractor& extractor, const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) throw DimensionError("feature_l2_distance: image shapes differ");
  const auto f = extractor.features(stack<float>(std::vector<Tensor<float>>{a, b}));
  return (f.row(0) - f.row(1)).norm();
}

void write_feature_set(const Eigen::MatrixXd& features, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  const auto d = static_cast<std::uint64_t>(features.cols());
  const auto count = static_cast<std::uint64_t>(features.rows());
  out.write(reinterpret_cast<const char*>(&d), 8);
  out.write(reinterpret_cast<const char*>(&count), 8);
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows = features;
  out.write(reinterpret_cast<const char*>(rows.data()), static_cast<std::streamsize>(d * count * sizeof(double)));
  if (!out) throw FormatError("short write to " + path.string());
}

Eigen::MatrixXd read_feature_set(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::uint64_t d = 0, count = 0;
  in.read(reinterpret_cast<char*>(&d), 8);
  in.read(reinterpret_cast<char*>(&count), 8);
  if (!in) throw FormatError(path.string() + ": truncated feature-set header");
  const auto expected = std::filesystem::file_size(path);
  if (expected != 16 + d * count * sizeof(double)) {
    throw FormatError(path.string() + ": payload size does not match header (d=" + std::to_string(d) +
                      ", count=" + std::to_string(count) + ")");
  }
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows(count, d);
  in.read(reinterpret_cast<char*>(rows.data()), static_cast<std::streamsize>(d * count * sizeof(double)));
  if (!in) throw FormatError(path.string() + ": truncated feature-set payload");
  return rows;
}

}  // namespace rl
