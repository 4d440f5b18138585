#include "ckaa/linalg.hpp"

#include <cmath>

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include "ckaa/error.hpp"
#include "eigen_view.hpp"

namespace ckaa {

using detail::RowMatrix;
using detail::view;

OrthonormalBasis::OrthonormalBasis(std::size_t ambient_dim) : ambient_(ambient_dim), vectors_({ambient_dim, 1}) {
  require(ambient_dim > 0, ErrorKind::Dimension, "basis ambient dimension must be positive");
}

OrthonormalBasis::OrthonormalBasis(std::size_t ambient_dim, Tensor vectors)
    : ambient_(ambient_dim), rank_(vectors.cols()), vectors_(std::move(vectors)) {
  require(vectors_.rows() == ambient_dim, ErrorKind::Dimension, "basis vectors have wrong ambient dimension");
}

OrthonormalBasis OrthonormalBasis::full(std::size_t ambient_dim) {
  return OrthonormalBasis(ambient_dim, Tensor::identity(ambient_dim));
}

Tensor OrthonormalBasis::projector() const {
  if (rank_ == 0) return Tensor({ambient_, ambient_}, 0.0);
  RowMatrix p = view(vectors_) * view(vectors_).transpose();
  return detail::from_eigen(p);
}

OrthonormalBasis svd_null_basis(const Tensor& m, double rel_threshold) {
  require(rel_threshold > 0.0 && rel_threshold <= 1.0, ErrorKind::Config, "null-space threshold must be in (0, 1]");
  const std::size_t a = m.rows(), b = m.cols();
  Eigen::JacobiSVD<RowMatrix> svd(view(m), Eigen::ComputeFullV);
  if (svd.info() != Eigen::Success) fail(ErrorKind::Numeric, "SVD did not converge");
  const auto& sv = svd.singularValues();
  const double smax = sv.size() ? sv(0) : 0.0;
  const auto& v = svd.matrixV();
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(b); ++i) {
    const double s = i < sv.size() ? sv(i) : 0.0;
    if (smax == 0.0 || rel_threshold >= 1.0 || s < rel_threshold * smax) keep.push_back(i);
  }
  (void)a;
  if (keep.empty()) return OrthonormalBasis(b);
  RowMatrix u(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t c = 0; c < keep.size(); ++c) u.col(static_cast<Eigen::Index>(c)) = v.col(keep[c]);
  return OrthonormalBasis(b, detail::from_eigen(u));
}

Tensor cholesky_factor(const Tensor& cov, double shrinkage) {
  const std::size_t d = cov.rows();
  require(cov.cols() == d, ErrorKind::Dimension, "covariance must be square");
  RowMatrix c = view(cov);
  require((c - c.transpose()).cwiseAbs().maxCoeff() <= 1e-9 * (1.0 + c.cwiseAbs().maxCoeff()), ErrorKind::Numeric,
          "covariance is not symmetric");
  c.diagonal().array() += shrinkage;
  Eigen::LLT<RowMatrix> llt(c);
  if (llt.info() != Eigen::Success) fail(ErrorKind::Numeric, "covariance not positive definite after shrinkage");
  return detail::from_eigen(RowMatrix(llt.matrixL()));
}

Tensor sample_with_factor(const Tensor& mean, const Tensor& factor, std::size_t n, Rng& rng) {
  const std::size_t d = mean.numel();
  require(factor.rows() == d && factor.cols() == d, ErrorKind::Dimension, "covariance shape does not match mean");
  require(n > 0, ErrorKind::Dimension, "sample count must be positive");
  std::vector<double> out(n * d), eps(d);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < d; ++j) eps[j] = rng.normal();
    for (std::size_t i = 0; i < d; ++i) {
      double acc = mean[i];
      for (std::size_t j = 0; j <= i; ++j) acc += factor(i, j) * eps[j];
      out[r * d + i] = acc;
    }
  }
  return Tensor({n, d}, std::move(out));
}

Tensor cholesky_sample(const Tensor& mean, const Tensor& cov, std::size_t n, Rng& rng, double shrinkage) {
  require(cov.rows() == mean.numel(), ErrorKind::Dimension, "covariance shape does not match mean");
  return sample_with_factor(mean, cholesky_factor(cov, shrinkage), n, rng);
}

}  // namespace ckaa
