#pragma once

#include <cstddef>

#include "ckaa/rng.hpp"
#include "ckaa/tensor.hpp"

namespace ckaa {

inline constexpr double kNullSpaceThreshold = 0.02;
inline constexpr double kCovShrinkage = 1e-4;

// Column-orthonormal basis of a subspace of R^ambient_dim. rank() may be 0.
class OrthonormalBasis {
 public:
  explicit OrthonormalBasis(std::size_t ambient_dim = 1);
  // Columns of `vectors` [ambient x r] must already be orthonormal.
  OrthonormalBasis(std::size_t ambient_dim, Tensor vectors);

  static OrthonormalBasis full(std::size_t ambient_dim);

  std::size_t ambient_dim() const { return ambient_; }
  std::size_t rank() const { return rank_; }
  // [ambient x rank]; undefined content when rank() == 0.
  const Tensor& vectors() const { return vectors_; }
  // U U^T, the orthogonal projector onto the subspace.
  Tensor projector() const;

 private:
  std::size_t ambient_;
  std::size_t rank_ = 0;
  Tensor vectors_;
};

// Right singular vectors of m whose singular value is below
// rel_threshold * sigma_max. Directions beyond min(a, b) count as zero.
OrthonormalBasis svd_null_basis(const Tensor& m, double rel_threshold = kNullSpaceThreshold);

// Lower Cholesky factor of cov + shrinkage * I.
Tensor cholesky_factor(const Tensor& cov, double shrinkage = kCovShrinkage);
// n draws mean + L eps with eps ~ N(0, I).
Tensor sample_with_factor(const Tensor& mean, const Tensor& factor, std::size_t n, Rng& rng);

// n draws from N(mean, cov + shrinkage * I) via the Cholesky factor.
Tensor cholesky_sample(const Tensor& mean, const Tensor& cov, std::size_t n, Rng& rng,
                       double shrinkage = kCovShrinkage);

}  // namespace ckaa
