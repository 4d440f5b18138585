#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ckaa/tensor.hpp"

namespace ckaa {

inline constexpr double kLayerNormEps = 1e-6;

// Matrix products; rank-1 operands are treated as single rows.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// Adds a length-cols vector to every row.
Tensor add_rowvec(const Tensor& a, const Tensor& v);
// a has k * t.rows() rows; t is added to each consecutive block of rows.
Tensor add_tiled(const Tensor& a, const Tensor& t);
// Row i of a multiplied by the constant w[i].
Tensor scale_rows(const Tensor& a, std::span<const double> w);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);

// Row-wise standardisation followed by the affine (gamma, beta).
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps);
// Row-wise softmax of a / temperature.
Tensor softmax(const Tensor& a, double temperature = 1.0);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor square_norm(const Tensor& a);

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> idx);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
// Takes row `offset` of every consecutive block of `block` rows.
Tensor strided_rows(const Tensor& a, std::size_t block, std::size_t offset);
// Inserts `prefix` (one row) in front of every block of `block` rows.
Tensor prepend_row(const Tensor& a, const Tensor& prefix, std::size_t block);

// Mean over rows of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// Multi-head attention for `batch` sequences of `tokens` query rows each.
// Keys/values are the sequence's own rows followed by the shared rows of
// kp/vp (which may be absent). Returns the per-token mixed values [B*T x d].
// When probs_out is given it receives the post-softmax weights laid out as
// [batch][head][tokens][tokens + prompt_rows].
Tensor prompt_attention(const Tensor& q, const Tensor& kx, const Tensor& vx, const Tensor* kp, const Tensor* vp,
                        std::size_t batch, std::size_t heads, std::vector<double>* probs_out = nullptr);

}  // namespace ckaa

namespace ckaa {

// Plain-value softmax that admits -inf entries (they map to exactly 0).
// At least one entry must be finite.
std::vector<double> softmax_values(std::span<const double> v, double temperature = 1.0);

}  // namespace ckaa
