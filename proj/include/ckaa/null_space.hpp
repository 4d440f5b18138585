#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ckaa/backbone.hpp"
#include "ckaa/linalg.hpp"
#include "ckaa/tensor.hpp"

namespace ckaa {

// Running uncentred Gram matrices of the quantities prompt updates must not
// disturb, per block: rows of Q_X W_k^T per head (cov_q, [d x d]) and the
// attention paid by sequence tokens to the prompt rows, per head (cov_s, [N_p x N_p]).
struct LayerFeatureStats {
  std::vector<Tensor> cov_q;
  std::vector<Tensor> cov_s;
  std::size_t sample_count = 0;

  static LayerFeatureStats zeros(const BackboneConfig& config);
  bool empty() const { return sample_count == 0; }
};

struct NullSpaceBasis {
  std::vector<OrthonormalBasis> u1;  // per block, ambient d
  std::vector<OrthonormalBasis> u2;  // per block, ambient N_p
};

// Folds the contributions of inputs x (one row per sample) into stats, one
// sample at a time, so splitting x into consecutive parts gives identical sums.
void accumulate_stats(LayerFeatureStats& stats, const Backbone& bb, const PromptSet& prompts, const Tensor& x);
void accumulate_stats(LayerFeatureStats& stats, const Backbone& bb, const PromptSet& prompts,
                      std::span<const Tensor> batches);

// Per-block null spaces of cov_q and cov_s. With fallback_rank > 0 an empty
// basis is replaced by that many smallest-singular-value directions.
NullSpaceBasis recompute_bases(const LayerFeatureStats& stats, double rel_threshold = kNullSpaceThreshold,
                               std::size_t fallback_rank = 0);

// (U2 U2^T) grad (U1 U1^T).
Tensor project_prompt_gradient(const Tensor& grad, const OrthonormalBasis& u1, const OrthonormalBasis& u2);

// P <- P - lr * project(grad) for every block's prompt.
void apply_projected_step(PromptSet& prompts, const std::vector<Tensor>& grads, const NullSpaceBasis& basis, double lr);

}  // namespace ckaa
