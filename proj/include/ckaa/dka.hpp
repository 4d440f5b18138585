#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "ckaa/classifier.hpp"
#include "ckaa/rng.hpp"
#include "ckaa/tensor.hpp"

namespace ckaa {

struct DkaConfig {
  double tau_f = 0.05;
  double tau_g = 0.2;
  std::size_t k_g = 20;
  std::size_t sampled_batch = 0;  // B_s; 0 means "same as the training batch"
  bool ca_detach = true;          // CA trains the head only

  void validate() const;
};

struct GaussianClassModel {
  int class_id = 0;
  int task_id = 0;
  Tensor mean;  // [d]
  Tensor cov;   // [d x d], unbiased
  std::size_t count = 0;
};

enum class FeatureOrigin { CurrentShared, CurrentSpecific, SampledShared, SampledSpecific, CachedPrevious };

struct LabeledFeatureBatch {
  Tensor feats;  // [B x d]
  std::vector<int> labels;
  FeatureOrigin origin = FeatureOrigin::CurrentSpecific;
};

Tensor ce_loss(const Tensor& logits, std::span<const int> labels);

// One model per class present in labels, ordered by class id.
std::vector<GaussianClassModel> fit_gaussians(const Tensor& shared_feats, std::span<const int> labels, int task_id);

// Draws labels uniformly over the models, then one feature per label.
class GaussianSampler {
 public:
  explicit GaussianSampler(std::span<const GaussianClassModel> models);
  bool empty() const { return models_.empty(); }
  LabeledFeatureBatch sample(std::size_t n, Rng& rng) const;

 private:
  std::vector<const GaussianClassModel*> models_;
  std::vector<Tensor> factors_;
};

// Cross-subspace contrastive loss. Positives of anchor i are cached rows with
// its label, negatives are current rows with another label. Anchors without
// a positive are skipped; the mean runs over the remaining anchors.
Tensor csfa_loss(const LabeledFeatureBatch& current, const LabeledFeatureBatch& cached_prev, double tau_f);

// G[i][j] = exp(cos(s_i, c_j) / tau_g) for the k_g most similar current rows
// of each sampled row (ties to the lower index), 0 elsewhere.
Tensor affinity_matrix(const Tensor& sampled_shared, const Tensor& current_shared, double tau_g, std::size_t k_g);

// Sampled shared rows shifted by the affinity-weighted mean of z_j - f_j.
Tensor simulate_features(const Tensor& sampled_shared, const Tensor& current_shared, const Tensor& current_specific,
                         const Tensor& affinity);

// Mean cross-entropy of head over every row of the unified set.
Tensor ca_loss(std::span<const LabeledFeatureBatch> unified, const LinearHead& head);

// Unit-weight sum; session 1 uses the cross-entropy term alone.
Tensor total_loss(const Tensor& ce, const std::optional<Tensor>& csfa, const std::optional<Tensor>& ca,
                  std::size_t session);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

}  // namespace ckaa
