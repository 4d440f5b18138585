#pragma once

#include <cstddef>
#include <span>

#include "ckaa/rng.hpp"
#include "ckaa/tensor.hpp"

namespace ckaa {

// Linear head g: logits = feat W^T + b, W is [classes x dim].
struct LinearHead {
  Tensor weight;
  Tensor bias;

  static LinearHead init(std::size_t classes, std::size_t dim, Rng& rng);
  std::size_t classes() const { return weight.rows(); }
  std::size_t dim() const { return weight.cols(); }
  LinearHead clone() const { return {weight.clone(), bias.clone()}; }
  void set_trainable(bool on);
};

Tensor classify(const LinearHead& head, const Tensor& feats);

// Appends new_classes rows (normal 0.02, zero bias); existing rows are copied bitwise.
LinearHead grow_head(const LinearHead& head, std::size_t new_classes, Rng& rng);

// heads[t] is the task-adaptive head of session t (0-based, oldest first);
// task_of_class[k] is the session that introduced class k. Row k of the
// result is the mean of heads[t] row k over t = task_of_class[k] .. last.
LinearHead aggregate_global_head(std::span<const LinearHead> heads, std::span<const int> task_of_class);

}  // namespace ckaa
