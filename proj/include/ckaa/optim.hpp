#pragma once

#include <functional>
#include <vector>

#include "ckaa/tensor.hpp"

namespace ckaa {

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Maps a gradient-shaped tensor into the allowed update subspace. Applied to
// the gradient before the moment updates and to the final step.
using StepTransform = std::function<Tensor(const Tensor&)>;

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  void add(Tensor param, StepTransform transform = {});
  // Updates every registered parameter that holds a gradient.
  void step();
  // Drops accumulated gradients; parameters untouched by the next backward are skipped.
  void zero_grad();
  std::size_t size() const { return slots_.size(); }

 private:
  struct Slot {
    Tensor param;
    StepTransform transform;
    std::vector<double> m, v;
    std::size_t t = 0;
  };
  AdamConfig config_;
  std::vector<Slot> slots_;
};

}  // namespace ckaa
