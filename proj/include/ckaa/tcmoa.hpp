#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "ckaa/model.hpp"
#include "ckaa/tensor.hpp"

namespace ckaa {

struct TcMoaConfig {
  std::size_t k_c = 10;
  double tau = 2.0;

  void validate() const;
};

// Top-K_c survivors of a logit vector. Masked-out entries carry keep == 0
// instead of a -inf value.
struct MaskedLogits {
  std::vector<double> values;
  std::vector<char> keep;
};

struct TaskConfidence {
  std::vector<double> alphas;
  std::size_t top_task = 0;
};

enum class Routing { TcMoa, Maximum, QueryKeyStub };

struct PredictMode {
  Routing routing = Routing::TcMoa;
  bool use_global_head = true;  // mix g^u with g; off means g alone
  bool shared_only = false;     // argmax g(f), no adapters
};

struct Prediction {
  int class_id = 0;
  TaskConfidence confidence;
};

// Ties go to the lower class index.
MaskedLogits topk_mask(std::span<const double> logits, std::size_t k_c);

// alpha_t = sum over surviving classes of task t of exp(l / tau), normalised.
TaskConfidence task_confidence(const MaskedLogits& masked, std::span<const int> class_to_task, std::size_t n_tasks,
                               double tau);

// Routed prediction for a single input row.
Prediction predict(const Tensor& x, const CkaaModel& model, const TcMoaConfig& config, const PredictMode& mode = {});

struct EvalRecord {
  int true_class = 0;
  int predicted_class = 0;
  int true_task = 0;
  int top_task = 0;
};

struct EasyChallengingSplit {
  std::vector<std::size_t> easy;         // indices with top_task == true_task
  std::vector<std::size_t> challenging;  // the rest
  std::optional<double> easy_accuracy;
  std::optional<double> challenging_accuracy;
};

EasyChallengingSplit split_easy_challenging(std::span<const EvalRecord> results);

}  // namespace ckaa
