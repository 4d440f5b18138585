#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "ckaa/config.hpp"
#include "ckaa/metrics.hpp"
#include "ckaa/model.hpp"
#include "ckaa/stream.hpp"
#include "ckaa/tcmoa.hpp"

namespace ckaa {

struct LossTerms {
  Tensor ce;
  std::optional<Tensor> csfa;
  std::optional<Tensor> ca;
  Tensor total;
};

// Training rows of a split; raises a state error if any of them is an eval sample.
Tensor training_rows(const Split& split, std::span<const std::size_t> idx);

// Stop-gradient inputs of one batch loss: the earlier-stack features of the
// alignment term, the sampled shared features, the affinity matrix and the
// detached current features. batch_loss fills an empty holder and reuses a
// filled one, which keeps them constant under finite differences.
struct DetachedParts {
  bool filled = false;
  Tensor prev;
  std::vector<int> prev_labels;
  LabeledFeatureBatch sampled;
  Tensor affinity;
  Tensor f, z;
};

// The loss of one training batch of session `session` (0-based). The model
// must already carry the session's classes, head rows and adapter stack;
// task_head is the session's task-adaptive head. Every random draw comes
// from rng, so equal arguments give equal values.
LossTerms batch_loss(const CkaaModel& model, const LinearHead& task_head, const Split& train,
                     std::span<const std::size_t> batch, std::size_t session, const RunConfig& config, Rng rng,
                     DetachedParts* held = nullptr);

struct SessionLog {
  std::vector<double> epoch_loss;  // mean batch loss per epoch
  std::size_t steps = 0;
};

// Adds the session's classes, head rows, adapter stack and task-adaptive head
// to the model: the state batch_loss expects at the first step.
LinearHead begin_session(CkaaModel& model, const TaskData& task, std::size_t session, const RunConfig& config);

// Trains session `session` (must equal model.sessions_done) on task.train,
// then fits the class Gaussians, folds the null-space statistics and
// rebuilds the global head.
SessionLog run_session(CkaaModel& model, const TaskData& task, std::size_t session, const RunConfig& config);

PredictMode predict_mode(const AblationFlags& flags);

struct SessionEval {
  std::vector<double> per_task;  // accuracy on eval tasks 0 .. upto-1
  std::vector<EvalRecord> records;
  EasyChallengingSplit split;
};

// Predicts every eval sample of the first `upto` tasks. Samples may be spread
// over config.threads workers; the result does not depend on it.
SessionEval evaluate_session(const CkaaModel& model, const TaskStream& stream, std::size_t upto,
                             const RunConfig& config);

struct RunResult {
  CkaaModel model;
  MetricsTable table;
  std::vector<SessionLog> logs;
};

using SessionCallback = std::function<void(std::size_t session, const CkaaModel&, const SessionEval&)>;

// Trains on every task in order and evaluates after each session.
RunResult run_stream(const RunConfig& config, const TaskStream& stream, const SessionCallback& on_session = {});

CkaaModel make_run_model(const RunConfig& config);

}  // namespace ckaa
