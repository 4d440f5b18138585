#include "ckaa/tcmoa.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ckaa/error.hpp"
#include "ckaa/ops.hpp"

namespace ckaa {
namespace {

std::size_t argmax_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

std::size_t query_key_task(const CkaaModel& model, std::span<const double> f) {
  require(model.task_keys.size() == model.adapters.size(), ErrorKind::State, "query-key routing needs one key per task");
  std::vector<double> sims;
  for (const auto& key : model.task_keys) sims.push_back(cosine_similarity(f, key));
  return argmax_lowest(sims);
}

}  // namespace

std::size_t CkaaModel::class_offset(std::size_t t) const {
  std::size_t off = 0;
  for (int c : class_to_task)
    if (static_cast<std::size_t>(c) < t) ++off;
  return off;
}

std::size_t CkaaModel::classes_in(std::size_t t) const {
  return static_cast<std::size_t>(std::count(class_to_task.begin(), class_to_task.end(), static_cast<int>(t)));
}

CkaaModel make_model(const BackboneConfig& config, Rng& rng) {
  CkaaModel m;
  Rng init = rng.split("init");
  m.backbone = Backbone::init(config, init);
  Rng prompt_rng = rng.split("prompts");
  m.prompts = PromptSet::init(config, prompt_rng);
  m.stats = LayerFeatureStats::zeros(config);
  return m;
}

void TcMoaConfig::validate() const {
  require(k_c >= 1, ErrorKind::Config, "K_c must be at least 1");
  require(tau > 0.0, ErrorKind::Config, "tau must be positive");
}

MaskedLogits topk_mask(std::span<const double> logits, std::size_t k_c) {
  require(k_c >= 1 && k_c <= logits.size(), ErrorKind::Config,
          "K_c=" + std::to_string(k_c) + " outside [1, " + std::to_string(logits.size()) + "]");
  std::vector<std::size_t> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  MaskedLogits m{{logits.begin(), logits.end()}, std::vector<char>(logits.size(), 0)};
  for (std::size_t r = 0; r < k_c; ++r) m.keep[order[r]] = 1;
  return m;
}

TaskConfidence task_confidence(const MaskedLogits& masked, std::span<const int> class_to_task, std::size_t n_tasks,
                               double tau) {
  require(tau > 0.0, ErrorKind::Config, "tau must be positive");
  require(masked.values.size() == masked.keep.size() && class_to_task.size() == masked.values.size(),
          ErrorKind::Dimension, "masked logits and class map differ in length");
  double mx = -INFINITY;
  for (std::size_t k = 0; k < masked.values.size(); ++k)
    if (masked.keep[k]) mx = std::max(mx, masked.values[k]);
  require(std::isfinite(mx), ErrorKind::Routing, "no surviving logit to derive task confidence from");
  TaskConfidence tc{std::vector<double>(n_tasks, 0.0), 0};
  double z = 0.0;
  for (std::size_t k = 0; k < masked.values.size(); ++k) {
    if (!masked.keep[k]) continue;
    const int t = class_to_task[k];
    require(t >= 0 && static_cast<std::size_t>(t) < n_tasks, ErrorKind::Dimension, "class mapped to unknown task");
    const double e = std::exp((masked.values[k] - mx) / tau);
    tc.alphas[static_cast<std::size_t>(t)] += e;
    z += e;
  }
  for (double& a : tc.alphas) a /= z;
  tc.top_task = argmax_lowest(tc.alphas);
  return tc;
}

Prediction predict(const Tensor& x, const CkaaModel& model, const TcMoaConfig& config, const PredictMode& mode) {
  require(model.sessions_done >= 1 && model.head, ErrorKind::State, "predict needs at least one completed session");
  require(x.rows() == 1, ErrorKind::Dimension, "predict takes a single input row");
  NoGradGuard guard;
  const LinearHead& g = *model.head;
  const std::size_t tasks = model.sessions_done;
  const Tensor f = forward_shared(model.backbone, x, &model.prompts);
  const Tensor shared_logits = classify(g, f);

  const std::size_t kc = std::min(config.k_c, g.classes());
  Prediction out;
  out.confidence = task_confidence(topk_mask(shared_logits.data(), kc), model.class_to_task, tasks, config.tau);
  if (mode.shared_only) {
    out.class_id = static_cast<int>(argmax_lowest(shared_logits.data()));
    return out;
  }

  require(model.adapters.size() == tasks, ErrorKind::State, "routed prediction needs one adapter stack per session");
  Tensor alphas({1, tasks}, 0.0);
  switch (mode.routing) {
    case Routing::TcMoa:
      for (std::size_t t = 0; t < tasks; ++t) alphas[t] = out.confidence.alphas[t];
      break;
    case Routing::Maximum:
      alphas[out.confidence.top_task] = 1.0;
      break;
    case Routing::QueryKeyStub:
      alphas[query_key_task(model, f.data())] = 1.0;
      break;
  }
  const Tensor zhat = forward_moa(model.backbone, x, &model.prompts, model.adapters, alphas);
  const Tensor own = classify(g, zhat);
  std::vector<double> scores(own.data().begin(), own.data().end());
  if (mode.use_global_head) {
    require(model.global_head.has_value(), ErrorKind::State, "global head g^u has not been aggregated");
    const Tensor global = classify(*model.global_head, zhat);
    const double tc = static_cast<double>(model.sessions_done);
    for (std::size_t k = 0; k < scores.size(); ++k)
      scores[k] = tc / (tc + 1.0) * global[k] + 1.0 / (tc + 1.0) * own[k];
  }
  out.class_id = static_cast<int>(argmax_lowest(scores));
  return out;
}

EasyChallengingSplit split_easy_challenging(std::span<const EvalRecord> results) {
  EasyChallengingSplit s;
  std::size_t easy_ok = 0, hard_ok = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    const bool ok = r.predicted_class == r.true_class;
    if (r.top_task == r.true_task) {
      s.easy.push_back(i);
      easy_ok += ok;
    } else {
      s.challenging.push_back(i);
      hard_ok += ok;
    }
  }
  if (!s.easy.empty()) s.easy_accuracy = static_cast<double>(easy_ok) / static_cast<double>(s.easy.size());
  if (!s.challenging.empty())
    s.challenging_accuracy = static_cast<double>(hard_ok) / static_cast<double>(s.challenging.size());
  return s;
}

}  // namespace ckaa
