#include <algorithm>
#include <cmath>
#include <numeric>

#include "ckaa/error.hpp"
#include "ckaa/learner.hpp"
#include "ckaa/ops.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace ckaa;
using ckaa::testing::grad_rel_error;

namespace {

RunConfig tiny_config(std::size_t blocks = 2) {
  RunConfig c;
  c.backbone.blocks = blocks;
  c.backbone.dim = 8;
  c.backbone.heads = 2;
  c.backbone.mlp_dim = 16;
  c.backbone.image_h = 8;
  c.backbone.image_w = 8;
  c.backbone.patch = 4;
  c.backbone.prompt_len = 3;
  c.backbone.adapter_dim = 4;
  c.stream.synthetic.n_tasks = 3;
  c.stream.synthetic.classes_per_task = 2;
  c.stream.synthetic.samples_per_class = 10;
  c.stream.synthetic.image_size = 8;
  c.optimizer.epochs = 3;
  c.optimizer.batch = 8;
  c.tcmoa.k_c = 3;
  return c;
}

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

double rel_l2(std::span<const double> a, std::span<const double> b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

ErrorKind kind_of(const auto& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::Io;
}

// A model that finished session 1 and has begun session 2, with non-zero
// adapter up-projections so every path carries gradient.
struct SecondSession {
  RunConfig config;
  TaskStream stream;
  CkaaModel model;
  LinearHead task_head;
};

SecondSession second_session(RunConfig config) {
  SecondSession s{config, build_stream(config.stream), make_run_model(config), {}};
  run_session(s.model, s.stream.tasks[0], 0, config);
  s.task_head = begin_session(s.model, s.stream.tasks[1], 1, config);
  Rng rng(77);
  for (Adapter& a : s.model.adapters[1])
    for (double& v : a.w_up.data()) v = 0.3 * rng.normal();
  return s;
}

}  // namespace

TEST_CASE("session 1 loss is the cross-entropy alone") {
  const RunConfig config = tiny_config();
  const TaskStream stream = build_stream(config.stream);
  CkaaModel model = make_run_model(config);
  const LinearHead task_head = begin_session(model, stream.tasks[0], 0, config);
  const auto idx = iota_n(8);
  const LossTerms t = batch_loss(model, task_head, stream.tasks[0].train, idx, 0, config, Rng(1));
  CHECK_FALSE(t.csfa.has_value());
  CHECK_FALSE(t.ca.has_value());
  CHECK(t.total.item() == t.ce.item());

  // Both cross-entropy terms, on the session's own class slice of g.
  const Tensor x = training_rows(stream.tasks[0].train, idx);
  std::vector<int> labels(stream.tasks[0].train.labels.begin(), stream.tasks[0].train.labels.begin() + 8);
  const Tensor f = forward_shared(model.backbone, x, &model.prompts);
  const Tensor z = forward_specific(model.backbone, x, &model.prompts, model.adapters[0]);
  const double expect = cross_entropy(classify(*model.head, f), labels).item() +
                        cross_entropy(classify(*model.head, z), labels).item();
  CHECK(t.ce.item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("later sessions add both alignment terms and the flags remove them") {
  SecondSession s = second_session(tiny_config());
  const Split& train = s.stream.tasks[1].train;
  const auto idx = iota_n(8);
  const LossTerms full = batch_loss(s.model, s.task_head, train, idx, 1, s.config, Rng(5));
  REQUIRE(full.csfa.has_value());
  REQUIRE(full.ca.has_value());
  CHECK(full.total.item() == doctest::Approx(full.ce.item() + full.csfa->item() + full.ca->item()).epsilon(1e-14));

  RunConfig no_fa = s.config;
  no_fa.ablation.disable_csfa = true;
  const LossTerms a = batch_loss(s.model, s.task_head, train, idx, 1, no_fa, Rng(5));
  CHECK_FALSE(a.csfa.has_value());
  REQUIRE(a.ca.has_value());
  CHECK(a.total.item() == a.ce.item() + a.ca->item());
  CHECK(a.ce.item() == full.ce.item());

  RunConfig no_ca = s.config;
  no_ca.ablation.disable_ca = true;
  const LossTerms b = batch_loss(s.model, s.task_head, train, idx, 1, no_ca, Rng(5));
  CHECK_FALSE(b.ca.has_value());
  CHECK(b.total.item() == b.ce.item() + b.csfa->item());
  CHECK(b.csfa->item() == full.csfa->item());

  // Equal random streams give equal values.
  CHECK(batch_loss(s.model, s.task_head, train, idx, 1, s.config, Rng(5)).total.item() == full.total.item());
}

TEST_CASE("composite loss gradient matches finite differences on a 1-block model") {
  SecondSession s = second_session(tiny_config(1));
  const Split& train = s.stream.tasks[1].train;
  const auto idx = iota_n(8);
  DetachedParts held;
  auto loss = [&] { return batch_loss(s.model, s.task_head, train, idx, 1, s.config, Rng(11), &held).total; };
  const Adapter& a = s.model.adapters[1][0];
  CHECK(grad_rel_error(loss, {s.model.prompts.prompts[0]}) <= 1e-4);
  CHECK(grad_rel_error(loss, {a.w_down, a.w_up}) <= 1e-4);
  CHECK(grad_rel_error(loss, {s.model.head->weight, s.model.head->bias}) <= 1e-4);
  CHECK(grad_rel_error(loss, {s.task_head.weight, s.task_head.bias}) <= 1e-4);

  RunConfig through = s.config;
  through.dka.ca_detach = false;
  DetachedParts held2;
  auto loss2 = [&] { return batch_loss(s.model, s.task_head, train, idx, 1, through, Rng(11), &held2).total; };
  CHECK(grad_rel_error(loss2, {s.model.prompts.prompts[0], a.w_down, a.w_up}) <= 1e-4);
}

TEST_CASE("sessions grow the model one task at a time") {
  const RunConfig config = tiny_config();
  const TaskStream stream = build_stream(config.stream);
  CkaaModel model = make_run_model(config);
  CHECK(kind_of([&] { run_session(model, stream.tasks[1], 1, config); }) == ErrorKind::State);
  for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
    const SessionLog log = run_session(model, stream.tasks[t], t, config);
    CHECK(log.epoch_loss.size() == config.optimizer.epochs);
    CHECK(log.steps == config.optimizer.epochs * 2);
    CHECK(model.sessions_done == t + 1);
    CHECK(model.adapters.size() == t + 1);
    CHECK(model.task_heads.size() == t + 1);
    CHECK(model.head->classes() == 2 * (t + 1));
    CHECK(model.global_head->classes() == 2 * (t + 1));
    CHECK(model.gaussians.size() == 2 * (t + 1));
    CHECK(model.stats.sample_count == 16 * (t + 1));
    CHECK(model.basis.has_value());
  }
  CHECK(model.class_to_task == std::vector<int>{0, 0, 1, 1, 2, 2});
  CHECK(kind_of([&] { run_session(model, stream.tasks[0], 0, config); }) == ErrorKind::State);
}

TEST_CASE("eval samples never reach a loss") {
  const RunConfig config = tiny_config();
  const TaskStream stream = build_stream(config.stream);
  const auto idx = iota_n(2);
  CHECK(kind_of([&] { training_rows(stream.tasks[0].eval, idx); }) == ErrorKind::State);
  TaskData leaked = stream.tasks[0];
  leaked.train = leaked.eval;
  CkaaModel model = make_run_model(config);
  CHECK(kind_of([&] { run_session(model, leaked, 0, config); }) == ErrorKind::State);
}

TEST_CASE("earlier adapter stacks reproduce their session's logits later on") {
  const RunConfig config = tiny_config();
  const TaskStream stream = build_stream(config.stream);
  CkaaModel model = make_run_model(config);
  run_session(model, stream.tasks[0], 0, config);
  const Tensor x = stream.tasks[0].eval.inputs;
  const Tensor cached =
      classify(*model.head, forward_specific(model.backbone, x, &model.prompts, model.adapters[0])).detach();
  const Tensor old_frozen = model.adapters[0][0].w_up.clone();
  run_session(model, stream.tasks[1], 1, config);
  run_session(model, stream.tasks[2], 2, config);
  const Tensor now = slice_cols(
      classify(*model.head, forward_specific(model.backbone, x, &model.prompts, model.adapters[0])), 0, 2);
  CHECK(rel_l2(now.data(), cached.data()) <= 1e-3);
  for (std::size_t i = 0; i < old_frozen.numel(); ++i) CHECK(model.adapters[0][0].w_up[i] == old_frozen[i]);
}

TEST_CASE("evaluation is independent of sample order and thread count") {
  RunConfig config = tiny_config();
  const TaskStream stream = build_stream(config.stream);
  const RunResult one = run_stream(config, stream);
  config.threads = 3;
  const RunResult three = run_stream(config, stream);
  CHECK(one.table == three.table);
  CHECK(metrics_csv(one.table) == metrics_csv(three.table));

  TaskStream permuted = stream;
  for (auto& task : permuted.tasks) {
    const std::size_t n = task.eval.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = (i * 3 + 1) % n;
    task.eval.inputs = gather_rows(task.eval.inputs, order);
    std::vector<int> labels;
    for (std::size_t i : order) labels.push_back(task.eval.labels[i]);
    task.eval.labels = labels;
  }
  const SessionEval a = evaluate_session(one.model, stream, 3, config);
  const SessionEval b = evaluate_session(one.model, permuted, 3, config);
  CHECK(a.per_task == b.per_task);
  CHECK(a.split.easy_accuracy == b.split.easy_accuracy);
  CHECK(a.split.challenging_accuracy == b.split.challenging_accuracy);
  CHECK(a.per_task == one.table.acc.back());
}

TEST_CASE("a single session on the separable desk stream is nearly perfect") {
  RunConfig config;
  config.stream.synthetic.n_tasks = 1;
  const TaskStream stream = build_stream(config.stream);
  const RunResult r = run_stream(config, stream);
  CHECK(r.table.acc_t(0) >= 0.95);
  CHECK_FALSE(r.table.challenging[0].has_value());
}

TEST_CASE("ablation flags select the prediction path") {
  AblationFlags f;
  CHECK(predict_mode(f).use_global_head);
  f.disable_ca = true;
  f.routing = Routing::Maximum;
  const PredictMode m = predict_mode(f);
  CHECK_FALSE(m.use_global_head);
  CHECK(m.routing == Routing::Maximum);
  f.shared_only = true;
  CHECK(predict_mode(f).shared_only);

  RunConfig config = tiny_config();
  config.ablation.shared_only = true;
  const TaskStream stream = build_stream(config.stream);
  const RunResult r = run_stream(config, stream);
  CHECK(r.model.adapters.size() == 0);
  CHECK(r.table.sessions() == 3);
}
