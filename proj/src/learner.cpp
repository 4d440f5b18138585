#include "ckaa/learner.hpp"

#include <algorithm>
#include <numeric>
#include <thread>

#include "ckaa/error.hpp"
#include "ckaa/ops.hpp"
#include "ckaa/optim.hpp"

namespace ckaa {
namespace {

std::vector<int> gather_labels(const Split& split, std::span<const std::size_t> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(split.labels.at(i));
  return out;
}

Rng session_rng(const RunConfig& config, std::size_t session) {
  return Rng(config.seed).split("session").split(static_cast<std::uint64_t>(session));
}

// Fisher-Yates on the library engine, independent of the standard library's shuffle.
std::vector<std::size_t> shuffled(std::size_t n, Rng rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  return order;
}

Tensor local_ce(const Tensor& logits, std::span<const int> labels, std::size_t offset, std::size_t n) {
  std::vector<int> local(labels.begin(), labels.end());
  for (int& y : local) y -= static_cast<int>(offset);
  return ce_loss(slice_cols(logits, offset, offset + n), local);
}

void freeze(CkaaModel& model) {
  model.backbone.set_trainable(false);
  model.prompts.set_trainable(false);
  model.adapters.freeze_all();
  if (model.head) model.head->set_trainable(false);
  for (auto& h : model.task_heads) h.set_trainable(false);
}

}  // namespace

Tensor training_rows(const Split& split, std::span<const std::size_t> idx) {
  for (std::size_t i : idx) {
    require(i < split.size(), ErrorKind::Dimension, "training index out of range");
    require(split.eval_taint.empty() || !split.eval_taint[i], ErrorKind::State,
            "eval sample " + std::to_string(i) + " passed to training");
  }
  return gather_rows(split.inputs, idx).detach();
}

LinearHead begin_session(CkaaModel& model, const TaskData& task, std::size_t session, const RunConfig& config) {
  require(session == model.sessions_done, ErrorKind::State,
          "session " + std::to_string(session + 1) + " out of order; expected " +
              std::to_string(model.sessions_done + 1));
  require(!task.classes.empty(), ErrorKind::Config, "task introduces no classes");
  for (std::size_t k = 0; k < task.classes.size(); ++k)
    require(task.classes[k] == static_cast<int>(model.num_classes() + k), ErrorKind::Config,
            "task classes must continue the global class range");
  require(task.train.size() > 0 && task.train.inputs.cols() == model.config().input_dim(), ErrorKind::Dimension,
          "training inputs do not match the backbone input size");

  Rng rng = session_rng(config, session);
  for (std::size_t k = 0; k < task.classes.size(); ++k) model.class_to_task.push_back(static_cast<int>(session));
  Rng head_rng = rng.split("head");
  if (!model.head)
    model.head = LinearHead::init(task.classes.size(), model.config().dim, head_rng);
  else
    model.head = grow_head(*model.head, task.classes.size(), head_rng);
  if (!config.ablation.shared_only) {
    Rng adapter_rng = rng.split("adapter");
    model.adapters.add_stack(model.config(), adapter_rng);
  }
  LinearHead task_head = model.head->clone();
  task_head.set_trainable(true);
  return task_head;
}

LossTerms batch_loss(const CkaaModel& model, const LinearHead& task_head, const Split& train,
                     std::span<const std::size_t> batch, std::size_t session, const RunConfig& config, Rng rng,
                     DetachedParts* held) {
  require(model.head && session < model.sessions_done + 1, ErrorKind::State, "session not started");
  const bool shared_only = config.ablation.shared_only;
  require(shared_only || model.adapters.size() == session + 1, ErrorKind::State, "session adapter stack missing");
  const Backbone& bb = model.backbone;
  const LinearHead& g = *model.head;
  const std::size_t offset = model.class_offset(session), n = model.classes_in(session);

  const Tensor x = training_rows(train, batch);
  const std::vector<int> labels = gather_labels(train, batch);
  const Tensor f = forward_shared(bb, x, &model.prompts);
  LossTerms out;
  out.ce = local_ce(classify(g, f), labels, offset, n);
  if (shared_only) {
    out.total = total_loss(out.ce, std::nullopt, std::nullopt, session + 1);
    return out;
  }
  const Tensor z = forward_specific(bb, x, &model.prompts, model.adapters[session]);
  out.ce = add(out.ce, local_ce(classify(g, z), labels, offset, n));
  const bool use_csfa = session > 0 && !config.ablation.disable_csfa;
  const bool use_ca = session > 0 && !config.ablation.disable_ca;

  DetachedParts local;
  DetachedParts& d = held ? *held : local;
  if (!d.filled) {
    NoGradGuard guard;
    if (use_csfa) {
      // Current-task samples seen through one earlier adapter stack; every
      // anchor draws a sample of its own class so it always has a positive.
      std::vector<std::vector<std::size_t>> by_class(n);
      for (std::size_t i = 0; i < train.size(); ++i) by_class.at(train.labels[i] - offset).push_back(i);
      const std::size_t tp = rng.index(session);
      std::vector<std::size_t> picks;
      for (int y : labels) {
        const auto& pool = by_class[y - offset];
        picks.push_back(pool[rng.index(pool.size())]);
      }
      d.prev = forward_specific(bb, training_rows(train, picks), &model.prompts, model.adapters[tp]);
      d.prev_labels = gather_labels(train, picks);
    }
    if (use_ca) {
      const std::size_t bs = config.dka.sampled_batch ? config.dka.sampled_batch : batch.size();
      d.sampled = GaussianSampler(model.gaussians).sample(bs, rng);
      d.sampled.origin = FeatureOrigin::SampledShared;
      d.f = f.detach();
      d.z = z.detach();
      d.affinity = affinity_matrix(d.sampled.feats, d.f, config.dka.tau_g, config.dka.k_g);
    }
    d.filled = true;
  }

  if (use_csfa)
    out.csfa = csfa_loss({z, labels, FeatureOrigin::CurrentSpecific},
                         {d.prev, d.prev_labels, FeatureOrigin::CachedPrevious}, config.dka.tau_f);
  if (use_ca) {
    const Tensor fc = config.dka.ca_detach ? d.f : f;
    const Tensor zc = config.dka.ca_detach ? d.z : z;
    const LabeledFeatureBatch sp{simulate_features(d.sampled.feats, fc, zc, d.affinity), d.sampled.labels,
                                 FeatureOrigin::SampledSpecific};
    const std::vector<LabeledFeatureBatch> unified{
        d.sampled, sp, {fc, labels, FeatureOrigin::CurrentShared}, {zc, labels, FeatureOrigin::CurrentSpecific}};
    out.ca = ca_loss(unified, task_head);
  }
  out.total = total_loss(out.ce, out.csfa, out.ca, session + 1);
  return out;
}

SessionLog run_session(CkaaModel& model, const TaskData& task, std::size_t session, const RunConfig& config) {
  LinearHead task_head = begin_session(model, task, session, config);
  Rng rng = session_rng(config, session);
  const bool ca_active = session > 0 && !config.ablation.disable_ca && !config.ablation.shared_only;

  Adam opt({config.optimizer.lr});
  if (session == 0 && config.backbone_mode == BackboneMode::Scratch)
    for (const Tensor& p : model.backbone.parameters()) opt.add(p);
  const bool project = session > 0 && !config.ablation.disable_nullspace;
  require(!project || model.basis, ErrorKind::State, "prompt projection needs null-space bases");
  for (std::size_t l = 0; l < model.prompts.prompts.size(); ++l) {
    StepTransform transform;
    if (project) {
      const OrthonormalBasis& u1 = model.basis->u1.at(l);
      const OrthonormalBasis& u2 = model.basis->u2.at(l);
      transform = [&u1, &u2](const Tensor& g) { return project_prompt_gradient(g, u1, u2); };
    }
    opt.add(model.prompts.prompts[l], std::move(transform));
  }
  if (!config.ablation.shared_only)
    for (const Adapter& a : model.adapters[session]) {
      opt.add(a.w_down);
      opt.add(a.w_up);
    }
  opt.add(model.head->weight);
  opt.add(model.head->bias);
  if (ca_active) {
    opt.add(task_head.weight);
    opt.add(task_head.bias);
  }

  SessionLog log;
  const std::size_t n = task.train.size(), bsz = std::min(config.optimizer.batch, n);
  for (std::size_t epoch = 0; epoch < config.optimizer.epochs; ++epoch) {
    const auto order = shuffled(n, rng.split("shuffle").split(static_cast<std::uint64_t>(epoch)));
    const Rng epoch_rng = rng.split("batch").split(static_cast<std::uint64_t>(epoch));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += bsz) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(bsz, n - start));
      LossTerms terms = batch_loss(model, task_head, task.train, idx, session, config,
                                   epoch_rng.split(static_cast<std::uint64_t>(batches)));
      opt.zero_grad();
      terms.total.backward();
      opt.step();
      loss_sum += terms.total.item();
      ++batches;
      ++log.steps;
    }
    log.epoch_loss.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
  }
  opt.zero_grad();
  if (!ca_active) task_head = model.head->clone();
  freeze(model);
  task_head.set_trainable(false);

  NoGradGuard guard;
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  const Tensor x = training_rows(task.train, all);
  const Tensor f = forward_shared(model.backbone, x, &model.prompts);
  for (auto& gm : fit_gaussians(f, task.train.labels, static_cast<int>(session))) model.gaussians.push_back(std::move(gm));
  accumulate_stats(model.stats, model.backbone, model.prompts, x);
  model.basis = recompute_bases(model.stats, config.null_space.rel_threshold, config.null_space.fallback_rank);

  model.task_heads.push_back(std::move(task_head));
  model.global_head = aggregate_global_head(model.task_heads, model.class_to_task);
  Rng key_rng = rng.split("task_key");
  std::vector<double> key(model.config().dim);
  for (double& v : key) v = key_rng.normal();
  model.task_keys.push_back(std::move(key));
  ++model.sessions_done;
  return log;
}

PredictMode predict_mode(const AblationFlags& flags) {
  PredictMode m;
  m.routing = flags.routing;
  m.use_global_head = !flags.disable_ca;
  m.shared_only = flags.shared_only;
  return m;
}

SessionEval evaluate_session(const CkaaModel& model, const TaskStream& stream, std::size_t upto,
                             const RunConfig& config) {
  require(upto >= 1 && upto <= stream.tasks.size() && upto <= model.sessions_done, ErrorKind::State,
          "evaluation covers untrained sessions");
  struct Item {
    const Split* split;
    std::size_t row;
    int task;
  };
  std::vector<Item> items;
  for (std::size_t t = 0; t < upto; ++t) {
    const Split& s = stream.tasks[t].eval;
    require(s.size() > 0, ErrorKind::Config, "task " + std::to_string(t + 1) + " has no eval samples");
    for (std::size_t i = 0; i < s.size(); ++i) items.push_back({&s, i, static_cast<int>(t)});
  }

  const PredictMode mode = predict_mode(config.ablation);
  std::vector<EvalRecord> records(items.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    NoGradGuard guard;
    for (std::size_t k = begin; k < end; ++k) {
      const Item& it = items[k];
      const std::size_t row = it.row;
      const Tensor x = gather_rows(it.split->inputs, std::span<const std::size_t>(&row, 1));
      const Prediction p = predict(x, model, config.tcmoa, mode);
      records[k] = {it.split->labels[row], p.class_id, it.task, static_cast<int>(p.confidence.top_task)};
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(config.threads, items.size()));
  if (workers == 1) {
    work(0, items.size());
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    const std::size_t chunk = (items.size() + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          work(std::min(w * chunk, items.size()), std::min((w + 1) * chunk, items.size()));
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  SessionEval out;
  std::vector<std::size_t> correct(upto, 0), total(upto, 0);
  for (const auto& r : records) {
    ++total[r.true_task];
    correct[r.true_task] += r.predicted_class == r.true_class;
  }
  for (std::size_t t = 0; t < upto; ++t)
    out.per_task.push_back(static_cast<double>(correct[t]) / static_cast<double>(total[t]));
  out.split = split_easy_challenging(records);
  out.records = std::move(records);
  return out;
}

CkaaModel make_run_model(const RunConfig& config) {
  Rng rng = Rng(config.seed).split("model");
  return make_model(config.backbone, rng);
}

RunResult run_stream(const RunConfig& config, const TaskStream& stream, const SessionCallback& on_session) {
  config.validate();
  require(stream.input_dim == config.backbone.input_dim(), ErrorKind::Config,
          "stream inputs have " + std::to_string(stream.input_dim) + " values, the backbone expects " +
              std::to_string(config.backbone.input_dim()));
  RunResult out{make_run_model(config), {}, {}};
  for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
    out.logs.push_back(run_session(out.model, stream.tasks[t], t, config));
    SessionEval ev = evaluate_session(out.model, stream, t + 1, config);
    out.table.add_session(ev.per_task, ev.split.easy_accuracy, ev.split.challenging_accuracy);
    if (on_session) on_session(t, out.model, ev);
  }
  return out;
}

}  // namespace ckaa
