#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "ckaa/ablation.hpp"
#include "ckaa/checkpoint.hpp"
#include "ckaa/config.hpp"
#include "ckaa/error.hpp"
#include "ckaa/learner.hpp"
#include "ckaa/metrics.hpp"

namespace fs = std::filesystem;
using namespace ckaa;

namespace {

void print_session(std::size_t t, const SessionEval& ev) {
  double mean = 0.0;
  for (double a : ev.per_task) mean += a;
  mean /= static_cast<double>(ev.per_task.size());
  std::cout << "session " << t + 1 << " acc=" << format_double(mean);
  for (std::size_t i = 0; i < ev.per_task.size(); ++i) std::cout << " task" << i + 1 << "=" << format_double(ev.per_task[i]);
  std::cout << "\n" << std::flush;
}

int cmd_run(const fs::path& config_path, const fs::path& out_dir) {
  const RunConfig config = load_run_config(config_path);
  const TaskStream stream = build_stream(config.stream);
  RunResult result = run_stream(config, stream, [](std::size_t t, const CkaaModel&, const SessionEval& ev) {
    print_session(t, ev);
  });
  emit_results(result.table, config, out_dir);
  save_checkpoint(out_dir / "model.ckpt", config, result.model);
  std::cout << "last_acc=" << format_double(result.table.last_acc())
            << " avg_acc=" << format_double(result.table.avg_acc()) << "\n";
  return 0;
}

int cmd_ablate(const fs::path& config_path, const std::string& out_dir) {
  const RunConfig config = load_run_config(config_path);
  const std::string csv = ablation_csv(run_ablation_suite(config));
  std::cout << csv;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream out(fs::path(out_dir) / "ablation.csv", std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::Io, "cannot write ablation.csv in " + out_dir);
    out << csv;
    std::ofstream cfg(fs::path(out_dir) / "config.json", std::ios::binary | std::ios::trunc);
    cfg << to_json(config);
  }
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& stream_path) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const TaskStream stream = build_stream(load_stream_spec(stream_path));
  require(ck.model.sessions_done >= 1, ErrorKind::State, "checkpoint holds no trained session");
  require(stream.tasks.size() >= ck.model.sessions_done, ErrorKind::Config,
          "stream has fewer tasks than the checkpoint has sessions");
  const std::size_t upto = ck.model.sessions_done;
  print_session(upto - 1, evaluate_session(ck.model, stream, upto, ck.config));
  return 0;
}

int cmd_make_stream(const fs::path& spec_path, const fs::path& out) {
  const StreamSpec spec = load_stream_spec(spec_path);
  require(spec.source == StreamSource::Synthetic, ErrorKind::Config, "make-stream needs a synthetic stream spec");
  const TaskStream stream = make_synthetic_stream(spec.synthetic);
  const FeatureFile file = stream_to_feature_file(stream);
  write_feature_file(out, file);
  std::cout << "wrote " << file.count() << " records of dim " << file.dim << " to " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual-learning engine with shared prompts, task adapters and routed inference"};
  app.require_subcommand(1);

  std::string run_config, run_out;
  auto* run = app.add_subcommand("run", "Train on every task of a stream and write metrics");
  run->add_option("--config", run_config, "Run configuration (JSON)")->required();
  run->add_option("--out", run_out, "Output directory")->required();

  std::string ablate_config, ablate_out;
  auto* ablate = app.add_subcommand("ablate", "Run the ablation variants on one stream");
  ablate->add_option("--config", ablate_config, "Run configuration (JSON)")->required();
  ablate->add_option("--out", ablate_out, "Optional output directory");

  std::string eval_ckpt, eval_stream;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a stream");
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--stream", eval_stream, "Stream specification (JSON)")->required();

  std::string ms_spec, ms_out;
  auto* make_stream = app.add_subcommand("make-stream", "Write a synthetic stream as a feature file");
  make_stream->add_option("--spec", ms_spec, "Stream specification (JSON)")->required();
  make_stream->add_option("--out", ms_out, "Feature file to write")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(run_config, run_out);
    if (*ablate) return cmd_ablate(ablate_config, ablate_out);
    if (*eval) return cmd_eval(eval_ckpt, eval_stream);
    if (*make_stream) return cmd_make_stream(ms_spec, ms_out);
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
