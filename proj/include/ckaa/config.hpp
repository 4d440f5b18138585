#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ckaa/backbone.hpp"
#include "ckaa/dka.hpp"
#include "ckaa/optim.hpp"
#include "ckaa/stream.hpp"
#include "ckaa/tcmoa.hpp"

namespace ckaa {

struct StreamSpec {
  StreamSource source = StreamSource::Synthetic;
  SyntheticStreamSpec synthetic;
  std::filesystem::path path;  // feature file
  FeatureStreamSpec features;
};

struct OptimizerConfig {
  double lr = 0.01;
  std::size_t epochs = 30;
  std::size_t batch = 32;
};

struct NullSpaceConfig {
  double rel_threshold = 0.02;
  std::size_t fallback_rank = 0;  // 0: empty basis freezes the prompt
};

struct AblationFlags {
  bool disable_csfa = false;
  bool disable_ca = false;
  bool disable_nullspace = false;
  Routing routing = Routing::TcMoa;
  bool shared_only = false;  // no adapters at all; predict from g(f)
};

enum class BackboneMode { Scratch, Frozen };

struct RunConfig {
  StreamSpec stream;
  BackboneConfig backbone;
  DkaConfig dka;
  TcMoaConfig tcmoa;
  OptimizerConfig optimizer;
  NullSpaceConfig null_space;
  AblationFlags ablation;
  BackboneMode backbone_mode = BackboneMode::Scratch;
  std::uint64_t seed = 0;
  std::size_t threads = 1;  // evaluation fan-out; results do not depend on it

  void validate() const;
};

std::string to_json(const RunConfig& config);
// Absent fields keep their defaults; unknown fields are rejected.
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

std::string to_json(const StreamSpec& spec);
StreamSpec stream_spec_from_json(const std::string& text);
StreamSpec load_stream_spec(const std::filesystem::path& path);
TaskStream build_stream(const StreamSpec& spec);

std::string routing_name(Routing r);

}  // namespace ckaa
