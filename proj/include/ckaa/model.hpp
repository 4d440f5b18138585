#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "ckaa/backbone.hpp"
#include "ckaa/classifier.hpp"
#include "ckaa/dka.hpp"
#include "ckaa/null_space.hpp"

namespace ckaa {

// Everything a continual-learning run carries from one session to the next.
// Class ids are global and contiguous in stream order.
struct CkaaModel {
  Backbone backbone;
  PromptSet prompts;
  AdapterBank adapters;
  std::optional<LinearHead> head;         // g, grown per session
  std::vector<LinearHead> task_heads;     // g^t, one per completed session
  std::optional<LinearHead> global_head;  // g^u
  std::vector<int> class_to_task;         // class id -> session index (0-based)
  std::vector<GaussianClassModel> gaussians;
  LayerFeatureStats stats;
  std::optional<NullSpaceBasis> basis;
  std::vector<std::vector<double>> task_keys;  // query-key routing stub
  std::size_t sessions_done = 0;

  const BackboneConfig& config() const { return backbone.config; }
  std::size_t num_classes() const { return class_to_task.size(); }
  // First class id of session t.
  std::size_t class_offset(std::size_t t) const;
  std::size_t classes_in(std::size_t t) const;
};

CkaaModel make_model(const BackboneConfig& config, Rng& rng);

}  // namespace ckaa
