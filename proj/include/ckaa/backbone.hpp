#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ckaa/rng.hpp"
#include "ckaa/tensor.hpp"

namespace ckaa {

enum class InputMode { Image, Feature };

struct BackboneConfig {
  std::size_t blocks = 2;
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t mlp_dim = 64;
  InputMode input_mode = InputMode::Image;
  std::size_t image_h = 16;
  std::size_t image_w = 16;
  std::size_t patch = 4;
  std::size_t feature_dim = 256;  // feature mode only
  std::size_t prompt_len = 4;
  std::size_t adapter_dim = 8;
  double prompt_init_scale = 0.02;

  // Patch tokens per input, excluding the class token.
  std::size_t n_tokens() const;
  // Values per patch token before embedding.
  std::size_t patch_dim() const;
  std::size_t input_dim() const;
  std::size_t seq_len() const { return n_tokens() + 1; }
  void validate() const;
};

struct BlockWeights {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gamma, ln2_beta;
  Tensor w1, b1, w2, b2;
};

// The transformer F: patch embedding, class token, position embedding,
// pre-norm blocks and a closing layernorm.
struct Backbone {
  BackboneConfig config;
  Tensor embed_w, embed_b, cls, pos;
  std::vector<BlockWeights> blocks;
  Tensor norm_gamma, norm_beta;

  static Backbone init(const BackboneConfig& config, Rng& rng);

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  void set_trainable(bool on);
};

// Shared prompts P_l [prompt_len x dim], one per block.
struct PromptSet {
  std::vector<Tensor> prompts;

  static PromptSet init(const BackboneConfig& config, Rng& rng);
  static PromptSet zeros(const BackboneConfig& config);
  PromptSet clone() const;
  void set_trainable(bool on);
};

// Bottleneck A(X) = ReLU(X W_down) W_up. W_up starts at zero.
struct Adapter {
  Tensor w_down;  // [dim x adapter_dim]
  Tensor w_up;    // [adapter_dim x dim]

  static Adapter init(const BackboneConfig& config, Rng& rng);
};

using AdapterStack = std::vector<Adapter>;

AdapterStack init_adapter_stack(const BackboneConfig& config, Rng& rng);
void set_trainable(AdapterStack& stack, bool on);

// One adapter stack per session; only the newest one is trainable.
class AdapterBank {
 public:
  std::size_t size() const { return stacks_.size(); }
  const AdapterStack& operator[](std::size_t t) const { return stacks_.at(t); }
  AdapterStack& operator[](std::size_t t) { return stacks_.at(t); }
  // Freezes every existing stack and appends a fresh trainable one.
  AdapterStack& add_stack(const BackboneConfig& config, Rng& rng);
  void push_back(AdapterStack stack) { stacks_.push_back(std::move(stack)); }
  void freeze_all();

 private:
  std::vector<AdapterStack> stacks_;
};

Tensor adapter_apply(const Tensor& xhat, const Adapter& a);

// Adapter contribution added after the FFN of every block. Empty
// per-row weights mean weight 1 on every row.
struct AdapterBranch {
  const AdapterStack* stack = nullptr;
  std::vector<double> sample_weights;  // one per input sample
};

// Recorded per block when tracing: q-projection of the sequence rows and the
// post-softmax attention weights [batch][head][seq][seq + prompt_len].
struct BlockTrace {
  Tensor q;
  std::vector<double> probs;
};

// Patch or feature tokens [B * n_tokens x patch_dim] for inputs [B x input_dim].
Tensor tokenize(const BackboneConfig& config, const Tensor& x);

// Generic encoder. prompts may be null (promptless forward).
Tensor encode(const Backbone& bb, const Tensor& x, const PromptSet* prompts, std::span<const AdapterBranch> branches,
              std::vector<BlockTrace>* trace = nullptr);

// f = F(x; P_sh), one row per input.
Tensor forward_shared(const Backbone& bb, const Tensor& x, const PromptSet* prompts);
// z = F(x; P_sh, A^t).
Tensor forward_specific(const Backbone& bb, const Tensor& x, const PromptSet* prompts, const AdapterStack& stack);
// z_hat with per-sample routing weights alphas [B x bank.size()] (or a single
// vector when B == 1). Rows must be non-negative and sum to 1 within 1e-6.
Tensor forward_moa(const Backbone& bb, const Tensor& x, const PromptSet* prompts, const AdapterBank& bank,
                   const Tensor& alphas);

}  // namespace ckaa
