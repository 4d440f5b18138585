#include "ckaa/backbone.hpp"

#include <cmath>
#include <string>

#include "ckaa/error.hpp"
#include "ckaa/ops.hpp"

namespace ckaa {
namespace {

Tensor normal(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = stddev * rng.normal();
  return t;
}

Tensor fan_in_normal(std::size_t in, std::size_t out, Rng& rng) {
  return normal({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_rowvec(matmul(x, w), b); }

}  // namespace

std::size_t BackboneConfig::n_tokens() const {
  if (input_mode == InputMode::Image) return (image_h / patch) * (image_w / patch);
  return feature_dim / dim;
}

std::size_t BackboneConfig::patch_dim() const { return input_mode == InputMode::Image ? patch * patch : dim; }

std::size_t BackboneConfig::input_dim() const {
  return input_mode == InputMode::Image ? image_h * image_w : feature_dim;
}

void BackboneConfig::validate() const {
  require(blocks >= 1 && dim >= 2 && heads >= 1 && mlp_dim >= 1 && adapter_dim >= 1, ErrorKind::Config,
          "backbone sizes must be positive (dim >= 2)");
  require(dim % heads == 0, ErrorKind::Config, "dim must be divisible by heads");
  if (input_mode == InputMode::Image) {
    require(patch >= 1 && image_h % patch == 0 && image_w % patch == 0 && image_h >= patch && image_w >= patch,
            ErrorKind::Config, "image size must be a positive multiple of the patch size");
  } else {
    require(feature_dim >= dim && feature_dim % dim == 0, ErrorKind::Config,
            "feature dimension must be a positive multiple of the token dim");
  }
}

Backbone Backbone::init(const BackboneConfig& config, Rng& rng) {
  config.validate();
  const std::size_t d = config.dim;
  Backbone bb;
  bb.config = config;
  bb.embed_w = fan_in_normal(config.patch_dim(), d, rng);
  bb.embed_b = Tensor({d}, 0.0);
  bb.cls = normal({1, d}, rng, 0.02);
  bb.pos = normal({config.seq_len(), d}, rng, 0.02);
  for (std::size_t l = 0; l < config.blocks; ++l) {
    BlockWeights w;
    w.ln1_gamma = Tensor({d}, 1.0);
    w.ln1_beta = Tensor({d}, 0.0);
    w.wq = fan_in_normal(d, d, rng);
    w.bq = Tensor({d}, 0.0);
    w.wk = fan_in_normal(d, d, rng);
    w.bk = Tensor({d}, 0.0);
    w.wv = fan_in_normal(d, d, rng);
    w.bv = Tensor({d}, 0.0);
    w.wo = fan_in_normal(d, d, rng);
    w.bo = Tensor({d}, 0.0);
    w.ln2_gamma = Tensor({d}, 1.0);
    w.ln2_beta = Tensor({d}, 0.0);
    w.w1 = fan_in_normal(d, config.mlp_dim, rng);
    w.b1 = Tensor({config.mlp_dim}, 0.0);
    w.w2 = fan_in_normal(config.mlp_dim, d, rng);
    w.b2 = Tensor({d}, 0.0);
    bb.blocks.push_back(std::move(w));
  }
  bb.norm_gamma = Tensor({d}, 1.0);
  bb.norm_beta = Tensor({d}, 0.0);
  return bb;
}

std::vector<std::pair<std::string, Tensor>> Backbone::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out{
      {"embed_w", embed_w}, {"embed_b", embed_b}, {"cls", cls}, {"pos", pos}};
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& w = blocks[l];
    const std::string p = "block" + std::to_string(l) + ".";
    for (const auto& [n, t] : std::initializer_list<std::pair<const char*, const Tensor*>>{
             {"ln1_gamma", &w.ln1_gamma}, {"ln1_beta", &w.ln1_beta}, {"wq", &w.wq},       {"bq", &w.bq},
             {"wk", &w.wk},               {"bk", &w.bk},             {"wv", &w.wv},       {"bv", &w.bv},
             {"wo", &w.wo},               {"bo", &w.bo},             {"ln2_gamma", &w.ln2_gamma},
             {"ln2_beta", &w.ln2_beta},   {"w1", &w.w1},             {"b1", &w.b1},       {"w2", &w.w2},
             {"b2", &w.b2}}) {
      out.emplace_back(p + n, *t);
    }
  }
  out.emplace_back("norm_gamma", norm_gamma);
  out.emplace_back("norm_beta", norm_beta);
  return out;
}

std::vector<Tensor> Backbone::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void Backbone::set_trainable(bool on) {
  for (auto& t : parameters()) t.set_requires_grad(on);
}

PromptSet PromptSet::init(const BackboneConfig& config, Rng& rng) {
  PromptSet p;
  for (std::size_t l = 0; l < config.blocks; ++l)
    p.prompts.push_back(normal({config.prompt_len, config.dim}, rng, config.prompt_init_scale));
  return p;
}

PromptSet PromptSet::zeros(const BackboneConfig& config) {
  PromptSet p;
  for (std::size_t l = 0; l < config.blocks; ++l) p.prompts.emplace_back(Shape{config.prompt_len, config.dim}, 0.0);
  return p;
}

PromptSet PromptSet::clone() const {
  PromptSet p;
  for (const auto& t : prompts) p.prompts.push_back(t.clone());
  return p;
}

void PromptSet::set_trainable(bool on) {
  for (auto& t : prompts) t.set_requires_grad(on);
}

Adapter Adapter::init(const BackboneConfig& config, Rng& rng) {
  return {normal({config.dim, config.adapter_dim}, rng, 0.02), Tensor({config.adapter_dim, config.dim}, 0.0)};
}

AdapterStack init_adapter_stack(const BackboneConfig& config, Rng& rng) {
  AdapterStack s;
  for (std::size_t l = 0; l < config.blocks; ++l) s.push_back(Adapter::init(config, rng));
  return s;
}

void set_trainable(AdapterStack& stack, bool on) {
  for (auto& a : stack) {
    a.w_down.set_requires_grad(on);
    a.w_up.set_requires_grad(on);
  }
}

AdapterStack& AdapterBank::add_stack(const BackboneConfig& config, Rng& rng) {
  freeze_all();
  stacks_.push_back(init_adapter_stack(config, rng));
  set_trainable(stacks_.back(), true);
  return stacks_.back();
}

void AdapterBank::freeze_all() {
  for (auto& s : stacks_) set_trainable(s, false);
}

Tensor adapter_apply(const Tensor& xhat, const Adapter& a) {
  require(xhat.cols() == a.w_down.rows() && a.w_down.cols() == a.w_up.rows() && a.w_up.cols() == xhat.cols(),
          ErrorKind::Dimension, "adapter shapes do not match the token dim");
  return matmul(relu(matmul(xhat, a.w_down)), a.w_up);
}

Tensor tokenize(const BackboneConfig& config, const Tensor& x) {
  const std::size_t in = config.input_dim();
  require(x.cols() == in, ErrorKind::Dimension,
          "input has " + std::to_string(x.cols()) + " values, expected " + std::to_string(in));
  const std::size_t batch = x.rows(), n = config.n_tokens(), pd = config.patch_dim();
  std::vector<double> out(batch * n * pd);
  if (config.input_mode == InputMode::Feature) {
    out.assign(x.data().begin(), x.data().end());
  } else {
    const std::size_t p = config.patch, pw = config.image_w / p;
    for (std::size_t b = 0; b < batch; ++b) {
      const double* img = x.data().data() + b * in;
      for (std::size_t t = 0; t < n; ++t) {
        const std::size_t r0 = (t / pw) * p, c0 = (t % pw) * p;
        double* dst = out.data() + (b * n + t) * pd;
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < p; ++j) dst[i * p + j] = img[(r0 + i) * config.image_w + c0 + j];
      }
    }
  }
  return Tensor({batch * n, pd}, std::move(out));
}

Tensor encode(const Backbone& bb, const Tensor& x, const PromptSet* prompts, std::span<const AdapterBranch> branches,
              std::vector<BlockTrace>* trace) {
  const BackboneConfig& cfg = bb.config;
  const std::size_t batch = x.rows(), seq = cfg.seq_len();
  if (prompts) {
    require(prompts->prompts.size() == cfg.blocks, ErrorKind::Dimension, "one prompt per block required");
    for (const auto& p : prompts->prompts)
      require(p.cols() == cfg.dim && p.rows() == cfg.prompt_len, ErrorKind::Dimension, "prompt shape mismatch");
  }
  for (const auto& br : branches) {
    require(br.stack && br.stack->size() == cfg.blocks, ErrorKind::Dimension, "adapter stack has wrong depth");
    require(br.sample_weights.empty() || br.sample_weights.size() == batch, ErrorKind::Dimension,
            "adapter weights must have one entry per sample");
  }
  if (trace) trace->clear();

  Tensor tokens = linear(tokenize(cfg, x), bb.embed_w, bb.embed_b);
  Tensor h = add_tiled(prepend_row(tokens, bb.cls, cfg.n_tokens()), bb.pos);

  for (std::size_t l = 0; l < cfg.blocks; ++l) {
    const BlockWeights& w = bb.blocks[l];
    Tensor u = layernorm(h, w.ln1_gamma, w.ln1_beta);
    Tensor q = linear(u, w.wq, w.bq);
    Tensor kx = linear(u, w.wk, w.bk);
    Tensor vx = linear(u, w.wv, w.bv);
    std::vector<double>* probs = nullptr;
    if (trace) {
      trace->push_back({q.detach(), {}});
      probs = &trace->back().probs;
    }
    Tensor att;
    if (prompts) {
      // Prompt rows enter the key/value projections directly.
      const Tensor& p = prompts->prompts[l];
      Tensor kp = linear(p, w.wk, w.bk);
      Tensor vp = linear(p, w.wv, w.bv);
      att = prompt_attention(q, kx, vx, &kp, &vp, batch, cfg.heads, probs);
    } else {
      att = prompt_attention(q, kx, vx, nullptr, nullptr, batch, cfg.heads, probs);
    }
    Tensor xhat = add(h, linear(att, w.wo, w.bo));
    Tensor mlp = linear(gelu(linear(layernorm(xhat, w.ln2_gamma, w.ln2_beta), w.w1, w.b1)), w.w2, w.b2);
    h = add(xhat, mlp);
    for (const auto& br : branches) {
      Tensor a = adapter_apply(xhat, (*br.stack)[l]);
      if (!br.sample_weights.empty()) {
        std::vector<double> row_w(batch * seq);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t t = 0; t < seq; ++t) row_w[b * seq + t] = br.sample_weights[b];
        a = scale_rows(a, row_w);
      }
      h = add(h, a);
    }
  }
  return layernorm(strided_rows(h, seq, 0), bb.norm_gamma, bb.norm_beta);
}

Tensor forward_shared(const Backbone& bb, const Tensor& x, const PromptSet* prompts) {
  return encode(bb, x, prompts, {});
}

Tensor forward_specific(const Backbone& bb, const Tensor& x, const PromptSet* prompts, const AdapterStack& stack) {
  const AdapterBranch br{&stack, {}};
  return encode(bb, x, prompts, std::span<const AdapterBranch>(&br, 1));
}

Tensor forward_moa(const Backbone& bb, const Tensor& x, const PromptSet* prompts, const AdapterBank& bank,
                   const Tensor& alphas) {
  const std::size_t batch = x.rows(), tasks = bank.size();
  require(tasks >= 1, ErrorKind::Routing, "adapter bank is empty");
  require(alphas.cols() == tasks && alphas.rows() == batch, ErrorKind::Routing,
          "routing weights must be [batch x bank size]");
  for (std::size_t b = 0; b < batch; ++b) {
    double s = 0.0;
    for (std::size_t t = 0; t < tasks; ++t) {
      require(alphas(b, t) >= 0.0, ErrorKind::Routing, "routing weights must be non-negative");
      s += alphas(b, t);
    }
    require(std::abs(s - 1.0) <= 1e-6, ErrorKind::Routing, "routing weights must sum to 1");
  }
  std::vector<AdapterBranch> branches;
  for (std::size_t t = 0; t < tasks; ++t) {
    AdapterBranch br{&bank[t], std::vector<double>(batch)};
    bool any = false;
    bool all_one = true;
    for (std::size_t b = 0; b < batch; ++b) {
      br.sample_weights[b] = alphas(b, t);
      any = any || alphas(b, t) != 0.0;
      all_one = all_one && alphas(b, t) == 1.0;
    }
    if (!any) continue;
    if (all_one) br.sample_weights.clear();
    branches.push_back(std::move(br));
  }
  return encode(bb, x, prompts, branches);
}

}  // namespace ckaa
