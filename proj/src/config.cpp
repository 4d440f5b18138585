#include "ckaa/config.hpp"

#include <fstream>
#include <iterator>
#include <set>

#include "ckaa/error.hpp"
#include "json.hpp"

namespace ckaa {

using nlohmann::ordered_json;

namespace {

// Reads the fields of one JSON object and rejects any it did not consume.
class Fields {
 public:
  Fields(const ordered_json& j, std::string where) : j_(j), where_(std::move(where)) {
    require(j.is_object(), ErrorKind::Config, where_ + " must be a JSON object");
  }

  template <class T>
  void read(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Config, where_ + "." + key + ": " + e.what());
    }
  }

  const ordered_json* object(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  std::string where(const char* key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      require(seen_.count(k) > 0, ErrorKind::Config, "unknown field " + where_ + "." + k);
  }

 private:
  const ordered_json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

ordered_json parse(const std::string& text) {
  try {
    return ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::Config, std::string("malformed JSON: ") + e.what());
  }
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Routing parse_routing(const std::string& s) {
  if (s == "tcmoa") return Routing::TcMoa;
  if (s == "maximum") return Routing::Maximum;
  if (s == "querykey_stub") return Routing::QueryKeyStub;
  fail(ErrorKind::Config, "unknown routing '" + s + "'");
}

ordered_json stream_json(const StreamSpec& s) {
  ordered_json j;
  if (s.source == StreamSource::Synthetic) {
    const auto& y = s.synthetic;
    j["source"] = "synthetic";
    j["n_tasks"] = y.n_tasks;
    j["classes_per_task"] = y.classes_per_task;
    j["samples_per_class"] = y.samples_per_class;
    j["image_size"] = y.image_size;
    j["noise_sigma"] = y.noise_sigma;
    j["template_scale"] = y.template_scale;
    j["seed"] = y.seed;
    j["train_fraction"] = y.train_fraction;
  } else {
    j["source"] = "feature_file";
    j["path"] = s.path.string();
    j["label_groups"] = s.features.label_groups;
    j["train_fraction"] = s.features.train_fraction;
  }
  return j;
}

StreamSpec stream_from(const ordered_json& j, const std::string& where) {
  Fields f(j, where);
  StreamSpec s;
  std::string source = "synthetic";
  f.read("source", source);
  if (source == "synthetic") {
    auto& y = s.synthetic;
    f.read("n_tasks", y.n_tasks);
    f.read("classes_per_task", y.classes_per_task);
    f.read("samples_per_class", y.samples_per_class);
    f.read("image_size", y.image_size);
    f.read("noise_sigma", y.noise_sigma);
    f.read("template_scale", y.template_scale);
    f.read("seed", y.seed);
    f.read("train_fraction", y.train_fraction);
  } else if (source == "feature_file") {
    s.source = StreamSource::FeatureFile;
    std::string path;
    f.read("path", path);
    require(!path.empty(), ErrorKind::Config, where + ".path is required for a feature_file stream");
    s.path = path;
    f.read("label_groups", s.features.label_groups);
    f.read("train_fraction", s.features.train_fraction);
  } else {
    fail(ErrorKind::Config, "unknown stream source '" + source + "'");
  }
  f.finish();
  return s;
}

void resolve_relative(StreamSpec& s, const std::filesystem::path& base) {
  if (s.source == StreamSource::FeatureFile && s.path.is_relative()) s.path = base.parent_path() / s.path;
}

}  // namespace

std::string routing_name(Routing r) {
  switch (r) {
    case Routing::TcMoa:
      return "tcmoa";
    case Routing::Maximum:
      return "maximum";
    case Routing::QueryKeyStub:
      return "querykey_stub";
  }
  return "tcmoa";
}

void RunConfig::validate() const {
  backbone.validate();
  dka.validate();
  tcmoa.validate();
  require(optimizer.lr > 0.0 && optimizer.epochs >= 1 && optimizer.batch >= 1, ErrorKind::Config,
          "optimizer needs lr > 0, epochs >= 1 and batch >= 1");
  require(null_space.rel_threshold > 0.0 && null_space.rel_threshold <= 1.0, ErrorKind::Config,
          "null-space threshold must be in (0, 1]");
  require(threads >= 1, ErrorKind::Config, "threads must be at least 1");
  if (stream.source == StreamSource::Synthetic) {
    stream.synthetic.validate();
    require(backbone.input_mode == InputMode::Image || backbone.feature_dim == stream.synthetic.image_size * stream.synthetic.image_size,
            ErrorKind::Config, "feature dimension must equal the synthetic image area");
    if (backbone.input_mode == InputMode::Image)
      require(backbone.image_h == stream.synthetic.image_size && backbone.image_w == stream.synthetic.image_size,
              ErrorKind::Config, "backbone image size must match the synthetic stream");
  } else {
    require(backbone.input_mode == InputMode::Feature, ErrorKind::Config,
            "feature-file streams need the feature input mode");
  }
}

std::string to_json(const StreamSpec& spec) { return stream_json(spec).dump(2) + "\n"; }

std::string to_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["backbone_mode"] = c.backbone_mode == BackboneMode::Scratch ? "scratch" : "frozen";
  j["stream"] = stream_json(c.stream);
  const auto& b = c.backbone;
  ordered_json mode;
  if (b.input_mode == InputMode::Image) {
    mode["type"] = "image";
    mode["H"] = b.image_h;
    mode["W"] = b.image_w;
    mode["patch"] = b.patch;
  } else {
    mode["type"] = "feature";
    mode["D"] = b.feature_dim;
  }
  j["backbone"] = {{"L", b.blocks},      {"d", b.dim},           {"heads", b.heads},
                   {"mlp_dim", b.mlp_dim}, {"input_mode", mode}, {"N_p", b.prompt_len},
                   {"d_hat", b.adapter_dim}, {"prompt_init_scale", b.prompt_init_scale}};
  j["dka"] = {{"tau_f", c.dka.tau_f},
              {"tau_g", c.dka.tau_g},
              {"K_g", c.dka.k_g},
              {"B_s", c.dka.sampled_batch},
              {"ca_detach", c.dka.ca_detach}};
  j["tcmoa"] = {{"K_c", c.tcmoa.k_c}, {"tau", c.tcmoa.tau}};
  j["optimizer"] = {{"name", "Adam"}, {"lr", c.optimizer.lr}, {"epochs", c.optimizer.epochs}, {"batch", c.optimizer.batch}};
  j["null_space"] = {{"rel_threshold", c.null_space.rel_threshold}, {"fallback_rank", c.null_space.fallback_rank}};
  j["ablation"] = {{"disable_csfa", c.ablation.disable_csfa},
                   {"disable_ca", c.ablation.disable_ca},
                   {"disable_nullspace", c.ablation.disable_nullspace},
                   {"routing", routing_name(c.ablation.routing)},
                   {"shared_only", c.ablation.shared_only}};
  return j.dump(2) + "\n";
}

RunConfig run_config_from_json(const std::string& text) {
  const ordered_json j = parse(text);
  Fields top(j, "config");
  RunConfig c;
  top.read("seed", c.seed);
  top.read("threads", c.threads);
  std::string mode = "scratch";
  top.read("backbone_mode", mode);
  require(mode == "scratch" || mode == "frozen", ErrorKind::Config, "backbone_mode must be scratch or frozen");
  c.backbone_mode = mode == "scratch" ? BackboneMode::Scratch : BackboneMode::Frozen;
  if (const auto* s = top.object("stream")) c.stream = stream_from(*s, top.where("stream"));

  if (const auto* bj = top.object("backbone")) {
    Fields f(*bj, top.where("backbone"));
    auto& b = c.backbone;
    f.read("L", b.blocks);
    f.read("d", b.dim);
    f.read("heads", b.heads);
    f.read("mlp_dim", b.mlp_dim);
    f.read("N_p", b.prompt_len);
    f.read("d_hat", b.adapter_dim);
    f.read("prompt_init_scale", b.prompt_init_scale);
    if (const auto* mj = f.object("input_mode")) {
      Fields m(*mj, f.where("input_mode"));
      std::string type = "image";
      m.read("type", type);
      if (type == "image") {
        b.input_mode = InputMode::Image;
        m.read("H", b.image_h);
        m.read("W", b.image_w);
        m.read("patch", b.patch);
      } else if (type == "feature") {
        b.input_mode = InputMode::Feature;
        m.read("D", b.feature_dim);
      } else {
        fail(ErrorKind::Config, "unknown input_mode type '" + type + "'");
      }
      m.finish();
    }
    f.finish();
  }
  if (const auto* dj = top.object("dka")) {
    Fields f(*dj, top.where("dka"));
    f.read("tau_f", c.dka.tau_f);
    f.read("tau_g", c.dka.tau_g);
    f.read("K_g", c.dka.k_g);
    f.read("B_s", c.dka.sampled_batch);
    f.read("ca_detach", c.dka.ca_detach);
    f.finish();
  }
  if (const auto* tj = top.object("tcmoa")) {
    Fields f(*tj, top.where("tcmoa"));
    f.read("K_c", c.tcmoa.k_c);
    f.read("tau", c.tcmoa.tau);
    f.finish();
  }
  if (const auto* oj = top.object("optimizer")) {
    Fields f(*oj, top.where("optimizer"));
    std::string name = "Adam";
    f.read("name", name);
    require(name == "Adam", ErrorKind::Config, "only the Adam optimizer is supported");
    f.read("lr", c.optimizer.lr);
    f.read("epochs", c.optimizer.epochs);
    f.read("batch", c.optimizer.batch);
    f.finish();
  }
  if (const auto* nj = top.object("null_space")) {
    Fields f(*nj, top.where("null_space"));
    f.read("rel_threshold", c.null_space.rel_threshold);
    f.read("fallback_rank", c.null_space.fallback_rank);
    f.finish();
  }
  if (const auto* aj = top.object("ablation")) {
    Fields f(*aj, top.where("ablation"));
    f.read("disable_csfa", c.ablation.disable_csfa);
    f.read("disable_ca", c.ablation.disable_ca);
    f.read("disable_nullspace", c.ablation.disable_nullspace);
    f.read("shared_only", c.ablation.shared_only);
    std::string routing = "tcmoa";
    f.read("routing", routing);
    c.ablation.routing = parse_routing(routing);
    f.finish();
  }
  top.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  RunConfig c = run_config_from_json(read_text(path));
  resolve_relative(c.stream, path);
  return c;
}

StreamSpec stream_spec_from_json(const std::string& text) { return stream_from(parse(text), "stream"); }

StreamSpec load_stream_spec(const std::filesystem::path& path) {
  StreamSpec s = stream_spec_from_json(read_text(path));
  resolve_relative(s, path);
  return s;
}

TaskStream build_stream(const StreamSpec& spec) {
  if (spec.source == StreamSource::Synthetic) return make_synthetic_stream(spec.synthetic);
  return load_feature_stream(spec.path, spec.features);
}

}  // namespace ckaa
