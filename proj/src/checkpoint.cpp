#include "ckaa/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>

#include "ckaa/error.hpp"
#include "ckaa/tcmoa.hpp"

namespace ckaa {
namespace {

constexpr char kMagic[4] = {'C', 'K', 'A', 'C'};

class Writer {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void i32(int v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void tensor(const Tensor& t) {
    u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) u64(d);
    for (double v : t.data()) f64(v);
  }
  void head(const LinearHead& h) {
    tensor(h.weight);
    tensor(h.bias);
  }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::size_t base, std::string where)
      : b_(bytes), base_(base), where_(std::move(where)) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  int i32() { return static_cast<int>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() {
    auto s = take(u32());
    return std::string(s.begin(), s.end());
  }
  Tensor tensor() {
    const std::uint32_t rank = u32();
    if (rank > 2) fail_here("tensor rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(u64());
    const std::size_t n = shape_numel(shape);
    if (n > remaining() / 8) fail_here("tensor larger than the section");
    std::vector<double> data(n);
    for (auto& v : data) v = f64();
    return Tensor(std::move(shape), std::move(data));
  }
  LinearHead head() {
    Tensor w = tensor();
    Tensor b = tensor();
    return {w, b};
  }
  std::size_t remaining() const { return b_.size() - pos_; }
  std::size_t offset() const { return base_ + pos_; }
  void finish() {
    if (remaining() != 0) fail_here("trailing bytes");
  }
  [[noreturn]] void fail_here(const std::string& what) const {
    fail(ErrorKind::Format, "checkpoint " + where_ + ": " + what + " at byte " + std::to_string(offset()));
  }

 private:
  void need(std::size_t n) {
    if (remaining() < n) fail_here("truncated");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> b_;
  std::size_t base_;
  std::string where_;
  std::size_t pos_ = 0;
};

void assign(Tensor& dst, const Tensor& src, Reader& r, const std::string& what) {
  if (dst.shape() != src.shape()) r.fail_here("shape mismatch for " + what);
  std::copy(src.data().begin(), src.data().end(), dst.data().begin());
}

std::string adapter_section(std::size_t t) { return "adapters[" + std::to_string(t) + "]"; }

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const RunConfig& config, const CkaaModel& model) {
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> sections;
  {
    const std::string js = to_json(config);
    sections.push_back({"config", std::vector<std::uint8_t>(js.begin(), js.end())});
  }
  {
    Writer w;
    const auto params = model.backbone.named_parameters();
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
      w.str(name);
      w.tensor(t);
    }
    sections.push_back({"backbone", std::move(w.buffer())});
  }
  {
    Writer w;
    w.u32(static_cast<std::uint32_t>(model.prompts.prompts.size()));
    for (const Tensor& p : model.prompts.prompts) w.tensor(p);
    sections.push_back({"prompts", std::move(w.buffer())});
  }
  for (std::size_t t = 0; t < model.adapters.size(); ++t) {
    Writer w;
    w.u32(static_cast<std::uint32_t>(model.adapters[t].size()));
    for (const Adapter& a : model.adapters[t]) {
      w.tensor(a.w_down);
      w.tensor(a.w_up);
    }
    sections.push_back({adapter_section(t), std::move(w.buffer())});
  }
  {
    Writer w;
    w.u64(model.sessions_done);
    w.u32(static_cast<std::uint32_t>(model.class_to_task.size()));
    for (int t : model.class_to_task) w.i32(t);
    w.u32(model.head ? 1 : 0);
    if (model.head) w.head(*model.head);
    w.u32(static_cast<std::uint32_t>(model.task_heads.size()));
    for (const auto& h : model.task_heads) w.head(h);
    w.u32(model.global_head ? 1 : 0);
    if (model.global_head) w.head(*model.global_head);
    sections.push_back({"heads", std::move(w.buffer())});
  }
  {
    Writer w;
    w.u32(static_cast<std::uint32_t>(model.gaussians.size()));
    for (const auto& g : model.gaussians) {
      w.i32(g.class_id);
      w.i32(g.task_id);
      w.u64(g.count);
      w.tensor(g.mean);
      w.tensor(g.cov);
    }
    sections.push_back({"gaussians", std::move(w.buffer())});
  }
  {
    Writer w;
    w.u64(model.stats.sample_count);
    w.u32(static_cast<std::uint32_t>(model.stats.cov_q.size()));
    for (const Tensor& t : model.stats.cov_q) w.tensor(t);
    for (const Tensor& t : model.stats.cov_s) w.tensor(t);
    sections.push_back({"nullspace_stats", std::move(w.buffer())});
  }
  {
    Writer w;
    w.u32(static_cast<std::uint32_t>(model.task_keys.size()));
    for (const auto& key : model.task_keys) {
      w.u32(static_cast<std::uint32_t>(key.size()));
      for (double v : key) w.f64(v);
    }
    sections.push_back({"task_keys", std::move(w.buffer())});
  }

  Writer out;
  out.bytes(kMagic, 4);
  out.u32(kCheckpointVersion);
  out.u32(static_cast<std::uint32_t>(sections.size()));
  for (const auto& [name, payload] : sections) {
    out.str(name);
    out.u64(payload.size());
    out.bytes(payload.data(), payload.size());
  }
  return std::move(out.buffer());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader top(bytes, 0, "header");
  auto magic = top.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) fail(ErrorKind::Format, "checkpoint: bad magic at byte 0");
  const std::uint32_t version = top.u32();
  if (version != kCheckpointVersion) fail(ErrorKind::Format, "checkpoint: unsupported version " + std::to_string(version) + " at byte 4");
  const std::uint32_t count = top.u32();
  std::map<std::string, std::pair<std::size_t, std::span<const std::uint8_t>>> sections;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = top.str();
    const std::uint64_t len = top.u64();
    if (len > top.remaining()) top.fail_here("section " + name + " truncated");
    const std::size_t at = top.offset();
    if (!sections.emplace(name, std::make_pair(at, top.take(len))).second) top.fail_here("duplicate section " + name);
  }
  top.finish();
  auto section = [&](const std::string& name) {
    auto it = sections.find(name);
    if (it == sections.end()) fail(ErrorKind::Format, "checkpoint: missing section " + name);
    return Reader(it->second.second, it->second.first, name);
  };

  Checkpoint ck;
  {
    Reader r = section("config");
    auto s = r.take(r.remaining());
    ck.config = run_config_from_json(std::string(s.begin(), s.end()));
  }
  CkaaModel& m = ck.model;
  Rng scratch(0);
  m = make_model(ck.config.backbone, scratch);
  {
    Reader r = section("backbone");
    auto params = m.backbone.named_parameters();
    if (r.u32() != params.size()) r.fail_here("parameter count mismatch");
    for (auto& [name, t] : params) {
      if (r.str() != name) r.fail_here("expected parameter " + name);
      assign(t, r.tensor(), r, name);
    }
    r.finish();
  }
  {
    Reader r = section("prompts");
    if (r.u32() != m.prompts.prompts.size()) r.fail_here("prompt count mismatch");
    for (Tensor& p : m.prompts.prompts) assign(p, r.tensor(), r, "prompt");
    r.finish();
  }
  Reader heads = section("heads");
  m.sessions_done = heads.u64();
  for (std::size_t t = 0; t < m.sessions_done && !ck.config.ablation.shared_only; ++t) {
    Reader r = section(adapter_section(t));
    AdapterStack stack = init_adapter_stack(m.config(), scratch);
    if (r.u32() != stack.size()) r.fail_here("adapter count mismatch");
    for (Adapter& a : stack) {
      assign(a.w_down, r.tensor(), r, "w_down");
      assign(a.w_up, r.tensor(), r, "w_up");
    }
    r.finish();
    set_trainable(stack, false);
    m.adapters.push_back(std::move(stack));
  }
  {
    Reader& r = heads;
    const std::uint32_t k = r.u32();
    for (std::uint32_t i = 0; i < k; ++i) m.class_to_task.push_back(r.i32());
    if (r.u32()) m.head = r.head();
    const std::uint32_t nt = r.u32();
    for (std::uint32_t i = 0; i < nt; ++i) m.task_heads.push_back(r.head());
    if (r.u32()) m.global_head = r.head();
    r.finish();
  }
  {
    Reader r = section("gaussians");
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      GaussianClassModel g;
      g.class_id = r.i32();
      g.task_id = r.i32();
      g.count = r.u64();
      g.mean = r.tensor();
      g.cov = r.tensor();
      m.gaussians.push_back(std::move(g));
    }
    r.finish();
  }
  {
    Reader r = section("nullspace_stats");
    m.stats.sample_count = r.u64();
    const std::uint32_t blocks = r.u32();
    if (blocks != m.stats.cov_q.size()) r.fail_here("block count mismatch");
    for (Tensor& t : m.stats.cov_q) assign(t, r.tensor(), r, "cov_q");
    for (Tensor& t : m.stats.cov_s) assign(t, r.tensor(), r, "cov_s");
    r.finish();
  }
  {
    Reader r = section("task_keys");
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      std::vector<double> key(r.u32());
      for (double& v : key) v = r.f64();
      m.task_keys.push_back(std::move(key));
    }
    r.finish();
  }
  m.backbone.set_trainable(false);
  m.prompts.set_trainable(false);
  if (!m.stats.empty())
    m.basis = recompute_bases(m.stats, ck.config.null_space.rel_threshold, ck.config.null_space.fallback_rank);
  require(m.task_heads.size() == m.sessions_done, ErrorKind::Format, "checkpoint: one task head per session expected");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, const CkaaModel& model) {
  const auto bytes = encode_checkpoint(config, model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorKind::Io, "failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace ckaa
