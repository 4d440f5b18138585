#include "ckaa/stream.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

#include "ckaa/error.hpp"
#include "ckaa/rng.hpp"

namespace ckaa {
namespace {

std::size_t train_count(std::size_t n, double fraction) {
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  require(k >= 2, ErrorKind::Config, "every class needs at least two training samples");
  require(k < n, ErrorKind::Config, "every class needs at least one eval sample");
  return k;
}

Split make_split(std::vector<std::vector<double>>& rows, std::vector<int>& labels, bool eval, std::size_t dim) {
  require(!rows.empty(), ErrorKind::Config, "empty split");
  std::vector<double> flat;
  flat.reserve(rows.size() * dim);
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  Split s{Tensor({rows.size(), dim}, std::move(flat)), std::move(labels), std::vector<char>(rows.size(), eval ? 1 : 0)};
  rows.clear();
  labels.clear();
  return s;
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[off + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

[[noreturn]] void format_error(std::size_t offset, const std::string& what) {
  fail(ErrorKind::Format, "feature file at byte offset " + std::to_string(offset) + ": " + what);
}

}  // namespace

std::vector<int> TaskStream::class_to_task() const {
  std::vector<int> out(num_classes(), -1);
  for (std::size_t t = 0; t < tasks.size(); ++t)
    for (int c : tasks[t].classes) out[static_cast<std::size_t>(c)] = static_cast<int>(t);
  return out;
}

void SyntheticStreamSpec::validate() const {
  require(n_tasks >= 1 && classes_per_task >= 1 && samples_per_class >= 1 && image_size >= 1, ErrorKind::Config,
          "synthetic stream counts must be at least 1");
  require(noise_sigma >= 0.0 && template_scale > 0.0, ErrorKind::Config, "noise must be >= 0 and templates > 0");
  require(train_fraction > 0.0 && train_fraction < 1.0, ErrorKind::Config, "train_fraction must be in (0, 1)");
  train_count(samples_per_class, train_fraction);
}

TaskStream make_synthetic_stream(const SyntheticStreamSpec& spec) {
  spec.validate();
  const std::size_t dim = spec.image_size * spec.image_size;
  const std::size_t n_train = train_count(spec.samples_per_class, spec.train_fraction);
  const Rng root(spec.seed);
  TaskStream stream;
  stream.source = StreamSource::Synthetic;
  stream.input_dim = dim;
  for (std::size_t t = 0; t < spec.n_tasks; ++t) {
    TaskData task;
    std::vector<std::vector<double>> train_rows, eval_rows;
    std::vector<int> train_labels, eval_labels;
    for (std::size_t c = 0; c < spec.classes_per_task; ++c) {
      const int id = static_cast<int>(t * spec.classes_per_task + c);
      Rng trng = root.split("template").split(static_cast<std::uint64_t>(id));
      Rng nrng = root.split("noise").split(static_cast<std::uint64_t>(id));
      std::vector<double> tmpl(dim);
      for (auto& v : tmpl) v = spec.template_scale * trng.normal();
      for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
        std::vector<double> x(dim);
        for (std::size_t j = 0; j < dim; ++j) x[j] = tmpl[j] + spec.noise_sigma * nrng.normal();
        if (s < n_train) {
          train_rows.push_back(std::move(x));
          train_labels.push_back(id);
        } else {
          eval_rows.push_back(std::move(x));
          eval_labels.push_back(id);
        }
      }
      task.classes.push_back(id);
      stream.source_labels.push_back(id);
    }
    task.train = make_split(train_rows, train_labels, false, dim);
    task.eval = make_split(eval_rows, eval_labels, true, dim);
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

std::vector<std::uint8_t> encode_feature_file(const FeatureFile& file) {
  require(file.count() >= 1, ErrorKind::Format, "feature file must hold at least one record");
  require(file.dim >= 1, ErrorKind::Format, "feature dimension must be positive");
  require(file.values.size() == file.count() * file.dim, ErrorKind::Format, "values do not match count * dim");
  std::vector<std::uint8_t> out{'C', 'K', 'A', 'F'};
  put_u32(out, kFeatureFileVersion);
  put_u32(out, static_cast<std::uint32_t>(file.count()));
  put_u32(out, static_cast<std::uint32_t>(file.dim));
  for (std::size_t r = 0; r < file.count(); ++r) {
    for (std::size_t j = 0; j < file.dim; ++j) {
      const float v = file.values[r * file.dim + j];
      require(std::isfinite(v), ErrorKind::Format, "non-finite feature value");
      put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
    put_u32(out, file.labels[r]);
  }
  return out;
}

FeatureFile decode_feature_file(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) format_error(bytes.size(), "truncated magic");
  if (std::memcmp(bytes.data(), "CKAF", 4) != 0) format_error(0, "bad magic");
  if (bytes.size() < 16) format_error(bytes.size(), "truncated header");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kFeatureFileVersion) format_error(4, "unsupported version " + std::to_string(version));
  const std::uint32_t count = get_u32(bytes, 8), dim = get_u32(bytes, 12);
  if (count == 0) format_error(8, "record count is zero");
  if (dim == 0) format_error(12, "dimension is zero");
  const std::size_t record = (static_cast<std::size_t>(dim) + 1) * 4;
  const std::size_t expected = 16 + record * count;
  if (bytes.size() < expected)
    format_error(bytes.size(), "truncated, expected " + std::to_string(expected) + " bytes");
  if (bytes.size() > expected) format_error(expected, "trailing bytes after the last record");
  FeatureFile f;
  f.dim = dim;
  f.values.resize(static_cast<std::size_t>(count) * dim);
  f.labels.resize(count);
  for (std::size_t r = 0; r < count; ++r) {
    const std::size_t base = 16 + r * record;
    for (std::size_t j = 0; j < dim; ++j) {
      const float v = std::bit_cast<float>(get_u32(bytes, base + j * 4));
      if (!std::isfinite(v)) format_error(base + j * 4, "non-finite feature value");
      f.values[r * dim + j] = v;
    }
    f.labels[r] = get_u32(bytes, base + static_cast<std::size_t>(dim) * 4);
  }
  return f;
}

void write_feature_file(const std::filesystem::path& path, const FeatureFile& file) {
  const auto bytes = encode_feature_file(file);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorKind::Io, "failed writing " + path.string());
}

FeatureFile read_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_feature_file(bytes);
}

FeatureFile stream_to_feature_file(const TaskStream& stream) {
  FeatureFile f;
  f.dim = stream.input_dim;
  for (const auto& task : stream.tasks) {
    for (int c : task.classes) {
      for (const Split* split : {&task.train, &task.eval}) {
        for (std::size_t i = 0; i < split->size(); ++i) {
          if (split->labels[i] != c) continue;
          for (std::size_t j = 0; j < f.dim; ++j) f.values.push_back(static_cast<float>(split->inputs(i, j)));
          f.labels.push_back(static_cast<std::uint32_t>(stream.source_labels[static_cast<std::size_t>(c)]));
        }
      }
    }
  }
  return f;
}

TaskStream build_feature_stream(const FeatureFile& file, const FeatureStreamSpec& spec) {
  require(!spec.label_groups.empty(), ErrorKind::Config, "feature stream needs at least one label group");
  require(spec.train_fraction > 0.0 && spec.train_fraction < 1.0, ErrorKind::Config,
          "train_fraction must be in (0, 1)");
  std::map<std::uint32_t, int> global;
  TaskStream stream;
  stream.source = StreamSource::FeatureFile;
  stream.input_dim = file.dim;
  for (const auto& group : spec.label_groups) {
    require(!group.empty(), ErrorKind::Config, "empty label group");
    for (std::uint32_t label : group) {
      const bool inserted = global.emplace(label, static_cast<int>(stream.source_labels.size())).second;
      require(inserted, ErrorKind::Config, "label " + std::to_string(label) + " appears in more than one group");
      stream.source_labels.push_back(label);
    }
  }
  std::vector<std::vector<std::size_t>> by_class(stream.source_labels.size());
  for (std::size_t r = 0; r < file.count(); ++r) {
    auto it = global.find(file.labels[r]);
    if (it != global.end()) by_class[static_cast<std::size_t>(it->second)].push_back(r);
  }
  for (std::size_t c = 0; c < by_class.size(); ++c)
    require(!by_class[c].empty(), ErrorKind::Config,
            "label " + std::to_string(stream.source_labels[c]) + " has no records in the feature file");

  int next = 0;
  for (const auto& group : spec.label_groups) {
    TaskData task;
    std::vector<std::vector<double>> train_rows, eval_rows;
    std::vector<int> train_labels, eval_labels;
    for (std::size_t g = 0; g < group.size(); ++g, ++next) {
      const auto& rows = by_class[static_cast<std::size_t>(next)];
      const std::size_t n_train = train_count(rows.size(), spec.train_fraction);
      for (std::size_t k = 0; k < rows.size(); ++k) {
        const float* src = file.values.data() + rows[k] * file.dim;
        std::vector<double> x(src, src + file.dim);
        if (k < n_train) {
          train_rows.push_back(std::move(x));
          train_labels.push_back(next);
        } else {
          eval_rows.push_back(std::move(x));
          eval_labels.push_back(next);
        }
      }
      task.classes.push_back(next);
    }
    task.train = make_split(train_rows, train_labels, false, file.dim);
    task.eval = make_split(eval_rows, eval_labels, true, file.dim);
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

TaskStream load_feature_stream(const std::filesystem::path& path, const FeatureStreamSpec& spec) {
  return build_feature_stream(read_feature_file(path), spec);
}

}  // namespace ckaa
