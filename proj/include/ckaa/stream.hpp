#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ckaa/tensor.hpp"

namespace ckaa {

enum class StreamSource { Synthetic, FeatureFile };

// Inputs of one split, one row per sample. Labels are global class ids,
// contiguous in stream order. Every eval sample carries a taint flag that the
// training code refuses to consume.
struct Split {
  Tensor inputs;
  std::vector<int> labels;
  std::vector<char> eval_taint;

  std::size_t size() const { return labels.size(); }
};

struct TaskData {
  Split train;
  Split eval;
  std::vector<int> classes;  // global ids introduced by this task
};

struct TaskStream {
  std::vector<TaskData> tasks;
  std::vector<std::int64_t> source_labels;  // global class id -> label in the source data
  StreamSource source = StreamSource::Synthetic;
  std::size_t input_dim = 0;

  std::size_t num_classes() const { return source_labels.size(); }
  // Session index (0-based) that introduced each global class.
  std::vector<int> class_to_task() const;
};

struct SyntheticStreamSpec {
  std::size_t n_tasks = 5;
  std::size_t classes_per_task = 4;
  std::size_t samples_per_class = 60;
  std::size_t image_size = 16;
  double noise_sigma = 0.1;
  double template_scale = 1.0;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;

  void validate() const;
};

// Each class gets a random template image; samples add i.i.d. Gaussian noise.
// The first floor(train_fraction * n) samples of a class train, the rest evaluate.
TaskStream make_synthetic_stream(const SyntheticStreamSpec& spec);

// Feature file: "CKAF", u32 version = 1, u32 count, u32 dim, then count records
// of dim little-endian f32 values followed by a u32 label. No padding.
struct FeatureFile {
  std::size_t dim = 0;
  std::vector<float> values;  // count * dim
  std::vector<std::uint32_t> labels;

  std::size_t count() const { return labels.size(); }
};

inline constexpr std::uint32_t kFeatureFileVersion = 1;

std::vector<std::uint8_t> encode_feature_file(const FeatureFile& file);
FeatureFile decode_feature_file(std::span<const std::uint8_t> bytes);
void write_feature_file(const std::filesystem::path& path, const FeatureFile& file);
FeatureFile read_feature_file(const std::filesystem::path& path);

// Every sample of the stream in task order, eval samples after the train
// samples of their class; reloading with the same train_fraction reproduces
// the splits. Values are cast to f32.
FeatureFile stream_to_feature_file(const TaskStream& stream);

struct FeatureStreamSpec {
  std::vector<std::vector<std::uint32_t>> label_groups;  // one group per task
  double train_fraction = 0.8;
};

// Records whose label belongs to no group are ignored. Within a class the
// records keep file order before the train/eval cut.
TaskStream build_feature_stream(const FeatureFile& file, const FeatureStreamSpec& spec);
TaskStream load_feature_stream(const std::filesystem::path& path, const FeatureStreamSpec& spec);

}  // namespace ckaa
