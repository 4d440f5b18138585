#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ckaa {

struct RunConfig;

// a[t][i]: accuracy on task i after training session t (both 0-based, i <= t),
// plus the easy/challenging accuracies of each session.
struct MetricsTable {
  std::vector<std::vector<double>> acc;
  std::vector<std::optional<double>> easy;
  std::vector<std::optional<double>> challenging;

  void add_session(std::vector<double> per_task, std::optional<double> easy_acc = std::nullopt,
                   std::optional<double> challenging_acc = std::nullopt);
  std::size_t sessions() const { return acc.size(); }
  // Mean of a[t][i] over i <= t.
  double acc_t(std::size_t t) const;
  double last_acc() const;
  double avg_acc() const;

  bool operator==(const MetricsTable&) const = default;
};

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

// "session,task,accuracy" rows (1-based ids), a blank line, then a
// "metric,value" summary block. Undefined values are left empty.
std::string metrics_csv(const MetricsTable& table);
MetricsTable parse_metrics_csv(const std::string& text);

// Writes metrics.csv, config.json and accuracy_curve.csv into out_dir.
void emit_results(const MetricsTable& table, const RunConfig& config, const std::filesystem::path& out_dir);

}  // namespace ckaa
