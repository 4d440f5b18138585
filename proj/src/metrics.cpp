#include "ckaa/metrics.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "ckaa/config.hpp"
#include "ckaa/error.hpp"

namespace ckaa {
namespace {

std::string opt(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  require(ec == std::errc() && ptr == s.data() + s.size(), ErrorKind::Format, "bad number '" + s + "' in metrics");
  return v;
}

std::size_t parse_index(const std::string& s) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  require(ec == std::errc() && ptr == s.data() + s.size() && v >= 1, ErrorKind::Format,
          "bad index '" + s + "' in metrics");
  return v;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::Io, "cannot write " + path.string());
  out << text;
  require(out.good(), ErrorKind::Io, "failed writing " + path.string());
}

}  // namespace

void MetricsTable::add_session(std::vector<double> per_task, std::optional<double> easy_acc,
                               std::optional<double> challenging_acc) {
  require(per_task.size() == acc.size() + 1, ErrorKind::Dimension,
          "session " + std::to_string(acc.size() + 1) + " needs one accuracy per seen task");
  acc.push_back(std::move(per_task));
  easy.push_back(easy_acc);
  challenging.push_back(challenging_acc);
}

double MetricsTable::acc_t(std::size_t t) const {
  require(t < acc.size(), ErrorKind::Dimension, "no such session in the metrics table");
  double s = 0.0;
  for (double a : acc[t]) s += a;
  return s / static_cast<double>(acc[t].size());
}

double MetricsTable::last_acc() const {
  require(!acc.empty(), ErrorKind::State, "metrics table is empty");
  return acc_t(acc.size() - 1);
}

double MetricsTable::avg_acc() const {
  require(!acc.empty(), ErrorKind::State, "metrics table is empty");
  double s = 0.0;
  for (std::size_t t = 0; t < acc.size(); ++t) s += acc_t(t);
  return s / static_cast<double>(acc.size());
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  require(ec == std::errc(), ErrorKind::Format, "cannot format number");
  return std::string(buf, ptr);
}

std::string metrics_csv(const MetricsTable& t) {
  std::string out = "session,task,accuracy\n";
  for (std::size_t s = 0; s < t.acc.size(); ++s)
    for (std::size_t i = 0; i < t.acc[s].size(); ++i)
      out += std::to_string(s + 1) + "," + std::to_string(i + 1) + "," + format_double(t.acc[s][i]) + "\n";
  out += "\nmetric,value\n";
  for (std::size_t s = 0; s < t.acc.size(); ++s) out += "acc_" + std::to_string(s + 1) + "," + format_double(t.acc_t(s)) + "\n";
  if (!t.acc.empty()) {
    out += "last_acc," + format_double(t.last_acc()) + "\n";
    out += "avg_acc," + format_double(t.avg_acc()) + "\n";
  }
  for (std::size_t s = 0; s < t.acc.size(); ++s) {
    out += "easy_acc_" + std::to_string(s + 1) + "," + opt(t.easy[s]) + "\n";
    out += "challenging_acc_" + std::to_string(s + 1) + "," + opt(t.challenging[s]) + "\n";
  }
  return out;
}

MetricsTable parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  require(std::getline(in, line) && line == "session,task,accuracy", ErrorKind::Format, "bad metrics header");
  std::map<std::size_t, std::map<std::size_t, double>> rows;
  while (std::getline(in, line) && !line.empty()) {
    const auto a = line.find(','), b = line.find(',', a + 1);
    require(a != std::string::npos && b != std::string::npos, ErrorKind::Format, "bad metrics row '" + line + "'");
    rows[parse_index(line.substr(0, a))][parse_index(line.substr(a + 1, b - a - 1))] = parse_double(line.substr(b + 1));
  }
  MetricsTable t;
  for (const auto& [s, per] : rows) {
    require(s == t.acc.size() + 1 && per.size() == s && per.rbegin()->first == s, ErrorKind::Format,
            "metrics rows are not a complete triangle");
    std::vector<double> v;
    for (const auto& [i, a] : per) v.push_back(a);
    t.add_session(std::move(v));
  }
  require(std::getline(in, line) && line == "metric,value", ErrorKind::Format, "missing summary block");
  while (std::getline(in, line)) {
    const auto a = line.find(',');
    require(a != std::string::npos, ErrorKind::Format, "bad summary row '" + line + "'");
    const std::string key = line.substr(0, a), value = line.substr(a + 1);
    for (const char* prefix : {"easy_acc_", "challenging_acc_"}) {
      const std::string p = prefix;
      if (key.rfind(p, 0) != 0) continue;
      const std::size_t s = parse_index(key.substr(p.size()));
      require(s <= t.acc.size(), ErrorKind::Format, "summary refers to an unknown session");
      auto& slot = p == "easy_acc_" ? t.easy[s - 1] : t.challenging[s - 1];
      if (!value.empty()) slot = parse_double(value);
    }
  }
  return t;
}

void emit_results(const MetricsTable& table, const RunConfig& config, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  require(!ec, ErrorKind::Io, "cannot create " + out_dir.string() + ": " + ec.message());
  write_file(out_dir / "metrics.csv", metrics_csv(table));
  write_file(out_dir / "config.json", to_json(config));
  std::string curve = "session,acc,easy_acc,challenging_acc\n";
  for (std::size_t s = 0; s < table.sessions(); ++s)
    curve += std::to_string(s + 1) + "," + format_double(table.acc_t(s)) + "," + opt(table.easy[s]) + "," +
             opt(table.challenging[s]) + "\n";
  write_file(out_dir / "accuracy_curve.csv", curve);
}

}  // namespace ckaa
