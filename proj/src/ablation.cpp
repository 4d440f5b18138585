#include "ckaa/ablation.hpp"

#include "ckaa/learner.hpp"

namespace ckaa {

std::vector<AblationVariant> ablation_variants(const AblationFlags& base) {
  auto make = [&](std::string name, bool csfa, bool ca, bool shared_only, Routing routing, bool reference) {
    AblationFlags f = base;
    f.disable_csfa = !csfa;
    f.disable_ca = !ca;
    f.shared_only = shared_only;
    f.routing = routing;
    return AblationVariant{std::move(name), f, reference};
  };
  return {
      make("shared_only", false, false, true, Routing::TcMoa, false),
      make("tcmoa", false, false, false, Routing::TcMoa, false),
      make("tcmoa_fa", true, false, false, Routing::TcMoa, false),
      make("tcmoa_ca", false, true, false, Routing::TcMoa, false),
      make("full", true, true, false, Routing::TcMoa, true),
      make("maximum", true, true, false, Routing::Maximum, false),
  };
}

std::vector<AblationRow> run_ablation_suite(const RunConfig& config) {
  config.validate();
  const TaskStream stream = build_stream(config.stream);
  std::vector<AblationRow> rows;
  for (const auto& v : ablation_variants(config.ablation)) {
    RunConfig c = config;
    c.ablation = v.flags;
    rows.push_back({v, run_stream(c, stream).table});
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,reference,last_acc,avg_acc\n";
  for (const auto& r : rows)
    out += r.variant.name + "," + (r.variant.reference ? "1" : "0") + "," + format_double(r.table.last_acc()) + "," +
           format_double(r.table.avg_acc()) + "\n";
  return out;
}

}  // namespace ckaa
