#pragma once

#include <string>
#include <vector>

#include "ckaa/config.hpp"
#include "ckaa/metrics.hpp"

namespace ckaa {

struct AblationVariant {
  std::string name;
  AblationFlags flags;
  bool reference = false;
};

// shared_only, tcmoa, tcmoa_fa, tcmoa_ca, full (reference) and maximum
// routing. Null-space and thread settings come from base.
std::vector<AblationVariant> ablation_variants(const AblationFlags& base);

struct AblationRow {
  AblationVariant variant;
  MetricsTable table;
};

// Every variant on the same stream and seed.
std::vector<AblationRow> run_ablation_suite(const RunConfig& config);

// "variant,reference,last_acc,avg_acc" rows.
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace ckaa
