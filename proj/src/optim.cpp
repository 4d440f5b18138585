#include "ckaa/optim.hpp"

#include <algorithm>
#include <cmath>

#include "ckaa/error.hpp"

namespace ckaa {

void Adam::add(Tensor param, StepTransform transform) {
  param.set_requires_grad(true);
  const std::size_t n = param.numel();
  slots_.push_back({std::move(param), std::move(transform), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0});
}

void Adam::step() {
  for (auto& s : slots_) {
    if (s.param.grad().empty()) continue;
    Tensor g(s.param.shape(), std::vector<double>(s.param.grad().begin(), s.param.grad().end()));
    if (s.transform) g = s.transform(g);
    ++s.t;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(s.t));
    Tensor update(s.param.shape(), 0.0);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      s.m[i] = config_.beta1 * s.m[i] + (1.0 - config_.beta1) * g[i];
      s.v[i] = config_.beta2 * s.v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      update[i] = config_.lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + config_.eps);
    }
    if (s.transform) update = s.transform(update);
    auto p = s.param.data();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= update[i];
    require(std::all_of(p.begin(), p.end(), [](double v) { return std::isfinite(v); }), ErrorKind::Numeric,
            "optimizer step produced a non-finite parameter");
  }
}

void Adam::zero_grad() {
  for (auto& s : slots_) s.param.node()->grad.clear();
}

}  // namespace ckaa
