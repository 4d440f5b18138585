#include "ckaa/classifier.hpp"

#include <string>

#include "ckaa/error.hpp"
#include "ckaa/ops.hpp"

namespace ckaa {

LinearHead LinearHead::init(std::size_t classes, std::size_t dim, Rng& rng) {
  LinearHead h{Tensor({classes, dim}), Tensor({classes}, 0.0)};
  for (auto& v : h.weight.data()) v = 0.02 * rng.normal();
  return h;
}

void LinearHead::set_trainable(bool on) {
  weight.set_requires_grad(on);
  bias.set_requires_grad(on);
}

Tensor classify(const LinearHead& head, const Tensor& feats) {
  require(feats.cols() == head.dim(), ErrorKind::Dimension, "feature width does not match the head");
  return add_rowvec(matmul_nt(feats, head.weight), head.bias);
}

LinearHead grow_head(const LinearHead& head, std::size_t new_classes, Rng& rng) {
  require(new_classes >= 1, ErrorKind::Config, "grow_head needs at least one new class");
  const std::size_t k = head.classes(), d = head.dim();
  std::vector<double> w(head.weight.data().begin(), head.weight.data().end());
  std::vector<double> b(head.bias.data().begin(), head.bias.data().end());
  for (std::size_t i = 0; i < new_classes * d; ++i) w.push_back(0.02 * rng.normal());
  b.resize(k + new_classes, 0.0);
  return {Tensor({k + new_classes, d}, std::move(w)), Tensor({k + new_classes}, std::move(b))};
}

LinearHead aggregate_global_head(std::span<const LinearHead> heads, std::span<const int> task_of_class) {
  require(!heads.empty(), ErrorKind::Aggregation, "no task-adaptive heads to aggregate");
  const int last = static_cast<int>(heads.size()) - 1;
  const std::size_t k = task_of_class.size(), d = heads.front().dim();
  require(k >= 1, ErrorKind::Aggregation, "no classes to aggregate");
  LinearHead out{Tensor({k, d}, 0.0), Tensor({k}, 0.0)};
  for (std::size_t c = 0; c < k; ++c) {
    const int first = task_of_class[c];
    require(first >= 0 && first <= last, ErrorKind::Aggregation,
            "class " + std::to_string(c) + " belongs to an unknown session");
    for (int t = first; t <= last; ++t) {
      const LinearHead& h = heads[static_cast<std::size_t>(t)];
      require(h.classes() > c && h.dim() == d, ErrorKind::Aggregation,
              "head of session " + std::to_string(t) + " has no row for class " + std::to_string(c));
      for (std::size_t j = 0; j < d; ++j) out.weight(c, j) += h.weight(c, j);
      out.bias[c] += h.bias[c];
    }
    const double n = static_cast<double>(last - first + 1);
    for (std::size_t j = 0; j < d; ++j) out.weight(c, j) /= n;
    out.bias[c] /= n;
  }
  return out;
}

}  // namespace ckaa
