#include "ckaa/dka.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>

#include "ckaa/error.hpp"
#include "ckaa/linalg.hpp"
#include "ckaa/ops.hpp"

namespace ckaa {

using detail::make_result;
using detail::Node;

namespace {

double row_norm(const double* r, std::size_t n) {
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += r[j] * r[j];
  return std::sqrt(s);
}

// Rows scaled to unit L2 norm; zero rows are rejected.
Tensor row_normalize(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.numel()), norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    norms[i] = row_norm(a.data().data() + i * n, n);
    require(norms[i] > 0.0, ErrorKind::Similarity, "zero-norm feature row");
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] / norms[i];
  }
  return make_result(a.shape(), out, {a}, [m, n, y = out, norms = std::move(norms)](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[i * n + j] * self.grad[i * n + j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += (self.grad[i * n + j] - y[i * n + j] * dot) / norms[i];
    }
  });
}

// Mean over active anchors of -log(sum_P e / (sum_P e + sum_N e)) with
// e = exp(s / tau). Masks are row-major over sim_pos [B x M] and sim_neg [B x B].
Tensor contrastive_mean(const Tensor& sim_pos, const Tensor& sim_neg, const std::vector<char>& pos_mask,
                        const std::vector<char>& neg_mask, double tau) {
  const std::size_t b = sim_pos.rows(), m = sim_pos.cols();
  std::vector<char> active(b, 0);
  std::size_t n_active = 0;
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < m; ++k) active[i] = active[i] || pos_mask[i * m + k];
    n_active += active[i];
  }
  require(n_active > 0, ErrorKind::DegenerateBatch, "no anchor has a positive in the cached set");

  std::vector<double> ep(b * m, 0.0), en(b * b, 0.0), sum_p(b, 0.0), sum_a(b, 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (!active[i]) continue;
    double mx = -INFINITY;
    for (std::size_t k = 0; k < m; ++k)
      if (pos_mask[i * m + k]) mx = std::max(mx, sim_pos(i, k) / tau);
    for (std::size_t j = 0; j < b; ++j)
      if (neg_mask[i * b + j]) mx = std::max(mx, sim_neg(i, j) / tau);
    for (std::size_t k = 0; k < m; ++k)
      if (pos_mask[i * m + k]) {
        ep[i * m + k] = std::exp(sim_pos(i, k) / tau - mx);
        sum_p[i] += ep[i * m + k];
      }
    sum_a[i] = sum_p[i];
    for (std::size_t j = 0; j < b; ++j)
      if (neg_mask[i * b + j]) {
        en[i * b + j] = std::exp(sim_neg(i, j) / tau - mx);
        sum_a[i] += en[i * b + j];
      }
    loss += std::log(sum_a[i]) - std::log(sum_p[i]);
  }
  const double inv = 1.0 / static_cast<double>(n_active);
  loss *= inv;
  return make_result(Shape{}, {loss}, {sim_pos, sim_neg},
                     [b, m, tau, inv, active = std::move(active), ep = std::move(ep), en = std::move(en),
                      sum_p = std::move(sum_p), sum_a = std::move(sum_a)](Node& self) {
                       const double s = self.grad[0] * inv / tau;
                       Node& pp = *self.parents[0];
                       Node& pn = *self.parents[1];
                       for (std::size_t i = 0; i < b; ++i) {
                         if (!active[i]) continue;
                         if (pp.requires_grad) {
                           auto& g = pp.ensure_grad();
                           for (std::size_t k = 0; k < m; ++k) {
                             const double e = ep[i * m + k];
                             if (e != 0.0) g[i * m + k] += s * (e / sum_a[i] - e / sum_p[i]);
                           }
                         }
                         if (pn.requires_grad) {
                           auto& g = pn.ensure_grad();
                           for (std::size_t j = 0; j < b; ++j) g[i * b + j] += s * en[i * b + j] / sum_a[i];
                         }
                       }
                     });
}

}  // namespace

void DkaConfig::validate() const {
  require(tau_f > 0.0 && tau_g > 0.0, ErrorKind::Config, "DKA temperatures must be positive");
  require(k_g >= 1, ErrorKind::Config, "K_g must be at least 1");
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::Dimension, "cosine similarity of vectors with different lengths");
  const double na = row_norm(a.data(), a.size()), nb = row_norm(b.data(), b.size());
  require(na > 0.0 && nb > 0.0, ErrorKind::Similarity, "zero-norm feature row");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return dot / (na * nb);
}

Tensor ce_loss(const Tensor& logits, std::span<const int> labels) { return cross_entropy(logits, labels); }

std::vector<GaussianClassModel> fit_gaussians(const Tensor& shared_feats, std::span<const int> labels, int task_id) {
  const std::size_t n = shared_feats.rows(), d = shared_feats.cols();
  require(labels.size() == n, ErrorKind::Dimension, "one label per feature row required");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n; ++i) by_class[labels[i]].push_back(i);
  std::vector<GaussianClassModel> out;
  for (const auto& [cls, rows] : by_class) {
    require(rows.size() >= 2, ErrorKind::Modeling,
            "class " + std::to_string(cls) + " has fewer than two samples");
    GaussianClassModel g{cls, task_id, Tensor({d}, 0.0), Tensor({d, d}, 0.0), rows.size()};
    for (std::size_t r : rows)
      for (std::size_t j = 0; j < d; ++j) g.mean[j] += shared_feats(r, j);
    for (std::size_t j = 0; j < d; ++j) g.mean[j] /= static_cast<double>(rows.size());
    std::vector<double> c(d);
    for (std::size_t r : rows) {
      for (std::size_t j = 0; j < d; ++j) c[j] = shared_feats(r, j) - g.mean[j];
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) g.cov(a, b) += c[a] * c[b];
    }
    const double denom = static_cast<double>(rows.size() - 1);
    for (auto& v : g.cov.data()) v /= denom;
    out.push_back(std::move(g));
  }
  return out;
}

GaussianSampler::GaussianSampler(std::span<const GaussianClassModel> models) {
  for (const auto& m : models) {
    models_.push_back(&m);
    factors_.push_back(cholesky_factor(m.cov));
  }
}

LabeledFeatureBatch GaussianSampler::sample(std::size_t n, Rng& rng) const {
  require(!models_.empty(), ErrorKind::State, "no Gaussian class models to sample from");
  const std::size_t d = models_.front()->mean.numel();
  LabeledFeatureBatch out{Tensor({n, d}), {}, FeatureOrigin::SampledShared};
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t m = rng.index(models_.size());
    Tensor row = sample_with_factor(models_[m]->mean, factors_[m], 1, rng);
    std::copy(row.data().begin(), row.data().end(), out.feats.data().begin() + static_cast<std::ptrdiff_t>(r * d));
    out.labels.push_back(models_[m]->class_id);
  }
  return out;
}

Tensor csfa_loss(const LabeledFeatureBatch& current, const LabeledFeatureBatch& cached_prev, double tau_f) {
  require(tau_f > 0.0, ErrorKind::Config, "tau_f must be positive");
  const std::size_t b = current.feats.rows(), m = cached_prev.feats.rows();
  require(current.labels.size() == b && cached_prev.labels.size() == m, ErrorKind::Dimension,
          "one label per feature row required");
  require(current.feats.cols() == cached_prev.feats.cols(), ErrorKind::Dimension, "feature widths differ");
  std::vector<char> pos(b * m), neg(b * b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < m; ++k) pos[i * m + k] = cached_prev.labels[k] == current.labels[i];
    for (std::size_t j = 0; j < b; ++j) neg[i * b + j] = current.labels[j] != current.labels[i];
  }
  Tensor zn = row_normalize(current.feats);
  Tensor cn = row_normalize(cached_prev.feats.detach());
  return contrastive_mean(matmul_nt(zn, cn), matmul_nt(zn, zn), pos, neg, tau_f);
}

Tensor affinity_matrix(const Tensor& sampled_shared, const Tensor& current_shared, double tau_g, std::size_t k_g) {
  require(tau_g > 0.0 && k_g >= 1, ErrorKind::Config, "affinity needs tau_g > 0 and K_g >= 1");
  const std::size_t bs = sampled_shared.rows(), b = current_shared.rows();
  require(sampled_shared.cols() == current_shared.cols(), ErrorKind::Dimension, "feature widths differ");
  const std::size_t k = std::min(k_g, b);
  Tensor g({bs, b}, 0.0);
  std::vector<double> sim(b);
  std::vector<std::size_t> order(b);
  for (std::size_t i = 0; i < bs; ++i) {
    const auto si = sampled_shared.row(i);
    for (std::size_t j = 0; j < b; ++j) sim[j] = cosine_similarity(si, current_shared.row(j));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sim[x] > sim[y]; });
    for (std::size_t r = 0; r < k; ++r) g(i, order[r]) = std::exp(sim[order[r]] / tau_g);
  }
  return g;
}

Tensor simulate_features(const Tensor& sampled_shared, const Tensor& current_shared, const Tensor& current_specific,
                         const Tensor& affinity) {
  const std::size_t bs = sampled_shared.rows(), b = current_shared.rows(), d = sampled_shared.cols();
  require(current_specific.rows() == b && current_specific.cols() == d && current_shared.cols() == d,
          ErrorKind::Dimension, "current feature shapes disagree");
  require(affinity.rows() == bs && affinity.cols() == b, ErrorKind::Dimension, "affinity shape disagrees");
  // Row-normalised affinities; a row without neighbours falls back to the plain mean shift.
  Tensor w({bs, b}, 0.0);
  for (std::size_t i = 0; i < bs; ++i) {
    double wsum = 0.0;
    for (std::size_t j = 0; j < b; ++j) wsum += affinity(i, j);
    for (std::size_t j = 0; j < b; ++j) w(i, j) = wsum > 0.0 ? affinity(i, j) / wsum : 1.0 / static_cast<double>(b);
  }
  return add(sampled_shared, matmul(w, sub(current_specific, current_shared)));
}

Tensor ca_loss(std::span<const LabeledFeatureBatch> unified, const LinearHead& head) {
  require(!unified.empty(), ErrorKind::Dimension, "unified feature set is empty");
  std::vector<Tensor> parts;
  std::vector<int> labels;
  for (const auto& part : unified) {
    require(part.labels.size() == part.feats.rows(), ErrorKind::Dimension, "one label per feature row required");
    for (int y : part.labels)
      require(y >= 0 && static_cast<std::size_t>(y) < head.classes(), ErrorKind::Dimension,
              "unseen label " + std::to_string(y) + " in the unified set");
    parts.push_back(part.feats);
    labels.insert(labels.end(), part.labels.begin(), part.labels.end());
  }
  return cross_entropy(classify(head, concat_rows(parts)), labels);
}

Tensor total_loss(const Tensor& ce, const std::optional<Tensor>& csfa, const std::optional<Tensor>& ca,
                  std::size_t session) {
  Tensor l = ce;
  if (session <= 1) return l;
  if (csfa) l = add(l, *csfa);
  if (ca) l = add(l, *ca);
  return l;
}

}  // namespace ckaa
