#include "ckaa/null_space.hpp"

#include <algorithm>

#include <Eigen/SVD>

#include "ckaa/error.hpp"
#include "ckaa/ops.hpp"
#include "eigen_view.hpp"

namespace ckaa {

using detail::RowMatrix;
using detail::view;

namespace {

OrthonormalBasis smallest_directions(const Tensor& m, std::size_t k) {
  const std::size_t b = m.cols();
  k = std::min(k, b);
  Eigen::JacobiSVD<RowMatrix> svd(view(m), Eigen::ComputeFullV);
  RowMatrix u(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(k));
  for (std::size_t c = 0; c < k; ++c) u.col(static_cast<Eigen::Index>(c)) = svd.matrixV().col(static_cast<Eigen::Index>(b - k + c));
  return OrthonormalBasis(b, detail::from_eigen(u));
}

}  // namespace

LayerFeatureStats LayerFeatureStats::zeros(const BackboneConfig& config) {
  LayerFeatureStats s;
  for (std::size_t l = 0; l < config.blocks; ++l) {
    s.cov_q.emplace_back(Shape{config.dim, config.dim}, 0.0);
    s.cov_s.emplace_back(Shape{config.prompt_len, config.prompt_len}, 0.0);
  }
  return s;
}

void accumulate_stats(LayerFeatureStats& stats, const Backbone& bb, const PromptSet& prompts, const Tensor& x) {
  const BackboneConfig& cfg = bb.config;
  require(stats.cov_q.size() == cfg.blocks && stats.cov_s.size() == cfg.blocks, ErrorKind::Dimension,
          "stats were built for a different backbone");
  NoGradGuard guard;
  const std::size_t n = x.rows(), d = cfg.dim, heads = cfg.heads, dh = d / heads, seq = cfg.seq_len();
  const std::size_t np = cfg.prompt_len, nk = seq + np;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t sel[] = {i};
    Tensor xb = gather_rows(x, sel);
    std::vector<BlockTrace> trace;
    encode(bb, xb, &prompts, {}, &trace);
    for (std::size_t l = 0; l < cfg.blocks; ++l) {
      const auto q = view(trace[l].q);
      const auto wk = view(bb.blocks[l].wk);
      auto cq = detail::MatMap(stats.cov_q[l].data().data(), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
      for (std::size_t h = 0; h < heads; ++h) {
        const auto c0 = static_cast<Eigen::Index>(h * dh), w = static_cast<Eigen::Index>(dh);
        const RowMatrix r = q.middleCols(c0, w) * wk.middleCols(c0, w).transpose();
        cq.noalias() += r.transpose() * r;
      }
      RowMatrix sp(static_cast<Eigen::Index>(heads * seq), static_cast<Eigen::Index>(np));
      const auto& probs = trace[l].probs;
      for (std::size_t row = 0; row < heads * seq; ++row)
        for (std::size_t j = 0; j < np; ++j)
          sp(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(j)) = probs[row * nk + seq + j];
      auto cs = detail::MatMap(stats.cov_s[l].data().data(), static_cast<Eigen::Index>(np), static_cast<Eigen::Index>(np));
      cs.noalias() += sp.transpose() * sp;
    }
  }
  stats.sample_count += n;
}

void accumulate_stats(LayerFeatureStats& stats, const Backbone& bb, const PromptSet& prompts,
                      std::span<const Tensor> batches) {
  for (const auto& x : batches) accumulate_stats(stats, bb, prompts, x);
}

NullSpaceBasis recompute_bases(const LayerFeatureStats& stats, double rel_threshold, std::size_t fallback_rank) {
  require(!stats.empty(), ErrorKind::State, "null-space statistics are empty");
  NullSpaceBasis basis;
  for (std::size_t l = 0; l < stats.cov_q.size(); ++l) {
    OrthonormalBasis u1 = svd_null_basis(stats.cov_q[l], rel_threshold);
    OrthonormalBasis u2 = svd_null_basis(stats.cov_s[l], rel_threshold);
    if (fallback_rank > 0 && u1.rank() == 0) u1 = smallest_directions(stats.cov_q[l], fallback_rank);
    if (fallback_rank > 0 && u2.rank() == 0) u2 = smallest_directions(stats.cov_s[l], fallback_rank);
    basis.u1.push_back(std::move(u1));
    basis.u2.push_back(std::move(u2));
  }
  return basis;
}

Tensor project_prompt_gradient(const Tensor& grad, const OrthonormalBasis& u1, const OrthonormalBasis& u2) {
  require(grad.rows() == u2.ambient_dim() && grad.cols() == u1.ambient_dim(), ErrorKind::Dimension,
          "prompt gradient does not match the null-space bases");
  if (u1.rank() == 0 || u2.rank() == 0) return Tensor({grad.rows(), grad.cols()}, 0.0);
  const auto a = view(u1.vectors());
  const auto b = view(u2.vectors());
  const RowMatrix core = b.transpose() * view(grad) * a;
  return detail::from_eigen(RowMatrix(b * core * a.transpose()));
}

void apply_projected_step(PromptSet& prompts, const std::vector<Tensor>& grads, const NullSpaceBasis& basis,
                          double lr) {
  require(grads.size() == prompts.prompts.size() && basis.u1.size() == grads.size(), ErrorKind::Dimension,
          "one gradient and basis per prompt required");
  for (std::size_t l = 0; l < grads.size(); ++l) {
    Tensor step = project_prompt_gradient(grads[l], basis.u1[l], basis.u2[l]);
    auto p = prompts.prompts[l].data();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * step[i];
  }
}

}  // namespace ckaa
