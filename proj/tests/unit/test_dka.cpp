#include <algorithm>
#include <cmath>
#include <numeric>

#include "ckaa/dka.hpp"
#include "ckaa/error.hpp"
#include "ckaa/linalg.hpp"
#include "ckaa/ops.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace ckaa;
using ckaa::testing::grad_rel_error;
using ckaa::testing::random_tensor;

namespace {

double cosine(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) {
    dot += a(i, c) * b(j, c);
    na += a(i, c) * a(i, c);
    nb += b(j, c) * b(j, c);
  }
  return dot / std::sqrt(na * nb);
}

double csfa_oracle(const LabeledFeatureBatch& cur, const LabeledFeatureBatch& prev, double tau) {
  double total = 0.0;
  int used = 0;
  for (std::size_t i = 0; i < cur.labels.size(); ++i) {
    double pos = 0.0, neg = 0.0;
    bool any = false;
    for (std::size_t k = 0; k < prev.labels.size(); ++k)
      if (prev.labels[k] == cur.labels[i]) {
        pos += std::exp(cosine(cur.feats, i, prev.feats, k) / tau);
        any = true;
      }
    if (!any) continue;
    for (std::size_t j = 0; j < cur.labels.size(); ++j)
      if (cur.labels[j] != cur.labels[i]) neg += std::exp(cosine(cur.feats, i, cur.feats, j) / tau);
    total += -std::log(pos / (pos + neg));
    ++used;
  }
  return total / used;
}

}  // namespace

TEST_CASE("ce_loss examples") {
  const int labels[] = {1, 0};
  Tensor sharp = Tensor::matrix({{-200.0, 200.0, -200.0}, {300.0, 0.0, 0.0}});
  CHECK(ce_loss(sharp, labels).item() < 1e-12);

  Tensor uniform({2, 5}, 0.7);
  CHECK(ce_loss(uniform, labels).item() == doctest::Approx(std::log(5.0)).epsilon(1e-14));

  Rng rng(1);
  Tensor logits = random_tensor({4, 5}, rng, 2.0);
  const int y[] = {0, 3, 4, 1};
  double ref = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    double z = 0.0;
    for (std::size_t k = 0; k < 5; ++k) z += std::exp(logits(i, k));
    ref += -(logits(i, static_cast<std::size_t>(y[i])) - std::log(z));
  }
  CHECK(std::abs(ce_loss(logits, y).item() - ref / 4.0) <= 1e-10);

  Tensor shifted = logits.clone();
  for (auto& v : shifted.data()) v += 37.5;
  CHECK(std::abs(ce_loss(shifted, y).item() - ce_loss(logits, y).item()) <= 1e-9);

  const int out_of_range[] = {0, 5, 1, 1};
  CHECK_THROWS_AS(ce_loss(logits, out_of_range), Error);
}

TEST_CASE("fit_gaussians closed forms") {
  Tensor same = Tensor::matrix({{1.0, 2.0}, {1.0, 2.0}, {1.0, 2.0}});
  const int y3[] = {4, 4, 4};
  auto g = fit_gaussians(same, y3, 2);
  REQUIRE(g.size() == 1);
  CHECK(g[0].class_id == 4);
  CHECK(g[0].task_id == 2);
  CHECK(g[0].count == 3);
  for (double v : g[0].cov.data()) CHECK(v == 0.0);

  Tensor pq = Tensor::matrix({{1.0, 3.0}, {3.0, -1.0}});
  const int y2[] = {0, 0};
  auto h = fit_gaussians(pq, y2, 0);
  CHECK(h[0].mean[0] == 2.0);
  CHECK(h[0].mean[1] == 1.0);
  // outer(p - q) / 2 with p - q = (-2, 4)
  CHECK(h[0].cov(0, 0) == 2.0);
  CHECK(h[0].cov(0, 1) == -4.0);
  CHECK(h[0].cov(1, 0) == -4.0);
  CHECK(h[0].cov(1, 1) == 8.0);

  const int lonely[] = {0, 1};
  try {
    fit_gaussians(pq, lonely, 0);
    FAIL("expected a modeling error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Modeling);
  }
}

TEST_CASE("fit_gaussians recovers a known Gaussian and the sampler closes the loop") {
  Tensor mean = Tensor::vector({1.0, -2.0, 0.5});
  Tensor cov = Tensor::matrix({{1.0, 0.3, 0.0}, {0.3, 0.5, 0.1}, {0.0, 0.1, 0.8}});
  Rng rng(2);
  Tensor draws = cholesky_sample(mean, cov, 1000, rng);
  std::vector<int> labels(1000, 7);
  auto g = fit_gaussians(draws, labels, 0);
  double mean_err = 0.0, cov_err = 0.0;
  for (std::size_t j = 0; j < 3; ++j) mean_err = std::max(mean_err, std::abs(g[0].mean[j] - mean[j]));
  for (std::size_t i = 0; i < 9; ++i) cov_err += (g[0].cov[i] - cov[i]) * (g[0].cov[i] - cov[i]);
  CHECK(mean_err <= 0.1);
  CHECK(std::sqrt(cov_err) <= 0.2);

  GaussianSampler sampler(g);
  Rng srng(3);
  LabeledFeatureBatch big = sampler.sample(40000, srng);
  CHECK(big.origin == FeatureOrigin::SampledShared);
  for (int y : big.labels) REQUIRE(y == 7);
  auto refit = fit_gaussians(big.feats, big.labels, 0);
  for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(refit[0].mean[j] - g[0].mean[j]) <= 0.03);
  for (std::size_t i = 0; i < 9; ++i) CHECK(std::abs(refit[0].cov[i] - g[0].cov[i]) <= 0.05);
}

TEST_CASE("sampler draws labels uniformly over class models") {
  Rng rng(4);
  Tensor feats = random_tensor({6, 2}, rng);
  const int labels[] = {0, 0, 1, 1, 2, 2};
  auto models = fit_gaussians(feats, labels, 0);
  GaussianSampler sampler(models);
  Rng srng(5);
  auto batch = sampler.sample(3000, srng);
  std::vector<int> count(3, 0);
  for (int y : batch.labels) ++count[static_cast<std::size_t>(y)];
  for (int c : count) CHECK(std::abs(c - 1000) < 120);
  CHECK_THROWS_AS(GaussianSampler({}).sample(1, srng), Error);
}

TEST_CASE("csfa_loss analytic examples") {
  LabeledFeatureBatch cur{Tensor::matrix({{1.0, 0.0}}), {0}, FeatureOrigin::CurrentSpecific};
  LabeledFeatureBatch same{Tensor::matrix({{2.0, 0.0}}), {0}, FeatureOrigin::CachedPrevious};
  CHECK(std::abs(csfa_loss(cur, same, 0.05).item()) <= 1e-15);

  LabeledFeatureBatch two{Tensor::matrix({{1.0, 0.0}, {1.0, 0.0}}), {0, 1}, FeatureOrigin::CurrentSpecific};
  LabeledFeatureBatch ortho{Tensor::matrix({{0.0, 1.0}}), {0}, FeatureOrigin::CachedPrevious};
  CHECK(csfa_loss(two, ortho, 1.0).item() == doctest::Approx(std::log(1.0 + std::exp(1.0))).epsilon(1e-14));
}

TEST_CASE("csfa_loss matches a scalar recomputation including skipped anchors") {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    LabeledFeatureBatch cur{random_tensor({4, 6}, rng), {0, 1, 1, 2}, FeatureOrigin::CurrentSpecific};
    // Label 2 has no cached positive, so the last anchor is skipped.
    LabeledFeatureBatch prev{random_tensor({4, 6}, rng), {1, 0, 1, 3}, FeatureOrigin::CachedPrevious};
    CHECK(std::abs(csfa_loss(cur, prev, 0.05).item() - csfa_oracle(cur, prev, 0.05)) <= 1e-9);
    CHECK(std::abs(csfa_loss(cur, prev, 0.7).item() - csfa_oracle(cur, prev, 0.7)) <= 1e-9);

    // Cosine similarity ignores the length of any one feature.
    LabeledFeatureBatch scaled{cur.feats.clone(), cur.labels, cur.origin};
    for (std::size_t j = 0; j < 6; ++j) scaled.feats(2, j) *= 13.0;
    CHECK(std::abs(csfa_loss(scaled, prev, 0.05).item() - csfa_loss(cur, prev, 0.05).item()) <= 1e-9);
  }

  LabeledFeatureBatch cur{Tensor::matrix({{1.0, 0.0}}), {0}, FeatureOrigin::CurrentSpecific};
  LabeledFeatureBatch none{Tensor::matrix({{0.0, 1.0}}), {5}, FeatureOrigin::CachedPrevious};
  try {
    csfa_loss(cur, none, 0.05);
    FAIL("expected a degenerate batch error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::DegenerateBatch);
  }
  LabeledFeatureBatch zero{Tensor::matrix({{0.0, 0.0}}), {0}, FeatureOrigin::CurrentSpecific};
  LabeledFeatureBatch pos{Tensor::matrix({{0.0, 1.0}}), {0}, FeatureOrigin::CachedPrevious};
  CHECK_THROWS_AS(csfa_loss(zero, pos, 0.05), Error);
}

TEST_CASE("csfa_loss gradient") {
  Rng rng(7);
  LabeledFeatureBatch cur{random_tensor({4, 5}, rng), {0, 1, 1, 2}, FeatureOrigin::CurrentSpecific};
  LabeledFeatureBatch prev{random_tensor({5, 5}, rng), {1, 0, 1, 2, 2}, FeatureOrigin::CachedPrevious};
  CHECK(grad_rel_error([&] { return csfa_loss(cur, prev, 0.5); }, {cur.feats}) <= 1e-6);
  // Cached features are constants.
  prev.feats.set_requires_grad(true);
  csfa_loss(cur, prev, 0.5).backward();
  CHECK(prev.feats.grad().empty());
}

TEST_CASE("affinity_matrix examples") {
  Rng rng(8);
  Tensor s = random_tensor({3, 4}, rng), c = random_tensor({5, 4}, rng);
  Tensor g = affinity_matrix(s, c, 0.2, 20);
  for (double v : g.data()) CHECK(v > 0.0);

  Tensor cur = Tensor::matrix({{1.0, 0.0}, {0.0, 1.0}, {-1.0, 0.0}});
  Tensor one = affinity_matrix(Tensor::matrix({{0.0, 3.0}}), cur, 0.2, 1);
  CHECK(one(0, 0) == 0.0);
  CHECK(one(0, 1) == doctest::Approx(std::exp(1.0 / 0.2)).epsilon(1e-15));
  CHECK(one(0, 2) == 0.0);

  // Equal similarities keep the lower index.
  Tensor tie = affinity_matrix(Tensor::matrix({{1.0, 1.0}}), cur, 0.2, 1);
  CHECK(tie(0, 0) > 0.0);
  CHECK(tie(0, 1) == 0.0);

  CHECK_THROWS_AS(affinity_matrix(Tensor::matrix({{0.0, 0.0}}), cur, 0.2, 1), Error);
}

TEST_CASE("affinity_matrix matches a brute-force nearest-neighbour search") {
  Rng rng(9);
  for (std::size_t k : {1, 3, 5, 8}) {
    Tensor s = random_tensor({6, 4}, rng), c = random_tensor({5, 4}, rng);
    Tensor g = affinity_matrix(s, c, 0.2, k);
    for (std::size_t i = 0; i < 6; ++i) {
      std::vector<std::pair<double, std::size_t>> sims;
      for (std::size_t j = 0; j < 5; ++j) sims.push_back({cosine(s, i, c, j), j});
      std::sort(sims.begin(), sims.end(), [](auto a, auto b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
      std::vector<double> expect(5, 0.0);
      for (std::size_t r = 0; r < std::min<std::size_t>(k, 5); ++r) expect[sims[r].second] = std::exp(sims[r].first / 0.2);
      std::size_t nnz = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        CHECK((g(i, j) == 0.0) == (expect[j] == 0.0));
        CHECK(std::abs(g(i, j) - expect[j]) <= 1e-12 * std::max(1.0, expect[j]));
        nnz += g(i, j) != 0.0;
      }
      CHECK(nnz == std::min<std::size_t>(k, 5));
    }
  }
}

TEST_CASE("simulate_features examples") {
  Rng rng(10);
  Tensor s = random_tensor({4, 3}, rng), f = random_tensor({5, 3}, rng);
  Tensor z = f.clone();
  const double delta[] = {0.5, -1.0, 2.0};
  for (std::size_t j = 0; j < 5; ++j)
    for (std::size_t c = 0; c < 3; ++c) z(j, c) += delta[c];
  Tensor g = affinity_matrix(s, f, 0.2, 2);
  Tensor out = simulate_features(s, f, z, g);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) CHECK(out(i, c) == doctest::Approx(s(i, c) + delta[c]).epsilon(1e-13));

  Tensor z2 = random_tensor({5, 3}, rng);
  Tensor single({4, 5}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) single(i, (i + 1) % 5) = 3.0;
  Tensor one = simulate_features(s, f, z2, single);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t j = (i + 1) % 5;
      CHECK(one(i, c) == doctest::Approx(s(i, c) + (z2(j, c) - f(j, c))).epsilon(1e-14));
    }

  // A zero row falls back to the batch-mean shift.
  Tensor empty({4, 5}, 0.0);
  Tensor fb = simulate_features(s, f, z2, empty);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0;
    for (std::size_t j = 0; j < 5; ++j) m += (z2(j, c) - f(j, c)) / 5.0;
    CHECK(fb(0, c) == doctest::Approx(s(0, c) + m).epsilon(1e-13));
  }
}

TEST_CASE("simulate_features matches a double loop and stays in the convex hull") {
  Rng rng(11);
  Tensor s = random_tensor({6, 4}, rng), f = random_tensor({5, 4}, rng), z = random_tensor({5, 4}, rng);
  Tensor g = affinity_matrix(s, f, 0.2, 3);
  Tensor out = simulate_features(s, f, z, g);
  for (std::size_t i = 0; i < 6; ++i) {
    double w = 0.0;
    for (std::size_t j = 0; j < 5; ++j) w += g(i, j);
    for (std::size_t c = 0; c < 4; ++c) {
      double acc = 0.0, lo = INFINITY, hi = -INFINITY;
      for (std::size_t j = 0; j < 5; ++j) {
        acc += g(i, j) * (z(j, c) - f(j, c));
        if (g(i, j) > 0.0) {
          lo = std::min(lo, z(j, c) - f(j, c));
          hi = std::max(hi, z(j, c) - f(j, c));
        }
      }
      CHECK(std::abs(out(i, c) - (s(i, c) + acc / w)) <= 1e-12);
      const double d = out(i, c) - s(i, c);
      CHECK(d >= lo - 1e-12);
      CHECK(d <= hi + 1e-12);
    }
  }
}

TEST_CASE("simulate_features gradient with fixed affinities") {
  Rng rng(13);
  Tensor s = random_tensor({4, 3}, rng), f = random_tensor({5, 3}, rng), z = random_tensor({5, 3}, rng);
  Tensor g = affinity_matrix(s, f, 0.2, 2);
  for (std::size_t j = 0; j < 5; ++j) g(3, j) = 0.0;  // one fallback row
  Tensor w = random_tensor({4, 3}, rng);
  auto loss = [&] { return sum(mul(simulate_features(s, f, z, g), w)); };
  CHECK(grad_rel_error(loss, {s, f, z}) <= 1e-6);
}

TEST_CASE("ca_loss examples") {
  LinearHead h{Tensor::matrix({{100.0, 0.0}, {0.0, 100.0}}), Tensor({2}, 0.0)};
  LabeledFeatureBatch one{Tensor::matrix({{1.0, 0.0}}), {0}, FeatureOrigin::CurrentSpecific};
  CHECK(ca_loss(std::vector<LabeledFeatureBatch>{one}, h).item() < 1e-12);

  Rng rng(12);
  LinearHead r{random_tensor({3, 4}, rng), random_tensor({3}, rng)};
  LabeledFeatureBatch a{random_tensor({5, 4}, rng), {0, 1, 2, 2, 1}, FeatureOrigin::SampledShared};
  LabeledFeatureBatch b{random_tensor({2, 4}, rng), {1, 0}, FeatureOrigin::CurrentShared};
  const double single = ca_loss(std::vector<LabeledFeatureBatch>{a}, r).item();
  CHECK(ca_loss(std::vector<LabeledFeatureBatch>{a, a}, r).item() == doctest::Approx(single).epsilon(1e-14));

  const double got = ca_loss(std::vector<LabeledFeatureBatch>{a, b}, r).item();
  double ref = 0.0;
  for (const auto* part : {&a, &b})
    for (std::size_t i = 0; i < part->labels.size(); ++i) {
      double lz = 0.0;
      std::vector<double> l(3);
      for (std::size_t k = 0; k < 3; ++k) {
        l[k] = r.bias[k];
        for (std::size_t j = 0; j < 4; ++j) l[k] += r.weight(k, j) * part->feats(i, j);
        lz += std::exp(l[k]);
      }
      ref += std::log(lz) - l[static_cast<std::size_t>(part->labels[i])];
    }
  CHECK(std::abs(got - ref / 7.0) <= 1e-10);

  LabeledFeatureBatch unseen{random_tensor({1, 4}, rng), {3}, FeatureOrigin::SampledSpecific};
  CHECK_THROWS_AS(ca_loss(std::vector<LabeledFeatureBatch>{unseen}, r), Error);
}

TEST_CASE("total_loss examples") {
  Tensor ce = Tensor::scalar(1.0);
  CHECK(total_loss(ce, Tensor::scalar(0.5), Tensor::scalar(0.25), 2).item() == 1.75);
  CHECK(total_loss(ce, Tensor::scalar(0.5), Tensor::scalar(0.25), 1).item() == 1.0);
  CHECK(total_loss(Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(0.0), 3).item() == 0.0);
  CHECK(total_loss(ce, std::nullopt, Tensor::scalar(0.25), 2).item() == 1.25);
}
