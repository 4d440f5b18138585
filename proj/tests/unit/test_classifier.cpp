#include "ckaa/classifier.hpp"
#include "ckaa/error.hpp"
#include "ckaa/ops.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace ckaa;
using ckaa::testing::grad_rel_error;
using ckaa::testing::random_tensor;

TEST_CASE("classify examples") {
  LinearHead zero{Tensor({3, 2}, 0.0), Tensor({3}, 0.0)};
  Tensor z = classify(zero, Tensor::matrix({{1.0, -2.0}}));
  for (double v : z.data()) CHECK(v == 0.0);

  LinearHead id{Tensor::identity(2), Tensor({2}, 0.0)};
  Tensor l = classify(id, Tensor::matrix({{3.0, -1.0}}));
  CHECK(l[0] == 3.0);
  CHECK(l[1] == -1.0);
  CHECK_THROWS_AS(classify(id, Tensor::matrix({{1.0, 2.0, 3.0}})), Error);
}

TEST_CASE("classify gradient") {
  Rng rng(1);
  LinearHead h{random_tensor({5, 4}, rng), random_tensor({5}, rng)};
  Tensor f = random_tensor({3, 4}, rng);
  const int labels[] = {0, 4, 2};
  auto loss = [&] { return cross_entropy(classify(h, f), labels); };
  CHECK(grad_rel_error(loss, {h.weight, h.bias}) <= 1e-6);
  CHECK(grad_rel_error(loss, {f}) <= 1e-6);
}

TEST_CASE("grow_head keeps old rows") {
  Rng rng(2);
  LinearHead h = LinearHead::init(10, 6, rng);
  for (auto& v : h.bias.data()) v = rng.normal();
  CHECK_THROWS_AS(grow_head(h, 0, rng), Error);

  LinearHead g = grow_head(h, 10, rng);
  REQUIRE(g.classes() == 20);
  Tensor f = random_tensor({1, 6}, rng);
  Tensor before = classify(h, f), after = classify(g, f);
  for (std::size_t k = 0; k < 10; ++k) CHECK(after[k] == before[k]);
  for (std::size_t k = 10; k < 20; ++k) CHECK(g.bias[k] == 0.0);

  LinearHead twice = grow_head(grow_head(h, 3, rng), 4, rng);
  LinearHead once = grow_head(h, 7, rng);
  CHECK(twice.weight.shape() == once.weight.shape());
  CHECK(twice.bias.shape() == once.bias.shape());
}

TEST_CASE("aggregate_global_head examples") {
  // One class introduced in the last session: the mean has a single term.
  LinearHead h1{Tensor::matrix({{1.0, 2.0}}), Tensor::vector({0.5})};
  const int single[] = {0};
  LinearHead u = aggregate_global_head(std::span<const LinearHead>(&h1, 1), single);
  CHECK(u.weight(0, 0) == 1.0);
  CHECK(u.weight(0, 1) == 2.0);
  CHECK(u.bias[0] == 0.5);

  // Class k sits in session 2 (index 1) and is carried by heads of sessions 2 and 3.
  std::vector<LinearHead> heads{
      {Tensor::matrix({{9.0, 9.0}}), Tensor::vector({9.0})},
      {Tensor::matrix({{7.0, 7.0}, {1.0, 0.0}}), Tensor::vector({0.0, 1.0})},
      {Tensor::matrix({{5.0, 5.0}, {0.0, 2.0}, {3.0, 3.0}}), Tensor::vector({0.0, 3.0, 0.0})},
  };
  const int task_of_class[] = {0, 1, 2};
  LinearHead g = aggregate_global_head(heads, task_of_class);
  CHECK(g.weight(1, 0) == 0.5);
  CHECK(g.weight(1, 1) == 1.0);
  CHECK(g.bias[1] == 2.0);
  CHECK(g.weight(0, 0) == 7.0);

  const int bad[] = {0, 1, 2, 1};
  try {
    aggregate_global_head(heads, bad);
    FAIL("expected an aggregation error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Aggregation);
  }
}

TEST_CASE("aggregate_global_head matches a brute-force average") {
  Rng rng(3);
  const std::size_t d = 5;
  const std::vector<std::size_t> per_session{3, 2, 4};
  std::vector<int> task_of_class;
  std::vector<LinearHead> heads;
  for (std::size_t t = 0; t < per_session.size(); ++t) {
    for (std::size_t i = 0; i < per_session[t]; ++i) task_of_class.push_back(static_cast<int>(t));
    heads.push_back({random_tensor({task_of_class.size(), d}, rng), random_tensor({task_of_class.size()}, rng)});
  }
  LinearHead g = aggregate_global_head(heads, task_of_class);
  for (std::size_t k = 0; k < task_of_class.size(); ++k) {
    std::vector<double> w(d, 0.0);
    double b = 0.0, n = 0.0;
    for (std::size_t t = static_cast<std::size_t>(task_of_class[k]); t < heads.size(); ++t) {
      for (std::size_t j = 0; j < d; ++j) w[j] += heads[t].weight(k, j);
      b += heads[t].bias[k];
      n += 1.0;
    }
    for (std::size_t j = 0; j < d; ++j) CHECK(g.weight(k, j) == w[j] / n);
    CHECK(g.bias[k] == b / n);
  }
}
