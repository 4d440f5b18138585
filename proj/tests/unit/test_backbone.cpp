#include <cmath>

#include "ckaa/backbone.hpp"
#include "ckaa/error.hpp"
#include "ckaa/ops.hpp"
#include "doctest.h"
#include "gradcheck.hpp"
#include "reference_forward.hpp"

using namespace ckaa;
using ckaa::testing::grad_rel_error;
using ckaa::testing::random_tensor;
using ckaa::testing::reference_forward;
using ckaa::testing::RefBranch;

namespace {

BackboneConfig small_config(std::size_t blocks = 2) {
  BackboneConfig c;
  c.blocks = blocks;
  c.dim = 8;
  c.heads = 2;
  c.mlp_dim = 16;
  c.image_h = 8;
  c.image_w = 8;
  c.patch = 4;
  c.prompt_len = 3;
  c.adapter_dim = 4;
  return c;
}

// A stack with non-zero W_up, so the branch actually contributes.
AdapterStack random_stack(const BackboneConfig& c, Rng& rng, double up_scale = 0.3) {
  AdapterStack s = init_adapter_stack(c, rng);
  for (auto& a : s) {
    for (auto& v : a.w_down.data()) v = 0.5 * rng.normal();
    for (auto& v : a.w_up.data()) v = up_scale * rng.normal();
  }
  return s;
}

// Random affine parameters everywhere, so no layernorm hides the gradient.
void randomize_norms(Backbone& bb, Rng& rng) {
  auto jitter = [&](Tensor& t, double base) {
    for (auto& v : t.data()) v = base + 0.5 * rng.normal();
  };
  jitter(bb.norm_gamma, 1.0);
  jitter(bb.norm_beta, 0.0);
  for (auto& b : bb.blocks) {
    jitter(b.ln1_gamma, 1.0);
    jitter(b.ln1_beta, 0.0);
    jitter(b.ln2_gamma, 1.0);
    jitter(b.ln2_beta, 0.0);
  }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.numel() == b.numel());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("config validation") {
  BackboneConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  CHECK(c.n_tokens() == 4);
  CHECK(c.seq_len() == 5);
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  c = small_config();
  c.input_mode = InputMode::Feature;
  c.feature_dim = 20;
  CHECK_THROWS_AS(c.validate(), Error);
  c.feature_dim = 24;
  CHECK_NOTHROW(c.validate());
  CHECK(c.n_tokens() == 3);
}

TEST_CASE("tokenize cuts row-major patches") {
  BackboneConfig c = small_config();
  Tensor x({1, 64});
  for (std::size_t i = 0; i < 64; ++i) x[i] = static_cast<double>(i);
  Tensor t = tokenize(c, x);
  REQUIRE(t.rows() == 4);
  REQUIRE(t.cols() == 16);
  // Second patch covers columns 4..7 of rows 0..3.
  CHECK(t(1, 0) == 4.0);
  CHECK(t(1, 5) == 13.0);
  // Third patch starts at row 4, column 0.
  CHECK(t(2, 0) == 32.0);
  CHECK_THROWS_AS(tokenize(c, Tensor({1, 63})), Error);
}

TEST_CASE("forward_shared matches the scalar reference and differs from the promptless forward") {
  BackboneConfig c = small_config();
  Rng rng(3);
  Backbone bb = Backbone::init(c, rng);
  Tensor x = random_tensor({1, c.input_dim()}, rng);
  PromptSet zero = PromptSet::zeros(c);
  Tensor with = forward_shared(bb, x, &zero);
  Tensor without = forward_shared(bb, x, nullptr);
  CHECK(max_abs_diff(with, without) > 1e-6);

  auto ref_with = reference_forward(bb, std::vector<double>(x.data().begin(), x.data().end()), &zero, {});
  auto ref_without = reference_forward(bb, std::vector<double>(x.data().begin(), x.data().end()), nullptr, {});
  for (std::size_t j = 0; j < c.dim; ++j) {
    CHECK(with[j] == doctest::Approx(ref_with[j]).epsilon(1e-12));
    CHECK(without[j] == doctest::Approx(ref_without[j]).epsilon(1e-12));
  }
}

TEST_CASE("forward_shared is pure and batch rows are independent") {
  BackboneConfig c = small_config();
  Rng rng(4);
  Backbone bb = Backbone::init(c, rng);
  PromptSet p = PromptSet::init(c, rng);
  Tensor x = random_tensor({1, c.input_dim()}, rng);
  CHECK(bitwise_equal(forward_shared(bb, x, &p), forward_shared(bb, x, &p)));

  Tensor two = concat_rows({x, x});
  Tensor f2 = forward_shared(bb, two, &p);
  REQUIRE(f2.rows() == 2);
  CHECK(max_abs_diff(Tensor({c.dim}, f2.row(0)), Tensor({c.dim}, f2.row(1))) == 0.0);
}

TEST_CASE("gradient of squared feature norm with respect to the first prompt") {
  BackboneConfig c = small_config();
  Rng rng(5);
  Backbone bb = Backbone::init(c, rng);
  randomize_norms(bb, rng);
  PromptSet p = PromptSet::init(c, rng);
  for (auto& v : p.prompts[0].data()) v = 0.5 * rng.normal();
  Tensor x = random_tensor({2, c.input_dim()}, rng);
  CHECK(grad_rel_error([&] { return square_norm(forward_shared(bb, x, &p)); }, {p.prompts[0]}) <= 1e-4);
}

TEST_CASE("gradient with respect to adapter weights") {
  BackboneConfig c = small_config();
  Rng rng(6);
  Backbone bb = Backbone::init(c, rng);
  randomize_norms(bb, rng);
  PromptSet p = PromptSet::init(c, rng);
  AdapterStack s = random_stack(c, rng);
  Tensor x = random_tensor({2, c.input_dim()}, rng);
  auto loss = [&] { return square_norm(forward_specific(bb, x, &p, s)); };
  CHECK(grad_rel_error(loss, {s[0].w_down, s[1].w_down}) <= 1e-4);
  CHECK(grad_rel_error(loss, {s[0].w_up}) <= 1e-4);
}

TEST_CASE("gradient with respect to every backbone parameter") {
  BackboneConfig c = small_config(1);
  Rng rng(7);
  Backbone bb = Backbone::init(c, rng);
  randomize_norms(bb, rng);
  PromptSet p = PromptSet::init(c, rng);
  AdapterStack s = random_stack(c, rng);
  Tensor x = random_tensor({2, c.input_dim()}, rng);
  auto loss = [&] { return square_norm(forward_specific(bb, x, &p, s)); };
  for (auto& [name, t] : bb.named_parameters()) {
    INFO(name);
    if (name == "block0.bk") continue;
    CHECK(grad_rel_error(loss, {t}) <= 1e-4);
  }
  // The key bias shifts every score of a query equally, so softmax ignores it.
  Tensor bk = bb.blocks[0].bk;
  bk.set_requires_grad(true);
  loss().backward();
  for (double g : bk.grad()) CHECK(std::abs(g) <= 1e-12);
}

TEST_CASE("adapter_apply examples") {
  BackboneConfig c = small_config();
  Rng rng(8);
  Adapter a = Adapter::init(c, rng);
  Tensor x = random_tensor({3, c.dim}, rng);
  Tensor zero = adapter_apply(x, a);
  for (double v : zero.data()) CHECK(v == 0.0);

  // Identity-padded weights pass non-negative inputs through on the first d_hat dims.
  Adapter id{Tensor({c.dim, c.adapter_dim}, 0.0), Tensor({c.adapter_dim, c.dim}, 0.0)};
  for (std::size_t i = 0; i < c.adapter_dim; ++i) {
    id.w_down(i, i) = 1.0;
    id.w_up(i, i) = 1.0;
  }
  Tensor pos = random_tensor({3, c.dim}, rng);
  for (auto& v : pos.data()) v = std::abs(v);
  Tensor y = adapter_apply(pos, id);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < c.dim; ++j) CHECK(y(r, j) == (j < c.adapter_dim ? pos(r, j) : 0.0));

  Adapter rnd{random_tensor({4, 3}, rng), random_tensor({3, 4}, rng)};
  Tensor xin = random_tensor({3, 4}, rng);
  Tensor out = adapter_apply(xin, rnd);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0.0;
      for (std::size_t m = 0; m < 3; ++m) {
        double mid = 0.0;
        for (std::size_t k = 0; k < 4; ++k) mid += xin(r, k) * rnd.w_down(k, m);
        s += std::max(mid, 0.0) * rnd.w_up(m, j);
      }
      CHECK(out(r, j) == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("fresh adapters leave the shared forward bitwise unchanged") {
  BackboneConfig c = small_config();
  Rng rng(9);
  Backbone bb = Backbone::init(c, rng);
  PromptSet p = PromptSet::init(c, rng);
  AdapterStack fresh = init_adapter_stack(c, rng);
  Tensor x = random_tensor({3, c.input_dim()}, rng);
  CHECK(bitwise_equal(forward_specific(bb, x, &p, fresh), forward_shared(bb, x, &p)));
}

TEST_CASE("one-hot routing equals the task-specific forward") {
  BackboneConfig c = small_config();
  Rng rng(10);
  Backbone bb = Backbone::init(c, rng);
  PromptSet p = PromptSet::init(c, rng);
  AdapterBank bank;
  for (int t = 0; t < 3; ++t) bank.push_back(random_stack(c, rng));
  Tensor x = random_tensor({4, c.input_dim()}, rng);
  for (std::size_t t = 0; t < 3; ++t) {
    Tensor alphas({4, 3}, 0.0);
    for (std::size_t b = 0; b < 4; ++b) alphas(b, t) = 1.0;
    CHECK(max_abs_diff(forward_moa(bb, x, &p, bank, alphas), forward_specific(bb, x, &p, bank[t])) <= 1e-12);
  }
  // Mixed one-hot rows in one batch.
  Tensor alphas({4, 3}, 0.0);
  for (std::size_t b = 0; b < 4; ++b) alphas(b, b % 3) = 1.0;
  Tensor z = forward_moa(bb, x, &p, bank, alphas);
  for (std::size_t b = 0; b < 4; ++b) {
    const std::size_t sel[] = {b};
    Tensor zb = forward_specific(bb, gather_rows(x, sel), &p, bank[b % 3]);
    CHECK(max_abs_diff(Tensor({c.dim}, z.row(b)), zb) <= 1e-12);
  }
}

TEST_CASE("identical stacks under an even split equal either stack") {
  BackboneConfig c = small_config();
  Rng rng(11);
  Backbone bb = Backbone::init(c, rng);
  PromptSet p = PromptSet::init(c, rng);
  AdapterStack s = random_stack(c, rng);
  AdapterBank bank;
  bank.push_back(s);
  bank.push_back(s);
  Tensor x = random_tensor({2, c.input_dim()}, rng);
  Tensor alphas = Tensor::matrix({{0.5, 0.5}, {0.5, 0.5}});
  CHECK(max_abs_diff(forward_moa(bb, x, &p, bank, alphas), forward_specific(bb, x, &p, s)) <= 1e-10);
}

TEST_CASE("three-stack routing matches a loop-summed reference") {
  BackboneConfig c = small_config();
  Rng rng(12);
  Backbone bb = Backbone::init(c, rng);
  PromptSet p = PromptSet::init(c, rng);
  AdapterBank bank;
  for (int t = 0; t < 3; ++t) bank.push_back(random_stack(c, rng));
  Tensor x = random_tensor({1, c.input_dim()}, rng);
  Tensor z = forward_moa(bb, x, &p, bank, Tensor::matrix({{0.2, 0.3, 0.5}}));
  auto ref = reference_forward(bb, std::vector<double>(x.data().begin(), x.data().end()), &p,
                               {RefBranch{&bank[0], 0.2}, RefBranch{&bank[1], 0.3}, RefBranch{&bank[2], 0.5}});
  for (std::size_t j = 0; j < c.dim; ++j) CHECK(std::abs(z[j] - ref[j]) <= 1e-12);
}

TEST_CASE("routing weights are validated") {
  BackboneConfig c = small_config();
  Rng rng(13);
  Backbone bb = Backbone::init(c, rng);
  AdapterBank bank;
  bank.push_back(random_stack(c, rng));
  bank.push_back(random_stack(c, rng));
  Tensor x = random_tensor({1, c.input_dim()}, rng);
  auto kind_of = [&](const Tensor& alphas) {
    try {
      forward_moa(bb, x, nullptr, bank, alphas);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::Io;
  };
  CHECK(kind_of(Tensor::matrix({{0.6, 0.6}})) == ErrorKind::Routing);
  CHECK(kind_of(Tensor::matrix({{1.2, -0.2}})) == ErrorKind::Routing);
  CHECK(kind_of(Tensor::matrix({{1.0, 0.0, 0.0}})) == ErrorKind::Routing);
  CHECK_NOTHROW(forward_moa(bb, x, nullptr, bank, Tensor::matrix({{0.3, 0.7}})));
}

TEST_CASE("adapter contribution is linear in the routing weights") {
  // Stacks sharing W_down: sum_t a_t ReLU(X W_down) W_up^t = ReLU(X W_down) (sum_t a_t W_up^t).
  BackboneConfig c = small_config(1);
  Rng rng(14);
  Backbone bb = Backbone::init(c, rng);
  PromptSet p = PromptSet::init(c, rng);
  AdapterStack s0 = random_stack(c, rng), s1 = random_stack(c, rng);
  s1[0].w_down = s0[0].w_down.clone();
  AdapterBank bank;
  bank.push_back(s0);
  bank.push_back(s1);
  Tensor x = random_tensor({1, c.input_dim()}, rng);
  for (double a : {0.0, 0.25, 0.6, 1.0}) {
    AdapterStack mixed{Adapter{s0[0].w_down, add(scale(s0[0].w_up, a), scale(s1[0].w_up, 1.0 - a))}};
    Tensor alphas = Tensor::matrix({{a, 1.0 - a}});
    CHECK(max_abs_diff(forward_moa(bb, x, &p, bank, alphas), forward_specific(bb, x, &p, mixed)) <= 1e-12);
  }
}

TEST_CASE("frozen stacks replay bitwise after later sessions") {
  BackboneConfig c = small_config();
  Rng rng(15);
  Backbone bb = Backbone::init(c, rng);
  PromptSet p = PromptSet::init(c, rng);
  AdapterBank bank;
  AdapterStack& first = bank.add_stack(c, rng);
  for (auto& a : first)
    for (auto& v : a.w_up.data()) v = 0.3 * rng.normal();
  Tensor x = random_tensor({3, c.input_dim()}, rng);
  Tensor cached = forward_specific(bb, x, &p, bank[0]);

  AdapterStack& second = bank.add_stack(c, rng);
  CHECK_FALSE(bank[0][0].w_up.requires_grad());
  CHECK(second[0].w_up.requires_grad());
  for (auto& a : second)
    for (auto& v : a.w_up.data()) v += 1.0;
  CHECK(bitwise_equal(forward_specific(bb, x, &p, bank[0]), cached));
}

TEST_CASE("feature input mode splits vectors into tokens") {
  BackboneConfig c = small_config();
  c.input_mode = InputMode::Feature;
  c.feature_dim = 24;
  Rng rng(16);
  Backbone bb = Backbone::init(c, rng);
  PromptSet p = PromptSet::init(c, rng);
  Tensor x = random_tensor({1, 24}, rng);
  Tensor f = forward_shared(bb, x, &p);
  auto ref = reference_forward(bb, std::vector<double>(x.data().begin(), x.data().end()), &p, {});
  for (std::size_t j = 0; j < c.dim; ++j) CHECK(f[j] == doctest::Approx(ref[j]).epsilon(1e-12));
}
