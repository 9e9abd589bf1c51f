#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "test_util.hpp"
#include "unidiff/autodiff.hpp"
#include "unidiff/denoiser.hpp"
#include "unidiff/errors.hpp"
#include "unidiff/kernels.hpp"
#include "unidiff/layers.hpp"
#include "unidiff/optim.hpp"

using namespace unidiff;
using nn::Graph;
using nn::Tensor;
using nn::Var;
using testutil::finite_difference_check;
using testutil::random_tensor;

namespace {

DenoiserArch tiny_arch() {
  DenoiserArch a;
  a.image_dim = 12;
  a.hidden = 8;
  a.depth = 3;
  a.cond_dim = 4;
  a.time_dim = 6;
  return a;
}

DenoiserModel tiny_model(std::uint64_t seed) {
  DenoiserModel m(tiny_arch());
  Rng rng(seed);
  m.init(rng, false);
  m.concepts().set_token("a", random_tensor({4}, rng));
  m.concepts().set_token("b", random_tensor({4}, rng));
  m.concepts().set_suffix("s", random_tensor({4}, rng));
  return m;
}

// Squared-error loss of the trunk output against a fixed target, over a mixed batch.
Var denoiser_loss(Graph& g, const DenoiserModel& m, const Tensor& x, const Tensor& target) {
  const std::vector<Prompt> prompts{{"a", ""}, {"b", "s"}, {}};
  const int steps[3] = {1, 7, 25};
  Var out = m.forward(g, g.constant(x), steps, m.condition(g, prompts));
  return nn::mse(out, g.constant(target));
}

}  // namespace

TEST(Tensor, ShapeAndReshape) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  Tensor r = t.reshaped({3, 2});
  EXPECT_EQ(r.rows(), 3u);
  EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Grad, HalfSquaredNormGivesParameter) {
  Rng rng(3);
  Tensor theta = random_tensor({5}, rng);
  Graph g;
  Var p = g.param(theta);
  Var loss = nn::scale(nn::sum(p * p), 0.5);
  const Tensor* ps[1] = {&theta};
  auto grads = nn::grad(g, loss, ps);
  for (std::size_t i = 0; i < theta.size(); ++i) EXPECT_DOUBLE_EQ(grads[0][i], theta[i]);
}

TEST(Grad, UnreachedParameterGetsZeros) {
  Tensor a({3}, 1.0), b({2}, 4.0);
  Graph g;
  Var loss = nn::sum(g.param(a));
  const Tensor* ps[2] = {&a, &b};
  auto grads = nn::grad(g, loss, ps);
  EXPECT_EQ(grads[1], Tensor({2}, 0.0));
}

TEST(Grad, NonFiniteLossThrows) {
  Tensor a({1}, std::numeric_limits<double>::infinity());
  Graph g;
  Var loss = nn::sum(g.param(a));
  const Tensor* ps[1] = {&a};
  EXPECT_THROW(nn::grad(g, loss, ps), NumericError);
}

TEST(Grad, TwoLayerNetMatchesFiniteDifferences) {
  Rng rng(11);
  nn::Linear l1(5, 7), l2(7, 3);
  l1.init_normal(rng);
  l2.init_normal(rng);
  for (double& v : l1.bias.storage()) v = 0.1 * rng.normal();
  const Tensor x = random_tensor({4, 5}, rng);
  const Tensor y = random_tensor({4, 3}, rng);
  auto build = [&](Graph& g) {
    Var h = nn::silu(l1.forward(g, g.constant(x)));
    return nn::mse(l2.forward(g, h), g.constant(y));
  };
  auto r = finite_difference_check(build, {&l1.weight, &l1.bias, &l2.weight, &l2.bias});
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Grad, ElementwiseOpsMatchFiniteDifferences) {
  Rng rng(5);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), bias = random_tensor({4}, rng);
  Tensor targets({3, 4}, 0.25);
  auto build = [&](Graph& g) {
    Var va = g.param(a), vb = g.param(b);
    Var z = nn::axpby(0.7, va * vb, -1.3, nn::relu(va - vb));
    z = nn::add_bias(z, g.param(bias));
    return nn::soft_cross_entropy(nn::reshape(z, {3, 4}), targets);
  };
  auto r = finite_difference_check(build, {&a, &b, &bias});
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Grad, InputGradientMatchesFiniteDifferences) {
  Rng rng(8);
  nn::Linear l(6, 4);
  l.init_normal(rng);
  Tensor z = random_tensor({1, 6}, rng);
  auto build = [&](Graph& g) {
    Var h = nn::silu(l.forward(g, g.param(z)));
    return nn::sum(h * h);
  };
  auto r = finite_difference_check(build, {&z});
  EXPECT_LT(r.max_rel_error, 1e-4);
  Graph g;
  Var zin = g.input(z);
  Var h = nn::silu(l.forward(g, zin));
  g.backward(nn::sum(h * h));
  Graph g2;
  const Tensor* ps[1] = {&z};
  Var h2 = nn::silu(l.forward(g2, g2.param(z)));
  auto grads = nn::grad(g2, nn::sum(h2 * h2), ps);
  EXPECT_EQ(g.grad(zin).reshaped({6}), grads[0].reshaped({6}));
}

TEST(Grad, DenoiserTrunkTimeAndConcepts) {
  DenoiserModel m = tiny_model(21);
  Rng rng(4);
  const Tensor x = random_tensor({3, 12}, rng);
  const Tensor target = random_tensor({3, 12}, rng);
  std::vector<Tensor*> params;
  for (auto& [name, p] : m.trunk_parameters()) params.push_back(p);
  params.push_back(&m.null_embed());
  params.push_back(&m.concepts().token("a"));
  params.push_back(&m.concepts().token("b"));
  params.push_back(&m.concepts().suffix("s"));
  auto r = finite_difference_check([&](Graph& g) { return denoiser_loss(g, m, x, target); }, params);
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_GT(r.checked, 100u);
}

TEST(Grad, DenoiserAdapters) {
  DenoiserModel m = tiny_model(22);
  Rng rng(6);
  const std::vector<std::string> layers{"input", "hidden0", "output"};
  auto adapters = make_adapters(m, layers, 2, 3.0, rng);
  for (auto& [name, a] : adapters) a.up = random_tensor(a.up.shape(), rng, 0.3);
  m.attach_adapters(adapters);
  const Tensor x = random_tensor({3, 12}, rng);
  const Tensor target = random_tensor({3, 12}, rng);
  auto r = finite_difference_check([&](Graph& g) { return denoiser_loss(g, m, x, target); },
                                   m.adapter_parameters());
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Optimizer, SgdWithoutMomentum) {
  Tensor p({3}, std::vector<double>{1.0, -2.0, 0.5});
  const Tensor g({3}, std::vector<double>{0.5, 1.0, -4.0});
  auto st = nn::make_sgd(0.1, 0.0);
  Tensor* ps[1] = {&p};
  nn::optimizer_step(st, ps, std::span<const Tensor>(&g, 1));
  EXPECT_DOUBLE_EQ(p[0], 1.0 - 0.05);
  EXPECT_DOUBLE_EQ(p[1], -2.0 - 0.1);
  EXPECT_DOUBLE_EQ(p[2], 0.5 + 0.4);
  EXPECT_EQ(st.step, 1u);
}

TEST(Optimizer, SgdZeroGradientLeavesParameters) {
  Tensor p({2}, 3.0);
  const Tensor g({2}, 0.0);
  auto st = nn::make_sgd(0.5, 0.0);
  Tensor* ps[1] = {&p};
  nn::optimizer_step(st, ps, std::span<const Tensor>(&g, 1));
  EXPECT_EQ(p, Tensor({2}, 3.0));
}

TEST(Optimizer, AdamTwoStepsByHand) {
  Tensor p({1}, 1.0);
  const Tensor g({1}, 2.0);
  auto st = nn::make_adam(0.1);
  Tensor* ps[1] = {&p};
  // Step 1: m=0.2, v=0.004, m_hat=2, v_hat=4 -> p -= 0.1*2/(2+1e-8).
  nn::optimizer_step(st, ps, std::span<const Tensor>(&g, 1));
  const double p1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
  EXPECT_NEAR(p[0], p1, 1e-15);
  // Step 2: m=0.38, v=0.007996, m_hat=0.38/0.19=2, v_hat=0.007996/0.001999=4.
  nn::optimizer_step(st, ps, std::span<const Tensor>(&g, 1));
  const double m_hat = (0.9 * 0.2 + 0.1 * 2.0) / (1.0 - 0.81);
  const double v_hat = (0.999 * 0.004 + 0.001 * 4.0) / (1.0 - 0.999 * 0.999);
  EXPECT_NEAR(p[0], p1 - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8), 1e-15);
}

TEST(Optimizer, ShapeMismatchThrows) {
  Tensor p({2}, 1.0);
  const Tensor g({3}, 1.0);
  auto st = nn::make_sgd(0.1);
  Tensor* ps[1] = {&p};
  EXPECT_THROW(nn::optimizer_step(st, ps, std::span<const Tensor>(&g, 1)), ShapeError);
}

TEST(Lora, HandComputedRankOneMerge) {
  nn::Linear l(2, 2);
  l.weight = Tensor({2, 2}, std::vector<double>{1, 2, 3, 4});
  nn::LoraAdapter a;
  a.down = Tensor({1, 2}, std::vector<double>{1, -1});
  a.up = Tensor({2, 1}, std::vector<double>{2, 3});
  a.alpha = 2.0;  // scale 2
  const Tensor w = nn::merged_weight(l, a);
  EXPECT_EQ(w, Tensor({2, 2}, std::vector<double>{1 + 4, 2 - 4, 3 + 6, 4 - 6}));
}

TEST(Lora, ZeroUpMergesToBaseExactly) {
  DenoiserModel m = tiny_model(30);
  Rng rng(1);
  const std::vector<std::string> layers{"hidden0", "hidden1"};
  auto adapters = make_adapters(m, layers, 3, 3.0, rng);
  DenoiserModel merged = lora_merge(m, adapters);
  for (const auto& name : m.layer_names()) EXPECT_EQ(merged.layer(name), m.layer(name));
}

TEST(Lora, MergedMatchesRuntimePath) {
  DenoiserModel m = tiny_model(31);
  Rng rng(2);
  const std::vector<std::string> layers{"input", "hidden0", "hidden1", "output"};
  auto adapters = make_adapters(m, layers, 4, 4.0, rng);
  for (auto& [name, a] : adapters) a.up = random_tensor(a.up.shape(), rng, 0.5);
  DenoiserModel attached = m;
  attached.attach_adapters(adapters);
  DenoiserModel merged = lora_merge(m, adapters);
  const Tensor x = random_tensor({12}, rng);
  const Tensor c = m.condition(Prompt{"a", "s"});
  for (int t : {1, 9, 25}) {
    EXPECT_LT(nn::max_abs_diff(attached.predict(x, t, c), merged.predict(x, t, c)), 1e-9);
  }
}

TEST(Lora, ZeroInitAdaptersLeaveOutputBitIdentical) {
  DenoiserModel m = tiny_model(32);
  Rng rng(3);
  const std::vector<std::string> layers{"hidden0", "output"};
  DenoiserModel attached = m;
  attached.attach_adapters(make_adapters(m, layers, 2, 2.0, rng));
  const Tensor x = random_tensor({12}, rng);
  const Tensor c = m.condition(Prompt{"b", ""});
  EXPECT_EQ(attached.predict(x, 4, c), m.predict(x, 4, c));
  attached.detach_adapters();
  EXPECT_EQ(attached.predict(x, 4, c), m.predict(x, 4, c));
}

TEST(Lora, ParameterCount) {
  DenoiserArch a;
  a.image_dim = 48;
  a.hidden = 256;
  a.depth = 3;
  DenoiserModel m(a);
  Rng rng(0);
  const std::vector<std::string> layers{"hidden0", "hidden1"};
  m.attach_adapters(make_adapters(m, layers, 8, 8.0, rng));
  EXPECT_EQ(m.adapter_parameter_count(), 2u * 8u * (256u + 256u));
  const std::vector<std::string> io{"input"};
  auto extra = make_adapters(m, io, 3, 3.0, rng);
  EXPECT_EQ(extra.at("input").parameter_count(), 3u * (48u + 256u));
}

TEST(Denoiser, ZeroOutputLayerGivesZeros) {
  DenoiserModel m(tiny_arch());
  Rng rng(4);
  m.init(rng, true);
  const Tensor x = random_tensor({12}, rng);
  EXPECT_EQ(m.predict(x, 3, m.null_embed()), Tensor({12}, 0.0));
}

TEST(Denoiser, ConditionIsAdditive) {
  DenoiserModel m = tiny_model(40);
  Rng rng(5);
  const Tensor x = random_tensor({12}, rng);
  Tensor sum = m.concepts().token("a");
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += m.concepts().suffix("s")[i];
  EXPECT_EQ(m.condition(Prompt{"a", "s"}), sum);
  EXPECT_EQ(m.predict(x, 5, m.condition(Prompt{"a", "s"})), m.predict(x, 5, sum));
  EXPECT_EQ(m.condition(Prompt{"a", ""}), m.concepts().token("a"));
  EXPECT_EQ(m.condition(Prompt{}), m.null_embed());
}

TEST(Denoiser, DeterministicForSeed) {
  DenoiserModel a = tiny_model(50), b = tiny_model(50);
  Rng rng(6);
  const Tensor x = random_tensor({12}, rng);
  EXPECT_EQ(a.predict(x, 2, a.condition(Prompt{"a", ""})),
            b.predict(x, 2, b.condition(Prompt{"a", ""})));
}

TEST(Denoiser, ShapeErrors) {
  DenoiserModel m = tiny_model(51);
  EXPECT_THROW(m.predict(Tensor({11}), 1, m.null_embed()), ShapeError);
  EXPECT_THROW(m.predict(Tensor({12}), 1, Tensor({3})), ShapeError);
  EXPECT_THROW(m.concepts().set_token("x", Tensor({5})), ShapeError);
  EXPECT_THROW(m.condition(Prompt{"missing", ""}), ParameterError);
}

TEST(Kernels, OmpMatchesSerial) {
  Rng rng(9);
  const std::size_t n = 37, k = 19, m = 23;
  const Tensor a = random_tensor({n, k}, rng), b = random_tensor({m, k}, rng);
  const Tensor bn = random_tensor({k, m}, rng), at = random_tensor({n, m}, rng);
  Tensor c1({n, m}), c2({n, m});
  kernels::serial::matmul_nt(a.data(), b.data(), c1.data(), n, k, m, false);
  kernels::omp::matmul_nt(a.data(), b.data(), c2.data(), n, k, m, false);
  EXPECT_LT(nn::max_abs_diff(c1, c2), 1e-12);
  kernels::serial::matmul_nn(a.data(), bn.data(), c1.data(), n, k, m, true);
  kernels::omp::matmul_nn(a.data(), bn.data(), c2.data(), n, k, m, true);
  EXPECT_LT(nn::max_abs_diff(c1, c2), 1e-12);
  Tensor d1({m, k}), d2({m, k});
  kernels::serial::matmul_tn(at.data(), a.data(), d1.data(), n, m, k, false);
  kernels::omp::matmul_tn(at.data(), a.data(), d2.data(), n, m, k, false);
  EXPECT_LT(nn::max_abs_diff(d1, d2), 1e-12);
  Tensor e1({n, m}), e2({n, m});
  const Tensor bd = random_tensor({m, k}, rng);
  kernels::serial::pairwise_sq_dist(a.data(), bd.data(), e1.data(), n, m, k);
  kernels::omp::pairwise_sq_dist(a.data(), bd.data(), e2.data(), n, m, k);
  EXPECT_LT(nn::max_abs_diff(e1, e2), 1e-12);
}

TEST(Rng, DerivedSeedsAreOrderSensitiveAndStable) {
  EXPECT_EQ(derive_seed(7, {1, 2}), derive_seed(7, {1, 2}));
  EXPECT_NE(derive_seed(7, {1, 2}), derive_seed(7, {2, 1}));
  EXPECT_NE(derive_seed(7, {1}), derive_seed(8, {1}));
  EXPECT_NE(derive_seed(7, "a"), derive_seed(7, "b"));
  Rng a(3), b(3);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.normal(), b.normal());
}
