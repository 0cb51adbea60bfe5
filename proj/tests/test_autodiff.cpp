#include <cmath>

#include "doctest.h"
#include "dgseg/autodiff.hpp"
#include "dgseg/rng.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "testutil.hpp"

using namespace dgseg;
using ag::Var;

namespace {

// Runs gradcheck over a scalar-valued builder with one or two parameters and
// requires every probe under 1e-4 relative error.
void expect_grads(const std::function<Var()>& builder,
                  const std::vector<gradcheck::Target>& targets,
                  std::uint64_t seed, int probes = 0) {
  Rng rng(seed);
  const auto res = gradcheck::check(builder, targets, rng, probes);
  INFO("worst: ", res.worst);
  CHECK(res.max_rel_err < 1e-4);
}

Mat rmat(std::uint64_t seed, Index r, Index c, Scalar scale = 1.0) {
  Rng rng(seed);
  return testutil::random_mat(rng, r, c, scale);
}

}  // namespace

TEST_CASE("autodiff: forward values of elementwise ops") {
  const Mat a = rmat(1, 3, 4);
  const Mat b = rmat(2, 3, 4);
  const auto same = [](const Mat& got, const Mat& want) {
    return testutil::mats_equal_bits(got, want);
  };
  CHECK(same(ag::add(ag::constant(a), ag::constant(b))->value, a + b));
  CHECK(same(ag::sub(ag::constant(a), ag::constant(b))->value, a - b));
  CHECK(same(ag::cmul(ag::constant(a), ag::constant(b))->value,
             a.cwiseProduct(b)));
  CHECK(same(ag::neg(ag::constant(a))->value, -a));
  CHECK(same(ag::scale(ag::constant(a), 2.5)->value, 2.5 * a));
  CHECK(same(ag::add_scalar(ag::constant(a), 1.25)->value,
             Mat(a.array() + 1.25)));
  CHECK(same(ag::transpose(ag::constant(a))->value, a.transpose()));
  CHECK(same(ag::matmul(ag::constant(a), ag::constant(Mat(b.transpose())))
                 ->value,
             a * b.transpose()));
}

TEST_CASE("autodiff: shape mismatches throw") {
  const auto a = ag::constant(Mat::Zero(2, 3));
  const auto b = ag::constant(Mat::Zero(3, 2));
  CHECK_THROWS_AS(ag::add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(ag::sub(a, b), std::invalid_argument);
  CHECK_THROWS_AS(ag::cmul(a, b), std::invalid_argument);
  CHECK_THROWS_AS(ag::cdiv(a, b), std::invalid_argument);
  CHECK_THROWS_AS(ag::matmul(a, a), std::invalid_argument);
}

TEST_CASE("autodiff: gradients of arithmetic ops") {
  auto x = ag::param(rmat(3, 3, 4));
  auto y = ag::param(rmat(4, 3, 4, 0.8));
  expect_grads([&] { return ag::sum(ag::cmul(ag::add(x, y), ag::sub(x, y))); },
               {{"x", x}, {"y", y}}, 11);
  expect_grads(
      [&] {
        return ag::mean(ag::cdiv(x, ag::add_scalar(ag::cmul(y, y), 1.0)));
      },
      {{"x", x}, {"y", y}}, 12);
  expect_grads(
      [&] {
        return ag::sum(ag::matmul(ag::transpose(x), ag::scale(y, 1.7)));
      },
      {{"x", x}, {"y", y}}, 13);
}

TEST_CASE("autodiff: gradients of broadcast and slicing ops") {
  auto x = ag::param(rmat(5, 4, 6));
  auto v = ag::param(rmat(6, 4, 1));
  expect_grads([&] { return ag::sum(ag::add_colvec(x, v)); },
               {{"x", x}, {"v", v}}, 14);
  expect_grads([&] { return ag::sum(ag::mul_colvec(x, v)); },
               {{"x", x}, {"v", v}}, 15);
  expect_grads(
      [&] {
        auto c = ag::concat_cols({x, ag::cmul(x, x)});
        return ag::sum(ag::cmul(c, c));
      },
      {{"x", x}}, 16);
  expect_grads(
      [&] {
        auto s = ag::slice_cols(x, 1, 3);
        auto r = ag::slice_rows(x, 0, 2);
        return ag::add(ag::sum(ag::cmul(s, s)), ag::norm2(r));
      },
      {{"x", x}}, 17);
  expect_grads([&] { return ag::sum(ag::cmul(ag::rowsum(x), ag::rowsum(x))); },
               {{"x", x}}, 18);
  expect_grads([&] { return ag::sum(ag::cmul(ag::colsum(x), ag::colsum(x))); },
               {{"x", x}}, 19);
}

TEST_CASE("autodiff: gradients of nonlinearities") {
  // Keep magnitudes moderate and away from the relu kink.
  Mat base = rmat(7, 4, 5);
  for (Index c = 0; c < base.cols(); ++c)
    for (Index r = 0; r < base.rows(); ++r)
      if (std::abs(base(r, c)) < 0.05) base(r, c) = 0.3;
  auto x = ag::param(base);
  expect_grads([&] { return ag::sum(ag::relu(x)); }, {{"x", x}}, 20, 0);
  expect_grads([&] { return ag::sum(ag::gelu(x)); }, {{"x", x}}, 21, 0);
  expect_grads([&] { return ag::sum(ag::cmul(ag::sigmoid(x), ag::sigmoid(x))); },
               {{"x", x}}, 22, 0);
}

TEST_CASE("autodiff: softmax columns sum to one and differentiate") {
  auto x = ag::param(rmat(8, 4, 5));
  const auto s = ag::softmax_cols(x);
  for (Index c = 0; c < s->value.cols(); ++c)
    CHECK(s->value.col(c).sum() == doctest::Approx(1.0).epsilon(1e-12));
  const Mat probe = rmat(9, 4, 5, 0.7);
  expect_grads(
      [&] { return ag::sum(ag::cmul(ag::softmax_cols(x), ag::constant(probe))); },
      {{"x", x}}, 23, 0);
}

TEST_CASE("autodiff: masked softmax ignores masked rows") {
  Mat mask = Mat::Ones(4, 3);
  mask(2, 1) = 0.0;
  mask(0, 1) = 0.0;
  auto x = ag::param(rmat(10, 4, 3));
  const auto s = ag::masked_softmax_cols(x, mask);
  CHECK(s->value(2, 1) == 0.0);
  CHECK(s->value(0, 1) == 0.0);
  for (Index c = 0; c < 3; ++c)
    CHECK(s->value.col(c).sum() == doctest::Approx(1.0).epsilon(1e-12));
  const Mat probe = rmat(11, 4, 3, 0.7);
  expect_grads(
      [&] {
        return ag::sum(
            ag::cmul(ag::masked_softmax_cols(x, mask), ag::constant(probe)));
      },
      {{"x", x}}, 24, 0);
}

TEST_CASE("autodiff: masked log-sum-exp matches loops") {
  Mat mask = Mat::Zero(5, 2);
  mask(0, 0) = mask(3, 0) = 1.0;
  mask(1, 1) = mask(2, 1) = mask(4, 1) = 1.0;
  auto x = ag::param(rmat(25, 5, 2));
  const auto lse = ag::masked_lse_cols(x, mask);
  CHECK(lse->value.rows() == 1);
  CHECK(lse->value.cols() == 2);
  for (Index c = 0; c < 2; ++c) {
    Scalar direct = 0.0;
    for (Index r = 0; r < 5; ++r)
      if (mask(r, c) != 0.0) direct += std::exp(x->value(r, c));
    CHECK(lse->value(0, c) ==
          doctest::Approx(std::log(direct)).epsilon(1e-12));
  }
  expect_grads([&] { return ag::sum(ag::masked_lse_cols(x, mask)); },
               {{"x", x}}, 26, 0);
}

TEST_CASE("autodiff: layernorm normalizes columns") {
  auto x = ag::param(rmat(30, 6, 3));
  auto g = ag::param(Mat::Ones(6, 1) + 0.1 * rmat(31, 6, 1));
  auto b = ag::param(0.1 * rmat(32, 6, 1));
  const auto out = ag::layernorm_cols(x, g, b);
  // With unit gamma/zero beta the column mean is ~0 and variance ~1.
  const auto plain =
      ag::layernorm_cols(x, ag::constant(Mat::Ones(6, 1)),
                         ag::constant(Mat::Zero(6, 1)));
  for (Index c = 0; c < 3; ++c) {
    CHECK(plain->value.col(c).mean() == doctest::Approx(0.0).epsilon(1e-10));
    const Scalar var = plain->value.col(c).squaredNorm() / 6.0;
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
  (void)out;
  const Mat probe = rmat(33, 6, 3, 0.7);
  expect_grads(
      [&] {
        return ag::sum(
            ag::cmul(ag::layernorm_cols(x, g, b), ag::constant(probe)));
      },
      {{"x", x}, {"g", g}, {"b", b}}, 34, 8);
}

TEST_CASE("autodiff: l2normalize produces unit columns") {
  auto x = ag::param(rmat(35, 5, 4));
  const auto n = ag::l2normalize_cols(x);
  for (Index c = 0; c < 4; ++c)
    CHECK(n->value.col(c).norm() == doctest::Approx(1.0).epsilon(1e-12));
  const Mat probe = rmat(36, 5, 4, 0.7);
  expect_grads(
      [&] {
        return ag::sum(ag::cmul(ag::l2normalize_cols(x), ag::constant(probe)));
      },
      {{"x", x}}, 37, 0);
}

TEST_CASE("autodiff: ce_cols matches oracle and differentiates") {
  auto x = ag::param(rmat(40, 4, 5));
  const std::vector<int> targets = {0, 3, -1, 2, 1};
  const auto loss = ag::ce_cols(x, targets);
  CHECK(loss->value(0, 0) ==
        doctest::Approx(oracle::ce_cols(x->value, targets)).epsilon(1e-12));
  expect_grads([&] { return ag::ce_cols(x, targets); }, {{"x", x}}, 41, 0);
}

TEST_CASE("autodiff: ce_cols with no valid target is zero constant") {
  auto x = ag::param(rmat(42, 3, 2));
  const auto loss = ag::ce_cols(x, {-1, -1});
  CHECK(loss->value(0, 0) == 0.0);
  CHECK(!loss->needs_grad);
}

TEST_CASE("autodiff: bce_logits matches oracle and differentiates") {
  auto x = ag::param(rmat(43, 4, 6));
  Rng rng(44);
  Mat targets(4, 6), weights(4, 6);
  for (Index c = 0; c < 6; ++c)
    for (Index r = 0; r < 4; ++r) {
      targets(r, c) = rng.uniform() < 0.5 ? 0.0 : 1.0;
      weights(r, c) = rng.uniform() < 0.25 ? 0.0 : 1.0;
    }
  const auto loss = ag::bce_logits(x, targets, weights);
  CHECK(loss->value(0, 0) ==
        doctest::Approx(oracle::bce_weighted(x->value, targets, weights))
            .epsilon(1e-12));
  expect_grads([&] { return ag::bce_logits(x, targets, weights); },
               {{"x", x}}, 45, 0);
}

TEST_CASE("autodiff: bce_logits with all-zero weights is zero constant") {
  auto x = ag::param(rmat(46, 2, 2));
  const auto loss = ag::bce_logits(x, Mat::Zero(2, 2), Mat::Zero(2, 2));
  CHECK(loss->value(0, 0) == 0.0);
  CHECK(!loss->needs_grad);
}

TEST_CASE("autodiff: bce_logits_soft differentiates both arguments") {
  auto x = ag::param(rmat(47, 3, 4));
  auto y = ag::param(rmat(48, 3, 4));
  expect_grads([&] { return ag::bce_logits_soft(x, ag::sigmoid(y)); },
               {{"x", x}, {"y", y}}, 49, 0);
}

TEST_CASE("autodiff: dice matches oracle and differentiates") {
  auto x = ag::param(rmat(50, 3, 8));
  Rng rng(51);
  Mat targets(3, 8), weights(3, 8);
  for (Index c = 0; c < 8; ++c)
    for (Index r = 0; r < 3; ++r) {
      targets(r, c) = rng.uniform() < 0.5 ? 0.0 : 1.0;
      weights(r, c) = rng.uniform() < 0.2 ? 0.0 : 1.0;
    }
  const auto loss = ag::dice_loss(x, targets, weights);
  CHECK(loss->value(0, 0) ==
        doctest::Approx(oracle::dice(x->value, targets, weights))
            .epsilon(1e-12));
  expect_grads([&] { return ag::dice_loss(x, targets, weights); },
               {{"x", x}}, 52, 0);
}

TEST_CASE("autodiff: jsd matches oracle, stays in bounds, differentiates") {
  auto x = ag::param(rmat(53, 4, 5));
  auto y = ag::param(rmat(54, 4, 5));
  const auto loss = ag::jsd_softmax_pair(x, y);
  CHECK(loss->value(0, 0) ==
        doctest::Approx(oracle::jsd_softmax_pair(x->value, y->value))
            .epsilon(1e-12));
  CHECK(loss->value(0, 0) >= 0.0);
  CHECK(loss->value(0, 0) <= std::log(2.0) + 1e-12);
  expect_grads([&] { return ag::jsd_softmax_pair(x, y); },
               {{"x", x}, {"y", y}}, 55, 0);
}

TEST_CASE("autodiff: norm2 value and gradient") {
  Mat v(3, 1);
  v << 3.0, 4.0, 0.0;
  auto x = ag::param(v);
  CHECK(ag::norm2(x)->value(0, 0) == doctest::Approx(5.0).epsilon(1e-15));
  expect_grads([&] { return ag::norm2(x); }, {{"x", x}}, 56, 0);
}

TEST_CASE("autodiff: backward survives an exactly-zero subgradient branch") {
  // norm2 at the origin has gradient zero; its parents must not receive an
  // unseeded (0x0) gradient when the traversal reaches them.
  auto x = ag::param(Mat::Ones(3, 2));
  auto z = ag::sub(x, ag::constant(Mat::Ones(3, 2)));  // exactly zero
  auto root = ag::add(ag::norm2(z), ag::sum(ag::cmul(x, x)));
  ag::backward(root);
  CHECK(x->grad.rows() == 3);
  CHECK(x->grad.cols() == 2);
  // Only the quadratic term contributes.
  CHECK(x->grad(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("autodiff: diamond-shaped graphs accumulate once per path") {
  auto x = ag::param(Mat::Constant(1, 1, 0.7));
  // y = x*x used twice: root = y + y => d(root)/dx = 4x.
  auto y = ag::cmul(x, x);
  auto root = ag::sum(ag::add(y, y));
  ag::backward(root);
  CHECK(x->grad(0, 0) == doctest::Approx(4.0 * 0.7).epsilon(1e-12));
}

TEST_CASE("autodiff: constants receive no gradient") {
  auto x = ag::param(rmat(57, 2, 2));
  auto c = ag::constant(rmat(58, 2, 2));
  auto root = ag::sum(ag::cmul(x, c));
  ag::backward(root);
  CHECK(!c->grad_ready);
  CHECK(!c->needs_grad);
  CHECK(x->grad_ready);
}

TEST_CASE("autodiff: backward requires a scalar root") {
  auto x = ag::param(rmat(59, 2, 2));
  CHECK_THROWS_WITH_AS(ag::backward(ag::cmul(x, x)),
                       doctest::Contains("scalar"), std::invalid_argument);
}

TEST_CASE("autodiff: gather_cols interpolates and differentiates") {
  auto plan = std::make_shared<ag::GatherPlan>();
  plan->idx = {{0, 1, 2, 3}, {1, 1, 2, 2}, {3, 0, 0, 0}};
  plan->w = {{0.25, 0.25, 0.25, 0.25}, {0.5, 0.0, 0.5, 0.0}, {1.0, 0.0, 0.0, 0.0}};
  auto x = ag::param(rmat(60, 3, 4));
  const auto out = ag::gather_cols(x, plan);
  CHECK(out->value.cols() == 3);
  const Mat expect0 = 0.25 * (x->value.col(0) + x->value.col(1) +
                              x->value.col(2) + x->value.col(3));
  CHECK((out->value.col(0) - expect0).norm() == doctest::Approx(0.0));
  const Mat probe = rmat(61, 3, 3, 0.7);
  expect_grads(
      [&] { return ag::sum(ag::cmul(ag::gather_cols(x, plan), ag::constant(probe))); },
      {{"x", x}}, 62, 0);
}
