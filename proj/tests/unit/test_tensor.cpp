// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <functional>

#include "kdqat/gradcheck.hpp"
#include "kdqat/ops.hpp"
#include "support.hpp"

using namespace kdqat;
using kdqat::testing::random_tensor;
using Td = Tensor<double>;
using Tf = Tensor<float>;

namespace {

RowMatrix<float> mat(Index r, Index c, std::initializer_list<float> v) {
  RowMatrix<float> m(r, c);
  Index i = 0;
  for (float x : v) m.data()[i++] = x;
  return m;
}

constexpr double kStep = 1e-5;

}  // namespace

TEST_CASE("tensor storage keeps shape and data length consistent") {
  auto t = Tf::from_values({2, 3, 4}, std::vector<float>(24, 1.0f));
  CHECK(t.rows() == 6);
  CHECK(t.cols() == 4);
  CHECK(t.numel() == shape_numel(t.shape()));
  CHECK_THROWS_AS(Tf::from_values({2, 2}, {1.0f, 2.0f, 3.0f}), DimensionError);
  CHECK(Tf::scalar(3.0f).rank() == 0);
}

TEST_CASE("matmul") {
  const auto a = Tf::constant({2, 2}, mat(2, 2, {1, 0, 0, 1}));
  const auto b = Tf::constant({2, 2}, mat(2, 2, {1, 2, 3, 4}));
  CHECK(matmul(a, b).value() == b.value());

  const auto row = Tf::constant({1, 2}, mat(1, 2, {1, 2}));
  const auto col = Tf::constant({2, 1}, mat(2, 1, {3, 4}));
  CHECK(matmul(row, col).item() == doctest::Approx(11.0));

  SUBCASE("shape mismatch names both shapes") {
    try {
      matmul(row, row);
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string what = e.what();
      CHECK(what.find("[1x2]") != std::string::npos);
    }
  }

  SUBCASE("gradient of sum(a b) against central differences") {
    auto pa = Tf::parameter({2, 2}, mat(2, 2, {1, 0, 0, 1}));
    const auto pb = Tf::constant({2, 2}, mat(2, 2, {2, 3, 4, 5}));
    backward(sum(matmul(pa, pb)));
    // Independent oracle: perturb each entry by 1e-3 and difference the plain product sum.
    const RowMatrix<double> bd = pb.value().cast<double>();
    RowMatrix<double> ad = pa.value().cast<double>();
    for (Index i = 0; i < 4; ++i) {
      const double h = 1e-3;
      ad.data()[i] += h;
      const double up = (ad * bd).sum();
      ad.data()[i] -= 2 * h;
      const double down = (ad * bd).sum();
      ad.data()[i] += h;
      CHECK(pa.grad().data()[i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-3));
    }
    CHECK(pa.grad() == mat(2, 2, {5, 9, 5, 9}));
  }
}

TEST_CASE("softmax_rows") {
  const auto u = softmax_rows(Tf::constant({3}, mat(1, 3, {0, 0, 0})));
  for (Index i = 0; i < 3; ++i) CHECK(u.value()(0, i) == doctest::Approx(1.0 / 3.0));

  const auto p = softmax_rows(Td::constant({2}, RowMatrix<double>{{std::log(2.0), 0.0}}));
  CHECK(p.value()(0, 0) == doctest::Approx(2.0 / 3.0));
  CHECK(p.value()(0, 1) == doctest::Approx(1.0 / 3.0));

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto y = softmax_rows(random_tensor<float>({5, 7}, seed, 5.0), 0.7f);
    CHECK((y.value().array() >= 0.0f).all());
    for (Index r = 0; r < 5; ++r) CHECK(std::abs(y.value().row(r).cast<double>().sum() - 1.0) < 1e-6);
  }

  RowMatrix<float> bad = mat(1, 2, {1, 0});
  bad(0, 1) = std::nanf("");
  CHECK_THROWS_AS(softmax_rows(Tf::constant({2}, bad)), NumericError);
  CHECK_THROWS_AS(softmax_rows(Tf::constant({2}, mat(1, 2, {1, 2})), 0.0f), ContractError);
}

TEST_CASE("layer_norm") {
  const auto ones = Tf::constant({4}, mat(1, 4, {1, 1, 1, 1}));
  const auto zeros = Tf::constant({4}, mat(1, 4, {0, 0, 0, 0}));
  const auto c = layer_norm(Tf::constant({4}, mat(1, 4, {5, 5, 5, 5})), ones, zeros);
  CHECK(c.value().isZero());

  const auto g2 = Tf::constant({2}, mat(1, 2, {1, 1}));
  const auto b2 = Tf::constant({2}, mat(1, 2, {0, 0}));
  const auto y = layer_norm(Tf::constant({2}, mat(1, 2, {1, -1})), g2, b2, 0.0f);
  CHECK(y.value()(0, 0) == doctest::Approx(1.0));
  CHECK(y.value()(0, 1) == doctest::Approx(-1.0));

  CHECK_THROWS_AS(layer_norm(Tf::zeros({3, 0}), Tf::zeros({0}), Tf::zeros({0})), DimensionError);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto gain = random_tensor<double>({4}, seed + 100);
    const auto bias = random_tensor<double>({4}, seed + 200);
    const auto w = random_tensor<double>({4}, seed + 300);
    const double err = gradcheck<double>(
        [&](const Td& x) { return sum(mul(layer_norm(x, gain, bias), w)); }, random_tensor<double>({4}, seed), 1e-3);
    CHECK(err < 1e-3);
  }
}

TEST_CASE("gelu") {
  const auto y = gelu(Tf::constant({3}, mat(1, 3, {0.0f, 1.0f, -10.0f})));
  CHECK(y.value()(0, 0) == 0.0f);
  // 0.5 * (1 + erf(1 / sqrt(2)))
  CHECK(y.value()(0, 1) == doctest::Approx(0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)))).epsilon(1e-7));
  CHECK(y.value()(0, 1) == doctest::Approx(0.8413447).epsilon(1e-6));
  CHECK(std::abs(y.value()(0, 2)) < 1e-6);
}

TEST_CASE("backward") {
  auto w = Tf::parameter({3}, mat(1, 3, {0.3f, -2.0f, 7.0f}));
  backward(sum(w));
  CHECK(w.grad() == mat(1, 3, {1, 1, 1}));

  SUBCASE("repeated calls accumulate") {
    const auto loss = sum(w);
    backward(loss);
    CHECK(w.grad() == mat(1, 3, {2, 2, 2}));
  }

  auto v = Tf::parameter({2}, mat(1, 2, {1, 2}));
  backward(sum(mul(v, v)));
  CHECK(v.grad() == mat(1, 2, {2, 4}));

  CHECK_THROWS_AS(backward(mul(v, v)), ContractError);
}

TEST_CASE("backward visits each node once, including shared subexpressions") {
  auto x = Td::parameter({2}, RowMatrix<double>{{1.5, -0.5}});
  const auto y = mul(x, x);
  const auto z = sum(add(y, y));  // diamond on y
  const auto stats = backward(z);
  CHECK(stats.nodes_visited == reachable_nodes(z));
  CHECK(stats.nodes_visited == 4);  // leaf, mul, add, sum
  CHECK(x.grad()(0, 0) == doctest::Approx(4 * 1.5));
}

TEST_CASE("after backward every reachable requires-grad leaf has a gradient") {
  auto a = random_tensor<float>({3, 4}, 1, 1.0, true);
  auto b = random_tensor<float>({4, 2}, 2, 1.0, true);
  auto bias = random_tensor<float>({2}, 3, 1.0, true);
  auto frozen = random_tensor<float>({3, 2}, 4);
  backward(sum(add(add_bias(matmul(a, b), bias), frozen)));
  CHECK(a.has_grad());
  CHECK(b.has_grad());
  CHECK(bias.has_grad());
  CHECK_FALSE(frozen.has_grad());
  CHECK(a.grad().rows() == a.rows());
  CHECK(a.grad().cols() == a.cols());
}

TEST_CASE("backward is bitwise deterministic") {
  auto run = [] {
    auto a = random_tensor<float>({4, 6}, 11, 1.0, true);
    auto g = random_tensor<float>({6}, 12, 1.0, true);
    auto b = random_tensor<float>({6}, 13, 1.0, true);
    const auto y = gelu(layer_norm(softmax_rows(a, 1.3f), g, b));
    backward(mean(mul(y, y)));
    return std::make_tuple(RowMatrix<float>(a.grad()), RowMatrix<float>(g.grad()), RowMatrix<float>(b.grad()));
  };
  const auto first = run();
  const auto second = run();
  CHECK(std::get<0>(first) == std::get<0>(second));
  CHECK(std::get<1>(first) == std::get<1>(second));
  CHECK(std::get<2>(first) == std::get<2>(second));
}

TEST_CASE("gradcheck") {
  SUBCASE("sum has a constant gradient") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      CHECK(gradcheck<double>([](const Td& x) { return sum(x); }, random_tensor<double>({3, 3}, seed), 1e-3) < 1e-6);
    }
  }
  SUBCASE("softmax then sum has a vanishing gradient") {
    // The gradient is zero for every step; a wide step keeps the difference quotient above
    // the rounding floor of the 1e-8 denominator.
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const double err = gradcheck<double>([](const Td& x) { return sum(softmax_rows(x)); },
                                           random_tensor<double>({2, 4}, seed), 0.1);
      CHECK(err < 1e-6);
    }
  }
}

TEST_CASE("every differentiable op passes gradcheck on 20 seeds") {
  using Fn = std::function<Td(const Td&)>;
  struct Case {
    const char* name;
    Shape shape;
    Fn f;
  };
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto w34 = random_tensor<double>({3, 4}, seed + 1000);
    const auto w43 = random_tensor<double>({4, 3}, seed + 2000);
    const auto v4 = random_tensor<double>({4}, seed + 3000);
    const auto other = random_tensor<double>({3, 4}, seed + 4000);
    const auto probs = softmax_rows(random_tensor<double>({3, 4}, seed + 5000));
    const std::vector<int> ids{2, 0, 2, 1};
    const std::vector<int> labels{0, 3, 1};
    const std::vector<Case> cases{
        {"matmul-left", {3, 4}, [&](const Td& x) { return sum(mul(matmul(x, w43), matmul(x, w43))); }},
        {"matmul-right", {4, 3}, [&](const Td& x) { return sum(mul(matmul(w34, x), matmul(w34, x))); }},
        {"transpose", {3, 4}, [&](const Td& x) { return sum(mul(transpose(x), w43)); }},
        {"add/sub/mul", {3, 4}, [&](const Td& x) { return sum(mul(add(x, other), sub(x, other))); }},
        {"scale", {3, 4}, [&](const Td& x) { return sum(mul(scale(x, 0.37), x)); }},
        {"add_bias", {4}, [&](const Td& x) { return sum(mul(add_bias(other, x), other)); }},
        {"mean", {3, 4}, [&](const Td& x) { return mean(mul(x, other)); }},
        {"mse", {3, 4}, [&](const Td& x) { return mse(x, other); }},
        {"softmax_rows", {3, 4}, [&](const Td& x) { return sum(mul(softmax_rows(x, 1.7), other)); }},
        {"log_softmax_rows", {3, 4}, [&](const Td& x) { return sum(mul(log_softmax_rows(x), other)); }},
        {"log_floored", {3, 4}, [&](const Td& x) { return sum(mul(log_floored(softmax_rows(x), 1e-12), other)); }},
        {"kl_divergence/p", {3, 4}, [&](const Td& x) { return kl_divergence(softmax_rows(x), log_softmax_rows(other)); }},
        {"kl_divergence/q", {3, 4}, [&](const Td& x) { return kl_divergence(probs, log_softmax_rows(x)); }},
        {"layer_norm", {3, 4}, [&](const Td& x) { return sum(mul(layer_norm(x, v4, v4), other)); }},
        {"layer_norm/gain", {4}, [&](const Td& x) { return sum(mul(layer_norm(other, x, v4), other)); }},
        {"gelu", {3, 4}, [&](const Td& x) { return sum(mul(gelu(x), other)); }},
        {"slice/concat", {3, 4}, [&](const Td& x) {
           return sum(mul(concat_cols<double>({slice_cols(x, 2, 2), slice_cols(x, 0, 2)}), other));
         }},
        {"slice_rows", {3, 4}, [&](const Td& x) { return sum(mul(slice_rows(x, 1, 2), slice_rows(other, 0, 2))); }},
        {"gather_rows", {3, 4}, [&](const Td& x) { return sum(mul(gather_rows(x, ids), gather_rows(other, ids))); }},
        {"cross_entropy", {3, 4}, [&](const Td& x) { return cross_entropy(x, labels); }},
    };
    for (const auto& c : cases) {
      CAPTURE(c.name);
      CAPTURE(seed);
      const double err = gradcheck<double>(c.f, random_tensor<double>(c.shape, seed), kStep);
      CHECK(err < 1e-3);
    }
  }
}

TEST_CASE("straight_through passes gradients unchanged") {
  auto latent = random_tensor<float>({2, 3}, 5, 1.0, true);
  const RowMatrix<float> q = latent.value().array().round().matrix();
  const auto y = straight_through(latent, q);
  CHECK(y.value() == q);
  backward(sum(y));
  CHECK(latent.grad() == RowMatrix<float>::Ones(2, 3));
}
