// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <set>

#include "kdqat/quantized_view.hpp"
#include "support.hpp"

using namespace kdqat;
using kdqat::testing::micro_config;
using kdqat::testing::random_matrix;
using kdqat::testing::random_model;
using kdqat::testing::random_tokens;

namespace {

struct PlainTernary {
  std::vector<int> codes;
  double alpha = 0.0;
};

// Straight re-evaluation of the threshold rule over a flat list.
PlainTernary brute_force(const std::vector<double>& w, double k) {
  double total = 0.0;
  for (double v : w) total += std::fabs(v);
  const double delta = k * (total / static_cast<double>(w.size()));
  PlainTernary out;
  double kept = 0.0;
  int count = 0;
  for (double v : w) {
    if (std::fabs(v) > delta) {
      out.codes.push_back(v > 0 ? 1 : -1);
      kept += std::fabs(v);
      ++count;
    } else {
      out.codes.push_back(0);
    }
  }
  out.alpha = count ? kept / count : 0.0;
  return out;
}

template <typename Scalar>
std::size_t distinct_values(const RowMatrix<Scalar>& m) {
  return std::set<Scalar>(m.data(), m.data() + m.size()).size();
}

}  // namespace

TEST_CASE("QuantSpec validation") {
  QuantSpec s = QuantSpec::ternary();
  CHECK_NOTHROW(s.validate());
  s.threshold_factor = 0.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = QuantSpec::ternary();
  s.activation_bits = 4;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK_FALSE(QuantSpec::off().enabled());
}

TEST_CASE("ternarize") {
  SUBCASE("worked example") {
    const Eigen::RowVector4d w(0.5, -0.8, 0.05, 0.0);
    const auto t = ternarize(w, Granularity::whole_tensor, 0.7);
    // delta = 0.7 * 1.35 / 4 = 0.23625, survivors {0.5, 0.8}
    CHECK(t.codes(0, 0) == 1);
    CHECK(t.codes(0, 1) == -1);
    CHECK(t.codes(0, 2) == 0);
    CHECK(t.codes(0, 3) == 0);
    CHECK(t.scales(0) == doctest::Approx(0.65).epsilon(1e-12));
  }
  SUBCASE("constant tensor keeps every entry") {
    const Eigen::RowVector3d w(0.3, 0.3, 0.3);
    const auto t = ternarize(w, Granularity::whole_tensor, 0.7);
    CHECK((t.codes.array() == 1).all());
    CHECK(t.scales(0) == doctest::Approx(0.3));
  }
  SUBCASE("all zeros") {
    const auto t = ternarize(Eigen::MatrixXd::Zero(3, 4), Granularity::per_row, 0.7);
    CHECK((t.codes.array() == 0).all());
    CHECK(t.scales.isZero());
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(ternarize(Eigen::MatrixXd(0, 3), Granularity::whole_tensor), InputError);
    Eigen::MatrixXd bad = Eigen::MatrixXd::Ones(2, 2);
    bad(1, 1) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(ternarize(bad, Granularity::whole_tensor), NumericError);
  }
}

TEST_CASE("ternarize matches a brute-force re-evaluation on 1000 tensors") {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<int> extent(1, 9);
  std::uniform_real_distribution<double> kpick(0.2, 1.5);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Index rows = extent(rng);
    const Index cols = extent(rng);
    const double k = seed % 2 ? 0.7 : kpick(rng);
    const RowMatrix<float> w = random_matrix<float>(rows, cols, seed, 0.5);

    const auto whole = ternarize(w, Granularity::whole_tensor, k);
    std::vector<double> flat(w.data(), w.data() + w.size());
    const auto oracle = brute_force(flat, k);
    CHECK(whole.scales(0) == oracle.alpha);
    CHECK(std::equal(oracle.codes.begin(), oracle.codes.end(), whole.codes.data(),
                     [](int a, std::int8_t b) { return a == b; }));

    const auto rowwise = ternarize(w, Granularity::per_row, k);
    for (Index r = 0; r < rows; ++r) {
      std::vector<double> row(w.row(r).data(), w.row(r).data() + cols);
      const auto ro = brute_force(row, k);
      CHECK(rowwise.scales(r) == ro.alpha);
      for (Index c = 0; c < cols; ++c) CHECK(rowwise.codes(r, c) == ro.codes[static_cast<std::size_t>(c)]);
    }
  }
}

TEST_CASE("alpha is the L2-optimal scale for its code pattern") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const RowMatrix<double> w = random_matrix<double>(3, 4, seed);
    const auto t = ternarize(w, Granularity::whole_tensor, 0.7);
    const RowMatrix<double> codes = t.codes.cast<double>();
    auto err = [&](double a) { return (w - a * codes).squaredNorm(); };
    const double best = err(t.scales(0));
    double swept = best;
    for (double a = 0.0; a <= 3.0; a += 1e-3) swept = std::min(swept, err(a));
    CHECK(best <= swept + 1e-12);
  }
}

TEST_CASE("quantize_activation") {
  CHECK(quantize_activation<float>(RowMatrix<float>::Zero(2, 3)).isZero());

  const RowMatrix<double> x{{-1.0, 0.5}};
  const auto q = quantize_activation<double>(x);
  CHECK(q(0, 0) == doctest::Approx(-1.0));
  CHECK(q(0, 1) == doctest::Approx(64.0 / 127.0).epsilon(1e-12));  // round(63.5) = 64
  CHECK(quantize_activation<double>(RowMatrix<double>{{1.0, -0.5}})(0, 1) == doctest::Approx(-64.0 / 127.0));

  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const RowMatrix<float> a = random_matrix<float>(4, 5, seed, 3.0);
    const RowMatrix<float> qa = quantize_activation<float>(a);
    CHECK(quantize_activation<float>(qa) == qa);
    const double s = static_cast<double>(a.cwiseAbs().maxCoeff()) / 127.0;
    CHECK((qa.cast<double>() - a.cast<double>()).cwiseAbs().maxCoeff() <= s / 2 * (1 + 1e-6));
  }
}

TEST_CASE("straight-through wrappers") {
  auto latent = kdqat::testing::random_tensor<float>({3, 4}, 7, 1.0, true);
  const auto q = ternarize(latent.value(), Granularity::whole_tensor, 0.7).dequantize<float>();
  const auto wrapped = ste_wrap<float>(latent, [](const RowMatrix<float>& v) {
    return ternarize(v, Granularity::whole_tensor, 0.7).dequantize<float>();
  });
  CHECK(wrapped.value() == q);
  backward(sum(wrapped));
  CHECK(latent.grad() == RowMatrix<float>::Ones(3, 4));

  SUBCASE("gradient equals the same graph with the quantized values plugged in") {
    auto latent2 = kdqat::testing::random_tensor<double>({3, 4}, 8, 1.0, true);
    const auto other = kdqat::testing::random_tensor<double>({4, 2}, 9);
    backward(sum(gelu(matmul(fake_ternarize(latent2, Granularity::per_row, 0.7), other))));
    auto swapped = Tensor<double>::parameter(
        {3, 4}, ternarize(latent2.value(), Granularity::per_row, 0.7).dequantize<double>());
    backward(sum(gelu(matmul(swapped, other))));
    CHECK(latent2.grad() == swapped.grad());
  }
}

TEST_CASE("quantized_view") {
  const auto model = random_model<float>(micro_config(), 4);
  const auto tokens = random_tokens(6, 12, 4);

  SUBCASE("all-off spec reproduces the plain forward bitwise") {
    const auto plain = forward(model, tokens, false);
    const auto off = forward(quantized_view(model, QuantSpec::off()), tokens, false);
    CHECK(plain.logits.value() == off.logits.value());
  }

  SUBCASE("effective weights take at most three values per group") {
    const auto view = quantized_view(model, QuantSpec::ternary());
    for (const auto& layer : view.params.layers) {
      for (const auto* w : {&layer.query_weight, &layer.key_weight, &layer.value_weight, &layer.output_weight,
                            &layer.ffn_in_weight, &layer.ffn_out_weight}) {
        CHECK(distinct_values(w->value()) <= 3);
      }
      CHECK(distinct_values(layer.query_bias.value()) > 3);  // biases stay full precision
    }
    const auto& emb = view.params.token_embedding.value();
    for (Index r = 0; r < emb.rows(); ++r) CHECK(distinct_values(RowMatrix<float>(emb.row(r))) <= 3);
    CHECK(view.params.position_embedding.value() == model.params().position_embedding.value());
  }

  SUBCASE("latent gradients equal the gradients of a model holding the quantized values") {
    auto wide = random_model<double>(micro_config(), 5);
    QuantSpec spec = QuantSpec::ternary();
    spec.activation_bits = 0;
    const std::vector<int> label{1};
    backward(cross_entropy(forward(wide, tokens, false, spec).logits, label));

    auto swapped = wide.clone();
    const auto view = quantized_view(wide, spec);
    auto src = view.params;
    std::vector<RowMatrix<double>> effective;
    visit_parameters(src, [&](const std::string&, Tensor<double>& t) { effective.push_back(t.value()); });
    std::size_t i = 0;
    visit_parameters(swapped.params(), [&](const std::string&, Tensor<double>& t) { t.mutable_value() = effective[i++]; });
    swapped.zero_grad();
    backward(cross_entropy(forward(swapped, tokens, false).logits, label));

    const auto a = wide.named_parameters();
    const auto b = swapped.named_parameters();
    for (std::size_t j = 0; j < a.size(); ++j) {
      CAPTURE(a[j].first);
      REQUIRE(a[j].second.has_grad() == b[j].second.has_grad());
      if (a[j].second.has_grad()) CHECK(a[j].second.grad() == b[j].second.grad());
    }
  }
}

TEST_CASE("compression accounting for BERT shapes") {
  const auto base = compression(bert_parameter_groups(12, 768, 3072));
  const auto large = compression(bert_parameter_groups(24, 1024, 4096));
  CHECK(base.ratio() == doctest::Approx(14.9).epsilon(0.01));
  CHECK(large.ratio() > base.ratio());
  CHECK(large.ratio() >= 14.9);
  CHECK(large.ratio() <= 15.4 * 1.01);

  const auto cfg = micro_config();
  const auto off = compression(parameter_groups(cfg, QuantSpec::off()));
  CHECK(off.ratio() == doctest::Approx(1.0));
  CHECK(off.full_precision_bits == doctest::Approx(32.0 * static_cast<double>(count_params(cfg))));
  CHECK(compression(parameter_groups(cfg, QuantSpec::ternary())).ratio() > 1.0);
}
