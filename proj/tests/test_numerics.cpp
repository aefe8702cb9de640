#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <string>

#include "patchmixer/autodiff.hpp"
#include "patchmixer/rng.hpp"
#include "patchmixer/tensor.hpp"
#include "support/oracles.hpp"

using namespace pm;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Scalar probe: sum(y * w) with fixed random weights, so every output
// element contributes to the finite-difference signal.
NodePtr<double> weighted_sum(const NodePtr<double>& y, Rng& rng) {
  Tensor<double> w(y->value.shape);
  for (Index i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-1.0, 1.0);
  return sum(mul(y, make_constant(std::move(w))));
}

void check_against_fd(const std::function<NodePtr<double>()>& build,
                      const std::vector<NodePtr<double>>& leaves,
                      double tol = 1e-4) {
  auto root = build();
  backward(root);
  auto fd = oracle::finite_diff([&] { return build()->value[0]; }, leaves);
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    CAPTURE(i);
    CHECK(oracle::max_rel_err(leaves[i]->grad, fd[i]) < tol);
  }
}

}  // namespace

TEST_CASE("tensor shape bookkeeping") {
  Tensor<float> t({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK_THROWS_AS(Tensor<float>({2, 0}), std::invalid_argument);
  CHECK_THROWS_WITH_AS(Tensor<float>({2, 2}, {1.f, 2.f, 3.f}),
                       doctest::Contains("do not fill"), std::invalid_argument);
}

TEST_CASE("linear: identity weights pass input through") {
  auto x = make_constant(Tensor<double>({1, 2}, {1, 2}));
  auto w = make_constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  auto b = make_constant(Tensor<double>({2}, {0, 0}));
  auto y = linear(x, w, b);
  CHECK(y->value[0] == 1.0);
  CHECK(y->value[1] == 2.0);
}

TEST_CASE("linear: zero weights pass bias") {
  auto x = make_constant(Tensor<double>({1, 2}, {1, 2}));
  auto w = make_constant(Tensor<double>({2, 2}, {0, 0, 0, 0}));
  auto b = make_constant(Tensor<double>({2}, {3, 4}));
  auto y = linear(x, w, b);
  CHECK(y->value[0] == 3.0);
  CHECK(y->value[1] == 4.0);
}

TEST_CASE("linear: forward matches naive triple-loop matmul") {
  Rng rng(7);
  auto xv = random_tensor({4, 3}, rng);
  auto wv = random_tensor({3, 5}, rng);
  auto bv = random_tensor({5}, rng);
  auto y = linear(make_constant(xv), make_constant(wv), make_constant(bv));

  Tensor<double> want = oracle::naive_matmul(xv, wv);
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 5; ++j) want.at2(i, j) += bv[j];
  CHECK(oracle::max_rel_err(y->value, want) < 1e-12);
}

TEST_CASE("linear: dimension error names both shapes") {
  auto x = make_constant(Tensor<double>({2, 3}));
  auto w = make_constant(Tensor<double>({4, 5}));
  auto b = make_constant(Tensor<double>({5}));
  CHECK_THROWS_WITH_AS(linear(x, w, b), doctest::Contains("[2x3]"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(linear(x, w, b), doctest::Contains("[4x5]"),
                       std::invalid_argument);
}

TEST_CASE("linear: applies over the last axis of higher-rank input") {
  Rng rng(21);
  auto xv = random_tensor({2, 3, 4}, rng);
  auto wv = random_tensor({4, 2}, rng);
  auto bv = random_tensor({2}, rng);
  auto y = linear(make_constant(xv), make_constant(wv), make_constant(bv));
  REQUIRE(y->value.shape == Shape{2, 3, 2});
  for (Index b = 0; b < 2; ++b)
    for (Index r = 0; r < 3; ++r)
      for (Index c = 0; c < 2; ++c) {
        double acc = bv[c];
        for (Index k = 0; k < 4; ++k) acc += xv.at3(b, r, k) * wv.at2(k, c);
        CHECK(y->value.at3(b, r, c) == doctest::Approx(acc).epsilon(1e-12));
      }
}

TEST_CASE("grouped_conv1d: box filter on constant input") {
  auto x = make_constant(Tensor<double>({1, 4}, {1, 1, 1, 1}));
  auto k = make_constant(Tensor<double>({1, 1, 2}, {1, 1}));
  auto b = make_constant(Tensor<double>({1}, {0}));
  auto y = grouped_conv1d(x, k, b, 2, 1);
  REQUIRE(y->value.shape == Shape{1, 2});
  CHECK(y->value[0] == 2.0);
  CHECK(y->value[1] == 2.0);
}

TEST_CASE("grouped_conv1d: zero depthwise kernel passes bias only") {
  // Depthwise over 3 channels, kernel of zeros with K == stride.
  Rng rng(2);
  auto xv = random_tensor({3, 8}, rng);
  auto k = make_constant(Tensor<double>::zeros({3, 1, 4}));
  auto b = make_constant(Tensor<double>({3}, {1.5, -2.0, 0.25}));
  auto y = grouped_conv1d(make_constant(xv), k, b, 4, 3);
  REQUIRE(y->value.shape == Shape{3, 2});
  for (Index c = 0; c < 3; ++c)
    for (Index t = 0; t < 2; ++t) CHECK(y->value.at2(c, t) == b->value[c]);
}

TEST_CASE("grouped_conv1d: depthwise matches naive sliding-dot oracle") {
  Rng rng(11);
  auto xv = random_tensor({6, 10}, rng);
  auto kv = random_tensor({6, 1, 3}, rng);
  std::vector<double> bias(6);
  for (auto& v : bias) v = rng.uniform(-1.0, 1.0);
  auto y = grouped_conv1d(make_constant(xv), make_constant(kv),
                          make_constant(Tensor<double>({6}, bias)), 1, 6);
  Tensor<double> want = oracle::naive_conv1d(xv, kv, bias, 1, 6);
  REQUIRE(y->value.shape == want.shape);
  CHECK(oracle::max_rel_err(y->value, want) < 1e-12);
}

TEST_CASE("grouped_conv1d: two groups, batched input, against oracle") {
  Rng rng(12);
  auto kv = random_tensor({4, 2, 3}, rng);
  std::vector<double> bias(4);
  for (auto& v : bias) v = rng.uniform(-1.0, 1.0);
  auto bt = Tensor<double>({4}, bias);

  Tensor<double> xb({2, 4, 9});
  for (Index i = 0; i < xb.numel(); ++i) xb[i] = rng.uniform(-1.0, 1.0);
  auto y = grouped_conv1d(make_constant(xb), make_constant(kv), make_constant(bt), 2, 2);
  REQUIRE(y->value.shape == Shape{2, 4, 4});
  for (Index b = 0; b < 2; ++b) {
    Tensor<double> slice({4, 9});
    for (Index i = 0; i < slice.numel(); ++i) slice[i] = xb.data[b * 36 + i];
    Tensor<double> want = oracle::naive_conv1d(slice, kv, bias, 2, 2);
    for (Index i = 0; i < want.numel(); ++i) {
      CHECK(oracle::rel_err(y->value.data[b * want.numel() + i], want[i]) < 1e-12);
    }
  }
}

TEST_CASE("grouped_conv1d: error paths") {
  auto k = make_constant(Tensor<double>({2, 1, 5}));
  auto b = make_constant(Tensor<double>({2}));
  auto x_short = make_constant(Tensor<double>({2, 3}));
  CHECK_THROWS_WITH_AS(grouped_conv1d(x_short, k, b, 1, 2),
                       doctest::Contains("input shorter than kernel"),
                       std::invalid_argument);
  auto x = make_constant(Tensor<double>({3, 8}));
  CHECK_THROWS_WITH_AS(grouped_conv1d(x, k, b, 1, 2),
                       doctest::Contains("divisible by groups"),
                       std::invalid_argument);
}

TEST_CASE("grouped_conv1d: pointwise equals per-position linear map") {
  Rng rng(31);
  auto xv = random_tensor({5, 7}, rng);
  auto kv = random_tensor({4, 5, 1}, rng);
  auto bv = random_tensor({4}, rng);
  auto y = grouped_conv1d(make_constant(xv), make_constant(kv), make_constant(bv), 1, 1);

  // Same map through linear(): transpose x to [L, C], apply W = kernels^T.
  Tensor<double> xt({7, 5});
  for (Index c = 0; c < 5; ++c)
    for (Index t = 0; t < 7; ++t) xt.at2(t, c) = xv.at2(c, t);
  Tensor<double> w({5, 4});
  for (Index oc = 0; oc < 4; ++oc)
    for (Index ic = 0; ic < 5; ++ic) w.at2(ic, oc) = kv.at3(oc, ic, 0);
  auto yl = linear(make_constant(xt), make_constant(w), make_constant(bv));
  for (Index oc = 0; oc < 4; ++oc)
    for (Index t = 0; t < 7; ++t) {
      CHECK(oracle::rel_err(y->value.at2(oc, t), yl->value.at2(t, oc)) < 1e-12);
    }
}

TEST_CASE("grouped_conv1d: output length law over random valid shapes") {
  Rng rng(101);
  for (int trial = 0; trial < 200; ++trial) {
    const Index k = 1 + static_cast<Index>(rng.uniform_index(6));
    const Index len = k + static_cast<Index>(rng.uniform_index(40));
    const Index stride = 1 + static_cast<Index>(rng.uniform_index(5));
    const Index channels = 1 + static_cast<Index>(rng.uniform_index(4));
    auto x = make_constant(random_tensor({channels, len}, rng));
    auto kr = make_constant(random_tensor({channels, 1, k}, rng));
    auto b = make_constant(Tensor<double>::zeros({channels}));
    auto y = grouped_conv1d(x, kr, b, stride, channels);
    CHECK(y->value.shape[1] == (len - k) / stride + 1);
  }
}

TEST_CASE("gelu: fixed points and erf oracle") {
  auto x = make_constant(Tensor<double>({3}, {0.0, 10.0, 1.0}));
  auto y = gelu(x);
  CHECK(y->value[0] == 0.0);
  CHECK(std::abs(y->value[1] - 10.0) < 1e-6);
  // Phi(1) by quadrature, independent of std::erf.
  const double phi1 = oracle::normal_cdf_quadrature(1.0);
  CHECK(std::abs(y->value[2] - 1.0 * phi1) < 1e-9);
  CHECK(std::abs(y->value[2] - 0.8413447460685429) < 1e-9);
}

TEST_CASE("batchnorm1d: constant channels map to zero in train mode") {
  Tensor<double> xv({2, 3, 4});
  for (Index b = 0; b < 2; ++b)
    for (Index c = 0; c < 3; ++c)
      for (Index t = 0; t < 4; ++t) xv.at3(b, c, t) = static_cast<double>(c) * 7.0;
  auto gamma = make_param(Tensor<double>::full({3}, 1.0));
  auto beta = make_param(Tensor<double>::zeros({3}));
  BatchNormState<double> state(3);
  auto y = batchnorm1d(make_constant(xv), gamma, beta, state, Phase::train);
  for (Index i = 0; i < y->value.numel(); ++i) CHECK(y->value[i] == 0.0);
}

TEST_CASE("batchnorm1d: gamma zero passes beta") {
  Rng rng(5);
  auto x = make_constant(random_tensor({2, 2, 3}, rng));
  auto gamma = make_param(Tensor<double>::zeros({2}));
  auto beta = make_param(Tensor<double>::full({2}, 5.0));
  BatchNormState<double> state(2);
  auto y = batchnorm1d(x, gamma, beta, state, Phase::train);
  for (Index i = 0; i < y->value.numel(); ++i) CHECK(y->value[i] == 5.0);
}

TEST_CASE("batchnorm1d: train-mode output has zero mean, unit variance") {
  Rng rng(3);
  auto xv = random_tensor({2, 3, 4}, rng, -10.0, 10.0);
  auto gamma = make_param(Tensor<double>::full({3}, 1.0));
  auto beta = make_param(Tensor<double>::zeros({3}));
  BatchNormState<double> state(3);
  auto y = batchnorm1d(make_constant(xv), gamma, beta, state, Phase::train);
  for (Index c = 0; c < 3; ++c) {
    double s = 0.0, s2 = 0.0;
    for (Index b = 0; b < 2; ++b)
      for (Index t = 0; t < 4; ++t) {
        const double v = y->value.at3(b, c, t);
        s += v;
        s2 += v * v;
      }
    const double mu = s / 8.0;
    const double var = s2 / 8.0 - mu * mu;
    CHECK(std::abs(mu) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-5);
  }
}

TEST_CASE("batchnorm1d: running statistics update and eval-mode use") {
  Rng rng(9);
  auto xv = random_tensor({4, 2, 5}, rng, -3.0, 3.0);
  auto gamma = make_param(Tensor<double>::full({2}, 1.0));
  auto beta = make_param(Tensor<double>::zeros({2}));
  BatchNormState<double> state(2);
  batchnorm1d(make_constant(xv), gamma, beta, state, Phase::train);
  for (Index c = 0; c < 2; ++c) {
    double s = 0.0, s2 = 0.0;
    for (Index b = 0; b < 4; ++b)
      for (Index t = 0; t < 5; ++t) {
        s += xv.at3(b, c, t);
        s2 += xv.at3(b, c, t) * xv.at3(b, c, t);
      }
    const double mu = s / 20.0;
    const double var = (s2 / 20.0 - mu * mu) * 20.0 / 19.0;
    CHECK(state.running_mean[c] == doctest::Approx(0.1 * mu).epsilon(1e-12));
    CHECK(state.running_var[c] == doctest::Approx(0.9 + 0.1 * var).epsilon(1e-12));
  }

  // Eval mode must reproduce the closed form with the stored statistics.
  auto y = batchnorm1d(make_constant(xv), gamma, beta, state, Phase::eval);
  for (Index c = 0; c < 2; ++c) {
    const double inv = 1.0 / std::sqrt(state.running_var[c] + kBatchNormEps);
    for (Index b = 0; b < 4; ++b)
      for (Index t = 0; t < 5; ++t) {
        const double want = (xv.at3(b, c, t) - state.running_mean[c]) * inv;
        CHECK(y->value.at3(b, c, t) == doctest::Approx(want).epsilon(1e-12));
      }
  }
}

TEST_CASE("backward: sum gives ones") {
  auto x = make_param(Tensor<double>({3}, {4, 5, 6}));
  backward(sum(x));
  for (Index i = 0; i < 3; ++i) CHECK(x->grad[i] == 1.0);
}

TEST_CASE("backward: sum of squares") {
  auto x = make_param(Tensor<double>({2}, {1, 2}));
  backward(sum(mul(x, x)));
  CHECK(x->grad[0] == 2.0);
  CHECK(x->grad[1] == 4.0);
}

TEST_CASE("backward: non-scalar root is a contract violation") {
  auto x = make_param(Tensor<double>({3}, {1, 2, 3}));
  CHECK_THROWS_WITH_AS(backward(mul(x, x)), doctest::Contains("scalar"),
                       std::invalid_argument);
}

TEST_CASE("backward: repeated calls accumulate leaf gradients") {
  auto x = make_param(Tensor<double>({2}, {1, 2}));
  auto loss = sum(mul(x, x));
  backward(loss);
  backward(loss);
  CHECK(x->grad[0] == 4.0);
  CHECK(x->grad[1] == 8.0);
  zero_grad<double>({x});
  backward(loss);
  CHECK(x->grad[0] == 2.0);
}

TEST_CASE("backward: diamond-shaped graph accumulates both paths") {
  auto x = make_param(Tensor<double>({1}, {3}));
  auto y = add(mul(x, x), x);  // x^2 + x -> dy/dx = 2x + 1
  backward(sum(y));
  CHECK(x->grad[0] == 7.0);
}

TEST_CASE("finite differences: every differentiable op") {
  Rng rng(42);

  SUBCASE("linear") {
    auto x = make_param(random_tensor({4, 3}, rng));
    auto w = make_param(random_tensor({3, 5}, rng));
    auto b = make_param(random_tensor({5}, rng));
    Rng wr(1);
    check_against_fd([&] { return weighted_sum(linear(x, w, b), wr); }, {x, w, b});
  }
  SUBCASE("grouped_conv1d depthwise") {
    auto x = make_param(random_tensor({3, 10}, rng));
    auto k = make_param(random_tensor({3, 1, 4}, rng));
    auto b = make_param(random_tensor({3}, rng));
    Rng wr(2);
    check_against_fd(
        [&] { return weighted_sum(grouped_conv1d(x, k, b, 2, 3), wr); }, {x, k, b});
  }
  SUBCASE("grouped_conv1d two groups batched") {
    auto x = make_param(random_tensor({2, 4, 9}, rng));
    auto k = make_param(random_tensor({4, 2, 3}, rng));
    auto b = make_param(random_tensor({4}, rng));
    Rng wr(3);
    check_against_fd(
        [&] { return weighted_sum(grouped_conv1d(x, k, b, 1, 2), wr); }, {x, k, b});
  }
  SUBCASE("grouped_conv1d pointwise") {
    auto x = make_param(random_tensor({2, 5, 6}, rng));
    auto k = make_param(random_tensor({4, 5, 1}, rng));
    auto b = make_param(random_tensor({4}, rng));
    Rng wr(4);
    check_against_fd(
        [&] { return weighted_sum(grouped_conv1d(x, k, b, 1, 1), wr); }, {x, k, b});
  }
  SUBCASE("gelu") {
    auto x = make_param(random_tensor({17}, rng, -3.0, 3.0));
    Rng wr(5);
    check_against_fd([&] { return weighted_sum(gelu(x), wr); }, {x});
  }
  SUBCASE("batchnorm1d train") {
    auto x = make_param(random_tensor({2, 3, 4}, rng));
    auto g = make_param(random_tensor({3}, rng, 0.5, 1.5));
    auto b = make_param(random_tensor({3}, rng));
    Rng wr(6);
    check_against_fd(
        [&] {
          BatchNormState<double> state(3);  // fresh state per eval: pure function
          return weighted_sum(batchnorm1d(x, g, b, state, Phase::train), wr);
        },
        {x, g, b});
  }
  SUBCASE("batchnorm1d eval") {
    auto x = make_param(random_tensor({2, 3, 4}, rng));
    auto g = make_param(random_tensor({3}, rng, 0.5, 1.5));
    auto b = make_param(random_tensor({3}, rng));
    BatchNormState<double> state(3);
    for (Index c = 0; c < 3; ++c) {
      state.running_mean[c] = rng.uniform(-0.5, 0.5);
      state.running_var[c] = rng.uniform(0.5, 2.0);
    }
    Rng wr(7);
    check_against_fd(
        [&] { return weighted_sum(batchnorm1d(x, g, b, state, Phase::eval), wr); },
        {x, g, b});
  }
  SUBCASE("abs and smooth_l1") {
    auto x = make_param(random_tensor({12}, rng, -2.0, 2.0));
    Rng wr(8);
    check_against_fd([&] { return weighted_sum(abs_value(x), wr); }, {x});
    Rng wr2(9);
    check_against_fd([&] { return weighted_sum(smooth_l1(x, 1.0), wr2); }, {x});
  }
  SUBCASE("pad_last and unfold_windows") {
    auto x = make_param(random_tensor({2, 9}, rng));
    Rng wr(10);
    check_against_fd(
        [&] { return weighted_sum(unfold_windows(pad_last(x, 3), 4, 2), wr); }, {x});
  }
  SUBCASE("row_affine") {
    auto x = make_param(random_tensor({3, 4}, rng));
    Tensor<double> sc = random_tensor({3}, rng, 0.5, 2.0);
    Tensor<double> sh = random_tensor({3}, rng);
    Rng wr(11);
    check_against_fd([&] { return weighted_sum(row_affine(x, sc, sh), wr); }, {x});
  }
  SUBCASE("mean and reshape") {
    auto x = make_param(random_tensor({3, 4}, rng));
    check_against_fd([&] { return mean(reshape(x, {12})); }, {x});
  }
  SUBCASE("sub, scale, add_scalar") {
    auto a = make_param(random_tensor({6}, rng));
    auto b = make_param(random_tensor({6}, rng));
    Rng wr(12);
    check_against_fd(
        [&] { return weighted_sum(add_scalar(scale(sub(a, b), 2.5), -0.75), wr); },
        {a, b});
  }
}

TEST_CASE("forward determinism: identical seed gives identical bits") {
  auto run = [] {
    Rng rng(77);
    auto x = make_constant(random_tensor({3, 8}, rng));
    auto k = make_constant(random_tensor({3, 1, 4}, rng));
    auto b = make_constant(random_tensor({3}, rng));
    return gelu(grouped_conv1d(x, k, b, 2, 3))->value;
  };
  Tensor<double> a = run();
  Tensor<double> b = run();
  REQUIRE(a.shape == b.shape);
  for (Index i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("dropout: eval identity, train mask scaling") {
  Rng rng(13);
  auto x = make_param(random_tensor({50}, rng));
  Rng drop_rng(14);
  auto y_eval = dropout(x, 0.5, drop_rng, Phase::eval);
  CHECK(y_eval.get() == x.get());

  auto y = dropout(x, 0.5, drop_rng, Phase::train);
  int kept = 0;
  for (Index i = 0; i < 50; ++i) {
    if (y->value[i] != 0.0) {
      ++kept;
      CHECK(y->value[i] == doctest::Approx(2.0 * x->value[i]));
    }
  }
  CHECK(kept > 10);
  CHECK(kept < 50);
  CHECK_THROWS_AS(dropout(x, 1.0, drop_rng, Phase::train), std::invalid_argument);
}
