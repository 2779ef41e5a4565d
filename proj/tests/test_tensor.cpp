#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "readpvla/errors.hpp"
#include "readpvla/rng.hpp"
#include "readpvla/tensor.hpp"

using namespace readpvla;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  std::vector<double> data(n);
  for (double& v : data) v = rng.normal();
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

double max_rel_error(const std::vector<double>& got,
                     const std::vector<double>& want) {
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double scale = std::max({std::abs(got[i]), std::abs(want[i]), 1e-8});
    worst = std::max(worst, std::abs(got[i] - want[i]) / scale);
  }
  return worst;
}

// Checks reverse-mode gradients of a scalar-valued function against central
// differences, coordinate by coordinate.
void check_gradient(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                    double tol = 1e-4) {
  x.set_requires_grad(true);
  Tensor loss = f(x);
  backward(loss);
  const Tensor fd = finite_diff_grad(
      [&](const Tensor& probe) { return f(probe).item(); }, x, 1e-5);
  CHECK(max_rel_error(x.grad(), fd.data()) < tol);
}

}  // namespace

TEST_CASE("tensor construction validates shape against data length") {
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
  CHECK_THROWS_AS(Tensor::from_data({0}, {}), DimensionError);
  const Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.at(1, 2) == 6.0);
}

TEST_CASE("matmul identity and scalar cases") {
  const Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  const Tensor a = Tensor::from_data({2, 2}, {3, -1, 2, 7});
  CHECK(matmul(eye, a).data() == a.data());
  const Tensor s = matmul(Tensor::from_data({1, 1}, {2.0}),
                          Tensor::from_data({1, 1}, {3.0}));
  CHECK(s.item() == doctest::Approx(6.0));
}

TEST_CASE("matmul hand-expanded 2x2 by 2x1 against naive triple loop") {
  const Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  const Tensor b = Tensor::from_data({2, 1}, {5, 6});
  const Tensor c = matmul(a, b);
  CHECK(c.at(0, 0) == doctest::Approx(17.0));
  CHECK(c.at(1, 0) == doctest::Approx(39.0));

  // naive triple-loop oracle on random shapes
  Rng rng(11);
  const std::size_t m = 3, k = 4, n = 2;
  Tensor ra = random_tensor({m, k}, rng);
  Tensor rb = random_tensor({k, n}, rng);
  Tensor rc = matmul(ra, rb);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ra.at(i, p) * rb.at(p, j);
      CHECK(rc.at(i, j) == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("matmul rejects mismatched inner extents naming both shapes") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({4, 5});
  CHECK_THROWS_WITH_AS(matmul(a, b),
                       doctest::Contains("[2x3]"), DimensionError);
}

TEST_CASE("softmax rows: symmetry, analytic values, overflow safety") {
  const Tensor sym = softmax_rows(Tensor::from_data({1, 2}, {1.0, 1.0}));
  CHECK(sym.at(0, 0) == doctest::Approx(0.5));

  const Tensor analytic =
      softmax_rows(Tensor::from_data({1, 2}, {0.0, std::log(3.0)}));
  CHECK(analytic.at(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(analytic.at(0, 1) == doctest::Approx(0.75).epsilon(1e-12));

  const Tensor big = softmax_rows(Tensor::from_data({1, 2}, {1000.0, 1001.0}));
  const double e = std::exp(1.0);
  CHECK(std::isfinite(big.at(0, 0)));
  CHECK(big.at(0, 0) == doctest::Approx(1.0 / (1.0 + e)).epsilon(1e-12));
  CHECK(big.at(0, 1) == doctest::Approx(e / (1.0 + e)).epsilon(1e-12));

  CHECK_THROWS_AS(softmax_rows(Tensor::from_data({1, 2}, {std::nan(""), 0.0})),
                  NumericError);
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  Rng rng(5);
  const Tensor x = random_tensor({4, 7}, rng);
  const Tensor y = softmax_rows(x);
  for (std::size_t i = 0; i < 4; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 7; ++j) sum += y.at(i, j);
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
  const Tensor shifted = softmax_rows(affine(x, 1.0, 13.75));
  for (std::size_t k = 0; k < y.numel(); ++k)
    CHECK(std::abs(y.data()[k] - shifted.data()[k]) < 1e-12);
}

TEST_CASE("layer_norm matches hand values and centers rows") {
  const Tensor gain = Tensor::from_data({2}, {1.0, 1.0});
  const Tensor bias = Tensor::from_data({2}, {0.0, 0.0});
  const Tensor y =
      layer_norm(Tensor::from_data({1, 2}, {1.0, 3.0}), gain, bias, 0.0);
  CHECK(y.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(y.at(0, 1) == doctest::Approx(1.0).epsilon(1e-12));

  // constant row with positive eps maps to zeros pre-affine
  const Tensor z =
      layer_norm(Tensor::from_data({1, 2}, {4.0, 4.0}), gain, bias, 1e-5);
  CHECK(z.at(0, 0) == doctest::Approx(0.0));

  // degenerate guard
  const Tensor g1 = Tensor::from_data({1}, {1.0});
  const Tensor b1 = Tensor::from_data({1}, {0.0});
  CHECK_THROWS_AS(layer_norm(Tensor::from_data({1, 1}, {2.0}), g1, b1, 0.0),
                  NumericError);
}

TEST_CASE("layer_norm pre-affine rows have zero mean and unit variance") {
  Rng rng(17);
  const Tensor x = random_tensor({3, 5}, rng);
  const Tensor gain = Tensor::full({5}, 1.0);
  const Tensor bias = Tensor::zeros({5});
  const Tensor y = layer_norm(x, gain, bias, 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 5; ++j) mean += y.at(i, j);
    mean /= 5.0;
    for (std::size_t j = 0; j < 5; ++j)
      var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
    var /= 5.0;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("activations: centers and closed-form gelu value") {
  const Tensor zero = Tensor::from_data({1}, {0.0});
  CHECK(activation(Activation::kGelu, zero).item() == doctest::Approx(0.0));
  CHECK(activation(Activation::kTanh, zero).item() == doctest::Approx(0.0));
  CHECK(activation(Activation::kSigmoid, zero).item() == doctest::Approx(0.5));

  // 0.5*3*(1 + tanh(sqrt(2/pi)*(3 + 0.044715*27)))
  const double expected =
      0.5 * 3.0 *
      (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (3.0 + 0.044715 * 27.0)));
  CHECK(activation(Activation::kGelu, Tensor::from_data({1}, {3.0})).item() ==
        doctest::Approx(expected).epsilon(1e-15));
  CHECK(expected == doctest::Approx(2.9964).epsilon(1e-4));
}

TEST_CASE("backward: product rule and sum of squares") {
  Tensor x = Tensor::from_data({1, 1}, {2.0}, true);
  Tensor y = Tensor::from_data({1, 1}, {5.0}, true);
  backward(sum_all(mul(x, y)));
  CHECK(x.grad()[0] == doctest::Approx(5.0));
  CHECK(y.grad()[0] == doctest::Approx(2.0));

  Tensor v = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
  backward(sum_all(mul(v, v)));
  CHECK(v.grad()[0] == doctest::Approx(2.0));
  CHECK(v.grad()[1] == doctest::Approx(4.0));
  CHECK(v.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(backward(mul(x, x)), ConfigError);
}

TEST_CASE("repeated backward accumulates leaf gradients") {
  Tensor x = Tensor::from_data({1}, {3.0}, true);
  const Tensor loss = sum_all(mul(x, x));
  backward(loss);
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(12.0));
  x.zero_grad();
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("finite differences: analytic and linear cases") {
  const Tensor x = Tensor::from_data({1}, {3.0});
  const Tensor g = finite_diff_grad(
      [](const Tensor& t) { return t.data()[0] * t.data()[0]; }, x);
  CHECK(g.data()[0] == doctest::Approx(6.0).epsilon(1e-6));

  const Tensor lin = finite_diff_grad(
      [](const Tensor& t) { return 4.0 * t.data()[0] - 7.0; }, x, 0.37);
  CHECK(lin.data()[0] == doctest::Approx(4.0).epsilon(1e-9));

  CHECK_THROWS_AS(
      finite_diff_grad([](const Tensor& t) { return std::log(-1.0 - t.data()[0] * 0.0); },
                       x),
      NumericError);
}

TEST_CASE("gradient fidelity of every primitive against finite differences") {
  Rng rng(23);

  Rng other_rng(31);
  const Tensor other = random_tensor({4, 3}, other_rng);
  check_gradient(
      [other](const Tensor& x) {
        return sum_all(mul(matmul(x, other), matmul(x, other)));
      },
      random_tensor({2, 4}, rng));

  check_gradient([](const Tensor& x) { return sum_all(mul(softmax_rows(x), softmax_rows(x))); },
                 random_tensor({3, 4}, rng));

  check_gradient(
      [](const Tensor& x) {
        const Tensor gain = Tensor::from_data({4}, {1.1, 0.9, 1.3, 0.7});
        const Tensor bias = Tensor::from_data({4}, {0.1, -0.2, 0.3, 0.0});
        const Tensor y = layer_norm(x, gain, bias, 1e-5);
        return sum_all(mul(y, y));
      },
      random_tensor({3, 4}, rng));

  for (auto kind : {Activation::kGelu, Activation::kTanh, Activation::kSigmoid}) {
    check_gradient(
        [kind](const Tensor& x) {
          const Tensor y = activation(kind, x);
          return sum_all(mul(y, y));
        },
        random_tensor({2, 5}, rng));
  }

  check_gradient(
      [](const Tensor& x) {
        const Tensor t = transpose(x);
        return sum_all(mul(t, t));
      },
      random_tensor({2, 3}, rng));

  check_gradient(
      [](const Tensor& x) {
        const Tensor part = slice_cols(slice_rows(x, 1, 2), 0, 2);
        return sum_all(mul(part, part));
      },
      random_tensor({4, 3}, rng));

  check_gradient(
      [](const Tensor& x) {
        const Tensor y = concat_cols({x, affine(x, 2.0, 0.0)});
        const Tensor z = concat_rows({y, y});
        return sum_all(mul(z, z));
      },
      random_tensor({2, 3}, rng));

  check_gradient(
      [](const Tensor& x) {
        const Tensor m = mean_rows(x);
        return sum_all(mul(m, m));
      },
      random_tensor({4, 3}, rng));

  check_gradient(
      [](const Tensor& x) {
        const Tensor y = l2_normalize_rows(x);
        const Tensor probe = Tensor::from_data({2, 3}, {0.3, -1.2, 0.5, 2.0, 0.1, -0.4});
        return sum_all(mul(y, probe));
      },
      random_tensor({2, 3}, rng));

  check_gradient(
      [](const Tensor& x) {
        return bce_with_logits_mean(x, {1.0, 0.0, 1.0, 0.0});
      },
      random_tensor({4}, rng));

  check_gradient(
      [](const Tensor& x) {
        const Tensor bias = Tensor::from_data({3}, {0.5, -0.3, 0.2});
        const Tensor y = add_row_bias(x, bias);
        return sum_all(mul(y, y));
      },
      random_tensor({4, 3}, rng));
}

TEST_CASE("gradients flow only where required and skip frozen branches") {
  Tensor trainable = Tensor::from_data({1, 2}, {1.0, 2.0}, true);
  Tensor frozen = Tensor::from_data({1, 2}, {3.0, 4.0}, false);
  backward(sum_all(mul(add(trainable, frozen), add(trainable, frozen))));
  CHECK(trainable.grad()[0] == doctest::Approx(8.0));
  CHECK_FALSE(frozen.has_grad());
}

TEST_CASE("forward evaluation is deterministic bit for bit") {
  Rng rng(41);
  const Tensor x = random_tensor({5, 6}, rng);
  const Tensor gain = Tensor::full({5}, 1.0);
  const Tensor bias = Tensor::zeros({5});
  auto run = [&]() {
    return layer_norm(softmax_rows(matmul(x, transpose(x))), gain, bias, 1e-6)
        .data();
  };
  CHECK(run() == run());
}

TEST_CASE("tape visits each node once even with shared subexpressions") {
  Tensor x = Tensor::from_data({1}, {2.0}, true);
  const Tensor shared = mul(x, x);           // x^2
  const Tensor loss = sum_all(mul(shared, shared));  // x^4
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(32.0));  // 4 x^3
}
