#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "gma/tensor.hpp"

using gma::Tensor;

namespace {

Tensor vec(std::vector<double> v, bool rg = false) {
  size_t n = v.size();
  return Tensor::from({n}, std::move(v), rg);
}

}  // namespace

TEST_CASE("matmul identity and hand products") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor c = gma::matmul(eye, a);
  CHECK(c.at({0, 0}) == 1.0);
  CHECK(c.at({0, 1}) == 2.0);
  CHECK(c.at({1, 0}) == 3.0);
  CHECK(c.at({1, 1}) == 4.0);

  Tensor r = gma::matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
  CHECK(r.item() == 11.0);
}

TEST_CASE("matmul backward accumulates dA = dC B^T") {
  Tensor a = Tensor::from({1, 2}, {5, 7}, true);
  Tensor b = Tensor::from({2, 1}, {1, 1});
  gma::sum(gma::matmul(a, b)).backward();
  auto g = a.grad();
  CHECK(g[0] == 1.0);
  CHECK(g[1] == 1.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::from({2, 3}, std::vector<double>(6, 0.0));
  Tensor b = Tensor::from({2, 2}, std::vector<double>(4, 0.0));
  CHECK_THROWS_WITH(gma::matmul(a, b),
                    Catch::Matchers::ContainsSubstring("[2x3]") &&
                        Catch::Matchers::ContainsSubstring("[2x2]"));
}

TEST_CASE("softmax basics") {
  Tensor u = gma::softmax(vec({0, 0, 0, 0}), 0);
  for (size_t i = 0; i < 4; ++i) CHECK(u.data()[i] == Catch::Approx(0.25).margin(1e-15));

  Tensor big = gma::softmax(vec({1000, 1000}), 0);
  CHECK(big.data()[0] == Catch::Approx(0.5).margin(1e-15));
  CHECK(big.data()[1] == Catch::Approx(0.5).margin(1e-15));

  Tensor t = gma::softmax(vec({0, std::log(3.0)}), 0);
  CHECK(t.data()[0] == Catch::Approx(0.25).margin(1e-12));
  CHECK(t.data()[1] == Catch::Approx(0.75).margin(1e-12));
}

TEST_CASE("softmax rows sum to 1 for large-magnitude inputs") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> d(-1e4, 1e4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(8);
    for (double& x : v) x = d(rng);
    Tensor s = gma::softmax(Tensor::from({2, 4}, std::move(v)), 1);
    for (size_t r = 0; r < 2; ++r) {
      double total = 0;
      for (size_t j = 0; j < 4; ++j) total += s.at({r, j});
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("elementwise basics") {
  CHECK(gma::sigmoid(Tensor::scalar(0)).item() == Catch::Approx(0.5));
  CHECK(gma::tanh(Tensor::scalar(0)).item() == 0.0);
  Tensor m = gma::minimum(vec({3, 1, 2}), vec({2, 2, 2}));
  CHECK(m.data()[0] == 2.0);
  CHECK(m.data()[1] == 1.0);
  CHECK(m.data()[2] == 2.0);
}

TEST_CASE("broadcast shape mismatch is a dimension error") {
  Tensor a = Tensor::from({3}, {1, 2, 3});
  Tensor b = Tensor::from({2}, {1, 2});
  CHECK_THROWS_AS(gma::add(a, b), gma::ShapeError);
}

TEST_CASE("broadcasting follows trailing-dimension rules") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor row = Tensor::from({3}, {10, 20, 30});
  Tensor col = Tensor::from({2, 1}, {100, 200});
  Tensor r = gma::add(a, row);
  CHECK(r.at({1, 2}) == 36.0);
  Tensor c = gma::add(a, col);
  CHECK(c.at({0, 0}) == 101.0);
  CHECK(c.at({1, 0}) == 204.0);

  // [2x3x1] * [4] -> [2x3x4]
  Tensor cube = gma::mul(gma::reshape(a, {2, 3, 1}), vec({1, 2, 3, 4}));
  REQUIRE(cube.shape() == gma::Shape{2, 3, 4});
  CHECK(cube.at({1, 2, 3}) == 24.0);
}

TEST_CASE("backward simple cases") {
  Tensor x = vec({1, 2, 3}, true);
  gma::sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);

  Tensor y = vec({2}, true);
  gma::sum(gma::mul(y, y)).backward();
  CHECK(y.grad()[0] == Catch::Approx(4.0));

  Tensor z = vec({0}, true);
  gma::sum(gma::sigmoid(z)).backward();
  CHECK(z.grad()[0] == Catch::Approx(0.25));
}

TEST_CASE("backward requires scalar root") {
  Tensor x = vec({1, 2}, true);
  Tensor y = gma::mul(x, x);
  CHECK_THROWS_AS(y.backward(), gma::ContractError);
}

TEST_CASE("second backward without zero_grad is an error") {
  Tensor x = vec({1, 2}, true);
  Tensor loss = gma::sum(gma::mul(x, x));
  loss.backward();
  CHECK_THROWS_AS(loss.backward(), gma::ContractError);
  loss.zero_grad();
  x.zero_grad();
  loss.backward();
  CHECK(x.grad()[0] == Catch::Approx(2.0));
}

TEST_CASE("reused tensor sums both contributions") {
  Tensor x = vec({1.5}, true);
  gma::sum(gma::add(x, x)).backward();
  CHECK(x.grad()[0] == Catch::Approx(2.0));
}

TEST_CASE("gradients accumulate across separate graphs until zero_grad") {
  Tensor x = vec({3}, true);
  gma::sum(x).backward();
  gma::sum(gma::mul_scalar(x, 2.0)).backward();
  CHECK(x.grad()[0] == Catch::Approx(3.0));
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("finite_diff_check on closed forms") {
  Tensor x = vec({0.3, -0.7, 1.1});
  CHECK(gma::finite_diff_check([](const Tensor& t) { return gma::sum(t); }, x) < 1e-10);

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> d(-1, 1);
  std::vector<double> v(5);
  for (double& e : v) e = d(rng);
  Tensor x5 = vec(v);
  CHECK(gma::finite_diff_check([](const Tensor& t) { return gma::sum(gma::mul(t, t)); }, x5) < 1e-6);
}

TEST_CASE("finite_diff_check rejects non-finite evaluations") {
  Tensor x = vec({-1.0});
  CHECK_THROWS_AS(
      gma::finite_diff_check([](const Tensor& t) { return gma::sum(gma::log(t)); }, x),
      gma::ContractError);
}

TEST_CASE("random op compositions pass the gradient check") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> d(-2, 2);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> v(12);
    for (double& e : v) e = d(rng);
    Tensor x = Tensor::from({3, 4}, std::move(v));
    std::vector<double> w(8);
    for (double& e : w) e = d(rng);
    Tensor m = Tensor::from({4, 2}, std::move(w));
    auto f = [&m](const Tensor& t) {
      Tensor h = gma::tanh(gma::matmul(t, m));
      Tensor s = gma::softmax(gma::mul_scalar(h, 1.7), 1);
      Tensor g = gma::sigmoid(gma::sub(s, gma::mean(h, 1, true)));
      Tensor e = gma::exp(gma::mul_scalar(g, 0.5));
      return gma::sum(gma::mul(e, g));
    };
    CHECK(gma::finite_diff_check(f, x) < 1e-4);
  }
}

TEST_CASE("axis reductions and cumsum") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor s0 = gma::sum(a, 0);
  REQUIRE(s0.shape() == gma::Shape{3});
  CHECK(s0.data()[0] == 5.0);
  Tensor s1 = gma::sum(a, 1, true);
  REQUIRE(s1.shape() == gma::Shape{2, 1});
  CHECK(s1.data()[1] == 15.0);

  Tensor c = gma::cumsum(a, 0);
  CHECK(c.at({1, 0}) == 5.0);
  CHECK(c.at({1, 2}) == 9.0);

  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto f = [](const Tensor& t) { return gma::sum(gma::mul(gma::cumsum(t, 0), gma::cumsum(t, 1))); };
  CHECK(gma::finite_diff_check(f, x) < 1e-6);
}

TEST_CASE("take_rows gathers and scatter-adds") {
  Tensor e = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  Tensor g = gma::take_rows(e, {2, 0, 2});
  CHECK(g.at({0, 1}) == 6.0);
  CHECK(g.at({1, 0}) == 1.0);
  gma::sum(g).backward();
  CHECK(e.grad()[4] == 2.0);  // row 2 used twice
  CHECK(e.grad()[0] == 1.0);
  CHECK(e.grad()[2] == 0.0);
  CHECK_THROWS_AS(gma::take_rows(e, {3}), gma::ContractError);
}

TEST_CASE("slice and concat round-trip with gradients") {
  Tensor a = Tensor::from({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}, true);
  Tensor left = gma::slice_last(a, 0, 2);
  Tensor right = gma::slice_last(a, 2, 2);
  Tensor back = gma::concat_last({left, right});
  REQUIRE(back.shape() == a.shape());
  for (size_t i = 0; i < 8; ++i) CHECK(back.data()[i] == a.data()[i]);
  gma::sum(gma::mul(back, back)).backward();
  for (size_t i = 0; i < 8; ++i) CHECK(a.grad()[i] == Catch::Approx(2.0 * a.data()[i]));
}

TEST_CASE("no-grad scope builds no tape") {
  Tensor x = vec({1, 2}, true);
  {
    gma::NoGradScope ng;
    Tensor y = gma::sum(gma::mul(x, x));
    CHECK_FALSE(y.requires_grad());
  }
  Tensor y = gma::sum(gma::mul(x, x));
  CHECK(y.requires_grad());
}

TEST_CASE("forward ops keep values finite in documented domains") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> d(-2, 2);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(6);
    for (double& e : v) e = d(rng);
    Tensor x = Tensor::from({2, 3}, std::move(v));
    Tensor y = gma::softmax(gma::tanh(gma::exp(x)), 1);
    for (double e : y.data()) CHECK(std::isfinite(e));
  }
}
