#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "cvslt/autodiff.hpp"
#include "cvslt/gradcheck.hpp"
#include "gradient_suite.hpp"

using namespace cvslt;
using Catch::Approx;
using testing::random_param;

TEST_CASE("matmul hand cases and shape errors", "[autodiff]") {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 1}, {1, 1});
  auto c = matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 1});
  CHECK(c[0] == 3.0);
  CHECK(c[1] == 7.0);

  std::mt19937_64 rng(3);
  auto m = random_param({3, 3}, rng);
  Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto out = matmul(eye, m);
  for (std::size_t i = 0; i < 9; ++i) CHECK(out[i] == m[i]);

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("matmul gradient of sum equals ones times b transpose", "[autodiff]") {
  std::mt19937_64 rng(5);
  auto a = random_param({4, 5}, rng);
  auto b = random_param({5, 6}, rng);
  backward(sum(matmul(a, b)));
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t k = 0; k < 5; ++k) {
      double expect = 0.0;
      for (std::size_t j = 0; j < 6; ++j) expect += b[k * 6 + j];
      CHECK(a.grad()[i * 5 + k] == Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("softmax values", "[autodiff]") {
  auto s = softmax(Tensor({3}, {1, 2, 3}), -1);
  CHECK(s[0] == Approx(0.0900305732).margin(1e-9));
  CHECK(s[1] == Approx(0.2447284711).margin(1e-9));
  CHECK(s[2] == Approx(0.6652409558).margin(1e-9));

  auto half = softmax(Tensor({2}, {0, 0}), -1);
  CHECK(half[0] == 0.5);
  auto big = softmax(Tensor({2}, {1000, 1000}), -1);
  CHECK(big[0] == 0.5);
  CHECK(big[1] == 0.5);
}

TEST_CASE("softmax rows sum to one", "[autodiff][property]") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_param({7, 13}, rng, -30.0, 30.0);
    for (std::ptrdiff_t axis : {0, 1}) {
      auto s = softmax(x, axis);
      const std::size_t rows = axis == 1 ? 7 : 13;
      for (std::size_t r = 0; r < rows; ++r) {
        double total = 0.0;
        for (std::size_t k = 0; k < (axis == 1 ? 13u : 7u); ++k) {
          total += axis == 1 ? s[r * 13 + k] : s[k * 13 + r];
        }
        CHECK(std::abs(total - 1.0) <= 1e-12);
      }
    }
  }
}

TEST_CASE("layer_norm closed forms", "[autodiff]") {
  auto ones = Tensor::full({4}, 1.0);
  auto zeros = Tensor::zeros({4});
  auto c = layer_norm(Tensor({4}, {3, 3, 3, 3}), ones, zeros);
  for (std::size_t i = 0; i < 4; ++i) CHECK(c[i] == 0.0);

  auto two = layer_norm(Tensor({2}, {1, 3}), Tensor::full({2}, 1.0), Tensor::zeros({2}));
  const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(two[0] == Approx(-expect).epsilon(1e-14));
  CHECK(two[1] == Approx(expect).epsilon(1e-14));

  auto affine = layer_norm(Tensor({3}, {0.2, -1, 4}), Tensor::zeros({3}), Tensor::full({3}, 5.0));
  for (std::size_t i = 0; i < 3; ++i) CHECK(affine[i] == 5.0);
}

TEST_CASE("cross entropy values", "[autodiff]") {
  auto uniform = cross_entropy_logits(Tensor::zeros({1, 8}), std::vector<int>{3}, 0.0, {});
  CHECK(uniform.item() == Approx(std::log(8.0)).epsilon(1e-14));

  // -ln(e^2 / (e^2 + 3))
  auto peaked = cross_entropy_logits(Tensor({1, 4}, {2, 0, 0, 0}), std::vector<int>{0}, 0.0, {});
  CHECK(peaked.item() == Approx(0.340753).margin(5e-7));
  CHECK(peaked.item() == Approx(-std::log(std::exp(2.0) / (std::exp(2.0) + 3.0))).epsilon(1e-14));

  double prev = 1e9;
  for (double margin : {1.0, 5.0, 20.0, 60.0}) {
    auto l = cross_entropy_logits(Tensor({1, 3}, {margin, 0, 0}), std::vector<int>{0}, 0.0, {}).item();
    CHECK(l < prev);
    prev = l;
  }
  CHECK(prev < 1e-20);

  CHECK_THROWS_AS(cross_entropy_logits(Tensor::zeros({1, 4}), std::vector<int>{4}, 0.0, {}), IndexError);
  CHECK_THROWS_AS(cross_entropy_logits(Tensor::zeros({1, 4}), std::vector<int>{-1}, 0.0, {}), IndexError);
}

TEST_CASE("cross entropy skips masked steps and smooths labels", "[autodiff]") {
  Tensor logits({1, 2, 3}, {0, 0, 0, 5, -2, 1});
  std::vector<int> targets{1, 0};
  std::vector<std::uint8_t> mask{1, 0};
  auto l = cross_entropy_logits(logits, targets, 0.0, mask);
  CHECK(l.item() == Approx(std::log(3.0)).epsilon(1e-14));
  // Out-of-range ids on masked steps are not inspected.
  std::vector<int> bad{1, 99};
  CHECK_NOTHROW(cross_entropy_logits(logits, bad, 0.0, mask));

  // Smoothing s: target mass 1-s, s/(V-1) elsewhere.
  Tensor row({1, 3}, {1.0, 0.5, -1.0});
  const double s = 0.2;
  auto ls = log_softmax(row);
  const double expect = -((1 - s) * ls[0] + s / 2 * ls[1] + s / 2 * ls[2]);
  CHECK(cross_entropy_logits(row, std::vector<int>{0}, s, {}).item() == Approx(expect).epsilon(1e-13));
}

TEST_CASE("backward basics", "[autodiff]") {
  Tensor p({3}, {0.5, -2.0, 1.5}, true);
  backward(sum(p));
  for (double g : p.grad()) CHECK(g == 1.0);
  // Accumulates without a reset.
  backward(sum(p));
  for (double g : p.grad()) CHECK(g == 2.0);

  p.zero_grad();
  backward(sum(mul(p, p)));
  for (std::size_t i = 0; i < 3; ++i) CHECK(p.grad()[i] == 2.0 * p[i]);

  CHECK_THROWS_AS(backward(p), ContractError);
}

TEST_CASE("backward is deterministic across resets", "[autodiff][property]") {
  std::mt19937_64 rng(21);
  auto a = random_param({3, 4}, rng);
  auto b = random_param({4, 2}, rng);
  auto f = [&] { return sum(square(softmax(matmul(a, b), -1))); };
  backward(f());
  std::vector<double> first(a.grad().begin(), a.grad().end());
  a.zero_grad();
  b.zero_grad();
  backward(f());
  std::vector<double> second(a.grad().begin(), a.grad().end());
  CHECK(first == second);
}

TEST_CASE("finite_diff_grad of sum is ones", "[autodiff]") {
  std::mt19937_64 rng(2);
  auto p = random_param({2, 3}, rng);
  const auto before = std::vector<double>(p.values().begin(), p.values().end());
  const auto g = finite_diff_grad([&] { return sum(p).item(); }, p);
  for (double x : g) CHECK(x == Approx(1.0).epsilon(1e-9));
  CHECK(std::vector<double>(p.values().begin(), p.values().end()) == before);
}

TEST_CASE("relative error metric", "[autodiff]") {
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(2.0, 1.0) == 0.5);
  CHECK(relative_error(0.0, 1e-9) == Approx(0.1));
}

TEST_CASE("every operation passes finite differences", "[autodiff][gradcheck]") {
  for (auto& c : testing::operation_cases(99)) {
    INFO(c.name);
    CHECK(testing::check_case(c) <= 1e-4);
  }
}

TEST_CASE("masked_softmax zeroes masked keys and rejects empty rows", "[autodiff]") {
  Tensor scores({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
  AttentionMask m{1, 2, 3, {1, 0, 1, 0, 0, 0}};
  CHECK_THROWS_AS(masked_softmax(scores, m), ContractError);
  m.keep = {1, 0, 1, 1, 1, 0};
  auto p = masked_softmax(scores, m);
  CHECK(p[1] == 0.0);
  CHECK(p[5] == 0.0);
  CHECK(p[0] + p[2] == Approx(1.0).epsilon(1e-15));
}

TEST_CASE("kl_categorical treats the teacher as a constant", "[autodiff]") {
  Tensor teacher({1, 1, 2}, {std::log(0.5), std::log(0.5)}, true);
  Tensor student({1, 1, 2}, {std::log(0.9), std::log(0.1)}, true);
  auto kl = kl_categorical(teacher, student, {});
  CHECK(kl.item() == Approx(0.5108256238).epsilon(1e-9));
  backward(kl);
  CHECK(teacher.grad().empty());
  CHECK(!student.grad().empty());
}

TEST_CASE("embedding rejects out-of-range ids", "[autodiff]") {
  auto table = Tensor::zeros({4, 2}, true);
  CHECK_THROWS_AS(embedding(table, std::vector<int>{4}, {1}), IndexError);
}

TEST_CASE("NoGradGuard stops recording", "[autodiff]") {
  Tensor p({2}, {1, 2}, true);
  Tensor out;
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    out = mul(p, p);
  }
  CHECK(grad_enabled());
  CHECK_FALSE(out.requires_grad());
}

TEST_CASE("parameter names are unique", "[autodiff]") {
  ParameterStore store;
  store.constant("a.w", {2}, 0.0);
  CHECK_THROWS_AS(store.constant("a.w", {2}, 0.0), ContractError);
  CHECK(store.find("a.w") != nullptr);
  CHECK(store.name_of(store.find("a.w")->value.id()) == "a.w");
}
