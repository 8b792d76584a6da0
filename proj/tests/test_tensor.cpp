#include "doctest.h"
#include "support.hpp"

using namespace fedmox;
using fedmox::test::max_abs_diff;
using fedmox::test::numeric_grad;
using fedmox::test::random_tensor;

namespace {

// Checks autodiff of loss_fn against central differences for each input.
void check_grads(std::vector<Tensor> inputs, const std::function<Tensor()>& loss_fn,
                 double tol = 1e-7) {
  for (auto& t : inputs) t.zero_grad();
  backward(loss_fn());
  for (auto& t : inputs) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto numeric = numeric_grad(t, [&] {
      NoGradGuard g;
      return loss_fn().item();
    });
    CHECK(max_abs_diff(analytic, numeric) < tol);
  }
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(1);
  Tensor a = random_tensor({2, 3, 2}, rng, true);
  Tensor b = random_tensor({2, 3, 2}, rng, true);
  check_grads({a, b}, [&] { return ops::sum(ops::mul(ops::add(a, b), ops::sub(a, ops::scale(b, 0.5)))); });
}

TEST_CASE("matmul values and gradients") {
  Tensor a({2, 2}, {1, 2, 3, 4}, true);
  Tensor b({2, 1}, {5, 6}, true);
  Tensor c = ops::matmul(a, b);
  CHECK(c.data()[0] == 17.0);
  CHECK(c.data()[1] == 39.0);
  Rng rng(2);
  Tensor x = random_tensor({3, 4}, rng, true);
  Tensor y = random_tensor({4, 2}, rng, true);
  check_grads({x, y}, [&] { return ops::sum(ops::mul(ops::matmul(x, y), ops::matmul(x, y))); });
  CHECK_THROWS_AS(ops::matmul(x, x), ShapeError);
}

TEST_CASE("conv1x1 equals a per-pixel matrix product") {
  Rng rng(3);
  Tensor x = random_tensor({3, 2, 2}, rng, true);
  Tensor w = random_tensor({4, 3}, rng, true);
  Tensor b = random_tensor({4}, rng, true);
  Tensor y = ops::conv1x1(x, w, b);
  REQUIRE(y.shape() == Shape{4, 2, 2});
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t p = 0; p < 4; ++p) {
      double ref = b.data()[k];
      for (std::size_t c = 0; c < 3; ++c) ref += w.data()[k * 3 + c] * x.data()[c * 4 + p];
      CHECK(y.data()[k * 4 + p] == doctest::Approx(ref).epsilon(1e-14));
    }
  }
  check_grads({x, w, b}, [&] { return ops::sum(ops::relu(ops::conv1x1(x, w, b))); });
  CHECK_THROWS_AS(ops::conv1x1(x, random_tensor({4, 2}, rng), b), ShapeError);
}

TEST_CASE("softmax and cross entropy") {
  Rng rng(4);
  Tensor z = random_tensor({4, 2, 3}, rng, true);
  Tensor p = ops::softmax_channel(z);
  for (std::size_t px = 0; px < 6; ++px) {
    double s = 0.0;
    for (std::size_t k = 0; k < 4; ++k) s += p.data()[k * 6 + px];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-15));
  }
  std::vector<int> targets{0, 1, 2, 3, 0, 1};
  std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 1};
  check_grads({z}, [&] { return ops::cross_entropy(ops::softmax_channel(z), targets, mask); });

  std::vector<std::uint8_t> none(6, 0);
  CHECK(ops::cross_entropy(p, targets, none).item() == 0.0);

  // Uniform logits: loss is log 4.
  Tensor flat = Tensor::zeros({4, 1, 1});
  std::vector<int> t0{2};
  CHECK(ops::cross_entropy(ops::softmax_channel(flat), t0).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("pixel plumbing round-trips") {
  Rng rng(5);
  Tensor x = random_tensor({2, 3, 3}, rng, true);
  std::vector<std::vector<std::size_t>> parts{{0, 4, 8}, {1, 2, 3, 5, 6, 7}};
  std::vector<Tensor> g{ops::gather_pixels(x, parts[0]), ops::gather_pixels(x, parts[1])};
  Tensor back = ops::scatter_pixels(g, parts, 2, 3, 3);
  CHECK(max_abs_diff(back.data(), x.data()) == 0.0);
  Tensor gate = random_tensor({1, 3, 3}, rng, true);
  check_grads({x, gate}, [&] {
    std::vector<Tensor> gg{ops::gather_pixels(x, parts[0]), ops::gather_pixels(x, parts[1])};
    Tensor s = ops::scatter_pixels(gg, parts, 2, 3, 3);
    return ops::add(ops::sum(ops::gate_pixels(s, gate)), ops::sum(ops::mul(ops::take_channel(s, 1), gate)));
  });
}

TEST_CASE("mse, mean and reshape gradients") {
  Rng rng(6);
  Tensor a = random_tensor({6}, rng, true);
  Tensor b = random_tensor({6}, rng);
  check_grads({a}, [&] { return ops::add(ops::mse(a, b), ops::mean(ops::reshape(a, {2, 3}))); });
}

TEST_CASE("gradients accumulate over repeated backward") {
  Tensor a({1}, {3.0}, true);
  a.zero_grad();
  backward(ops::mul(a, a));
  backward(ops::mul(a, a));
  CHECK(a.grad()[0] == 12.0);
}

TEST_CASE("no-grad guard records no history") {
  Tensor a({1}, {2.0}, true);
  Tensor y;
  {
    NoGradGuard g;
    CHECK(NoGradGuard::active());
    y = ops::mul(a, a);
  }
  CHECK_FALSE(NoGradGuard::active());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("make_op routes the supplied derivative") {
  Tensor a({2}, {1.0, 2.0}, true);
  Tensor y = make_op({2}, {2.0, 4.0}, {a}, [](std::span<const double> g) {
    return std::vector<std::vector<double>>{{3 * g[0], 3 * g[1]}};
  });
  a.zero_grad();
  backward(ops::sum(y));
  CHECK(a.grad()[0] == 3.0);
  CHECK(a.grad()[1] == 3.0);
}

TEST_CASE("backward rejects a non-scalar loss") {
  Tensor a({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(backward(ops::scale(a, 2.0)), ShapeError);
}

TEST_CASE("flop counter counts conv1x1 and matmul") {
  FlopCounter::reset();
  Rng rng(7);
  ops::conv1x1(random_tensor({3, 2, 5}, rng), random_tensor({4, 3}, rng), random_tensor({4}, rng));
  CHECK(FlopCounter::value() == 2ULL * 4 * 3 * 10);
  FlopCounter::reset();
  ops::matmul(random_tensor({2, 3}, rng), random_tensor({3, 5}, rng));
  CHECK(FlopCounter::value() == 2ULL * 2 * 3 * 5);
}

TEST_CASE("identical inputs give bit-identical results") {
  Rng r1(9), r2(9);
  Tensor x1 = random_tensor({5, 4, 4}, r1), w1 = random_tensor({7, 5}, r1), b1 = random_tensor({7}, r1);
  Tensor x2 = random_tensor({5, 4, 4}, r2), w2 = random_tensor({7, 5}, r2), b2 = random_tensor({7}, r2);
  auto y1 = ops::softmax_channel(ops::conv1x1(x1, w1, b1));
  auto y2 = ops::softmax_channel(ops::conv1x1(x2, w2, b2));
  CHECK(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
}
