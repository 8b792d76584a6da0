#include <cmath>

#include "doctest.h"
#include "fedmox/optimizer.hpp"

using namespace fedmox;

namespace {

// Minimizes 0.5 * (w - 3)^2 from w = 0 with the library and with a scalar
// reference, returning both trajectories.
std::pair<std::vector<double>, std::vector<double>> trajectories(const OptimizerConfig& cfg) {
  Tensor w({1}, {0.0}, true);
  Optimizer opt(cfg);
  std::vector<double> lib, ref;
  double x = 0.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 5; ++t) {
    w.zero_grad();
    Tensor d = ops::sub(w, Tensor({1}, {3.0}));
    backward(ops::scale(ops::mul(d, d), 0.5));
    opt.step({{"w", w}});
    lib.push_back(w.data()[0]);

    const double g = x - 3.0;
    if (cfg.kind == OptimizerKind::sgd_momentum) {
      m = cfg.momentum * m + g + cfg.weight_decay * x;
      x -= cfg.learning_rate * m;
    } else {
      x -= cfg.learning_rate * cfg.weight_decay * x;
      m = cfg.beta1 * m + (1 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
      const double mh = m / (1 - std::pow(cfg.beta1, t));
      const double vh = v / (1 - std::pow(cfg.beta2, t));
      x -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon);
    }
    ref.push_back(x);
  }
  return {lib, ref};
}

}  // namespace

TEST_CASE("sgd with momentum matches the scalar recurrence") {
  OptimizerConfig c;
  c.learning_rate = 0.1;
  c.momentum = 0.9;
  c.weight_decay = 0.01;
  auto [lib, ref] = trajectories(c);
  for (std::size_t i = 0; i < lib.size(); ++i) CHECK(lib[i] == doctest::Approx(ref[i]).epsilon(1e-14));
  // First step: w = 0 - 0.1 * (0 - 3) = 0.3
  CHECK(lib[0] == doctest::Approx(0.3).epsilon(1e-15));
}

TEST_CASE("adamw matches the scalar recurrence") {
  OptimizerConfig c;
  c.kind = OptimizerKind::adamw;
  c.learning_rate = 0.05;
  c.weight_decay = 0.1;
  auto [lib, ref] = trajectories(c);
  for (std::size_t i = 0; i < lib.size(); ++i) CHECK(lib[i] == doctest::Approx(ref[i]).epsilon(1e-14));
  // Bias-corrected first step moves by exactly lr.
  CHECK(lib[0] == doctest::Approx(0.05).epsilon(1e-6));
}

TEST_CASE("step names a parameter without gradient") {
  Tensor w({1}, {0.0}, true);
  Optimizer opt(OptimizerConfig{});
  CHECK_THROWS_WITH_AS(opt.step({{"layer.weight", w}}), doctest::Contains("layer.weight"),
                       std::invalid_argument);
}

TEST_CASE("optimizer config validation and names") {
  OptimizerConfig c;
  c.learning_rate = -1.0;
  CHECK_THROWS(c.validate());
  CHECK(optimizer_kind_from_string(to_string(OptimizerKind::adamw)) == OptimizerKind::adamw);
  CHECK_THROWS(optimizer_kind_from_string("rmsprop"));
}
