#include <sstream>

#include "doctest.h"
#include "support.hpp"

using namespace fedmox;
using fedmox::test::max_abs_diff;
using fedmox::test::random_tensor;

namespace {

HeadConfig small_head(std::size_t k, RoutingMode mode = RoutingMode::top1, bool gate = true) {
  HeadConfig c;
  c.in_channels = 5;
  c.hidden_channels = 6;
  c.expert_out_channels = 4;
  c.num_classes = 3;
  c.num_experts = k;
  c.routing_mode = mode;
  c.gate_scaling = gate;
  return c;
}

// Evaluates every expert everywhere, then picks per pixel.
std::vector<double> brute_force_top1(const MoELayer& layer, const Tensor& x) {
  NoGradGuard g;
  const std::size_t k = layer.num_experts();
  const std::size_t px = x.dim(1) * x.dim(2);
  const auto& r = layer.router().proj;
  std::vector<std::vector<double>> outs;
  for (const auto& e : layer.experts()) {
    auto y = e.forward(x);
    outs.emplace_back(y.data().begin(), y.data().end());
  }
  const std::size_t co = outs[0].size() / px;
  std::vector<double> result(co * px);
  for (std::size_t p = 0; p < px; ++p) {
    std::vector<double> logit(k);
    for (std::size_t e = 0; e < k; ++e) {
      logit[e] = r.bias.data()[e];
      for (std::size_t c = 0; c < x.dim(0); ++c) logit[e] += r.weight.data()[e * x.dim(0) + c] * x.data()[c * px + p];
    }
    std::size_t best = 0;
    for (std::size_t e = 1; e < k; ++e) if (logit[e] > logit[best]) best = e;
    double z = 0.0;
    for (double l : logit) z += std::exp(l - logit[best]);
    const double prob = 1.0 / z;
    const double scale = layer.gate_scaling() ? prob : 1.0;
    for (std::size_t c = 0; c < co; ++c) result[c * px + p] = scale * outs[best][c * px + p];
  }
  return result;
}

}  // namespace

TEST_CASE("spatial routing is one-hot, argmax and scale invariant at two resolutions") {
  TaskHead head = TaskHead::initialized(small_head(3), 11);
  const SpatialRouter& router = head.moe().router();
  SpatialRouter scaled = router;
  for (auto& v : scaled.proj.weight.mutable_data()) v *= 3.7;
  for (auto& v : scaled.proj.bias.mutable_data()) v *= 3.7;
  Rng rng(12);
  for (std::size_t side : {16u, 32u}) {
    for (int trial = 0; trial < 20; ++trial) {
      Tensor x = random_tensor({5, side, side}, rng);
      RoutingMap m = route_spatial(x, router);
      RoutingMap ms = route_spatial(x, scaled);
      const std::size_t px = side * side;
      REQUIRE(m.selected.size() == px);
      CHECK(m.selected == ms.selected);
      for (std::size_t p = 0; p < px; ++p) {
        double sum = 0.0;
        for (std::size_t e = 0; e < 3; ++e) sum += m.onehot.data()[e * px + p];
        CHECK(sum == 1.0);
        CHECK(m.onehot.data()[m.selected[p] * px + p] == 1.0);
      }
    }
  }
}

TEST_CASE("routing ties go to the lowest expert") {
  TaskHead head(small_head(3));  // all-zero router: every logit ties
  Rng rng(1);
  RoutingMap m = route_spatial(random_tensor({5, 2, 2}, rng), head.moe().router());
  for (auto s : m.selected) CHECK(s == 0);
}

TEST_CASE("top1 forward equals dense-evaluate-then-select") {
  Rng rng(13);
  for (bool gate : {true, false}) {
    TaskHead head = TaskHead::initialized(small_head(3, RoutingMode::top1, gate), 14);
    for (int trial = 0; trial < 10; ++trial) {
      Tensor x = random_tensor({5, 6, 7}, rng);
      Tensor y = moe_forward(x, head.moe());
      CHECK(max_abs_diff(y.data(), brute_force_top1(head.moe(), x)) < 1e-12);
    }
  }
}

TEST_CASE("dense mode with a delta router equals expert 0") {
  TaskHead head = TaskHead::initialized(small_head(3, RoutingMode::dense), 15);
  auto& r = head.moe().router().proj;
  for (auto& v : r.weight.mutable_data()) v = 0.0;
  r.bias.mutable_data()[0] = 1000.0;
  Rng rng(16);
  Tensor x = random_tensor({5, 4, 4}, rng);
  Tensor y = moe_forward(x, head.moe());
  Tensor e0 = head.moe().experts()[0].forward(x);
  CHECK(max_abs_diff(y.data(), e0.data()) < 1e-12);
}

TEST_CASE("dense output is a convex combination of expert outputs") {
  TaskHead head = TaskHead::initialized(small_head(3, RoutingMode::dense), 17);
  Rng rng(18);
  Tensor x = random_tensor({5, 3, 3}, rng);
  Tensor y = moe_forward(x, head.moe());
  std::vector<Tensor> outs;
  for (const auto& e : head.moe().experts()) outs.push_back(e.forward(x));
  for (std::size_t i = 0; i < y.numel(); ++i) {
    double lo = 1e300, hi = -1e300;
    for (const auto& o : outs) {
      lo = std::min(lo, o.data()[i]);
      hi = std::max(hi, o.data()[i]);
    }
    CHECK(y.data()[i] >= lo - 1e-12);
    CHECK(y.data()[i] <= hi + 1e-12);
  }
}

TEST_CASE("dense_plus_top1 alternates by step parity") {
  TaskHead head = TaskHead::initialized(small_head(3, RoutingMode::dense_plus_top1), 19);
  Rng rng(20);
  Tensor x = random_tensor({5, 3, 3}, rng);
  MoELayer dense = head.moe(), top1 = head.moe();
  dense.set_mode(RoutingMode::dense);
  top1.set_mode(RoutingMode::top1);
  CHECK(max_abs_diff(moe_forward(x, head.moe(), {0, {}, {}}).data(), moe_forward(x, dense).data()) == 0.0);
  CHECK(max_abs_diff(moe_forward(x, head.moe(), {1, {}, {}}).data(), moe_forward(x, top1).data()) == 0.0);
}

TEST_CASE("domain_assigned uses the table and skips the router") {
  HeadConfig c = small_head(3, RoutingMode::domain_assigned);
  c.domain_assignment = {2, 0};
  TaskHead head = TaskHead::initialized(c, 21);
  Rng rng(22);
  Tensor x = random_tensor({5, 3, 3}, rng);
  std::optional<RoutingMap> routing;
  Tensor y = moe_forward(x, head.moe(), {1, 0, {}}, &routing);
  CHECK_FALSE(routing.has_value());
  CHECK(max_abs_diff(y.data(), head.moe().experts()[2].forward(x).data()) == 0.0);
  CHECK(head.moe().expert_for_domain(1) == 0);
  CHECK(head.moe().expert_for_domain(2) == 2);  // wraps modulo K
}

TEST_CASE("single expert with gate scaling off is the lone expert") {
  TaskHead head = TaskHead::initialized(small_head(1, RoutingMode::top1, false), 23);
  Rng rng(24);
  for (int i = 0; i < 100; ++i) {
    Tensor x = random_tensor({5, 4, 4}, rng);
    Tensor y = moe_forward(x, head.moe());
    CHECK(max_abs_diff(y.data(), head.moe().experts()[0].forward(x).data()) <= 1e-12);
  }
}

TEST_CASE("global router accepts one input size only") {
  GlobalRouter g(5 * 16 * 16, 3);
  Rng rng(25);
  auto r = route_global(random_tensor({5 * 16 * 16}, rng, false, 0.1), g);
  double s = 0.0;
  for (double v : r.onehot) s += v;
  CHECK(s == 1.0);
  CHECK_THROWS_AS(route_global(random_tensor({5 * 32 * 32}, rng), g), ShapeError);
}

TEST_CASE("head parameter order and counts") {
  TaskHead head = TaskHead::initialized(small_head(2), 26);
  auto params = head.parameters();
  REQUIRE(params.size() == 2 * 4 + 2 + 2);
  CHECK(params[0].name == "experts.0.fc1.weight");
  CHECK(params[5].name == "experts.1.fc1.bias");
  CHECK(params[8].name == "router.weight");
  CHECK(params[11].name == "shared.bias");
  // experts: 2 * (5*6+6 + 6*4+4), router 5*2+2, shared 4*3+3
  CHECK(head.parameter_count() == 2 * 64 + 12 + 15);
}

TEST_CASE("copies are deep") {
  TaskHead a = TaskHead::initialized(small_head(2), 27);
  TaskHead b = a;
  b.parameters()[0].value.mutable_data()[0] += 1.0;
  CHECK_FALSE(bit_identical(a, b));
  CHECK(l2_distance(a, b) == doctest::Approx(1.0));
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  HeadConfig c = small_head(3, RoutingMode::dense_plus_top1, false);
  c.global_router_dim = 20;
  TaskHead a = TaskHead::initialized(c, 28);
  std::stringstream s;
  save_head(a, s);
  TaskHead b = load_head(s);
  CHECK(b.config() == a.config());
  CHECK(bit_identical(a, b));
  std::stringstream bad("not a checkpoint");
  CHECK_THROWS(load_head(bad));
}

TEST_CASE("structure mismatch names the parameter") {
  HeadConfig wide = small_head(2);
  wide.hidden_channels = 7;
  TaskHead a(small_head(2)), b(wide), c(small_head(3));
  CHECK_THROWS_WITH_AS(require_same_structure(a, b), doctest::Contains("experts.0.fc1.weight"),
                       std::invalid_argument);
  CHECK_THROWS_AS(require_same_structure(a, c), std::invalid_argument);
}

TEST_CASE("expert load and mean location") {
  // 2x2 map: expert 0 on the left column, expert 1 on the right.
  Tensor onehot({2, 2, 2}, {1, 0, 1, 0, 0, 1, 0, 1});
  RoutingMap m{onehot, onehot, {0, 1, 0, 1}};
  auto load = expert_load({m});
  CHECK(load.counts == std::vector<std::uint64_t>{2, 2});
  auto loc = expert_mean_location({m});
  REQUIRE(loc[0].has_value());
  CHECK(loc[0]->mean_x == doctest::Approx(0.25));
  CHECK(loc[0]->mean_y == doctest::Approx(0.5));
  CHECK(loc[1]->mean_x == doctest::Approx(0.75));

  auto rows = routing_rows({{"high", {m}}, {"low", {}}});
  CHECK(rows.size() == 2);
  std::ostringstream out;
  write_routing_csv(out, rows);
  CHECK(out.str().rfind("# schema: routing v1\n", 0) == 0);
}

TEST_CASE("single expert routes everything to one centered row") {
  TaskHead head = TaskHead::initialized(small_head(1), 29);
  Rng rng(30);
  RoutingMap m = route_spatial(random_tensor({5, 8, 8}, rng), head.moe().router());
  auto rows = routing_rows({{"high", {m}}});
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].mean_x == doctest::Approx(0.5));
  CHECK(rows[0].mean_y == doctest::Approx(0.5));
  CHECK(rows[0].pixel_fraction == 1.0);
}

TEST_CASE("head config validation") {
  HeadConfig c = small_head(2);
  c.domain_assignment = {0, 2};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_head(0);
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(routing_mode_from_string(to_string(RoutingMode::dense_plus_top1)) ==
        RoutingMode::dense_plus_top1);
  CHECK_THROWS(routing_mode_from_string("top2"));
}
