#include <sstream>

#include "doctest.h"
#include "fedmox/accounting.hpp"
#include "support.hpp"

using namespace fedmox;
using fedmox::test::random_tensor;

namespace {

HeadConfig cfg(std::size_t k, RoutingMode mode) {
  HeadConfig c;
  c.in_channels = 6;
  c.hidden_channels = 10;
  c.expert_out_channels = 7;
  c.num_classes = 4;
  c.num_experts = k;
  c.routing_mode = mode;
  if (mode == RoutingMode::domain_assigned) c.domain_assignment = {0};
  return c;
}

std::uint64_t measured(const TaskHead& head, const Tensor& x, std::size_t step) {
  NoGradGuard g;
  FlopCounter::reset();
  head.forward(x, {step, 1, {}});
  return FlopCounter::value();
}

}  // namespace

TEST_CASE("analytic flops equal the runtime counter") {
  Rng rng(1);
  for (auto mode : {RoutingMode::top1, RoutingMode::dense, RoutingMode::dense_plus_top1,
                    RoutingMode::domain_assigned}) {
    for (std::size_t k : {1u, 2u, 3u, 5u}) {
      TaskHead head = TaskHead::initialized(cfg(k, mode), 2);
      for (std::size_t side : {4u, 8u}) {
        Tensor x = random_tensor({6, side, side}, rng);
        for (std::size_t step : {0u, 1u}) {
          auto f = count_flops(head.config(), 6, side, side, mode, step);
          CHECK(f.head_total() == measured(head, x, step));
        }
      }
    }
  }
}

TEST_CASE("sparse cost identity and routing overhead") {
  HeadConfig c = default_run_config().training.head;
  auto top1 = count_flops(c, c.in_channels, 16, 16, RoutingMode::top1);
  HeadConfig one = c;
  one.num_experts = 1;
  auto single = count_flops(one, c.in_channels, 16, 16, RoutingMode::top1);
  CHECK(top1.head_total() - single.head_total() == top1.routing);
  const double ratio = static_cast<double>(top1.routing) / static_cast<double>(top1.head_total());
  CHECK(ratio < 0.05);
  auto dense = count_flops(c, c.in_channels, 16, 16, RoutingMode::dense);
  CHECK(dense.head_total() == top1.head_total() + (c.num_experts - 1) * top1.selected_expert);
  CHECK(top1.backward_estimate() == 2 * top1.head_total());
}

TEST_CASE("parameter counts by component") {
  HeadConfig c = cfg(3, RoutingMode::top1);
  c.global_router_dim = 12;
  TaskHead head = TaskHead::initialized(c, 3);
  auto p = count_params(head);
  CHECK(p.single_expert == 6 * 10 + 10 + 10 * 7 + 7);
  CHECK(p.experts_total == 3 * p.single_expert);
  CHECK(p.router_spatial == 6 * 3 + 3);
  CHECK(p.router_global == 12 * 3 + 3);
  CHECK(p.shared == 7 * 4 + 4);
  CHECK(p.total() == head.parameter_count());
  CHECK(comm_per_round(head, 4) == 8 * head.parameter_count());
}

TEST_CASE("cost report and table") {
  RunConfig rc = test::tiny_config();
  World w = generate_world(rc.world, 0);
  TaskHead head = TaskHead::initialized(rc.training.head, 1);
  auto r = cost_report(head, w.backbone, 8, 8, 2, 3);
  CHECK(r.backbone_params_once == 3 * backbone_param_count(w.backbone));
  std::uint64_t sum = 0;
  for (auto& [k, v] : r.params_by_component()) sum += v;
  CHECK(sum == head.parameter_count());
  std::ostringstream out;
  print_cost_table(out, r);
  CHECK(out.str().find("routing") != std::string::npos);
  CHECK_THROWS(count_flops(rc.training.head, 3, 8, 8, RoutingMode::top1));
}
