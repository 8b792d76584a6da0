#pragma once

// Parameter, FLOP and communication accounting for the task head.
//
// FLOPs are forward-pass only, with one multiply-add counted as 2 FLOPs;
// only 1x1 convolutions (and matmuls) contribute, matching the runtime
// FlopCounter. Backward cost is reported as a 2x-forward estimate.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>

#include "fedmox/moe.hpp"
#include "fedmox/synth.hpp"

namespace fedmox {

struct ParamCounts {
  std::uint64_t experts_total = 0;
  std::uint64_t single_expert = 0;
  std::uint64_t router_spatial = 0;
  std::uint64_t router_global = 0;
  std::uint64_t shared = 0;

  std::uint64_t total() const { return experts_total + router_spatial + router_global + shared; }
};

struct FlopCounts {
  RoutingMode mode = RoutingMode::top1;
  std::uint64_t routing = 0;
  std::uint64_t selected_expert = 0;
  std::uint64_t dense_all_experts = 0;
  std::uint64_t shared = 0;
  std::uint64_t backbone = 0;
  // True when the mode's forward runs every expert on every pixel.
  bool dense = false;

  // routing + (dense ? dense_all_experts : selected_expert) + shared.
  std::uint64_t head_total() const;
  std::uint64_t backward_estimate() const { return 2 * head_total(); }
};

ParamCounts count_params(const TaskHead& head);

// Forward FLOPs of the head on one C x H x W feature map. `step_index`
// picks the dense or sparse phase of dense_plus_top1. Routing is skipped
// for K = 1 and for domain_assigned, exactly as the forward pass does.
FlopCounts count_flops(const HeadConfig& head, std::size_t channels, std::size_t height,
                       std::size_t width, RoutingMode mode, std::size_t step_index = 1);
std::uint64_t backbone_flops(const FrozenBackbone& backbone, std::size_t height,
                             std::size_t width);
std::uint64_t backbone_param_count(const FrozenBackbone& backbone);

// Task-head parameters moved per round: M downloads plus M uploads.
std::uint64_t comm_per_round(const TaskHead& head, std::size_t participants);

struct CostReport {
  ParamCounts params;
  FlopCounts flops;
  std::uint64_t comm_per_round = 0;
  std::uint64_t backbone_params_once = 0;

  std::map<std::string, std::uint64_t> params_by_component() const;
  std::map<std::string, std::uint64_t> flops_forward_by_component() const;
};

CostReport cost_report(const TaskHead& head, const FrozenBackbone& backbone,
                       std::size_t height, std::size_t width, std::size_t participants,
                       std::size_t num_clients);

// Aligned plain-text table.
void print_cost_table(std::ostream& out, const CostReport& report);

}  // namespace fedmox
