#include "fedmox/accounting.hpp"

#include <iomanip>
#include <ostream>
#include <stdexcept>

namespace fedmox {

std::uint64_t FlopCounts::head_total() const {
  return routing + (dense ? dense_all_experts : selected_expert) + shared;
}

ParamCounts count_params(const TaskHead& head) {
  ParamCounts c;
  const auto& experts = head.moe().experts();
  c.single_expert = experts.front().parameter_count();
  for (const auto& e : experts) c.experts_total += e.parameter_count();
  c.router_spatial = head.moe().router().proj.parameter_count();
  if (head.global_router()) {
    c.router_global = head.global_router()->weight.numel() + head.global_router()->bias.numel();
  }
  c.shared = head.shared().parameter_count();
  return c;
}

FlopCounts count_flops(const HeadConfig& head, std::size_t channels, std::size_t height,
                       std::size_t width, RoutingMode mode, std::size_t step_index) {
  if (channels == 0 || height == 0 || width == 0) {
    throw std::invalid_argument("count_flops: dimensions must be positive");
  }
  if (channels != head.in_channels) {
    throw std::invalid_argument("count_flops: head expects " + std::to_string(head.in_channels) +
                                " channels, got " + std::to_string(channels));
  }
  const std::uint64_t pixels = static_cast<std::uint64_t>(height) * width;
  const std::uint64_t k = head.num_experts;
  FlopCounts f;
  f.mode = mode;
  f.selected_expert = 2 * pixels *
                      (static_cast<std::uint64_t>(channels) * head.hidden_channels +
                       static_cast<std::uint64_t>(head.hidden_channels) * head.expert_out_channels);
  f.dense_all_experts = k * f.selected_expert;
  f.shared = 2 * pixels * head.expert_out_channels * head.num_classes;
  const bool routed = k > 1 && mode != RoutingMode::domain_assigned;
  f.routing = routed ? 2 * k * channels * pixels : 0;
  f.dense = routed && (mode == RoutingMode::dense ||
                       (mode == RoutingMode::dense_plus_top1 && step_index % 2 == 0));
  return f;
}

std::uint64_t backbone_flops(const FrozenBackbone& backbone, std::size_t height,
                             std::size_t width) {
  return 2ULL * backbone.feature_channels() * backbone.image_channels() * height * width;
}

std::uint64_t backbone_param_count(const FrozenBackbone& backbone) {
  return backbone.weight.numel() + backbone.bias.numel() + backbone.norm_scale.numel() +
         backbone.norm_shift.numel();
}

std::uint64_t comm_per_round(const TaskHead& head, std::size_t participants) {
  if (participants == 0) throw std::invalid_argument("comm_per_round: need at least one client");
  return 2ULL * participants * head.parameter_count();
}

std::map<std::string, std::uint64_t> CostReport::params_by_component() const {
  return {{"experts_total", params.experts_total},
          {"router_spatial", params.router_spatial},
          {"router_global", params.router_global},
          {"shared", params.shared}};
}

std::map<std::string, std::uint64_t> CostReport::flops_forward_by_component() const {
  return {{"routing", flops.routing},
          {"selected_expert", flops.selected_expert},
          {"dense_all_experts", flops.dense_all_experts},
          {"shared", flops.shared},
          {"backbone", flops.backbone}};
}

CostReport cost_report(const TaskHead& head, const FrozenBackbone& backbone, std::size_t height,
                       std::size_t width, std::size_t participants, std::size_t num_clients) {
  CostReport r;
  r.params = count_params(head);
  r.flops = count_flops(head.config(), head.config().in_channels, height, width,
                        head.config().routing_mode);
  r.flops.backbone = backbone_flops(backbone, height, width);
  r.comm_per_round = comm_per_round(head, participants);
  r.backbone_params_once = backbone_param_count(backbone) * num_clients;
  return r;
}

void print_cost_table(std::ostream& out, const CostReport& r) {
  auto row = [&out](const std::string& name, std::uint64_t v) {
    out << "  " << std::left << std::setw(24) << name << std::right << std::setw(14) << v << '\n';
  };
  out << "parameters\n";
  for (const auto& [k, v] : r.params_by_component()) row(k, v);
  row("total", r.params.total());
  out << "forward FLOPs per feature map (" << to_string(r.flops.mode) << ", multiply-add = 2)\n";
  for (const auto& [k, v] : r.flops_forward_by_component()) row(k, v);
  row("head_total", r.flops.head_total());
  row("backward_estimate", r.flops.backward_estimate());
  out << "communication (parameters)\n";
  row("per_round", r.comm_per_round);
  row("backbone_once", r.backbone_params_once);
}

}  // namespace fedmox
