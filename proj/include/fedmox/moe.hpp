#pragma once

// Spatial sparse mixture-of-experts task head.
//
// Every feature-map pixel is routed on its own by a 1x1 convolution over
// channels, so one router serves any spatial size. The selected expert's
// output (optionally scaled by its gate probability) feeds a shared 1x1
// classifier. A fixed-dimension global router is kept for contrast.

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fedmox/optimizer.hpp"
#include "fedmox/tensor.hpp"

namespace fedmox {

enum class RoutingMode { top1, dense, dense_plus_top1, domain_assigned };

std::string to_string(RoutingMode mode);
RoutingMode routing_mode_from_string(const std::string& s);

// 1x1 convolution parameters. Copies are deep.
struct ConvLayer {
  Tensor weight;  // out x in
  Tensor bias;    // out

  ConvLayer() = default;
  ConvLayer(std::size_t in_channels, std::size_t out_channels);
  ConvLayer(const ConvLayer& other);
  ConvLayer& operator=(const ConvLayer& other);
  ConvLayer(ConvLayer&&) noexcept = default;
  ConvLayer& operator=(ConvLayer&&) noexcept = default;

  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t parameter_count() const { return weight.numel() + bias.numel(); }
  Tensor forward(const Tensor& x) const { return ops::conv1x1(x, weight, bias); }
};

// conv1x1 -> relu -> conv1x1
struct Expert {
  ConvLayer fc1;
  ConvLayer fc2;

  Tensor forward(const Tensor& x) const { return fc2.forward(ops::relu(fc1.forward(x))); }
  std::size_t parameter_count() const { return fc1.parameter_count() + fc2.parameter_count(); }
};

struct SpatialRouter {
  ConvLayer proj;  // K x C

  std::size_t num_experts() const { return proj.out_channels(); }
  std::size_t channels() const { return proj.in_channels(); }
};

struct GlobalRouter {
  Tensor weight;  // K x D
  Tensor bias;    // K

  GlobalRouter() = default;
  GlobalRouter(std::size_t input_dim, std::size_t num_experts);
  GlobalRouter(const GlobalRouter& other);
  GlobalRouter& operator=(const GlobalRouter& other);
  GlobalRouter(GlobalRouter&&) noexcept = default;
  GlobalRouter& operator=(GlobalRouter&&) noexcept = default;

  std::size_t input_dim() const { return weight.dim(1); }
  std::size_t num_experts() const { return weight.dim(0); }
};

struct RoutingMap {
  Tensor onehot;  // K x H x W, entries 0 or 1
  Tensor probs;   // K x H x W, channel softmax of router logits
  std::vector<std::size_t> selected;  // per pixel, row-major

  std::size_t num_experts() const { return onehot.dim(0); }
  std::size_t height() const { return onehot.dim(1); }
  std::size_t width() const { return onehot.dim(2); }
};

struct GlobalRouting {
  std::vector<double> onehot;
  std::vector<double> probs;
  std::size_t selected = 0;
};

// Hard-max over router logits per pixel; ties go to the lowest index.
RoutingMap route_spatial(const Tensor& x, const SpatialRouter& router);
GlobalRouting route_global(const Tensor& x_flat, const GlobalRouter& router);

class MoELayer {
 public:
  MoELayer() = default;
  MoELayer(std::vector<Expert> experts, SpatialRouter router, RoutingMode mode,
           bool gate_scaling, std::vector<std::size_t> domain_assignment = {});

  std::size_t num_experts() const { return experts_.size(); }
  const std::vector<Expert>& experts() const { return experts_; }
  std::vector<Expert>& experts() { return experts_; }
  const SpatialRouter& router() const { return router_; }
  SpatialRouter& router() { return router_; }
  RoutingMode mode() const { return mode_; }
  void set_mode(RoutingMode mode) { mode_ = mode; }
  bool gate_scaling() const { return gate_scaling_; }
  void set_gate_scaling(bool on) { gate_scaling_ = on; }
  // Expert serving a domain in domain_assigned mode. Domains past the
  // explicit table wrap modulo K.
  std::size_t expert_for_domain(std::size_t domain) const;
  const std::vector<std::size_t>& domain_assignment() const { return domain_assignment_; }

 private:
  std::vector<Expert> experts_;
  SpatialRouter router_;
  RoutingMode mode_ = RoutingMode::top1;
  bool gate_scaling_ = true;
  std::vector<std::size_t> domain_assignment_;
};

struct MoEForwardOptions {
  std::size_t step_index = 1;  // dense_plus_top1: even = dense, odd = top1
  std::optional<std::size_t> domain;
  std::optional<RoutingMode> mode_override;
};

// Step index used for inference; selects top-1 in dense_plus_top1 mode.
inline constexpr std::size_t kInferenceStep = 1;

// x: C x H x W -> C_out x H x W. When `routing` is given it receives the
// routing map used (unset for K = 1 and domain_assigned, which skip the
// router).
Tensor moe_forward(const Tensor& x, const MoELayer& layer, const MoEForwardOptions& opts = {},
                   std::optional<RoutingMap>* routing = nullptr);

struct HeadConfig {
  std::size_t in_channels = 8;
  std::size_t hidden_channels = 16;
  std::size_t expert_out_channels = 8;
  std::size_t num_classes = 4;
  std::size_t num_experts = 3;
  RoutingMode routing_mode = RoutingMode::top1;
  bool gate_scaling = true;
  std::vector<std::size_t> domain_assignment;
  // Flattened feature size of the optional global router; 0 disables it.
  std::size_t global_router_dim = 0;

  void validate() const;
  bool operator==(const HeadConfig&) const = default;
};

// The communicated model: experts + spatial router + shared classifier
// (+ optional global router). Copies are deep.
class TaskHead {
 public:
  TaskHead() = default;
  // All parameters zero.
  explicit TaskHead(HeadConfig config);
  // He-normal weights, zero biases, drawn from `seed`.
  static TaskHead initialized(HeadConfig config, std::uint64_t seed);

  const HeadConfig& config() const { return config_; }
  const MoELayer& moe() const { return moe_; }
  MoELayer& moe() { return moe_; }
  const ConvLayer& shared() const { return shared_; }
  const std::optional<GlobalRouter>& global_router() const { return global_router_; }

  // Fixed order: experts.{k}.fc1.{weight,bias}, experts.{k}.fc2.*,
  // router.*, shared.*, global_router.*.
  std::vector<Parameter> parameters() const;
  std::size_t parameter_count() const;

  // Class logits (num_classes x H x W).
  Tensor forward(const Tensor& features, const MoEForwardOptions& opts = {},
                 std::optional<RoutingMap>* routing = nullptr) const;

 private:
  HeadConfig config_;
  MoELayer moe_;
  ConvLayer shared_;
  std::optional<GlobalRouter> global_router_;
};

// Throws std::invalid_argument naming the first parameter path whose shape
// differs.
void require_same_structure(const TaskHead& a, const TaskHead& b);
bool bit_identical(const TaskHead& a, const TaskHead& b);
double l2_distance(const TaskHead& a, const TaskHead& b);

void save_head(const TaskHead& head, std::ostream& out);
TaskHead load_head(std::istream& in);

struct ExpertLoad {
  std::vector<std::uint64_t> counts;
  std::vector<double> fractions;
  std::uint64_t total = 0;
};

ExpertLoad expert_load(const std::vector<RoutingMap>& maps);

struct ExpertLocation {
  double mean_x = 0.0;
  double mean_y = 0.0;
};

// Mean normalized pixel-center location per expert; nullopt for experts
// that received no pixels.
std::vector<std::optional<ExpertLocation>> expert_mean_location(
    const std::vector<RoutingMap>& maps);

struct RoutingRow {
  std::string resolution_tag;
  std::size_t expert_id = 0;
  double mean_x = 0.0;
  double mean_y = 0.0;
  double pixel_fraction = 0.0;
};

struct RoutingGroup {
  std::string resolution_tag;
  std::vector<RoutingMap> maps;
};

// One row per (group, expert) with nonzero load.
std::vector<RoutingRow> routing_rows(const std::vector<RoutingGroup>& groups);
void write_routing_csv(std::ostream& out, const std::vector<RoutingRow>& rows);

}  // namespace fedmox
