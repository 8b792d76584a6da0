#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "fedmox/tensor.hpp"

namespace fedmox {

// A named trainable tensor. The handle aliases the owning model's storage.
struct Parameter {
  std::string name;
  Tensor value;
};

enum class OptimizerKind { sgd_momentum, adamw };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;

  void validate() const;
  bool operator==(const OptimizerConfig&) const = default;
};

// SGD with heavy-ball momentum (coupled L2 decay) or AdamW (decoupled
// decay). State is keyed by parameter name.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config);

  // Throws std::invalid_argument naming the first parameter without a
  // populated gradient.
  void step(const std::vector<Parameter>& params);
  void reset() { state_.clear(); }

  const OptimizerConfig& config() const { return config_; }
  long steps_taken() const { return steps_; }

 private:
  struct Slot {
    std::vector<double> first;
    std::vector<double> second;
    long t = 0;
  };

  OptimizerConfig config_;
  std::unordered_map<std::string, Slot> state_;
  long steps_ = 0;
};

void zero_grads(const std::vector<Parameter>& params);

}  // namespace fedmox
