#include "fedmox/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace fedmox {

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::adamw ? "adamw" : "sgd_momentum";
}

OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "sgd_momentum") return OptimizerKind::sgd_momentum;
  if (s == "adamw") return OptimizerKind::adamw;
  throw std::invalid_argument("unknown optimizer kind '" + s + "'");
}

void OptimizerConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning_rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must be in [0,1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("adam betas must be in [0,1)");
  }
  if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
}

Optimizer::Optimizer(OptimizerConfig config) : config_(config) { config_.validate(); }

void Optimizer::step(const std::vector<Parameter>& params) {
  for (const auto& p : params) {
    if (!p.value.has_grad()) {
      throw std::invalid_argument("optimizer step: parameter '" + p.name + "' has no gradient");
    }
  }
  const double lr = config_.learning_rate;
  const double wd = config_.weight_decay;
  for (const auto& p : params) {
    Tensor value = p.value;
    auto w = value.mutable_data();
    auto g = p.value.grad();
    Slot& slot = state_[p.name];
    if (slot.first.size() != w.size()) {
      slot.first.assign(w.size(), 0.0);
      slot.second.assign(w.size(), 0.0);
      slot.t = 0;
    }
    ++slot.t;
    if (config_.kind == OptimizerKind::sgd_momentum) {
      const double mu = config_.momentum;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double d = g[i] + wd * w[i];
        slot.first[i] = mu * slot.first[i] + d;
        w[i] -= lr * slot.first[i];
      }
    } else {
      const double b1 = config_.beta1, b2 = config_.beta2;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(slot.t));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(slot.t));
      for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] -= lr * wd * w[i];
        slot.first[i] = b1 * slot.first[i] + (1.0 - b1) * g[i];
        slot.second[i] = b2 * slot.second[i] + (1.0 - b2) * g[i] * g[i];
        const double mhat = slot.first[i] / c1;
        const double vhat = slot.second[i] / c2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + config_.epsilon);
      }
    }
  }
  ++steps_;
}

void zero_grads(const std::vector<Parameter>& params) {
  for (const auto& p : params) {
    Tensor t = p.value;
    t.zero_grad();
  }
}

}  // namespace fedmox
