#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "fedmox/config.hpp"
#include "fedmox/experiment.hpp"
#include "fedmox/federation.hpp"
#include "fedmox/moe.hpp"
#include "fedmox/rng.hpp"
#include "fedmox/tensor.hpp"

namespace fedmox::test {

inline Tensor random_tensor(const Shape& shape, Rng& rng, bool requires_grad = false,
                            double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, scale);
  return Tensor(shape, std::move(v), requires_grad);
}

// Central differences of f with respect to every entry of t.
inline std::vector<double> numeric_grad(Tensor t, const std::function<double()>& f,
                                        double h = 1e-6) {
  auto d = t.mutable_data();
  std::vector<double> g(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double s = d[i];
    d[i] = s + h;
    const double p = f();
    d[i] = s - h;
    const double m = f();
    d[i] = s;
    g[i] = (p - m) / (2 * h);
  }
  return g;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline std::vector<double> flat_params(const TaskHead& h) {
  std::vector<double> out;
  for (const auto& p : h.parameters()) out.insert(out.end(), p.value.data().begin(), p.value.data().end());
  return out;
}

// Small world and config that keep integration tests fast.
inline RunConfig tiny_config() {
  RunConfig c = default_run_config();
  c.world.server_samples = 16;
  c.world.client_samples = 12;
  c.world.test_samples_per_domain = 4;
  c.world.height = 8;
  c.world.width = 8;
  c.training.fl.rounds = 2;
  c.training.fl.warmup_epochs = 2;
  c.training.head.hidden_channels = 8;
  c.training.head.expert_out_channels = 4;
  c.finalize();
  return c;
}

}  // namespace fedmox::test
