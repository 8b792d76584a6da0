#include "fedmox/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <stdexcept>

#include "fedmox/rng.hpp"

namespace fedmox {

namespace {

double min_margin(const Tensor& x, const TaskHead& head) {
  if (head.config().num_experts < 2) return std::numeric_limits<double>::infinity();
  NoGradGuard no_grad;
  const auto& r = head.moe().router().proj;
  Tensor logits = ops::conv1x1(x, r.weight, r.bias);
  const std::size_t k = logits.dim(0);
  const std::size_t pixels = logits.dim(1) * logits.dim(2);
  auto v = logits.data();
  double worst = std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < pixels; ++p) {
    double a = -std::numeric_limits<double>::infinity(), b = a;
    for (std::size_t e = 0; e < k; ++e) {
      const double z = v[e * pixels + p];
      if (z > a) {
        b = a;
        a = z;
      } else if (z > b) {
        b = z;
      }
    }
    worst = std::min(worst, a - b);
  }
  return worst;
}

// Smallest |pre-activation| of any expert's hidden relu.
double min_kink_distance(const Tensor& x, const TaskHead& head) {
  NoGradGuard no_grad;
  double worst = std::numeric_limits<double>::infinity();
  for (const auto& e : head.moe().experts()) {
    const Tensor z_all = e.fc1.forward(x);
    for (double z : z_all.data()) worst = std::min(worst, std::abs(z));
  }
  return worst;
}

}  // namespace

GradcheckReport gradcheck_head(const HeadConfig& config, const GradcheckOptions& options) {
  if (!(options.step > 0.0)) throw std::invalid_argument("gradcheck: step must be positive");
  const TaskHead head = TaskHead::initialized(config, derive_seed(options.seed, {1}));
  Rng rng(derive_seed(options.seed, {2}));

  const std::size_t pixels = options.batch * options.height * options.width;
  Tensor x;
  constexpr int kMaxDraws = 1000;
  for (int draw = 0;; ++draw) {
    if (draw == kMaxDraws) {
      throw std::runtime_error("gradcheck: no input clear of routing ties and relu kinks");
    }
    std::vector<double> v(config.in_channels * pixels);
    for (auto& e : v) e = rng.normal();
    x = Tensor({config.in_channels, 1, pixels}, std::move(v));
    if (min_margin(x, head) >= options.min_routing_margin &&
        min_kink_distance(x, head) >= options.min_relu_margin) {
      break;
    }
  }
  std::vector<int> labels(pixels);
  for (auto& l : labels) l = static_cast<int>(rng.below(config.num_classes));

  const MoEForwardOptions fwd{kInferenceStep, 0, {}};
  auto loss_of = [&](const TaskHead& h) {
    Tensor logits = h.forward(x, fwd);
    if (options.logits_hook) logits = options.logits_hook(logits);
    return ops::cross_entropy(ops::softmax_channel(logits), labels);
  };

  const auto params = head.parameters();
  for (auto p : params) p.value.zero_grad();
  backward(loss_of(head));

  GradcheckReport report;
  report.label = to_string(config.routing_mode);
  report.parameters = params.size();
  report.worst.rel_error = -1.0;
  for (auto p : params) {
    std::vector<double> analytic(p.value.grad().begin(), p.value.grad().end());
    if (options.corrupt_parameter && *options.corrupt_parameter == p.name) {
      for (auto& g : analytic) g *= 1.01;
    }
    auto data = p.value.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      double plus, minus;
      {
        NoGradGuard no_grad;
        data[i] = saved + options.step;
        plus = loss_of(head).item();
        data[i] = saved - options.step;
        minus = loss_of(head).item();
      }
      data[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double denom =
          std::max({std::abs(analytic[i]), std::abs(numeric), options.denom_floor});
      CoordinateError e{p.name, i, analytic[i], numeric, std::abs(analytic[i] - numeric) / denom};
      if (e.rel_error > report.worst.rel_error) report.worst = e;
      if (e.rel_error >= options.tolerance) report.failures.push_back(e);
      ++report.coordinates;
    }
  }
  return report;
}

HeadConfig gradcheck_default_head() {
  HeadConfig c;
  c.in_channels = 8;
  c.hidden_channels = 16;
  c.expert_out_channels = 8;
  c.num_classes = 4;
  c.num_experts = 3;
  c.routing_mode = RoutingMode::top1;
  c.gate_scaling = true;
  return c;
}

std::vector<GradcheckReport> gradcheck_suite(const GradcheckOptions& options) {
  std::vector<GradcheckReport> out;
  for (auto mode : {RoutingMode::top1, RoutingMode::dense}) {
    HeadConfig c = gradcheck_default_head();
    c.routing_mode = mode;
    out.push_back(gradcheck_head(c, options));
  }
  return out;
}

void print_gradcheck(std::ostream& out, const GradcheckReport& r) {
  out << std::setprecision(6);
  out << r.label << ": " << r.coordinates << " coordinates in " << r.parameters
      << " tensors, worst relative error " << r.worst.rel_error << " at " << r.worst.path << '['
      << r.worst.index << "] (analytic " << r.worst.analytic << ", numeric " << r.worst.numeric
      << ")  " << (r.passed() ? "PASS" : "FAIL") << '\n';
  constexpr std::size_t kShown = 10;
  for (std::size_t i = 0; i < std::min(kShown, r.failures.size()); ++i) {
    const auto& f = r.failures[i];
    out << "  " << f.path << '[' << f.index << "] rel " << f.rel_error << '\n';
  }
  if (r.failures.size() > kShown) out << "  ... " << r.failures.size() - kShown << " more\n";
}

}  // namespace fedmox
