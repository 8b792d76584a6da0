#pragma once

// Central finite differences against autodiff over every parameter
// coordinate of a task head.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fedmox/moe.hpp"

namespace fedmox {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  double step = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor of the relative error.
  double denom_floor = 1e-6;
  std::size_t batch = 2;
  std::size_t height = 4;
  std::size_t width = 4;
  // Inputs are redrawn until every pixel's top-two router logits differ by
  // at least this much, so no perturbation flips a routing decision.
  double min_routing_margin = 1e-3;
  // Likewise every hidden pre-activation stays this far from the relu kink.
  double min_relu_margin = 1e-4;
  // Negative controls: applied to the logits before the loss, or to one
  // parameter's analytic gradient (scaled by 1.01).
  std::function<Tensor(const Tensor&)> logits_hook;
  std::optional<std::string> corrupt_parameter;
};

struct CoordinateError {
  std::string path;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradcheckReport {
  std::string label;
  std::size_t parameters = 0;
  std::size_t coordinates = 0;
  CoordinateError worst;
  std::vector<CoordinateError> failures;  // rel_error >= tolerance
  bool passed() const { return failures.empty(); }
};

GradcheckReport gradcheck_head(const HeadConfig& config, const GradcheckOptions& options = {});

// The head used by the gradcheck command: K = 3, under 1k parameters.
HeadConfig gradcheck_default_head();

// Top-1 and dense forward of the default head.
std::vector<GradcheckReport> gradcheck_suite(const GradcheckOptions& options = {});

void print_gradcheck(std::ostream& out, const GradcheckReport& report);

}  // namespace fedmox
