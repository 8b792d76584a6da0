#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// A Tensor is a cheap handle onto a graph node. Operations whose operands
// require gradients record a backward closure; everything else is computed
// eagerly without history. Accumulation order inside every op is fixed
// (row-major, left-to-right) so identical inputs give bit-identical results.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedmox {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Mutable view for in-place parameter updates. Never mutate a tensor that
  // is part of a graph still awaiting backward.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  // Allocates (or resets) the gradient buffer to zeros.
  void zero_grad();
  void clear_grad();

  // Fresh leaf with a copy of the data; no history, no gradient.
  Tensor clone() const;
  // Leaf sharing nothing with this tensor and never requiring grad.
  Tensor detach() const;

  const detail::Node* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend struct TensorAccess;
};

// Forward-pass floating point operation counter. Counts multiply-adds of
// matmul and conv1x1 as two FLOPs each; elementwise ops are not counted.
// The counter is thread-local so concurrent simulated clients do not mix.
struct FlopCounter {
  static void reset();
  static std::uint64_t value();
  static void add(std::uint64_t flops);
};

// While alive on a thread, ops on that thread record no graph. Used for
// inference passes (teachers, evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool active();

 private:
  bool previous_;
};

// Populates gradients of every leaf reachable from `loss` that requires
// grad. Repeated calls accumulate into leaf gradients.
void backward(const Tensor& loss);

// Backward closure of a custom op. `out_grad` is the gradient flowing into
// the op's output; the closure must return one gradient buffer per input
// (empty buffers are treated as zero).
using BackwardFn = std::function<std::vector<std::vector<double>>(
    std::span<const double> out_grad)>;

// Records a user-defined op. Used to build ops outside this library and to
// inject deliberately wrong derivatives in gradient-check negative controls.
Tensor make_op(Shape shape, std::vector<double> data,
               std::vector<Tensor> inputs, BackwardFn backward_fn);

namespace ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// (m x k) * (k x n) -> (m x n)
Tensor matmul(const Tensor& a, const Tensor& b);
// x: C x H x W, weight: K x C, bias: K -> K x H x W. Bias is added first,
// then channel products in ascending channel order.
Tensor conv1x1(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor relu(const Tensor& a);
// Softmax across dim 0 of a K x H x W tensor, independently per pixel.
Tensor softmax_channel(const Tensor& logits);
// Mean over masked-in pixels of -log(clamp(probs[target], 1e-12, 1)).
// probs: K x H x W; targets and mask have H*W entries. Returns exactly 0
// when no pixel is masked in.
Tensor cross_entropy(const Tensor& probs, std::span<const int> targets,
                     std::span<const std::uint8_t> mask);
Tensor cross_entropy(const Tensor& probs, std::span<const int> targets);
// mean((a - b)^2); b is treated as a constant.
Tensor mse(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Pixel plumbing used by the routed head. A "pixel" is a position in the
// trailing H x W plane.
// Channel k of a K x H x W tensor as 1 x H x W.
Tensor take_channel(const Tensor& x, std::size_t k);
// Multiplies every channel of x (C x H x W) by gate (1 x H x W).
Tensor gate_pixels(const Tensor& x, const Tensor& gate);
// Selects flattened pixel indices: C x H x W -> C x 1 x n.
Tensor gather_pixels(const Tensor& x, std::span<const std::size_t> pixels);
// Inverse of a partition of gathers: parts[i] (C x 1 x n_i) lands on
// pixels[i]; untouched pixels are zero. Result C x H x W.
Tensor scatter_pixels(const std::vector<Tensor>& parts,
                      const std::vector<std::vector<std::size_t>>& pixels,
                      std::size_t channels, std::size_t height, std::size_t width);
Tensor reshape(const Tensor& x, Shape shape);

}  // namespace ops
}  // namespace fedmox
