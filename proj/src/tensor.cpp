#include "fedmox/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace fedmox {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  bool grad_present = false;
  std::vector<double> grad;

  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward_fn;
  std::vector<double> pending;
};

}  // namespace detail

struct TensorAccess {
  static const std::shared_ptr<detail::Node>& node(const Tensor& t) { return t.node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n) { return Tensor(std::move(n)); }
};

namespace {

thread_local std::uint64_t g_flops = 0;
thread_local bool g_no_grad = false;

detail::Node& checked(const std::shared_ptr<detail::Node>& n) {
  if (!n) throw std::logic_error("use of an undefined tensor");
  return *n;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got " + shape_str(t.shape()));
  }
}

void accumulate(std::vector<double>& into, std::span<const double> g) {
  if (into.empty()) {
    into.assign(g.begin(), g.end());
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) into[i] += g[i];
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return Tensor(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return checked(node_).shape; }
std::size_t Tensor::numel() const { return checked(node_).data.size(); }
std::span<const double> Tensor::data() const { return checked(node_).data; }
std::span<double> Tensor::mutable_data() { return checked(node_).data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }
bool Tensor::has_grad() const { return checked(node_).grad_present; }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!has_grad()) throw std::logic_error("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  auto& n = checked(node_);
  n.grad.assign(n.data.size(), 0.0);
  n.grad_present = true;
}

void Tensor::clear_grad() {
  auto& n = checked(node_);
  n.grad.clear();
  n.grad_present = false;
}

Tensor Tensor::clone() const {
  const auto& n = checked(node_);
  return Tensor(n.shape, n.data, n.requires_grad);
}

Tensor Tensor::detach() const {
  const auto& n = checked(node_);
  return Tensor(n.shape, n.data, false);
}

void FlopCounter::reset() { g_flops = 0; }
std::uint64_t FlopCounter::value() { return g_flops; }
void FlopCounter::add(std::uint64_t flops) { g_flops += flops; }

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }
bool NoGradGuard::active() { return g_no_grad; }

Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
               BackwardFn backward_fn) {
  Tensor out(std::move(shape), std::move(data), false);
  if (g_no_grad) return out;
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  auto& node = *TensorAccess::node(out);
  node.requires_grad = true;
  node.inputs.reserve(inputs.size());
  for (auto& t : inputs) node.inputs.push_back(TensorAccess::node(t));
  node.backward_fn = std::move(backward_fn);
  return out;
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  const auto& root = TensorAccess::node(loss);
  if (!root->requires_grad) return;

  // Iterative post-order DFS; inputs visited in declaration order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->pending.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->pending.empty()) continue;
    if (node->backward_fn) {
      auto grads = node->backward_fn(node->pending);
      for (std::size_t i = 0; i < node->inputs.size() && i < grads.size(); ++i) {
        auto& in = *node->inputs[i];
        if (!in.requires_grad || grads[i].empty()) continue;
        accumulate(in.pending, grads[i]);
      }
    } else {
      if (!node->grad_present) {
        node->grad.assign(node->data.size(), 0.0);
        node->grad_present = true;
      }
      for (std::size_t i = 0; i < node->pending.size(); ++i) node->grad[i] += node->pending[i];
    }
  }
  for (auto* node : order) {
    node->pending.clear();
    node->pending.shrink_to_fit();
  }
}

namespace ops {

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](std::span<const double> g) {
    std::vector<double> gv(g.begin(), g.end());
    return std::vector<std::vector<double>>{gv, gv};
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](std::span<const double> g) {
    std::vector<double> ga(g.begin(), g.end());
    std::vector<double> gb(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gb[i] = -g[i];
    return std::vector<std::vector<double>>{std::move(ga), std::move(gb)};
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_op(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    auto x = a.data(), y = b.data();
    std::vector<double> ga, gb;
    if (a.requires_grad()) {
      ga.resize(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * y[i];
    }
    if (b.requires_grad()) {
      gb.resize(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * x[i];
    }
    return std::vector<std::vector<double>>{std::move(ga), std::move(gb)};
  });
}

Tensor scale(const Tensor& a, double s) {
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return make_op(a.shape(), std::move(out), {a}, [s](std::span<const double> g) {
    std::vector<double> ga(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * s;
    return std::vector<std::vector<double>>{std::move(ga)};
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  auto x = a.data(), y = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = x[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * y[p * n + j];
    }
  FlopCounter::add(2ULL * m * k * n);
  return make_op({m, n}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const double> g) {
    auto x = a.data(), y = b.data();
    std::vector<double> ga, gb;
    if (a.requires_grad()) {
      ga.assign(m * k, 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * y[p * n + j];
          ga[i * k + p] = acc;
        }
    }
    if (b.requires_grad()) {
      gb.assign(k * n, 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = x[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
    }
    return std::vector<std::vector<double>>{std::move(ga), std::move(gb)};
  });
}

Tensor conv1x1(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("conv1x1", x, 3);
  require_rank("conv1x1", weight, 2);
  require_rank("conv1x1", bias, 1);
  const std::size_t c = x.dim(0), pixels = x.dim(1) * x.dim(2);
  const std::size_t k = weight.dim(0);
  if (weight.dim(1) != c) {
    throw ShapeError("conv1x1: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  if (bias.dim(0) != k) {
    throw ShapeError("conv1x1: weight " + shape_str(weight.shape()) +
                     " incompatible with bias " + shape_str(bias.shape()));
  }
  auto xv = x.data(), wv = weight.data(), bv = bias.data();
  std::vector<double> out(k * pixels);
  for (std::size_t o = 0; o < k; ++o) {
    double* row = out.data() + o * pixels;
    std::fill(row, row + pixels, bv[o]);
    for (std::size_t i = 0; i < c; ++i) {
      const double w = wv[o * c + i];
      const double* in = xv.data() + i * pixels;
      for (std::size_t p = 0; p < pixels; ++p) row[p] += w * in[p];
    }
  }
  FlopCounter::add(2ULL * k * c * pixels);
  return make_op({k, x.dim(1), x.dim(2)}, std::move(out), {x, weight, bias},
                 [x, weight, c, k, pixels](std::span<const double> g) {
                   auto xv = x.data(), wv = weight.data();
                   std::vector<double> gx, gw(k * c, 0.0), gb(k, 0.0);
                   if (x.requires_grad()) {
                     gx.assign(c * pixels, 0.0);
                     for (std::size_t o = 0; o < k; ++o)
                       for (std::size_t i = 0; i < c; ++i) {
                         const double w = wv[o * c + i];
                         const double* go = g.data() + o * pixels;
                         double* dst = gx.data() + i * pixels;
                         for (std::size_t p = 0; p < pixels; ++p) dst[p] += w * go[p];
                       }
                   }
                   for (std::size_t o = 0; o < k; ++o) {
                     const double* go = g.data() + o * pixels;
                     double bacc = 0.0;
                     for (std::size_t p = 0; p < pixels; ++p) bacc += go[p];
                     gb[o] = bacc;
                     for (std::size_t i = 0; i < c; ++i) {
                       const double* in = xv.data() + i * pixels;
                       double acc = 0.0;
                       for (std::size_t p = 0; p < pixels; ++p) acc += go[p] * in[p];
                       gw[o * c + i] = acc;
                     }
                   }
                   return std::vector<std::vector<double>>{std::move(gx), std::move(gw),
                                                           std::move(gb)};
                 });
}

Tensor relu(const Tensor& a) {
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return make_op(a.shape(), std::move(out), {a}, [a](std::span<const double> g) {
    auto x = a.data();
    std::vector<double> ga(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = x[i] > 0.0 ? g[i] : 0.0;
    return std::vector<std::vector<double>>{std::move(ga)};
  });
}

Tensor softmax_channel(const Tensor& logits) {
  require_rank("softmax_channel", logits, 3);
  const std::size_t k = logits.dim(0), pixels = logits.dim(1) * logits.dim(2);
  auto z = logits.data();
  std::vector<double> out(k * pixels);
  for (std::size_t p = 0; p < pixels; ++p) {
    double mx = z[p];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, z[c * pixels + p]);
    double denom = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double e = std::exp(z[c * pixels + p] - mx);
      out[c * pixels + p] = e;
      denom += e;
    }
    for (std::size_t c = 0; c < k; ++c) out[c * pixels + p] /= denom;
  }
  auto probs = std::make_shared<std::vector<double>>(out);
  return make_op(logits.shape(), std::move(out), {logits},
                 [probs, k, pixels](std::span<const double> g) {
                   const auto& s = *probs;
                   std::vector<double> gz(k * pixels);
                   for (std::size_t p = 0; p < pixels; ++p) {
                     double dot = 0.0;
                     for (std::size_t c = 0; c < k; ++c) dot += g[c * pixels + p] * s[c * pixels + p];
                     for (std::size_t c = 0; c < k; ++c)
                       gz[c * pixels + p] = s[c * pixels + p] * (g[c * pixels + p] - dot);
                   }
                   return std::vector<std::vector<double>>{std::move(gz)};
                 });
}

namespace {
constexpr double kProbFloor = 1e-12;
}

Tensor cross_entropy(const Tensor& probs, std::span<const int> targets,
                     std::span<const std::uint8_t> mask) {
  require_rank("cross_entropy", probs, 3);
  const std::size_t k = probs.dim(0), pixels = probs.dim(1) * probs.dim(2);
  if (targets.size() != pixels || mask.size() != pixels) {
    throw ShapeError("cross_entropy: probs " + shape_str(probs.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets and " +
                     std::to_string(mask.size()) + " mask entries");
  }
  auto pv = probs.data();
  std::size_t count = 0;
  double acc = 0.0;
  for (std::size_t p = 0; p < pixels; ++p) {
    if (!mask[p]) continue;
    const int t = targets[p];
    if (t < 0 || static_cast<std::size_t>(t) >= k) {
      throw std::out_of_range("cross_entropy: target class " + std::to_string(t) +
                              " outside [0," + std::to_string(k) + ")");
    }
    const double q = std::clamp(pv[static_cast<std::size_t>(t) * pixels + p], kProbFloor, 1.0);
    acc += -std::log(q);
    ++count;
  }
  const double loss = count ? acc / static_cast<double>(count) : 0.0;
  std::vector<int> tv(targets.begin(), targets.end());
  std::vector<std::uint8_t> mv(mask.begin(), mask.end());
  return make_op({1}, {loss}, {probs},
                 [probs, tv = std::move(tv), mv = std::move(mv), k, pixels,
                  count](std::span<const double> g) {
                   std::vector<double> gp(k * pixels, 0.0);
                   if (count == 0) return std::vector<std::vector<double>>{std::move(gp)};
                   auto pv = probs.data();
                   const double inv = g[0] / static_cast<double>(count);
                   for (std::size_t p = 0; p < pixels; ++p) {
                     if (!mv[p]) continue;
                     const std::size_t idx = static_cast<std::size_t>(tv[p]) * pixels + p;
                     const double q = pv[idx];
                     if (q > kProbFloor && q <= 1.0) gp[idx] = -inv / q;
                   }
                   return std::vector<std::vector<double>>{std::move(gp)};
                 });
}

Tensor cross_entropy(const Tensor& probs, std::span<const int> targets) {
  std::vector<std::uint8_t> all(targets.size(), 1);
  return cross_entropy(probs, targets, all);
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape("mse", a, b);
  auto x = a.data(), y = b.data();
  const double n = static_cast<double>(x.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    acc += d * d;
  }
  return make_op({1}, {acc / n}, {a}, [a, b, n](std::span<const double> g) {
    auto x = a.data(), y = b.data();
    std::vector<double> ga(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] = g[0] * 2.0 * (x[i] - y[i]) / n;
    return std::vector<std::vector<double>>{std::move(ga)};
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  const std::size_t n = a.numel();
  return make_op({1}, {acc}, {a}, [n](std::span<const double> g) {
    return std::vector<std::vector<double>>{std::vector<double>(n, g[0])};
  });
}

Tensor mean(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  const std::size_t n = a.numel();
  const double dn = static_cast<double>(n);
  return make_op({1}, {acc / dn}, {a}, [n, dn](std::span<const double> g) {
    return std::vector<std::vector<double>>{std::vector<double>(n, g[0] / dn)};
  });
}

Tensor take_channel(const Tensor& x, std::size_t k) {
  require_rank("take_channel", x, 3);
  if (k >= x.dim(0)) {
    throw ShapeError("take_channel: channel " + std::to_string(k) + " outside " +
                     shape_str(x.shape()));
  }
  const std::size_t pixels = x.dim(1) * x.dim(2), channels = x.dim(0);
  auto xv = x.data();
  std::vector<double> out(xv.begin() + k * pixels, xv.begin() + (k + 1) * pixels);
  return make_op({1, x.dim(1), x.dim(2)}, std::move(out), {x},
                 [k, pixels, channels](std::span<const double> g) {
                   std::vector<double> gx(channels * pixels, 0.0);
                   std::copy(g.begin(), g.end(), gx.begin() + k * pixels);
                   return std::vector<std::vector<double>>{std::move(gx)};
                 });
}

Tensor gate_pixels(const Tensor& x, const Tensor& gate) {
  require_rank("gate_pixels", x, 3);
  require_rank("gate_pixels", gate, 3);
  if (gate.dim(0) != 1 || gate.dim(1) != x.dim(1) || gate.dim(2) != x.dim(2)) {
    throw ShapeError("gate_pixels: input " + shape_str(x.shape()) + " vs gate " +
                     shape_str(gate.shape()));
  }
  const std::size_t c = x.dim(0), pixels = x.dim(1) * x.dim(2);
  auto xv = x.data(), gv = gate.data();
  std::vector<double> out(c * pixels);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t p = 0; p < pixels; ++p) out[i * pixels + p] = xv[i * pixels + p] * gv[p];
  return make_op(x.shape(), std::move(out), {x, gate},
                 [x, gate, c, pixels](std::span<const double> g) {
                   auto xv = x.data(), gv = gate.data();
                   std::vector<double> gx, gg;
                   if (x.requires_grad()) {
                     gx.resize(c * pixels);
                     for (std::size_t i = 0; i < c; ++i)
                       for (std::size_t p = 0; p < pixels; ++p)
                         gx[i * pixels + p] = g[i * pixels + p] * gv[p];
                   }
                   if (gate.requires_grad()) {
                     gg.assign(pixels, 0.0);
                     for (std::size_t i = 0; i < c; ++i)
                       for (std::size_t p = 0; p < pixels; ++p)
                         gg[p] += g[i * pixels + p] * xv[i * pixels + p];
                   }
                   return std::vector<std::vector<double>>{std::move(gx), std::move(gg)};
                 });
}

Tensor gather_pixels(const Tensor& x, std::span<const std::size_t> pixels_idx) {
  require_rank("gather_pixels", x, 3);
  const std::size_t c = x.dim(0), pixels = x.dim(1) * x.dim(2), n = pixels_idx.size();
  for (auto p : pixels_idx) {
    if (p >= pixels) {
      throw ShapeError("gather_pixels: pixel " + std::to_string(p) + " outside " +
                       shape_str(x.shape()));
    }
  }
  auto xv = x.data();
  std::vector<double> out(c * n);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * pixels + pixels_idx[j]];
  std::vector<std::size_t> idx(pixels_idx.begin(), pixels_idx.end());
  return make_op({c, 1, n}, std::move(out), {x},
                 [idx = std::move(idx), c, pixels, n](std::span<const double> g) {
                   std::vector<double> gx(c * pixels, 0.0);
                   for (std::size_t i = 0; i < c; ++i)
                     for (std::size_t j = 0; j < n; ++j) gx[i * pixels + idx[j]] += g[i * n + j];
                   return std::vector<std::vector<double>>{std::move(gx)};
                 });
}

Tensor scatter_pixels(const std::vector<Tensor>& parts,
                      const std::vector<std::vector<std::size_t>>& pixels_idx,
                      std::size_t channels, std::size_t height, std::size_t width) {
  if (parts.size() != pixels_idx.size()) {
    throw ShapeError("scatter_pixels: " + std::to_string(parts.size()) + " parts vs " +
                     std::to_string(pixels_idx.size()) + " index lists");
  }
  const std::size_t pixels = height * width;
  std::vector<double> out(channels * pixels, 0.0);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& part = parts[k];
    const auto& idx = pixels_idx[k];
    const Shape expect{channels, 1, idx.size()};
    if (part.shape() != expect) {
      throw ShapeError("scatter_pixels: part " + shape_str(part.shape()) + " vs expected " +
                       shape_str(expect));
    }
    auto pv = part.data();
    const std::size_t n = idx.size();
    for (std::size_t i = 0; i < channels; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (idx[j] >= pixels) throw ShapeError("scatter_pixels: pixel index out of range");
        out[i * pixels + idx[j]] = pv[i * n + j];
      }
  }
  return make_op({channels, height, width}, std::move(out), parts,
                 [pixels_idx, channels, pixels](std::span<const double> g) {
                   std::vector<std::vector<double>> grads;
                   grads.reserve(pixels_idx.size());
                   for (const auto& idx : pixels_idx) {
                     const std::size_t n = idx.size();
                     std::vector<double> gp(channels * n);
                     for (std::size_t i = 0; i < channels; ++i)
                       for (std::size_t j = 0; j < n; ++j) gp[i * n + j] = g[i * pixels + idx[j]];
                     grads.push_back(std::move(gp));
                   }
                   return grads;
                 });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_op(std::move(shape), std::move(out), {x}, [](std::span<const double> g) {
    return std::vector<std::vector<double>>{std::vector<double>(g.begin(), g.end())};
  });
}

}  // namespace ops
}  // namespace fedmox
