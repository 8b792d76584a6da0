#include "fedmox/moe.hpp"

#include <cmath>
#include <iomanip>
#include <stdexcept>

#include "binary_io.hpp"
#include "fedmox/rng.hpp"

namespace fedmox {

std::string to_string(RoutingMode mode) {
  switch (mode) {
    case RoutingMode::top1: return "top1";
    case RoutingMode::dense: return "dense";
    case RoutingMode::dense_plus_top1: return "dense_plus_top1";
    case RoutingMode::domain_assigned: return "domain_assigned";
  }
  return "top1";
}

RoutingMode routing_mode_from_string(const std::string& s) {
  if (s == "top1") return RoutingMode::top1;
  if (s == "dense") return RoutingMode::dense;
  if (s == "dense_plus_top1") return RoutingMode::dense_plus_top1;
  if (s == "domain_assigned") return RoutingMode::domain_assigned;
  throw std::invalid_argument("unknown routing mode '" + s + "'");
}

ConvLayer::ConvLayer(std::size_t in_channels, std::size_t out_channels)
    : weight(Tensor::zeros({out_channels, in_channels}, true)),
      bias(Tensor::zeros({out_channels}, true)) {}

ConvLayer::ConvLayer(const ConvLayer& other)
    : weight(other.weight.defined() ? other.weight.clone() : Tensor()),
      bias(other.bias.defined() ? other.bias.clone() : Tensor()) {}

ConvLayer& ConvLayer::operator=(const ConvLayer& other) {
  if (this != &other) {
    ConvLayer tmp(other);
    *this = std::move(tmp);
  }
  return *this;
}

GlobalRouter::GlobalRouter(std::size_t input_dim, std::size_t num_experts)
    : weight(Tensor::zeros({num_experts, input_dim}, true)),
      bias(Tensor::zeros({num_experts}, true)) {}

GlobalRouter::GlobalRouter(const GlobalRouter& other)
    : weight(other.weight.defined() ? other.weight.clone() : Tensor()),
      bias(other.bias.defined() ? other.bias.clone() : Tensor()) {}

GlobalRouter& GlobalRouter::operator=(const GlobalRouter& other) {
  if (this != &other) {
    GlobalRouter tmp(other);
    *this = std::move(tmp);
  }
  return *this;
}

RoutingMap route_spatial(const Tensor& x, const SpatialRouter& router) {
  if (x.shape().size() != 3 || x.dim(0) != router.channels()) {
    throw ShapeError("route_spatial: input " + shape_str(x.shape()) + " does not match router " +
                     shape_str(router.proj.weight.shape()) + " (channels must agree)");
  }
  const std::size_t k = router.num_experts();
  const std::size_t h = x.dim(1), w = x.dim(2), pixels = h * w;
  Tensor logits = router.proj.forward(x);
  RoutingMap map;
  map.probs = ops::softmax_channel(logits);
  auto z = logits.data();
  map.selected.resize(pixels);
  std::vector<double> onehot(k * pixels, 0.0);
  for (std::size_t p = 0; p < pixels; ++p) {
    std::size_t best = 0;
    double best_v = z[p];
    for (std::size_t e = 1; e < k; ++e) {
      if (z[e * pixels + p] > best_v) {
        best_v = z[e * pixels + p];
        best = e;
      }
    }
    map.selected[p] = best;
    onehot[best * pixels + p] = 1.0;
  }
  map.onehot = Tensor({k, h, w}, std::move(onehot));
  return map;
}

GlobalRouting route_global(const Tensor& x_flat, const GlobalRouter& router) {
  const std::size_t d = router.input_dim();
  if (x_flat.numel() != d) {
    throw ShapeError("route_global: input has " + std::to_string(x_flat.numel()) +
                     " values but the router expects " + std::to_string(d));
  }
  const std::size_t k = router.num_experts();
  Tensor col = ops::reshape(x_flat, {d, 1});
  Tensor scores = ops::matmul(router.weight, col);
  auto s = scores.data();
  auto b = router.bias.data();
  std::vector<double> logits(k);
  for (std::size_t e = 0; e < k; ++e) logits[e] = s[e] + b[e];

  GlobalRouting out;
  out.onehot.assign(k, 0.0);
  out.probs.assign(k, 0.0);
  double mx = logits[0];
  for (std::size_t e = 1; e < k; ++e) {
    if (logits[e] > mx) {
      mx = logits[e];
      out.selected = e;
    }
  }
  double denom = 0.0;
  for (std::size_t e = 0; e < k; ++e) {
    out.probs[e] = std::exp(logits[e] - mx);
    denom += out.probs[e];
  }
  for (auto& p : out.probs) p /= denom;
  out.onehot[out.selected] = 1.0;
  return out;
}

MoELayer::MoELayer(std::vector<Expert> experts, SpatialRouter router, RoutingMode mode,
                   bool gate_scaling, std::vector<std::size_t> domain_assignment)
    : experts_(std::move(experts)),
      router_(std::move(router)),
      mode_(mode),
      gate_scaling_(gate_scaling),
      domain_assignment_(std::move(domain_assignment)) {
  if (experts_.empty()) throw std::invalid_argument("MoELayer needs at least one expert");
  for (auto e : domain_assignment_) {
    if (e >= experts_.size()) {
      throw std::invalid_argument("domain assignment names expert " + std::to_string(e) +
                                  " but K = " + std::to_string(experts_.size()));
    }
  }
}

std::size_t MoELayer::expert_for_domain(std::size_t domain) const {
  if (domain < domain_assignment_.size()) return domain_assignment_[domain];
  return domain % experts_.size();
}

Tensor moe_forward(const Tensor& x, const MoELayer& layer, const MoEForwardOptions& opts,
                   std::optional<RoutingMap>* routing) {
  const RoutingMode mode = opts.mode_override.value_or(layer.mode());
  if (routing) routing->reset();
  if (mode == RoutingMode::domain_assigned) {
    if (!opts.domain) throw std::invalid_argument("domain_assigned routing requires a domain id");
    return layer.experts()[layer.expert_for_domain(*opts.domain)].forward(x);
  }
  const std::size_t k = layer.num_experts();
  if (k == 1) return layer.experts()[0].forward(x);

  RoutingMap map = route_spatial(x, layer.router());
  const bool dense = mode == RoutingMode::dense ||
                     (mode == RoutingMode::dense_plus_top1 && opts.step_index % 2 == 0);
  Tensor out;
  if (dense) {
    for (std::size_t e = 0; e < k; ++e) {
      Tensor y = ops::gate_pixels(layer.experts()[e].forward(x), ops::take_channel(map.probs, e));
      out = out.defined() ? ops::add(out, y) : y;
    }
  } else {
    const std::size_t h = x.dim(1), w = x.dim(2);
    std::vector<std::vector<std::size_t>> groups(k);
    for (std::size_t p = 0; p < map.selected.size(); ++p) groups[map.selected[p]].push_back(p);
    std::vector<Tensor> parts;
    std::vector<std::vector<std::size_t>> used;
    std::size_t out_channels = 0;
    for (std::size_t e = 0; e < k; ++e) {
      if (groups[e].empty()) continue;
      Tensor y = layer.experts()[e].forward(ops::gather_pixels(x, groups[e]));
      if (layer.gate_scaling()) {
        y = ops::gate_pixels(y, ops::gather_pixels(ops::take_channel(map.probs, e), groups[e]));
      }
      out_channels = y.dim(0);
      parts.push_back(std::move(y));
      used.push_back(std::move(groups[e]));
    }
    out = ops::scatter_pixels(parts, used, out_channels, h, w);
  }
  if (routing) *routing = std::move(map);
  return out;
}

void HeadConfig::validate() const {
  if (in_channels == 0 || hidden_channels == 0 || expert_out_channels == 0 || num_classes == 0) {
    throw std::invalid_argument("head channel counts must be positive");
  }
  if (num_experts == 0) throw std::invalid_argument("head.num_experts must be >= 1");
  for (auto e : domain_assignment) {
    if (e >= num_experts) {
      throw std::invalid_argument("head.domain_assignment names expert " + std::to_string(e) +
                                  " but num_experts = " + std::to_string(num_experts));
    }
  }
}

TaskHead::TaskHead(HeadConfig config) : config_(std::move(config)) {
  config_.validate();
  std::vector<Expert> experts;
  experts.reserve(config_.num_experts);
  for (std::size_t e = 0; e < config_.num_experts; ++e) {
    experts.push_back(Expert{ConvLayer(config_.in_channels, config_.hidden_channels),
                             ConvLayer(config_.hidden_channels, config_.expert_out_channels)});
  }
  SpatialRouter router{ConvLayer(config_.in_channels, config_.num_experts)};
  moe_ = MoELayer(std::move(experts), std::move(router), config_.routing_mode,
                  config_.gate_scaling, config_.domain_assignment);
  shared_ = ConvLayer(config_.expert_out_channels, config_.num_classes);
  if (config_.global_router_dim > 0) {
    global_router_.emplace(config_.global_router_dim, config_.num_experts);
  }
}

TaskHead TaskHead::initialized(HeadConfig config, std::uint64_t seed) {
  TaskHead head(std::move(config));
  Rng rng(seed);
  for (auto& p : head.parameters()) {
    if (p.value.shape().size() != 2) continue;
    const double fan_in = static_cast<double>(p.value.dim(1));
    const bool relu_follows = p.name.find(".fc1.") != std::string::npos;
    const double stddev = std::sqrt((relu_follows ? 2.0 : 1.0) / fan_in);
    Tensor t = p.value;
    for (auto& v : t.mutable_data()) v = rng.normal(0.0, stddev);
  }
  return head;
}

std::vector<Parameter> TaskHead::parameters() const {
  std::vector<Parameter> out;
  const auto& experts = moe_.experts();
  for (std::size_t e = 0; e < experts.size(); ++e) {
    const std::string base = "experts." + std::to_string(e) + ".";
    out.push_back({base + "fc1.weight", experts[e].fc1.weight});
    out.push_back({base + "fc1.bias", experts[e].fc1.bias});
    out.push_back({base + "fc2.weight", experts[e].fc2.weight});
    out.push_back({base + "fc2.bias", experts[e].fc2.bias});
  }
  out.push_back({"router.weight", moe_.router().proj.weight});
  out.push_back({"router.bias", moe_.router().proj.bias});
  out.push_back({"shared.weight", shared_.weight});
  out.push_back({"shared.bias", shared_.bias});
  if (global_router_) {
    out.push_back({"global_router.weight", global_router_->weight});
    out.push_back({"global_router.bias", global_router_->bias});
  }
  return out;
}

std::size_t TaskHead::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.value.numel();
  return n;
}

Tensor TaskHead::forward(const Tensor& features, const MoEForwardOptions& opts,
                         std::optional<RoutingMap>* routing) const {
  return shared_.forward(moe_forward(features, moe_, opts, routing));
}

void require_same_structure(const TaskHead& a, const TaskHead& b) {
  auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) {
    throw std::invalid_argument("task heads differ in parameter count: " +
                                std::to_string(pa.size()) + " vs " + std::to_string(pb.size()));
  }
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].name != pb[i].name || pa[i].value.shape() != pb[i].value.shape()) {
      throw std::invalid_argument("task heads differ at parameter '" + pa[i].name + "' " +
                                  shape_str(pa[i].value.shape()) + " vs '" + pb[i].name + "' " +
                                  shape_str(pb[i].value.shape()));
    }
  }
}

bool bit_identical(const TaskHead& a, const TaskHead& b) {
  auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].name != pb[i].name || pa[i].value.shape() != pb[i].value.shape()) return false;
    auto x = pa[i].value.data(), y = pb[i].value.data();
    if (std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

double l2_distance(const TaskHead& a, const TaskHead& b) {
  require_same_structure(a, b);
  auto pa = a.parameters(), pb = b.parameters();
  double acc = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    auto x = pa[i].value.data(), y = pb[i].value.data();
    for (std::size_t j = 0; j < x.size(); ++j) acc += (x[j] - y[j]) * (x[j] - y[j]);
  }
  return std::sqrt(acc);
}

namespace {
constexpr char kHeadMagic[5] = "FMXH";
constexpr std::uint32_t kHeadVersion = 1;
}  // namespace

void save_head(const TaskHead& head, std::ostream& out) {
  using namespace binio;
  const auto& c = head.config();
  out.write(kHeadMagic, 4);
  put<std::uint32_t>(out, kHeadVersion);
  put<std::uint64_t>(out, c.in_channels);
  put<std::uint64_t>(out, c.hidden_channels);
  put<std::uint64_t>(out, c.expert_out_channels);
  put<std::uint64_t>(out, c.num_classes);
  put<std::uint64_t>(out, c.num_experts);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.routing_mode));
  put<std::uint8_t>(out, c.gate_scaling ? 1 : 0);
  put<std::uint64_t>(out, c.domain_assignment.size());
  for (auto e : c.domain_assignment) put<std::uint64_t>(out, e);
  put<std::uint64_t>(out, c.global_router_dim);
  const auto params = head.parameters();
  put<std::uint64_t>(out, params.size());
  for (const auto& p : params) {
    put_string(out, p.name);
    put<std::uint64_t>(out, p.value.numel());
    put_doubles(out, p.value.data().data(), p.value.numel());
  }
}

TaskHead load_head(std::istream& in) {
  using namespace binio;
  expect_magic(in, kHeadMagic);
  const auto version = get<std::uint32_t>(in);
  if (version != kHeadVersion) {
    throw std::runtime_error("unsupported head checkpoint version " + std::to_string(version));
  }
  HeadConfig c;
  c.in_channels = get<std::uint64_t>(in);
  c.hidden_channels = get<std::uint64_t>(in);
  c.expert_out_channels = get<std::uint64_t>(in);
  c.num_classes = get<std::uint64_t>(in);
  c.num_experts = get<std::uint64_t>(in);
  const auto mode = get<std::uint32_t>(in);
  if (mode > static_cast<std::uint32_t>(RoutingMode::domain_assigned)) {
    throw std::runtime_error("corrupt head checkpoint: routing mode " + std::to_string(mode));
  }
  c.routing_mode = static_cast<RoutingMode>(mode);
  c.gate_scaling = get<std::uint8_t>(in) != 0;
  const auto n_assign = get<std::uint64_t>(in);
  if (n_assign > 1024) throw std::runtime_error("corrupt head checkpoint: assignment table");
  for (std::uint64_t i = 0; i < n_assign; ++i) c.domain_assignment.push_back(get<std::uint64_t>(in));
  c.global_router_dim = get<std::uint64_t>(in);

  TaskHead head(c);
  auto params = head.parameters();
  const auto count = get<std::uint64_t>(in);
  if (count != params.size()) {
    throw std::runtime_error("head checkpoint has " + std::to_string(count) +
                             " tensors, expected " + std::to_string(params.size()));
  }
  for (auto& p : params) {
    const auto name = get_string(in);
    const auto n = get<std::uint64_t>(in);
    if (name != p.name || n != p.value.numel()) {
      throw std::runtime_error("head checkpoint tensor '" + name + "' does not match '" + p.name +
                               "'");
    }
    auto values = get_doubles(in, n);
    std::copy(values.begin(), values.end(), p.value.mutable_data().begin());
  }
  return head;
}

ExpertLoad expert_load(const std::vector<RoutingMap>& maps) {
  if (maps.empty()) throw std::invalid_argument("expert_load: no routing maps");
  const std::size_t k = maps.front().num_experts();
  ExpertLoad load;
  load.counts.assign(k, 0);
  for (const auto& m : maps) {
    if (m.num_experts() != k) {
      throw std::invalid_argument("expert_load: inconsistent expert counts " + std::to_string(k) +
                                  " vs " + std::to_string(m.num_experts()));
    }
    for (auto e : m.selected) ++load.counts[e];
    load.total += m.selected.size();
  }
  load.fractions.resize(k);
  for (std::size_t e = 0; e < k; ++e) {
    load.fractions[e] = static_cast<double>(load.counts[e]) / static_cast<double>(load.total);
  }
  return load;
}

std::vector<std::optional<ExpertLocation>> expert_mean_location(
    const std::vector<RoutingMap>& maps) {
  if (maps.empty()) throw std::invalid_argument("expert_mean_location: no routing maps");
  const std::size_t k = maps.front().num_experts();
  std::vector<double> sx(k, 0.0), sy(k, 0.0);
  std::vector<std::uint64_t> n(k, 0);
  for (const auto& m : maps) {
    if (m.num_experts() != k) {
      throw std::invalid_argument("expert_mean_location: inconsistent expert counts");
    }
    const std::size_t h = m.height(), w = m.width();
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const auto e = m.selected[r * w + c];
        sx[e] += (static_cast<double>(c) + 0.5) / static_cast<double>(w);
        sy[e] += (static_cast<double>(r) + 0.5) / static_cast<double>(h);
        ++n[e];
      }
  }
  std::vector<std::optional<ExpertLocation>> out(k);
  for (std::size_t e = 0; e < k; ++e) {
    if (n[e] == 0) continue;
    out[e] = ExpertLocation{sx[e] / static_cast<double>(n[e]), sy[e] / static_cast<double>(n[e])};
  }
  return out;
}

std::vector<RoutingRow> routing_rows(const std::vector<RoutingGroup>& groups) {
  std::vector<RoutingRow> rows;
  for (const auto& g : groups) {
    if (g.maps.empty()) continue;
    auto load = expert_load(g.maps);
    auto loc = expert_mean_location(g.maps);
    for (std::size_t e = 0; e < loc.size(); ++e) {
      if (!loc[e]) continue;
      rows.push_back({g.resolution_tag, e, loc[e]->mean_x, loc[e]->mean_y, load.fractions[e]});
    }
  }
  return rows;
}

void write_routing_csv(std::ostream& out, const std::vector<RoutingRow>& rows) {
  out << "# schema: routing v1\n";
  out << "resolution_tag,expert_id,mean_x,mean_y,pixel_fraction\n";
  out << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.resolution_tag << ',' << r.expert_id << ',' << r.mean_x << ',' << r.mean_y << ','
        << r.pixel_fraction << '\n';
  }
}

}  // namespace fedmox
