#include "fedmox/synth.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <numbers>
#include <stdexcept>

#include "binary_io.hpp"
#include "fedmox/rng.hpp"

namespace fedmox {

std::string to_string(Resolution r) { return r == Resolution::high ? "high" : "low"; }

namespace {

// Clean RGB-like colors per class: sky, vehicle, building, road.
constexpr std::array<std::array<double, 3>, kNumClasses> kPrototypes{{
    {0.80, 0.85, 0.95},
    {0.80, 0.20, 0.20},
    {0.45, 0.45, 0.45},
    {0.20, 0.20, 0.25},
}};

// Domain shifts: identity, dusk, fog, warm light.
constexpr std::array<std::array<double, 3>, 4> kShiftScale{{
    {1.00, 1.00, 1.00},
    {0.75, 0.75, 0.80},
    {0.70, 0.72, 0.75},
    {1.00, 0.90, 0.80},
}};
constexpr std::array<std::array<double, 3>, 4> kShiftBias{{
    {0.00, 0.00, 0.00},
    {0.00, 0.00, 0.05},
    {0.20, 0.20, 0.20},
    {0.15, 0.10, 0.00},
}};
constexpr std::array<double, 4> kShiftNoise{0.0, 0.03, 0.06, 0.04};

struct SceneLayout {
  double horizon, horizon_amp, horizon_freq, horizon_phase;
  double ground, ground_amp, ground_freq, ground_phase;
  std::array<double, 3> amp, fx, fy, phase;
  double illumination;
};

SceneLayout draw_layout(Rng& rng) {
  SceneLayout s{};
  s.horizon = rng.uniform(0.20, 0.32);
  s.horizon_amp = rng.uniform(0.0, 0.06);
  s.horizon_freq = rng.uniform(0.5, 1.5);
  s.horizon_phase = rng.uniform();
  s.ground = rng.uniform(0.68, 0.80);
  s.ground_amp = rng.uniform(0.0, 0.05);
  s.ground_freq = rng.uniform(0.5, 1.5);
  s.ground_phase = rng.uniform();
  for (std::size_t j = 0; j < 3; ++j) {
    s.amp[j] = rng.uniform(0.5, 1.0);
    s.fx[j] = rng.uniform(-2.0, 2.0);
    s.fy[j] = rng.uniform(-2.0, 2.0);
    s.phase[j] = rng.uniform();
  }
  s.illumination = rng.uniform(0.9, 1.1);
  return s;
}

std::uint8_t label_at(const SceneLayout& s, double u, double v) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const double horizon =
      s.horizon + s.horizon_amp * std::sin(two_pi * (s.horizon_freq * u + s.horizon_phase));
  const double ground =
      s.ground + s.ground_amp * std::sin(two_pi * (s.ground_freq * u + s.ground_phase));
  if (v < horizon) return 0;
  if (v > ground) return 3;
  double field = 0.0;
  for (std::size_t j = 0; j < 3; ++j) {
    field += s.amp[j] * std::sin(two_pi * (s.fx[j] * u + s.fy[j] * v + s.phase[j]));
  }
  return field > 0.0 ? 1 : 2;
}

LabeledSample render_sample(const WorldConfig& cfg, const DomainSpec& domain,
                            std::uint64_t sample_id, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {kWorldStream, sample_id}));
  const SceneLayout layout = draw_layout(rng);
  const std::size_t h = cfg.height, w = cfg.width, c_in = cfg.image_channels;
  const std::size_t pixels = h * w;
  const double sigma = std::hypot(cfg.base_noise, domain.noise_sigma);

  LabeledSample s;
  s.sample_id = sample_id;
  s.domain_id = domain.domain_id;
  s.resolution = Resolution::high;
  s.label.resize(pixels);
  std::vector<double> img(c_in * pixels);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t col = 0; col < w; ++col) {
      const double u = (static_cast<double>(col) + 0.5) / static_cast<double>(w);
      const double v = (static_cast<double>(r) + 0.5) / static_cast<double>(h);
      const std::size_t p = r * w + col;
      const std::uint8_t cls = label_at(layout, u, v);
      s.label[p] = cls;
      for (std::size_t ch = 0; ch < c_in; ++ch) {
        const bool cue = ch + 1 == c_in;
        const double clean = cue ? v : kPrototypes[cls][ch % 3] * layout.illumination;
        img[ch * pixels + p] = domain.scale[ch] * clean + domain.bias[ch] + rng.normal(0.0, sigma);
      }
    }
  }
  s.image = Tensor({c_in, h, w}, std::move(img));
  return s;
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* b = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

DomainSpec default_domain_spec(std::size_t domain_id, std::size_t image_channels) {
  DomainSpec d;
  d.domain_id = domain_id;
  d.scale.assign(image_channels, 1.0);
  d.bias.assign(image_channels, 0.0);
  if (domain_id == 0) return d;
  const std::size_t row = 1 + (domain_id - 1) % 3;
  const double boost = domain_id <= 3 ? 1.0 : 2.0;
  for (std::size_t ch = 0; ch + 1 < image_channels; ++ch) {
    d.scale[ch] = 1.0 - boost * (1.0 - kShiftScale[row][ch % 3]);
    d.bias[ch] = boost * kShiftBias[row][ch % 3];
  }
  d.noise_sigma = boost * kShiftNoise[row];
  return d;
}

void WorldConfig::validate() const {
  if (num_domains < 2) {
    throw std::invalid_argument("world.num_domains must be >= 2 (got " +
                                std::to_string(num_domains) + ")");
  }
  if (num_clients == 0 || server_samples == 0 || client_samples == 0 ||
      test_samples_per_domain == 0) {
    throw std::invalid_argument("world sample counts and num_clients must be positive");
  }
  if (height == 0 || width == 0 || height % 2 || width % 2) {
    throw std::invalid_argument("world height/width must be positive and even");
  }
  if (image_channels < 2) throw std::invalid_argument("world.image_channels must be >= 2");
  if (feature_channels == 0) throw std::invalid_argument("world.feature_channels must be >= 1");
  for (const auto& d : domains) {
    if (d.scale.size() != image_channels || d.bias.size() != image_channels) {
      throw std::invalid_argument("domain " + std::to_string(d.domain_id) +
                                  " shift needs one scale and bias per image channel");
    }
    if (!(d.noise_sigma >= 0.0)) throw std::invalid_argument("domain noise must be >= 0");
  }
}

DomainSpec WorldConfig::domain(std::size_t d) const {
  for (const auto& spec : domains) {
    if (spec.domain_id == d) return spec;
  }
  return default_domain_spec(d, image_channels);
}

FrozenBackbone FrozenBackbone::random(std::size_t image_channels, std::size_t feature_channels,
                                      std::uint64_t seed) {
  Rng rng(seed);
  FrozenBackbone b;
  std::vector<double> w(feature_channels * image_channels), bias(feature_channels);
  const double stddev = 2.0 / std::sqrt(static_cast<double>(image_channels));
  for (auto& v : w) v = rng.normal(0.0, stddev);
  for (auto& v : bias) v = rng.normal(0.0, 0.5);
  b.weight = Tensor({feature_channels, image_channels}, std::move(w));
  b.bias = Tensor({feature_channels}, std::move(bias));
  b.norm_scale = Tensor::full({feature_channels}, 1.0);
  b.norm_shift = Tensor::zeros({feature_channels});
  return b;
}

void FrozenBackbone::calibrate(const std::vector<const Tensor*>& images) {
  if (images.empty()) throw std::invalid_argument("backbone calibration needs images");
  const std::size_t c = feature_channels();
  norm_scale = Tensor::full({c}, 1.0);
  norm_shift = Tensor::zeros({c});
  std::vector<double> sum(c, 0.0), sq(c, 0.0);
  double count = 0.0;
  for (const auto* img : images) {
    Tensor f = extract_features(*this, *img);
    const std::size_t pixels = f.dim(1) * f.dim(2);
    auto v = f.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < pixels; ++p) {
        sum[ch] += v[ch * pixels + p];
        sq[ch] += v[ch * pixels + p] * v[ch * pixels + p];
      }
    }
    count += static_cast<double>(pixels);
  }
  auto scale = norm_scale.mutable_data();
  auto shift = norm_shift.mutable_data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double mean = sum[ch] / count;
    const double var = sq[ch] / count - mean * mean;
    scale[ch] = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
    shift[ch] = -mean * scale[ch];
  }
}

std::uint64_t FrozenBackbone::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Tensor* t : {&weight, &bias, &norm_scale, &norm_shift}) {
    auto v = t->data();
    h = fnv1a(v.data(), v.size() * sizeof(double), h);
  }
  return h;
}

Tensor extract_features(const FrozenBackbone& backbone, const Tensor& image) {
  if (image.shape().size() != 3 || image.dim(0) != backbone.image_channels()) {
    throw ShapeError("extract_features: image " + shape_str(image.shape()) +
                     " does not match backbone " + shape_str(backbone.weight.shape()));
  }
  NoGradGuard no_grad;
  Tensor f = ops::relu(ops::conv1x1(image, backbone.weight, backbone.bias));
  const std::size_t c = f.dim(0), pixels = f.dim(1) * f.dim(2);
  auto v = f.mutable_data();
  auto scale = backbone.norm_scale.data(), shift = backbone.norm_shift.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < pixels; ++p) {
      v[ch * pixels + p] = v[ch * pixels + p] * scale[ch] + shift[ch];
    }
  }
  return f;
}

World generate_world(const WorldConfig& config, std::uint64_t seed) {
  config.validate();
  World world;
  world.config = config;
  world.backbone = FrozenBackbone::random(config.image_channels, config.feature_channels,
                                          derive_seed(seed, {kBackboneStream}));
  std::uint64_t next_id = 0;
  const DomainSpec server_domain = config.domain(0);
  for (std::size_t i = 0; i < config.server_samples; ++i) {
    world.server.push_back(render_sample(config, server_domain, next_id++, seed));
  }
  std::vector<const Tensor*> calibration;
  for (const auto& s : world.server) calibration.push_back(&s.image);
  world.backbone.calibrate(calibration);
  world.clients.resize(config.num_clients);
  for (std::size_t c = 0; c < config.num_clients; ++c) {
    const DomainSpec dom = config.domain(config.client_domain(c));
    for (std::size_t i = 0; i < config.client_samples; ++i) {
      world.clients[c].push_back(downsample(render_sample(config, dom, next_id++, seed)));
    }
  }
  for (std::size_t d = 0; d < config.num_domains; ++d) {
    const DomainSpec dom = config.domain(d);
    for (std::size_t i = 0; i < config.test_samples_per_domain; ++i) {
      world.test.push_back(render_sample(config, dom, next_id++, seed));
    }
  }
  return world;
}

Tensor avg_pool2(const Tensor& image) {
  if (image.shape().size() != 3 || image.dim(1) % 2 || image.dim(2) % 2) {
    throw ShapeError("downsample: spatial dims must be even, got " + shape_str(image.shape()));
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::size_t ho = h / 2, wo = w / 2;
  auto in = image.data();
  std::vector<double> out(c * ho * wo);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < ho; ++r)
      for (std::size_t col = 0; col < wo; ++col) {
        const double* base = in.data() + ch * h * w;
        const double a = base[(2 * r) * w + 2 * col];
        const double b = base[(2 * r) * w + 2 * col + 1];
        const double d = base[(2 * r + 1) * w + 2 * col];
        const double e = base[(2 * r + 1) * w + 2 * col + 1];
        out[ch * ho * wo + r * wo + col] = (a + b + d + e) / 4.0;
      }
  return Tensor({c, ho, wo}, std::move(out));
}

UnlabeledSample downsample(const LabeledSample& high) {
  if (high.resolution != Resolution::high) {
    throw std::invalid_argument("downsample: sample " + std::to_string(high.sample_id) +
                                " is not high resolution");
  }
  return UnlabeledSample{high.sample_id, high.domain_id, avg_pool2(high.image), Resolution::low};
}

UnlabeledSample downsample(const UnlabeledSample& high) {
  if (high.resolution != Resolution::high) {
    throw std::invalid_argument("downsample: sample " + std::to_string(high.sample_id) +
                                " is not high resolution");
  }
  return UnlabeledSample{high.sample_id, high.domain_id, avg_pool2(high.image), Resolution::low};
}

LabeledSample downsample_labeled(const LabeledSample& high) {
  UnlabeledSample low = downsample(high);
  const std::size_t h = high.image.dim(1), w = high.image.dim(2);
  const std::size_t ho = h / 2, wo = w / 2;
  LabeledSample out{low.sample_id, low.domain_id, low.image, {}, Resolution::low};
  out.label.resize(ho * wo);
  for (std::size_t r = 0; r < ho; ++r)
    for (std::size_t c = 0; c < wo; ++c) {
      std::array<int, kNumClasses> votes{};
      ++votes[high.label[(2 * r) * w + 2 * c]];
      ++votes[high.label[(2 * r) * w + 2 * c + 1]];
      ++votes[high.label[(2 * r + 1) * w + 2 * c]];
      ++votes[high.label[(2 * r + 1) * w + 2 * c + 1]];
      std::uint8_t best = 0;
      for (std::uint8_t k = 1; k < kNumClasses; ++k) {
        if (votes[k] > votes[best]) best = k;
      }
      out.label[r * wo + c] = best;
    }
  return out;
}

namespace {

constexpr char kWorldMagic[5] = "FMXW";
constexpr std::uint32_t kWorldVersion = 1;

void put_tensor(std::ostream& out, const Tensor& t) {
  binio::put<std::uint64_t>(out, t.shape().size());
  for (auto d : t.shape()) binio::put<std::uint64_t>(out, d);
  binio::put_doubles(out, t.data().data(), t.numel());
}

Tensor get_tensor(std::istream& in) {
  const auto rank = binio::get<std::uint64_t>(in);
  if (rank == 0 || rank > 4) throw std::runtime_error("corrupt dataset: tensor rank");
  Shape shape;
  for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(binio::get<std::uint64_t>(in));
  const std::size_t n = shape_numel(shape);
  if (n > (std::size_t{1} << 28)) throw std::runtime_error("corrupt dataset: tensor size");
  return Tensor(shape, binio::get_doubles(in, n));
}

void put_labeled(std::ostream& out, const LabeledSample& s) {
  binio::put<std::uint64_t>(out, s.sample_id);
  binio::put<std::uint64_t>(out, s.domain_id);
  binio::put<std::uint8_t>(out, static_cast<std::uint8_t>(s.resolution));
  put_tensor(out, s.image);
  binio::put<std::uint64_t>(out, s.label.size());
  out.write(reinterpret_cast<const char*>(s.label.data()),
            static_cast<std::streamsize>(s.label.size()));
}

LabeledSample get_labeled(std::istream& in) {
  LabeledSample s;
  s.sample_id = binio::get<std::uint64_t>(in);
  s.domain_id = binio::get<std::uint64_t>(in);
  s.resolution = static_cast<Resolution>(binio::get<std::uint8_t>(in));
  s.image = get_tensor(in);
  const auto n = binio::get<std::uint64_t>(in);
  if (n != s.image.dim(1) * s.image.dim(2)) throw std::runtime_error("corrupt dataset: labels");
  s.label.resize(n);
  in.read(reinterpret_cast<char*>(s.label.data()), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("unexpected end of binary stream");
  return s;
}

void put_unlabeled(std::ostream& out, const UnlabeledSample& s) {
  binio::put<std::uint64_t>(out, s.sample_id);
  binio::put<std::uint64_t>(out, s.domain_id);
  binio::put<std::uint8_t>(out, static_cast<std::uint8_t>(s.resolution));
  put_tensor(out, s.image);
}

UnlabeledSample get_unlabeled(std::istream& in) {
  UnlabeledSample s;
  s.sample_id = binio::get<std::uint64_t>(in);
  s.domain_id = binio::get<std::uint64_t>(in);
  s.resolution = static_cast<Resolution>(binio::get<std::uint8_t>(in));
  s.image = get_tensor(in);
  return s;
}

}  // namespace

void save_world(const World& world, std::ostream& out) {
  using namespace binio;
  const auto& c = world.config;
  out.write(kWorldMagic, 4);
  put<std::uint32_t>(out, kWorldVersion);
  for (std::uint64_t v : {c.num_domains, c.num_clients, c.server_samples, c.client_samples,
                          c.test_samples_per_domain, c.height, c.width, c.image_channels,
                          c.feature_channels}) {
    put<std::uint64_t>(out, v);
  }
  put<double>(out, c.base_noise);
  put<std::uint64_t>(out, c.domains.size());
  for (const auto& d : c.domains) {
    put<std::uint64_t>(out, d.domain_id);
    put<std::uint64_t>(out, d.scale.size());
    put_doubles(out, d.scale.data(), d.scale.size());
    put_doubles(out, d.bias.data(), d.bias.size());
    put<double>(out, d.noise_sigma);
  }
  put_tensor(out, world.backbone.weight);
  put_tensor(out, world.backbone.bias);
  put_tensor(out, world.backbone.norm_scale);
  put_tensor(out, world.backbone.norm_shift);
  put<std::uint64_t>(out, world.server.size());
  for (const auto& s : world.server) put_labeled(out, s);
  put<std::uint64_t>(out, world.clients.size());
  for (const auto& client : world.clients) {
    put<std::uint64_t>(out, client.size());
    for (const auto& s : client) put_unlabeled(out, s);
  }
  put<std::uint64_t>(out, world.test.size());
  for (const auto& s : world.test) put_labeled(out, s);
}

World load_world(std::istream& in) {
  using namespace binio;
  expect_magic(in, kWorldMagic);
  const auto version = get<std::uint32_t>(in);
  if (version != kWorldVersion) {
    throw std::runtime_error("unsupported dataset version " + std::to_string(version));
  }
  World world;
  auto& c = world.config;
  for (std::size_t* field : {&c.num_domains, &c.num_clients, &c.server_samples, &c.client_samples,
                             &c.test_samples_per_domain, &c.height, &c.width, &c.image_channels,
                             &c.feature_channels}) {
    *field = get<std::uint64_t>(in);
  }
  c.base_noise = get<double>(in);
  const auto n_domains = get<std::uint64_t>(in);
  if (n_domains > 4096) throw std::runtime_error("corrupt dataset: domain table");
  for (std::uint64_t i = 0; i < n_domains; ++i) {
    DomainSpec d;
    d.domain_id = get<std::uint64_t>(in);
    const auto n = get<std::uint64_t>(in);
    if (n > 4096) throw std::runtime_error("corrupt dataset: domain channels");
    d.scale = get_doubles(in, n);
    d.bias = get_doubles(in, n);
    d.noise_sigma = get<double>(in);
    c.domains.push_back(std::move(d));
  }
  world.backbone.weight = get_tensor(in);
  world.backbone.bias = get_tensor(in);
  world.backbone.norm_scale = get_tensor(in);
  world.backbone.norm_shift = get_tensor(in);
  const auto n_server = get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < n_server; ++i) world.server.push_back(get_labeled(in));
  const auto n_clients = get<std::uint64_t>(in);
  world.clients.resize(n_clients);
  for (auto& client : world.clients) {
    const auto n = get<std::uint64_t>(in);
    for (std::uint64_t i = 0; i < n; ++i) client.push_back(get_unlabeled(in));
  }
  const auto n_test = get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < n_test; ++i) world.test.push_back(get_labeled(in));
  return world;
}

std::vector<LabeledFeatures> featurize(const FrozenBackbone& backbone,
                                       const std::vector<LabeledSample>& samples) {
  std::vector<LabeledFeatures> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    out.push_back({s.sample_id, s.domain_id, extract_features(backbone, s.image),
                   std::vector<int>(s.label.begin(), s.label.end())});
  }
  return out;
}

std::vector<UnlabeledFeatures> featurize(const FrozenBackbone& backbone,
                                         const std::vector<UnlabeledSample>& samples) {
  std::vector<UnlabeledFeatures> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    out.push_back({s.sample_id, s.domain_id, extract_features(backbone, s.image)});
  }
  return out;
}

}  // namespace fedmox
