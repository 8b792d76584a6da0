#pragma once

// Synthetic multi-domain dense-prediction world.
//
// Scenes are street-like layouts with four per-pixel classes: sky (0),
// vehicle (1), building (2) and road (3). Class regions depend on image
// position, and the image carries a vertical position cue channel so a
// per-pixel model can see where a pixel sits. Domains apply a per-channel
// affine shift plus noise to the clean image. Domain 0 belongs to the
// server; every other domain belongs to clients.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fedmox/tensor.hpp"

namespace fedmox {

enum class Resolution : std::uint8_t { high = 0, low = 1 };
std::string to_string(Resolution r);

struct DomainSpec {
  std::size_t domain_id = 0;
  std::vector<double> scale;  // per image channel
  std::vector<double> bias;   // per image channel
  double noise_sigma = 0.0;

  bool operator==(const DomainSpec&) const = default;
};

// Built-in shifts for domains 0..3 (identity, darker, dim and noisy,
// bright). Further domains reuse the table cyclically with a stronger
// shift.
DomainSpec default_domain_spec(std::size_t domain_id, std::size_t image_channels);

struct LabeledSample {
  std::uint64_t sample_id = 0;
  std::size_t domain_id = 0;
  Tensor image;                      // C_in x H x W
  std::vector<std::uint8_t> label;   // H x W class ids
  Resolution resolution = Resolution::high;
};

// Client-side sample. Carries no label by construction.
struct UnlabeledSample {
  std::uint64_t sample_id = 0;
  std::size_t domain_id = 0;
  Tensor image;
  Resolution resolution = Resolution::low;
};

// relu(conv1x1) followed by a fixed per-channel standardization, the
// stand-in for a pretrained backbone's final normalization.
struct FrozenBackbone {
  Tensor weight;      // C x C_in
  Tensor bias;        // C
  Tensor norm_scale;  // C
  Tensor norm_shift;  // C

  // Random projection with identity normalization.
  static FrozenBackbone random(std::size_t image_channels, std::size_t feature_channels,
                               std::uint64_t seed);
  // Sets the normalization so features of `images` have zero mean and unit
  // variance per channel. Dead channels keep unit scale.
  void calibrate(const std::vector<const Tensor*>& images);
  std::size_t feature_channels() const { return weight.dim(0); }
  std::size_t image_channels() const { return weight.dim(1); }
  // FNV-1a over the raw parameter bytes.
  std::uint64_t hash() const;
};

// Spatial size is preserved.
Tensor extract_features(const FrozenBackbone& backbone, const Tensor& image);

struct WorldConfig {
  std::size_t num_domains = 4;
  std::size_t num_clients = 3;
  std::size_t server_samples = 120;
  std::size_t client_samples = 160;
  std::size_t test_samples_per_domain = 40;
  std::size_t height = 16;  // high resolution; low resolution is half per axis
  std::size_t width = 16;
  std::size_t image_channels = 4;
  std::size_t feature_channels = 8;
  double base_noise = 0.08;
  // Explicit domain shifts; missing domains fall back to default_domain_spec.
  std::vector<DomainSpec> domains;

  void validate() const;
  DomainSpec domain(std::size_t d) const;
  // Client i holds data from domain 1 + (i mod (num_domains - 1)).
  std::size_t client_domain(std::size_t client) const { return 1 + client % (num_domains - 1); }
  bool operator==(const WorldConfig&) const = default;
};

struct World {
  WorldConfig config;
  FrozenBackbone backbone;
  std::vector<LabeledSample> server;                // domain 0, high resolution
  std::vector<std::vector<UnlabeledSample>> clients;  // low resolution
  std::vector<LabeledSample> test;                  // all domains, high resolution
};

inline constexpr std::size_t kNumClasses = 4;

World generate_world(const WorldConfig& config, std::uint64_t seed);

// 2x2 average pooling per channel. The label, if any, is dropped.
UnlabeledSample downsample(const LabeledSample& high);
UnlabeledSample downsample(const UnlabeledSample& high);
// Low-resolution labeled copy: images pooled as above, labels by 2x2
// majority vote (ties to the lowest class id). Only used by the
// low-resolution-server ablation.
LabeledSample downsample_labeled(const LabeledSample& high);
Tensor avg_pool2(const Tensor& image);

// Flat binary dump: magic "FMXW", u32 version, config and shapes, then
// row-major f64 images and u8 labels.
void save_world(const World& world, std::ostream& out);
World load_world(std::istream& in);

// Precomputed backbone features. Client features have no label field.
struct LabeledFeatures {
  std::uint64_t sample_id = 0;
  std::size_t domain_id = 0;
  Tensor features;          // C x H x W
  std::vector<int> labels;  // H x W
};

struct UnlabeledFeatures {
  std::uint64_t sample_id = 0;
  std::size_t domain_id = 0;
  Tensor features;
};

std::vector<LabeledFeatures> featurize(const FrozenBackbone& backbone,
                                       const std::vector<LabeledSample>& samples);
std::vector<UnlabeledFeatures> featurize(const FrozenBackbone& backbone,
                                         const std::vector<UnlabeledSample>& samples);

}  // namespace fedmox
