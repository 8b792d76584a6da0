#pragma once

// Run configuration: an INI file with one section per component.
//
//   [world]       sample counts, resolution, channels, noise, data seed
//   [domain.N]    optional explicit shift for domain N
//   [head]        MoE task head
//   [ssl]         client pseudo-labeling
//   [federation]  rounds, sampling, soft mixture, training seed
//   [warmup_optimizer] [server_optimizer] [client_optimizer]
//   [ablate]      grid for the ablate command
//
// Unknown sections or keys are rejected. Values serialize in shortest
// round-trip form, so parse(serialize(c)) == c.

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedmox/federation.hpp"
#include "fedmox/synth.hpp"

namespace fedmox {

struct AblateGrid {
  std::vector<std::string> methods{"fedmox"};
  std::vector<double> alphas;                // empty: take federation.alpha
  std::vector<std::size_t> num_experts;      // empty: per-method default
  std::vector<RoutingMode> routing_modes;    // empty: take head.routing_mode
  std::vector<std::uint64_t> seeds;          // empty: take federation.seed

  bool operator==(const AblateGrid&) const = default;
};

struct RunConfig {
  WorldConfig world;
  std::uint64_t world_seed = 0;
  TrainingConfig training;
  AblateGrid ablate;

  // Copies shared fields (client count, feature channels) from their
  // single source into dependent structs, then validates everything.
  void finalize();
  bool operator==(const RunConfig&) const = default;
};

// The calibrated toy defaults used by the shipped config and tests.
RunConfig default_run_config();

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

class MissingKeyError : public ConfigError {
 public:
  explicit MissingKeyError(const std::string& key)
      : ConfigError(key, "missing required key '" + key + "'") {}
};

// Keys that must appear in every config file.
const std::vector<std::string>& required_keys();

// Parses INI text. Keys absent from the text keep their defaults, except
// required keys, which throw MissingKeyError.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);
std::string serialize_config(const RunConfig& cfg);

// Applies one "section.key=value" override, e.g. "federation.alpha=0.3".
void apply_override(RunConfig& cfg, const std::string& assignment);

// FNV-1a of the serialized config with the training seed cleared, as 16
// hex digits. Differing configs land in differing run directories.
std::string config_hash(const RunConfig& cfg);

// Named method presets used by the ablation grid.
//   fedmox          config as given
//   fedavg          alpha 0, single expert
//   fedprox         fedavg plus proximal term mu = 0.001
//   server_only     no client training
//   low_res_server  config as given, server trains on pooled data
void apply_method(RunConfig& cfg, const std::string& method);
const std::vector<std::string>& known_methods();

}  // namespace fedmox
