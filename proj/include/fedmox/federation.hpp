#pragma once

// Server-client orchestration: supervised warm-up on the server's labeled
// high-resolution data, then rounds of client sampling, unsupervised local
// training, FedAvg aggregation, soft mixture with the previous server
// model, and supervised server training.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedmox/moe.hpp"
#include "fedmox/optimizer.hpp"
#include "fedmox/rng.hpp"
#include "fedmox/ssl.hpp"
#include "fedmox/synth.hpp"
#include "json.hpp"

namespace fedmox {

enum class AggregationWeighting {
  participants,  // normalize over the sampled clients only
  global_n,      // unsampled clients contribute the broadcast head
};

std::string to_string(AggregationWeighting w);
AggregationWeighting aggregation_weighting_from_string(const std::string& s);

struct FLConfig {
  std::size_t num_clients = 3;
  double sample_ratio = 0.33;
  std::size_t rounds = 50;
  std::size_t warmup_epochs = 50;
  std::size_t server_epochs_per_round = 1;
  double alpha = 0.1;
  AggregationWeighting weighting = AggregationWeighting::participants;
  // false: no client training at all, the server keeps training alone.
  bool use_clients = true;
  // Server trains (warm-up and rounds) on 2x-pooled data.
  bool low_res_server = false;
  std::size_t server_batch_size = 8;
  std::size_t client_batch_size = 8;
  std::uint64_t seed = 0;

  // M = max(1, round(sample_ratio * num_clients)), halves rounded up.
  std::size_t participants_per_round() const;
  void validate() const;
  bool operator==(const FLConfig&) const = default;
};

struct TrainingConfig {
  FLConfig fl;
  SSLConfig ssl;
  // Supervised warm-up; server phases of each round; client local training.
  OptimizerConfig warmup_optimizer;
  OptimizerConfig server_optimizer;
  OptimizerConfig client_optimizer;
  HeadConfig head;

  void validate() const;
  bool operator==(const TrainingConfig&) const = default;
};

// Backbone features for every party. Server samples are labeled; client
// samples are not.
struct FederationData {
  std::uint64_t backbone_hash = 0;
  std::uint64_t backbone_params = 0;
  std::size_t num_domains = 0;
  std::size_t server_height = 0;
  std::size_t server_width = 0;
  std::size_t client_height = 0;
  std::size_t client_width = 0;
  std::vector<LabeledFeatures> server;
  std::vector<std::vector<UnlabeledFeatures>> clients;
  std::vector<LabeledFeatures> test;

  static FederationData from_world(const World& world, bool low_res_server);
  // Throws if any sample id is shared between the server and a client or
  // between two clients.
  void check_disjoint() const;
};

class RoundError : public std::runtime_error {
 public:
  RoundError(std::size_t round, const std::string& stage, const std::string& what);
  std::size_t round() const { return round_; }
  const std::string& stage() const { return stage_; }

 private:
  std::size_t round_;
  std::string stage_;
};

struct ClientRecord {
  std::size_t client_id = 0;
  std::size_t domain_id = 0;
  std::size_t num_samples = 0;
};

struct FederationState {
  TaskHead global_head;
  TaskHead prev_server_head;
  std::vector<ClientRecord> clients;
  std::size_t round = 0;
  std::uint64_t seed = 0;
  std::uint64_t backbone_hash = 0;
};

struct EvalResult {
  // Indexed by domain id; nullopt when the domain has no test pixels.
  std::vector<std::optional<double>> per_domain_accuracy;
  double total_accuracy = 0.0;
  std::vector<double> expert_load;
  // Pixel-count confusion matrix, [truth][prediction].
  std::vector<std::vector<std::uint64_t>> confusion;
};

// Per-pixel accuracy per domain and over all test pixels.
EvalResult evaluate(const TaskHead& head, std::span<const LabeledFeatures> test,
                    std::size_t num_domains);

struct RoundMetrics {
  std::size_t round = 0;
  std::vector<std::optional<double>> per_domain_accuracy;
  double total_accuracy = 0.0;
  double server_loss = 0.0;
  double mean_client_loss = 0.0;
  std::vector<std::size_t> participants;
  std::vector<double> pseudo_label_coverage;  // aligned with participants
  std::vector<double> expert_load;
  std::uint64_t params_communicated = 0;
  std::uint64_t backbone_params_communicated = 0;
  std::uint64_t flops_client_step = 0;
  std::uint64_t backbone_hash = 0;
  std::vector<std::string> warnings;
};

nlohmann::json to_json(const RoundMetrics& m);

// Uniform sample of `m` ids without replacement; ascending order.
// Deterministic given (seed, round).
std::vector<std::size_t> sample_clients(std::size_t num_clients, std::size_t m,
                                        std::uint64_t seed, std::size_t round);

// Sample-count weighted mean of the heads' parameters.
TaskHead aggregate_fedavg(std::span<const TaskHead> heads, std::span<const std::size_t> sizes);

// alpha * prev_server + (1 - alpha) * aggregated. The endpoints return
// exact copies.
TaskHead soft_mixture(const TaskHead& prev_server, const TaskHead& aggregated, double alpha);

// One pass of supervised cross-entropy training over `data`; returns the
// mean batch loss. Batches never mix domains.
double supervised_epoch(TaskHead& head, std::span<const LabeledFeatures> data, Optimizer& opt,
                        Rng& rng, std::size_t batch_size, std::size_t& step_index);

struct WarmupResult {
  TaskHead head;
  std::vector<double> epoch_losses;
};

WarmupResult warmup(const TrainingConfig& cfg, const FederationData& data);

FederationState init_state(const TrainingConfig& cfg, const FederationData& data,
                           TaskHead warm_head);

RoundMetrics run_round(FederationState& state, const TrainingConfig& cfg,
                       const FederationData& data);

// Round-0 record for the warm-started head.
RoundMetrics warmup_metrics(const FederationState& state, const TrainingConfig& cfg,
                            const FederationData& data, double warmup_loss);

struct FederationResult {
  TaskHead warmup_head;
  TaskHead final_head;
  std::vector<RoundMetrics> rounds;  // round 0 is the warm-up
};

using RoundCallback = std::function<void(const RoundMetrics&)>;

// Full run. `warm_head`, if given, replaces the warm-up phase (used to
// share one warm-up across a sweep).
FederationResult run_federation(const TrainingConfig& cfg, const FederationData& data,
                                const std::optional<WarmupResult>& warm = std::nullopt,
                                const RoundCallback& on_round = {});

}  // namespace fedmox
