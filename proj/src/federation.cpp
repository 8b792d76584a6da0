#include "fedmox/federation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "fedmox/accounting.hpp"

namespace fedmox {

std::string to_string(AggregationWeighting w) {
  switch (w) {
    case AggregationWeighting::participants: return "participants";
    case AggregationWeighting::global_n: return "global_n";
  }
  return "?";
}

AggregationWeighting aggregation_weighting_from_string(const std::string& s) {
  if (s == "participants") return AggregationWeighting::participants;
  if (s == "global_n") return AggregationWeighting::global_n;
  throw std::invalid_argument("unknown aggregation weighting '" + s +
                              "' (expected participants or global_n)");
}

std::size_t FLConfig::participants_per_round() const {
  const auto m = static_cast<std::size_t>(std::floor(sample_ratio * num_clients + 0.5));
  return std::max<std::size_t>(1, m);
}

void FLConfig::validate() const {
  if (num_clients == 0) throw std::invalid_argument("federation.num_clients must be >= 1");
  if (!(sample_ratio > 0.0 && sample_ratio <= 1.0)) {
    throw std::invalid_argument("federation.sample_ratio must be in (0,1]");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("federation.alpha must be in [0,1], got " + std::to_string(alpha));
  }
  if (server_batch_size == 0 || client_batch_size == 0) {
    throw std::invalid_argument("batch sizes must be positive");
  }
}

void TrainingConfig::validate() const {
  fl.validate();
  ssl.validate();
  warmup_optimizer.validate();
  server_optimizer.validate();
  client_optimizer.validate();
  head.validate();
}

FederationData FederationData::from_world(const World& world, bool low_res_server) {
  FederationData d;
  d.backbone_hash = world.backbone.hash();
  d.backbone_params = backbone_param_count(world.backbone);
  d.num_domains = world.config.num_domains;
  if (low_res_server) {
    std::vector<LabeledSample> pooled;
    pooled.reserve(world.server.size());
    for (const auto& s : world.server) pooled.push_back(downsample_labeled(s));
    d.server = featurize(world.backbone, pooled);
  } else {
    d.server = featurize(world.backbone, world.server);
  }
  for (const auto& c : world.clients) d.clients.push_back(featurize(world.backbone, c));
  d.test = featurize(world.backbone, world.test);
  if (!d.server.empty()) {
    d.server_height = d.server.front().features.dim(1);
    d.server_width = d.server.front().features.dim(2);
  }
  for (const auto& c : d.clients) {
    if (!c.empty()) {
      d.client_height = c.front().features.dim(1);
      d.client_width = c.front().features.dim(2);
      break;
    }
  }
  d.check_disjoint();
  return d;
}

void FederationData::check_disjoint() const {
  std::set<std::uint64_t> seen;
  for (const auto& s : server) seen.insert(s.sample_id);
  for (std::size_t c = 0; c < clients.size(); ++c) {
    for (const auto& s : clients[c]) {
      if (!seen.insert(s.sample_id).second) {
        throw std::invalid_argument("sample " + std::to_string(s.sample_id) + " of client " +
                                    std::to_string(c) + " is held by another party");
      }
    }
  }
}

RoundError::RoundError(std::size_t round, const std::string& stage, const std::string& what)
    : std::runtime_error("round " + std::to_string(round) + ", " + stage + ": " + what),
      round_(round),
      stage_(stage) {}

namespace {

// Dense variants are a server-side choice; clients stay sparse.
std::optional<RoutingMode> client_mode(const HeadConfig& head) {
  if (head.routing_mode == RoutingMode::dense || head.routing_mode == RoutingMode::dense_plus_top1) {
    return RoutingMode::top1;
  }
  return std::nullopt;
}

template <typename Sample>
std::vector<std::vector<std::size_t>> domain_batches(std::span<const Sample> data,
                                                     std::vector<std::size_t> order,
                                                     std::size_t batch_size) {
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return data[a].domain_id < data[b].domain_id;
  });
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size();) {
    std::vector<std::size_t> batch;
    const std::size_t dom = data[order[i]].domain_id;
    while (i < order.size() && batch.size() < batch_size && data[order[i]].domain_id == dom) {
      batch.push_back(order[i++]);
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace

EvalResult evaluate(const TaskHead& head, std::span<const LabeledFeatures> test,
                    std::size_t num_domains) {
  NoGradGuard no_grad;
  const std::size_t classes = head.config().num_classes;
  const std::size_t k = head.config().num_experts;
  EvalResult r;
  r.confusion.assign(classes, std::vector<std::uint64_t>(classes, 0));
  std::vector<std::uint64_t> correct(num_domains, 0), total(num_domains, 0);
  std::vector<std::uint64_t> load(k, 0);

  std::vector<std::size_t> order(test.size());
  std::iota(order.begin(), order.end(), 0);
  constexpr std::size_t kEvalBatch = 32;
  for (const auto& batch : domain_batches(test, order, kEvalBatch)) {
    const std::size_t domain = test[batch.front()].domain_id;
    if (domain >= num_domains) {
      throw std::invalid_argument("test sample domain " + std::to_string(domain) +
                                  " out of range");
    }
    std::vector<const Tensor*> maps;
    std::vector<int> labels;
    for (auto i : batch) {
      maps.push_back(&test[i].features);
      labels.insert(labels.end(), test[i].labels.begin(), test[i].labels.end());
    }
    std::optional<RoutingMap> routing;
    Tensor logits =
        head.forward(stack_pixels(maps), MoEForwardOptions{kInferenceStep, domain, {}}, &routing);
    const std::size_t pixels = labels.size();
    auto lv = logits.data();
    for (std::size_t p = 0; p < pixels; ++p) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c) {
        if (lv[c * pixels + p] > lv[best * pixels + p]) best = c;
      }
      const auto truth = static_cast<std::size_t>(labels[p]);
      ++r.confusion[truth][best];
      correct[domain] += best == truth;
      ++total[domain];
    }
    if (routing) {
      for (auto s : routing->selected) ++load[s];
    } else {
      const std::size_t e = head.config().routing_mode == RoutingMode::domain_assigned && k > 1
                                ? head.moe().expert_for_domain(domain)
                                : 0;
      load[e] += pixels;
    }
  }

  std::uint64_t all_correct = 0, all_total = 0;
  r.per_domain_accuracy.resize(num_domains);
  for (std::size_t d = 0; d < num_domains; ++d) {
    if (total[d]) {
      r.per_domain_accuracy[d] = static_cast<double>(correct[d]) / static_cast<double>(total[d]);
    }
    all_correct += correct[d];
    all_total += total[d];
  }
  r.total_accuracy = all_total ? static_cast<double>(all_correct) / static_cast<double>(all_total)
                               : 0.0;
  const std::uint64_t load_total = std::accumulate(load.begin(), load.end(), std::uint64_t{0});
  r.expert_load.resize(k, 0.0);
  for (std::size_t e = 0; e < k && load_total; ++e) {
    r.expert_load[e] = static_cast<double>(load[e]) / static_cast<double>(load_total);
  }
  return r;
}

nlohmann::json to_json(const RoundMetrics& m) {
  nlohmann::json per_domain = nlohmann::json::array();
  for (const auto& a : m.per_domain_accuracy) {
    per_domain.push_back(a ? nlohmann::json(*a) : nlohmann::json(nullptr));
  }
  return {{"round", m.round},
          {"per_domain_accuracy", per_domain},
          {"total_accuracy", m.total_accuracy},
          {"server_loss", m.server_loss},
          {"mean_client_loss", m.mean_client_loss},
          {"participants", m.participants},
          {"pseudo_label_coverage", m.pseudo_label_coverage},
          {"expert_load", m.expert_load},
          {"params_communicated", m.params_communicated},
          {"backbone_params_communicated", m.backbone_params_communicated},
          {"flops_client_step", m.flops_client_step},
          {"backbone_hash", m.backbone_hash},
          {"warnings", m.warnings}};
}

std::vector<std::size_t> sample_clients(std::size_t num_clients, std::size_t m,
                                        std::uint64_t seed, std::size_t round) {
  if (m == 0 || m > num_clients) {
    throw std::invalid_argument("cannot sample " + std::to_string(m) + " of " +
                                std::to_string(num_clients) + " clients");
  }
  std::vector<std::size_t> ids(num_clients);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(derive_seed(seed, {kSamplerStream, round}));
  // Partial Fisher-Yates: the first m slots are the sample.
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(num_clients - i));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

TaskHead aggregate_fedavg(std::span<const TaskHead> heads, std::span<const std::size_t> sizes) {
  if (heads.empty()) throw std::invalid_argument("aggregate_fedavg: no client heads");
  if (heads.size() != sizes.size()) {
    throw std::invalid_argument("aggregate_fedavg: " + std::to_string(heads.size()) +
                                " heads but " + std::to_string(sizes.size()) + " sample counts");
  }
  double n_total = 0.0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] == 0) {
      throw std::invalid_argument("aggregate_fedavg: client " + std::to_string(i) +
                                  " reports zero samples");
    }
    n_total += static_cast<double>(sizes[i]);
  }
  for (std::size_t i = 1; i < heads.size(); ++i) require_same_structure(heads[0], heads[i]);

  TaskHead out = heads[0];
  if (heads.size() == 1) return out;
  auto dst = out.parameters();
  std::vector<std::vector<Parameter>> src;
  for (const auto& h : heads) src.push_back(h.parameters());
  for (std::size_t p = 0; p < dst.size(); ++p) {
    auto acc = dst[p].value.mutable_data();
    for (std::size_t j = 0; j < acc.size(); ++j) {
      double v = 0.0;
      for (std::size_t i = 0; i < heads.size(); ++i) {
        v += static_cast<double>(sizes[i]) / n_total * src[i][p].value.data()[j];
      }
      acc[j] = v;
    }
  }
  return out;
}

TaskHead soft_mixture(const TaskHead& prev_server, const TaskHead& aggregated, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("soft_mixture: alpha must be in [0,1], got " +
                                std::to_string(alpha));
  }
  require_same_structure(prev_server, aggregated);
  if (alpha == 0.0) return aggregated;
  if (alpha == 1.0) return prev_server;
  TaskHead out = aggregated;
  auto dst = out.parameters();
  auto a = prev_server.parameters();
  for (std::size_t p = 0; p < dst.size(); ++p) {
    auto d = dst[p].value.mutable_data();
    auto s = a[p].value.data();
    for (std::size_t j = 0; j < d.size(); ++j) d[j] = alpha * s[j] + (1.0 - alpha) * d[j];
  }
  return out;
}

double supervised_epoch(TaskHead& head, std::span<const LabeledFeatures> data, Optimizer& opt,
                        Rng& rng, std::size_t batch_size, std::size_t& step_index) {
  if (data.empty()) return 0.0;
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  const auto params = head.parameters();
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(std::span<std::size_t>(order));
  double loss_sum = 0.0;
  std::size_t steps = 0;
  for (const auto& batch : domain_batches(data, order, batch_size)) {
    std::vector<const Tensor*> maps;
    std::vector<int> labels;
    for (auto i : batch) {
      maps.push_back(&data[i].features);
      labels.insert(labels.end(), data[i].labels.begin(), data[i].labels.end());
    }
    zero_grads(params);
    MoEForwardOptions fwd{step_index, data[batch.front()].domain_id, {}};
    Tensor loss =
        ops::cross_entropy(ops::softmax_channel(head.forward(stack_pixels(maps), fwd)), labels);
    backward(loss);
    opt.step(params);
    loss_sum += loss.item();
    ++steps;
    ++step_index;
  }
  return loss_sum / static_cast<double>(steps);
}

WarmupResult warmup(const TrainingConfig& cfg, const FederationData& data) {
  cfg.validate();
  if (data.server.empty()) throw std::invalid_argument("warm-up: server has no labeled data");
  WarmupResult r{TaskHead::initialized(cfg.head, derive_seed(cfg.fl.seed, {kInitStream})), {}};
  Optimizer opt(cfg.warmup_optimizer);
  Rng rng(derive_seed(cfg.fl.seed, {kWarmupStream}));
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.fl.warmup_epochs; ++e) {
    r.epoch_losses.push_back(
        supervised_epoch(r.head, data.server, opt, rng, cfg.fl.server_batch_size, step));
  }
  return r;
}

FederationState init_state(const TrainingConfig& cfg, const FederationData& data,
                           TaskHead warm_head) {
  cfg.validate();
  if (data.clients.size() != cfg.fl.num_clients) {
    throw std::invalid_argument("federation.num_clients is " + std::to_string(cfg.fl.num_clients) +
                                " but the world has " + std::to_string(data.clients.size()) +
                                " clients");
  }
  data.check_disjoint();
  FederationState s;
  s.prev_server_head = warm_head;
  s.global_head = std::move(warm_head);
  s.seed = cfg.fl.seed;
  s.backbone_hash = data.backbone_hash;
  for (std::size_t c = 0; c < data.clients.size(); ++c) {
    const std::size_t dom = data.clients[c].empty() ? 0 : data.clients[c].front().domain_id;
    s.clients.push_back(ClientRecord{c, dom, data.clients[c].size()});
  }
  return s;
}

namespace {

RoundMetrics metrics_from_eval(const FederationState& state, const FederationData& data) {
  EvalResult ev = evaluate(state.global_head, data.test, data.num_domains);
  RoundMetrics m;
  m.round = state.round;
  m.per_domain_accuracy = std::move(ev.per_domain_accuracy);
  m.total_accuracy = ev.total_accuracy;
  m.expert_load = std::move(ev.expert_load);
  m.backbone_hash = data.backbone_hash;
  return m;
}

}  // namespace

RoundMetrics warmup_metrics(const FederationState& state, const TrainingConfig& cfg,
                            const FederationData& data, double warmup_loss) {
  RoundMetrics m = metrics_from_eval(state, data);
  m.server_loss = warmup_loss;
  if (cfg.fl.use_clients) m.backbone_params_communicated = data.backbone_params * cfg.fl.num_clients;
  return m;
}

RoundMetrics run_round(FederationState& state, const TrainingConfig& cfg,
                       const FederationData& data) {
  const std::size_t round = state.round + 1;
  if (data.backbone_hash != state.backbone_hash) {
    throw RoundError(round, "backbone check", "frozen backbone changed during training");
  }
  RoundMetrics m;
  std::vector<std::string> warnings;
  TaskHead mixed = state.global_head;

  if (cfg.fl.use_clients) {
    std::vector<std::size_t> sampled;
    try {
      sampled = sample_clients(cfg.fl.num_clients, cfg.fl.participants_per_round(), state.seed,
                               round);
    } catch (const std::exception& e) {
      throw RoundError(round, "client sampling", e.what());
    }

    std::vector<TaskHead> heads;
    std::vector<std::size_t> sizes;
    LocalTrainOptions local{cfg.fl.client_batch_size, client_mode(cfg.head)};
    double loss_sum = 0.0;
    for (auto id : sampled) {
      ClientUpdate up;
      try {
        up = client_local_train(state.global_head, data.clients[id], cfg.ssl, cfg.client_optimizer,
                                local, derive_seed(state.seed, {kClientStream, id, round}));
      } catch (const std::exception& e) {
        throw RoundError(round, "client " + std::to_string(id) + " local training", e.what());
      }
      for (auto& w : up.warnings) warnings.push_back("client " + std::to_string(id) + ": " + w);
      m.participants.push_back(id);
      m.pseudo_label_coverage.push_back(up.coverage);
      loss_sum += up.mean_loss;
      if (data.clients[id].empty()) continue;
      heads.push_back(std::move(up.head));
      sizes.push_back(data.clients[id].size());
    }
    m.mean_client_loss = loss_sum / static_cast<double>(sampled.size());

    try {
      if (!heads.empty()) {
        if (cfg.fl.weighting == AggregationWeighting::global_n) {
          std::size_t held_out = 0;
          for (const auto& c : state.clients) {
            if (!std::binary_search(sampled.begin(), sampled.end(), c.client_id)) {
              held_out += c.num_samples;
            }
          }
          if (held_out > 0) {
            heads.push_back(state.global_head);
            sizes.push_back(held_out);
          }
        }
        TaskHead aggregated = aggregate_fedavg(heads, sizes);
        mixed = soft_mixture(state.prev_server_head, aggregated, cfg.fl.alpha);
      } else {
        warnings.push_back("no sampled client produced an update; keeping the server head");
      }
    } catch (const std::exception& e) {
      throw RoundError(round, "aggregation", e.what());
    }
    m.params_communicated = comm_per_round(state.global_head, sampled.size());
    m.flops_client_step = count_flops(cfg.head, cfg.head.in_channels, data.client_height,
                                      data.client_width,
                                      client_mode(cfg.head).value_or(cfg.head.routing_mode))
                              .head_total() *
                          cfg.fl.client_batch_size;
  }

  try {
    Optimizer opt(cfg.server_optimizer);
    Rng rng(derive_seed(state.seed, {kServerStream, round}));
    std::size_t step = 0;
    double loss = 0.0;
    for (std::size_t e = 0; e < cfg.fl.server_epochs_per_round; ++e) {
      loss = supervised_epoch(mixed, data.server, opt, rng, cfg.fl.server_batch_size, step);
    }
    m.server_loss = loss;
  } catch (const std::exception& e) {
    throw RoundError(round, "server training", e.what());
  }

  state.prev_server_head = mixed;
  state.global_head = std::move(mixed);
  state.round = round;

  RoundMetrics ev = metrics_from_eval(state, data);
  m.round = round;
  m.per_domain_accuracy = std::move(ev.per_domain_accuracy);
  m.total_accuracy = ev.total_accuracy;
  m.expert_load = std::move(ev.expert_load);
  m.backbone_hash = data.backbone_hash;
  m.warnings = std::move(warnings);
  return m;
}

FederationResult run_federation(const TrainingConfig& cfg, const FederationData& data,
                                const std::optional<WarmupResult>& warm,
                                const RoundCallback& on_round) {
  cfg.validate();
  WarmupResult w = warm ? *warm : warmup(cfg, data);
  FederationResult result;
  result.warmup_head = w.head;
  FederationState state = init_state(cfg, data, w.head);
  const double warm_loss = w.epoch_losses.empty() ? 0.0 : w.epoch_losses.back();
  result.rounds.push_back(warmup_metrics(state, cfg, data, warm_loss));
  if (on_round) on_round(result.rounds.back());
  for (std::size_t t = 0; t < cfg.fl.rounds; ++t) {
    result.rounds.push_back(run_round(state, cfg, data));
    if (on_round) on_round(result.rounds.back());
  }
  result.final_head = std::move(state.global_head);
  return result;
}

}  // namespace fedmox
