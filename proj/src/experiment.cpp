#include "fedmox/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <future>
#include <iomanip>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "fedmox/accounting.hpp"

namespace fedmox {

DataBundle::DataBundle(const RunConfig& cfg)
    : world_(generate_world(cfg.world, cfg.world_seed)),
      high_(FederationData::from_world(world_, false)) {}

const FederationData& DataBundle::data(bool low_res_server) const {
  if (!low_res_server) return high_;
  static std::mutex mu;
  std::lock_guard lock(mu);
  if (!low_) low_ = FederationData::from_world(world_, true);
  return *low_;
}

std::string run_dir_name(const RunConfig& cfg) {
  return config_hash(cfg) + "-seed" + std::to_string(cfg.training.fl.seed);
}

void write_summary_csv(std::ostream& out, const std::vector<RoundMetrics>& rounds,
                       std::size_t num_domains) {
  out << "# schema: summary v1\n";
  out << "round,total_accuracy";
  for (std::size_t d = 0; d < num_domains; ++d) out << ",domain_" << d;
  out << '\n' << std::setprecision(17);
  for (const auto& m : rounds) {
    out << m.round << ',' << m.total_accuracy;
    for (std::size_t d = 0; d < num_domains; ++d) {
      out << ',';
      if (d < m.per_domain_accuracy.size() && m.per_domain_accuracy[d]) {
        out << *m.per_domain_accuracy[d];
      }
    }
    out << '\n';
  }
}

void write_metrics_jsonl(std::ostream& out, const std::vector<RoundMetrics>& rounds) {
  for (const auto& m : rounds) out << to_json(m).dump() << '\n';
}

std::vector<RoutingRow> routing_report(const TaskHead& head, const World& world) {
  NoGradGuard no_grad;
  RoutingGroup high{"high", {}}, low{"low", {}};
  for (const auto& s : world.test) {
    high.maps.push_back(route_spatial(extract_features(world.backbone, s.image),
                                      head.moe().router()));
    low.maps.push_back(route_spatial(extract_features(world.backbone, avg_pool2(s.image)),
                                     head.moe().router()));
  }
  return routing_rows({high, low});
}

RunOutcome run_to_directory(const RunConfig& cfg, const std::filesystem::path& root) {
  RunOutcome out;
  out.dir = root / run_dir_name(cfg);
  std::filesystem::create_directories(out.dir);
  const DataBundle bundle(cfg);
  const FederationData& data = bundle.data(cfg.training.fl.low_res_server);

  std::ofstream(out.dir / "config.ini") << serialize_config(cfg);
  std::ofstream metrics(out.dir / "metrics.jsonl");
  out.result = run_federation(cfg.training, data, std::nullopt, [&](const RoundMetrics& m) {
    metrics << to_json(m).dump() << '\n';
    metrics.flush();
  });

  std::ofstream summary(out.dir / "summary.csv");
  write_summary_csv(summary, out.result.rounds, data.num_domains);
  std::ofstream routing(out.dir / "routing.csv");
  write_routing_csv(routing, routing_report(out.result.final_head, bundle.world()));
  std::ofstream cost(out.dir / "cost_report.txt");
  print_cost_table(cost, cost_report(out.result.final_head, bundle.world().backbone,
                                     cfg.world.height, cfg.world.width,
                                     cfg.training.fl.participants_per_round(),
                                     cfg.training.fl.num_clients));
  std::ofstream head(out.dir / "head.bin", std::ios::binary);
  save_head(out.result.final_head, head);
  return out;
}

std::vector<CellSpec> expand_grid(const RunConfig& base) {
  const auto& g = base.ablate;
  if (g.methods.empty()) throw std::invalid_argument("ablation grid has no methods");
  std::vector<std::optional<double>> alphas{std::nullopt};
  if (!g.alphas.empty()) alphas.assign(g.alphas.begin(), g.alphas.end());
  std::vector<std::optional<std::size_t>> ks{std::nullopt};
  if (!g.num_experts.empty()) ks.assign(g.num_experts.begin(), g.num_experts.end());
  std::vector<std::optional<RoutingMode>> modes{std::nullopt};
  if (!g.routing_modes.empty()) modes.assign(g.routing_modes.begin(), g.routing_modes.end());
  std::vector<std::uint64_t> seeds = g.seeds;
  if (seeds.empty()) seeds.push_back(base.training.fl.seed);

  std::vector<CellSpec> cells;
  for (const auto& method : g.methods) {
    for (const auto& a : alphas) {
      for (const auto& k : ks) {
        for (const auto& mode : modes) {
          for (auto seed : seeds) {
            CellSpec c{cells.size(), method, base};
            c.config.ablate = AblateGrid{};
            if (a) c.config.training.fl.alpha = *a;
            if (mode) c.config.training.head.routing_mode = *mode;
            c.config.training.fl.seed = seed;
            apply_method(c.config, method);
            if (k) {
              c.config.training.head.num_experts = *k;
              if (*k == 1) c.config.training.head.domain_assignment.clear();
            }
            c.config.finalize();
            cells.push_back(std::move(c));
          }
        }
      }
    }
  }
  return cells;
}

namespace {

std::string warmup_key(const RunConfig& c) {
  RunConfig k;
  k.training.head = c.training.head;
  k.training.warmup_optimizer = c.training.warmup_optimizer;
  k.training.fl.seed = c.training.fl.seed;
  k.training.fl.warmup_epochs = c.training.fl.warmup_epochs;
  k.training.fl.server_batch_size = c.training.fl.server_batch_size;
  k.training.fl.low_res_server = c.training.fl.low_res_server;
  std::ostringstream s;
  s << serialize_config(k) << k.training.fl.seed;
  return s.str();
}

class WarmupCache {
 public:
  WarmupResult get(const RunConfig& cfg, const FederationData& data) {
    const std::string key = warmup_key(cfg);
    std::shared_future<WarmupResult> fut;
    std::promise<WarmupResult> promise;
    bool owner = false;
    {
      std::lock_guard lock(mu_);
      auto it = entries_.find(key);
      if (it == entries_.end()) {
        fut = promise.get_future().share();
        entries_.emplace(key, fut);
        owner = true;
      } else {
        fut = it->second;
      }
    }
    if (owner) {
      try {
        promise.set_value(warmup(cfg.training, data));
      } catch (...) {
        promise.set_exception(std::current_exception());
      }
    }
    return fut.get();
  }

 private:
  std::mutex mu_;
  std::map<std::string, std::shared_future<WarmupResult>> entries_;
};

CellResult run_cell(const CellSpec& spec, const DataBundle& bundle, WarmupCache& cache) {
  CellResult r;
  r.spec = spec;
  try {
    const auto& cfg = spec.config;
    const FederationData& data = bundle.data(cfg.training.fl.low_res_server);
    const WarmupResult w = cache.get(cfg, data);
    FederationResult fr = run_federation(cfg.training, data, w);
    r.warmup_accuracy = fr.rounds.front().total_accuracy;
    r.total_accuracy = fr.rounds.back().total_accuracy;
    r.per_domain_accuracy = fr.rounds.back().per_domain_accuracy;
    r.ok = true;
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  return r;
}

}  // namespace

std::vector<CellResult> run_cells(const std::vector<CellSpec>& cells, const DataBundle& bundle,
                                  std::size_t jobs) {
  std::vector<CellResult> results(cells.size());
  WarmupCache cache;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      results[i] = run_cell(cells[i], bundle, cache);
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, cells.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return results;
}

void write_ablation_csv(std::ostream& out, const std::vector<CellResult>& results,
                        std::size_t num_domains) {
  out << "# schema: ablation v1\n";
  out << "cell,method,alpha,num_experts,routing_mode,seed,status,warmup_accuracy,total_accuracy";
  for (std::size_t d = 0; d < num_domains; ++d) out << ",domain_" << d;
  out << ",error\n" << std::setprecision(17);
  for (const auto& r : results) {
    const auto& t = r.spec.config.training;
    out << r.spec.index << ',' << r.spec.method << ',' << t.fl.alpha << ',' << t.head.num_experts
        << ',' << to_string(t.head.routing_mode) << ',' << t.fl.seed << ','
        << (r.ok ? "ok" : "failed") << ',';
    if (r.ok) out << r.warmup_accuracy;
    out << ',';
    if (r.ok) out << r.total_accuracy;
    for (std::size_t d = 0; d < num_domains; ++d) {
      out << ',';
      if (r.ok && d < r.per_domain_accuracy.size() && r.per_domain_accuracy[d]) {
        out << *r.per_domain_accuracy[d];
      }
    }
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << ',' << err << '\n';
  }
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace fedmox
