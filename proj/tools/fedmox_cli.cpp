// fedmox: run, sweep and inspect the federated MoE simulator.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "CLI11.hpp"
#include "fedmox/config.hpp"
#include "fedmox/experiment.hpp"
#include "fedmox/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace fedmox;

namespace {

constexpr int kConfigExit = 2;

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool config_required) {
  auto* opt = cmd->add_option("--config", a.config, "Config file (INI)");
  if (config_required) opt->required();
  cmd->add_option("--seed", a.seed, "Training seed (overrides federation.seed)");
  cmd->add_option("--out", a.out,
                  "Output root; defaults to $RUN_OUT_ROOT, then ./runs");
  cmd->add_option("--set", a.overrides, "Override, e.g. --set federation.alpha=0.3 (repeatable)");
}

RunConfig resolve_config(const CommonArgs& a) {
  RunConfig cfg = a.config.empty() ? default_run_config() : load_config(a.config);
  for (const auto& o : a.overrides) apply_override(cfg, o);
  if (a.seed) {
    cfg.training.fl.seed = *a.seed;
    cfg.finalize();
  }
  return cfg;
}

fs::path output_root(const CommonArgs& a) {
  if (!a.out.empty()) return a.out;
  if (const char* env = std::getenv("RUN_OUT_ROOT"); env && *env) return env;
  return "runs";
}

std::string fmt_acc(const std::optional<double>& v) {
  if (!v) return "   -  ";
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << *v;
  return s.str();
}

int cmd_run(const CommonArgs& a) {
  const RunConfig cfg = resolve_config(a);
  std::cerr << "run " << run_dir_name(cfg) << ": " << cfg.training.fl.rounds << " rounds\n";
  const RunOutcome r = run_to_directory(cfg, output_root(a));
  std::cout << "round  total";
  for (std::size_t d = 0; d < cfg.world.num_domains; ++d) std::cout << "   dom" << d;
  std::cout << '\n';
  for (const auto& m : r.result.rounds) {
    std::cout << std::setw(5) << m.round << "  " << fmt_acc(m.total_accuracy);
    for (const auto& d : m.per_domain_accuracy) std::cout << ' ' << fmt_acc(d);
    std::cout << '\n';
  }
  std::cout << "outputs: " << r.dir.string() << '\n';
  return 0;
}

int cmd_ablate(const CommonArgs& a, std::size_t jobs) {
  const RunConfig cfg = resolve_config(a);
  const auto cells = expand_grid(cfg);
  std::cerr << "ablate: " << cells.size() << " cells, " << jobs << " jobs\n";
  const DataBundle bundle(cfg);
  const auto results = run_cells(cells, bundle, jobs);

  const fs::path dir = output_root(a) / (config_hash(cfg) + "-ablate");
  fs::create_directories(dir);
  std::ofstream(dir / "config.ini") << serialize_config(cfg);
  std::ofstream csv(dir / "ablation.csv");
  write_ablation_csv(csv, results, cfg.world.num_domains);

  // Median over seeds per remaining grid coordinate.
  using Key = std::tuple<std::size_t, std::string, double, std::size_t, std::string>;
  std::map<Key, std::vector<double>> groups;
  std::size_t failed = 0;
  for (const auto& r : results) {
    if (!r.ok) {
      ++failed;
      std::cerr << "cell " << r.spec.index << " failed: " << r.error << '\n';
      continue;
    }
    const auto& t = r.spec.config.training;
    std::size_t method_rank = 0;
    while (cfg.ablate.methods[method_rank] != r.spec.method) ++method_rank;
    groups[{method_rank, r.spec.method, t.fl.alpha, t.head.num_experts,
            to_string(t.head.routing_mode)}]
        .push_back(r.total_accuracy);
  }
  std::cout << std::left << std::setw(16) << "method" << std::setw(7) << "alpha" << std::setw(4)
            << "K" << std::setw(17) << "routing" << std::setw(7) << "seeds"
            << "median_total\n";
  for (const auto& [k, v] : groups) {
    std::cout << std::setw(16) << std::get<1>(k) << std::setw(7) << std::get<2>(k)
              << std::setw(4) << std::get<3>(k) << std::setw(17) << std::get<4>(k)
              << std::setw(7) << v.size() << std::fixed << std::setprecision(4) << median(v)
              << std::defaultfloat << '\n';
  }
  std::cout << "outputs: " << (dir / "ablation.csv").string() << '\n';
  return failed ? 1 : 0;
}

int cmd_viz_routing(const CommonArgs& a, const std::string& checkpoint, const std::string& csv) {
  std::ifstream in(checkpoint, std::ios::binary);
  if (!in) {
    std::cerr << "error: cannot open checkpoint '" << checkpoint << "'\n";
    return 1;
  }
  const TaskHead head = load_head(in);
  const RunConfig cfg = resolve_config(a);
  if (head.config().in_channels != cfg.world.feature_channels) {
    std::cerr << "error: checkpoint expects " << head.config().in_channels
              << " feature channels, config provides " << cfg.world.feature_channels << '\n';
    return 1;
  }
  const World world = generate_world(cfg.world, cfg.world_seed);
  const auto rows = routing_report(head, world);
  if (csv.empty()) {
    write_routing_csv(std::cout, rows);
  } else {
    std::ofstream out(csv);
    write_routing_csv(out, rows);
  }
  std::ostream& table = csv.empty() ? std::cerr : std::cout;
  table << "resolution expert  load    mean_x  mean_y\n" << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    table << std::left << std::setw(11) << r.resolution_tag << std::setw(7) << r.expert_id
          << std::right << std::setw(6) << r.pixel_fraction << "  " << r.mean_x << "  "
          << r.mean_y << '\n';
  }
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  GradcheckOptions opts;
  opts.seed = seed;
  bool ok = true;
  for (const auto& r : gradcheck_suite(opts)) {
    print_gradcheck(std::cout, r);
    ok = ok && r.passed();
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated MoE task-head simulator with a frozen backbone.\n"
               "Outputs go to --out, else $RUN_OUT_ROOT, else ./runs."};
  app.require_subcommand(1);

  CommonArgs run_args;
  auto* run = app.add_subcommand("run", "Warm-up plus federated rounds; writes a run directory");
  add_common(run, run_args, true);

  CommonArgs ablate_args;
  std::size_t jobs = 1;
  auto* ablate = app.add_subcommand("ablate", "Run the [ablate] grid; writes ablation.csv");
  add_common(ablate, ablate_args, true);
  ablate->add_option("--jobs", jobs, "Cells run in parallel")->check(CLI::PositiveNumber);

  CommonArgs viz_args;
  std::string checkpoint, csv_path;
  auto* viz = app.add_subcommand("viz-routing",
                                 "Per-expert mean pixel location and load at both resolutions");
  add_common(viz, viz_args, false);
  viz->add_option("--checkpoint", checkpoint, "head.bin from a run directory")->required();
  viz->add_option("--csv", csv_path, "Write the routing CSV here instead of stdout");

  CommonArgs show_args;
  auto* show = app.add_subcommand("config", "Print the resolved config (defaults if no --config)");
  add_common(show, show_args, false);

  std::uint64_t gc_seed = 0;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the MoE head");
  gc->add_option("--seed", gc_seed, "Seed for head and inputs");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(run_args);
    if (*ablate) return cmd_ablate(ablate_args, jobs);
    if (*viz) return cmd_viz_routing(viz_args, checkpoint, csv_path);
    if (*gc) return cmd_gradcheck(gc_seed);
    if (*show) {
      std::cout << serialize_config(resolve_config(show_args));
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
