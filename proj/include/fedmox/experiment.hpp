#pragma once

// Runs and sweeps on top of the federation loop: run directories with
// their artifacts, and ablation grids whose cells share one world.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fedmox/config.hpp"
#include "fedmox/federation.hpp"

namespace fedmox {

// Featurized data for both server resolutions, built once per world.
class DataBundle {
 public:
  explicit DataBundle(const RunConfig& cfg);

  const World& world() const { return world_; }
  const FederationData& data(bool low_res_server) const;

 private:
  World world_;
  FederationData high_;
  mutable std::optional<FederationData> low_;
};

// "<config hash>-seed<training seed>".
std::string run_dir_name(const RunConfig& cfg);

// "# schema: summary v1", then round,total_accuracy,domain_0..domain_{D-1}.
// Absent domains are left empty.
void write_summary_csv(std::ostream& out, const std::vector<RoundMetrics>& rounds,
                       std::size_t num_domains);
void write_metrics_jsonl(std::ostream& out, const std::vector<RoundMetrics>& rounds);

// Routing of `head` over the test images, at high resolution and pooled
// to low resolution.
std::vector<RoutingRow> routing_report(const TaskHead& head, const World& world);

struct RunOutcome {
  std::filesystem::path dir;
  FederationResult result;
};

// Full run writing config.ini, metrics.jsonl, summary.csv, routing.csv,
// cost_report.txt and head.bin under root / run_dir_name(cfg).
RunOutcome run_to_directory(const RunConfig& cfg, const std::filesystem::path& root);

struct CellSpec {
  std::size_t index = 0;  // grid order
  std::string method;
  RunConfig config;       // fully resolved
};

// methods x alphas x num_experts x routing_modes x seeds, in that nesting
// order. Empty axes take the base config's value.
std::vector<CellSpec> expand_grid(const RunConfig& base);

struct CellResult {
  CellSpec spec;
  bool ok = false;
  std::string error;
  double warmup_accuracy = 0.0;
  double total_accuracy = 0.0;
  std::vector<std::optional<double>> per_domain_accuracy;
};

// Runs every cell on `bundle`, up to `jobs` at a time. Cells with equal
// warm-up inputs share one warm-up. Results come back in grid order; a
// failing cell is marked and the rest continue.
std::vector<CellResult> run_cells(const std::vector<CellSpec>& cells, const DataBundle& bundle,
                                  std::size_t jobs);

// "# schema: ablation v1" header, then one row per cell in grid order.
void write_ablation_csv(std::ostream& out, const std::vector<CellResult>& results,
                        std::size_t num_domains);

double median(std::vector<double> v);

}  // namespace fedmox
