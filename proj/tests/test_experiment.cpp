#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "support.hpp"

using namespace fedmox;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("grid expansion order and presets") {
  RunConfig c = test::tiny_config();
  c.ablate.methods = {"fedmox", "fedavg"};
  c.ablate.alphas = {0.0, 0.5};
  c.ablate.seeds = {1, 2};
  auto cells = expand_grid(c);
  REQUIRE(cells.size() == 8);
  CHECK(cells[0].method == "fedmox");
  CHECK(cells[0].config.training.fl.seed == 1);
  CHECK(cells[1].config.training.fl.seed == 2);
  CHECK(cells[2].config.training.fl.alpha == 0.5);
  CHECK(cells[4].method == "fedavg");
  CHECK(cells[4].config.training.head.num_experts == 1);
  CHECK(cells[6].config.training.fl.alpha == 0.0);  // preset wins over the alpha axis
  for (std::size_t i = 0; i < cells.size(); ++i) CHECK(cells[i].index == i);
}

TEST_CASE("an alpha sweep gives one row per alpha") {
  RunConfig c = test::tiny_config();
  c.training.fl.rounds = 1;
  for (int i = 0; i <= 10; ++i) c.ablate.alphas.push_back(i / 10.0);
  DataBundle bundle(c);
  auto results = run_cells(expand_grid(c), bundle, 2);
  REQUIRE(results.size() == 11);
  for (std::size_t i = 0; i < 11; ++i) {
    CHECK(results[i].ok);
    CHECK(results[i].spec.config.training.fl.alpha == doctest::Approx(i / 10.0));
    CHECK(results[i].warmup_accuracy == results[0].warmup_accuracy);  // shared warm-up
  }
  std::ostringstream out;
  write_ablation_csv(out, results, c.world.num_domains);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "# schema: ablation v1");
  std::getline(in, line);
  CHECK(line.rfind("cell,method,alpha,num_experts,routing_mode,seed,status,", 0) == 0);
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 11);
}

TEST_CASE("a one-cell grid reproduces a single run") {
  RunConfig c = test::tiny_config();
  const fs::path root = fs::temp_directory_path() / "fedmox_test_experiment";
  fs::remove_all(root);
  RunOutcome run = run_to_directory(c, root);
  for (const char* f : {"config.ini", "metrics.jsonl", "summary.csv", "routing.csv",
                        "cost_report.txt", "head.bin"}) {
    CHECK(fs::exists(run.dir / f));
  }
  CHECK(run.dir.filename() == run_dir_name(c));
  CHECK(parse_config(slurp(run.dir / "config.ini")) == c);
  std::ifstream hb(run.dir / "head.bin", std::ios::binary);
  CHECK(bit_identical(load_head(hb), run.result.final_head));

  DataBundle bundle(c);
  auto results = run_cells(expand_grid(c), bundle, 1);
  REQUIRE(results.size() == 1);
  CHECK(results[0].total_accuracy == run.result.rounds.back().total_accuracy);
  CHECK(results[0].warmup_accuracy == run.result.rounds.front().total_accuracy);

  const std::string summary = slurp(run.dir / "summary.csv");
  CHECK(summary.rfind("# schema: summary v1\nround,total_accuracy,domain_0,domain_1,domain_2,domain_3\n", 0) == 0);
  fs::remove_all(root);
}

TEST_CASE("a failing cell is marked and the rest continue") {
  RunConfig c = test::tiny_config();
  c.training.fl.rounds = 1;
  auto cells = expand_grid(c);
  cells.push_back(cells[0]);
  cells[1].index = 1;
  cells[1].config.training.fl.sample_ratio = 0.0;
  DataBundle bundle(c);
  auto results = run_cells(cells, bundle, 2);
  CHECK(results[0].ok);
  CHECK_FALSE(results[1].ok);
  CHECK_FALSE(results[1].error.empty());
}

TEST_CASE("summary leaves absent domains empty") {
  RoundMetrics m;
  m.total_accuracy = 0.5;
  m.per_domain_accuracy = {0.25, std::nullopt};
  std::ostringstream out;
  write_summary_csv(out, {m}, 2);
  CHECK(out.str() == "# schema: summary v1\nround,total_accuracy,domain_0,domain_1\n0,0.5,0.25,\n");
}

TEST_CASE("median") {
  CHECK(median({3, 1, 2}) == 2.0);
  CHECK(median({4, 1, 2, 3}) == 2.5);
  CHECK_THROWS(median({}));
}
