#include <fstream>

#include "doctest.h"
#include "support.hpp"

using namespace fedmox;

TEST_CASE("serialize then parse is the identity") {
  RunConfig c = default_run_config();
  c.training.fl.alpha = 0.123456789012345;
  c.training.head.routing_mode = RoutingMode::dense_plus_top1;
  c.ablate.methods = {"fedmox", "fedavg"};
  c.ablate.alphas = {0.0, 0.5};
  c.world.domains.push_back(default_domain_spec(2, c.world.image_channels));
  c.world.domains.back().noise_sigma = 0.3;
  c.finalize();
  const std::string text = serialize_config(c);
  RunConfig back = parse_config(text);
  CHECK(back == c);
  CHECK(serialize_config(back) == text);
}

TEST_CASE("shipped config parses") {
  RunConfig c = load_config(std::string(FEDMOX_SOURCE_DIR) + "/configs/default.ini");
  CHECK(c.training.head.num_experts == 3);
  CHECK(c.training.fl.rounds == 30);
}

TEST_CASE("unknown and missing keys are named") {
  REQUIRE_FALSE(required_keys().empty());
  const std::string base = serialize_config(default_run_config());
  try {
    std::string text = base;
    text.replace(text.find("[head]\n"), 7, "[head]\nexperts = 3\n");
    parse_config(text);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("experts") != std::string::npos);
  }
  try {
    parse_config(base + "\n[nonsense]\nx=1\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("nonsense") != std::string::npos);
  }
  for (const auto& key : required_keys()) {
    const auto dot = key.rfind('.');
    const std::string section = key.substr(0, dot), name = key.substr(dot + 1);
    std::string text;
    std::string current;
    std::istringstream in(base);
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line[0] == '[') current = line.substr(1, line.size() - 2);
      if (current == section && line.rfind(name + " =", 0) == 0) continue;
      if (current == section && line.rfind(name + "=", 0) == 0) continue;
      text += line + "\n";
    }
    CHECK_THROWS_AS(parse_config(text), MissingKeyError);
    try {
      parse_config(text);
    } catch (const MissingKeyError& e) {
      CHECK(e.key() == key);
    }
  }
}

TEST_CASE("bad values are rejected") {
  RunConfig c = default_run_config();
  CHECK_THROWS_AS(apply_override(c, "federation.alpha=1.5"), std::exception);
  CHECK_THROWS_AS(apply_override(c, "federation.rounds=abc"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "head.routing_mode=top2"), std::exception);
  CHECK_THROWS_AS(apply_override(c, "nodot"), ConfigError);
  CHECK_THROWS_AS(parse_config("[world\nbroken"), ConfigError);
}

TEST_CASE("overrides apply and change the hash") {
  RunConfig c = default_run_config();
  const std::string h = config_hash(c);
  CHECK(h.size() == 16);
  apply_override(c, "federation.alpha=0.3");
  CHECK(c.training.fl.alpha == 0.3);
  CHECK(config_hash(c) != h);
  RunConfig s = default_run_config();
  s.training.fl.seed = 9;
  CHECK(config_hash(s) == h);
  apply_override(c, "federation.num_clients=5");
  CHECK(c.world.num_clients == 5);
}

TEST_CASE("method presets") {
  RunConfig c = default_run_config();
  apply_method(c, "fedavg");
  CHECK(c.training.fl.alpha == 0.0);
  CHECK(c.training.head.num_experts == 1);
  RunConfig p = default_run_config();
  apply_method(p, "fedprox");
  CHECK(p.training.ssl.prox_mu == 0.001);
  RunConfig s = default_run_config();
  apply_method(s, "server_only");
  CHECK_FALSE(s.training.fl.use_clients);
  RunConfig l = default_run_config();
  apply_method(l, "low_res_server");
  CHECK(l.training.fl.low_res_server);
  CHECK_THROWS(apply_method(l, "fedsgd"));
  CHECK(known_methods().size() == 5);
}
