#include "fedmox/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace fedmox {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

double parse_double(const std::string& key, const std::string& s) {
  const std::string t = trim(s);
  double v = 0.0;
  auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || end != t.data() + t.size() || t.empty()) {
    throw ConfigError(key, "key '" + key + "': expected a number, got '" + s + "'");
  }
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& s) {
  const std::string t = trim(s);
  std::uint64_t v = 0;
  auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || end != t.data() + t.size() || t.empty()) {
    throw ConfigError(key, "key '" + key + "': expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  const std::string t = trim(s);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  throw ConfigError(key, "key '" + key + "': expected true or false, got '" + s + "'");
}

template <typename T, typename F>
std::string join(const std::vector<T>& v, F f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += f(v[i]);
  }
  return out;
}

std::string fmt_size(std::uint64_t v) { return std::to_string(v); }

template <typename E, typename Parse>
E parse_enum(const std::string& key, const std::string& s, Parse p) {
  try {
    return p(trim(s));
  } catch (const std::exception& e) {
    throw ConfigError(key, "key '" + key + "': " + e.what());
  }
}

struct Key {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define FMX_SIZE(name, field)                                                     \
  {name, {[](const RunConfig& c) { return fmt_size(c.field); },                  \
          [](RunConfig& c, const std::string& v) { c.field = parse_uint(name, v); }}}
#define FMX_DOUBLE(name, field)                                                   \
  {name, {[](const RunConfig& c) { return fmt_double(c.field); },                \
          [](RunConfig& c, const std::string& v) { c.field = parse_double(name, v); }}}
#define FMX_BOOL(name, field)                                                          \
  {name, {[](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }, \
          [](RunConfig& c, const std::string& v) { c.field = parse_bool(name, v); }}}

void add_optimizer_keys(std::map<std::string, Key>& keys, const std::string& section,
                        OptimizerConfig TrainingConfig::*member) {
  auto field = [member](RunConfig& c) -> OptimizerConfig& { return c.training.*member; };
  auto cfield = [member](const RunConfig& c) -> const OptimizerConfig& {
    return c.training.*member;
  };
  const std::string kind = section + ".kind";
  keys[kind] = {[cfield](const RunConfig& c) { return to_string(cfield(c).kind); },
                [field, kind](RunConfig& c, const std::string& v) {
                  field(c).kind =
                      parse_enum<OptimizerKind>(kind, v, optimizer_kind_from_string);
                }};
  auto num = [&](const std::string& name, double OptimizerConfig::*m) {
    const std::string key = section + "." + name;
    keys[key] = {[cfield, m](const RunConfig& c) { return fmt_double(cfield(c).*m); },
                 [field, m, key](RunConfig& c, const std::string& v) {
                   field(c).*m = parse_double(key, v);
                 }};
  };
  num("learning_rate", &OptimizerConfig::learning_rate);
  num("momentum", &OptimizerConfig::momentum);
  num("beta1", &OptimizerConfig::beta1);
  num("beta2", &OptimizerConfig::beta2);
  num("epsilon", &OptimizerConfig::epsilon);
  num("weight_decay", &OptimizerConfig::weight_decay);
}

const std::map<std::string, Key>& registry() {
  static const std::map<std::string, Key> keys = [] {
    std::map<std::string, Key> k{
        FMX_SIZE("world.num_domains", world.num_domains),
        FMX_SIZE("world.server_samples", world.server_samples),
        FMX_SIZE("world.client_samples", world.client_samples),
        FMX_SIZE("world.test_samples_per_domain", world.test_samples_per_domain),
        FMX_SIZE("world.height", world.height),
        FMX_SIZE("world.width", world.width),
        FMX_SIZE("world.image_channels", world.image_channels),
        FMX_SIZE("world.feature_channels", world.feature_channels),
        FMX_DOUBLE("world.base_noise", world.base_noise),
        FMX_SIZE("world.seed", world_seed),

        FMX_SIZE("head.hidden_channels", training.head.hidden_channels),
        FMX_SIZE("head.expert_out_channels", training.head.expert_out_channels),
        FMX_SIZE("head.num_experts", training.head.num_experts),
        FMX_BOOL("head.gate_scaling", training.head.gate_scaling),
        FMX_SIZE("head.global_router_dim", training.head.global_router_dim),

        FMX_DOUBLE("ssl.confidence_threshold", training.ssl.confidence_threshold),
        FMX_DOUBLE("ssl.unsup_weight", training.ssl.unsup_weight),
        FMX_DOUBLE("ssl.prox_mu", training.ssl.prox_mu),
        FMX_SIZE("ssl.local_epochs", training.ssl.local_epochs),

        FMX_SIZE("federation.num_clients", training.fl.num_clients),
        FMX_DOUBLE("federation.sample_ratio", training.fl.sample_ratio),
        FMX_SIZE("federation.rounds", training.fl.rounds),
        FMX_SIZE("federation.warmup_epochs", training.fl.warmup_epochs),
        FMX_SIZE("federation.server_epochs_per_round", training.fl.server_epochs_per_round),
        FMX_DOUBLE("federation.alpha", training.fl.alpha),
        FMX_BOOL("federation.use_clients", training.fl.use_clients),
        FMX_BOOL("federation.low_res_server", training.fl.low_res_server),
        FMX_SIZE("federation.server_batch_size", training.fl.server_batch_size),
        FMX_SIZE("federation.client_batch_size", training.fl.client_batch_size),
        FMX_SIZE("federation.seed", training.fl.seed),
    };
    k["head.routing_mode"] = {
        [](const RunConfig& c) { return to_string(c.training.head.routing_mode); },
        [](RunConfig& c, const std::string& v) {
          c.training.head.routing_mode =
              parse_enum<RoutingMode>("head.routing_mode", v, routing_mode_from_string);
        }};
    k["head.domain_assignment"] = {
        [](const RunConfig& c) { return join(c.training.head.domain_assignment, fmt_size); },
        [](RunConfig& c, const std::string& v) {
          c.training.head.domain_assignment.clear();
          for (const auto& s : split_list(v)) {
            c.training.head.domain_assignment.push_back(parse_uint("head.domain_assignment", s));
          }
        }};
    k["federation.aggregator"] = {
        [](const RunConfig&) { return std::string("fedavg"); },
        [](RunConfig&, const std::string& v) {
          if (trim(v) != "fedavg") {
            throw ConfigError("federation.aggregator",
                              "key 'federation.aggregator': only 'fedavg' is supported");
          }
        }};
    k["federation.weighting"] = {
        [](const RunConfig& c) { return to_string(c.training.fl.weighting); },
        [](RunConfig& c, const std::string& v) {
          c.training.fl.weighting = parse_enum<AggregationWeighting>(
              "federation.weighting", v, aggregation_weighting_from_string);
        }};
    add_optimizer_keys(k, "warmup_optimizer", &TrainingConfig::warmup_optimizer);
    add_optimizer_keys(k, "server_optimizer", &TrainingConfig::server_optimizer);
    add_optimizer_keys(k, "client_optimizer", &TrainingConfig::client_optimizer);

    k["ablate.methods"] = {
        [](const RunConfig& c) {
          return join(c.ablate.methods, [](const std::string& s) { return s; });
        },
        [](RunConfig& c, const std::string& v) {
          c.ablate.methods = split_list(v);
          const auto& known = known_methods();
          for (const auto& m : c.ablate.methods) {
            if (std::find(known.begin(), known.end(), m) == known.end()) {
              throw ConfigError("ablate.methods", "key 'ablate.methods': unknown method '" + m + "'");
            }
          }
        }};
    k["ablate.alphas"] = {
        [](const RunConfig& c) { return join(c.ablate.alphas, fmt_double); },
        [](RunConfig& c, const std::string& v) {
          c.ablate.alphas.clear();
          for (const auto& s : split_list(v)) c.ablate.alphas.push_back(parse_double("ablate.alphas", s));
        }};
    k["ablate.num_experts"] = {
        [](const RunConfig& c) { return join(c.ablate.num_experts, fmt_size); },
        [](RunConfig& c, const std::string& v) {
          c.ablate.num_experts.clear();
          for (const auto& s : split_list(v)) {
            c.ablate.num_experts.push_back(parse_uint("ablate.num_experts", s));
          }
        }};
    k["ablate.routing_modes"] = {
        [](const RunConfig& c) {
          return join(c.ablate.routing_modes, [](RoutingMode m) { return to_string(m); });
        },
        [](RunConfig& c, const std::string& v) {
          c.ablate.routing_modes.clear();
          for (const auto& s : split_list(v)) {
            c.ablate.routing_modes.push_back(
                parse_enum<RoutingMode>("ablate.routing_modes", s, routing_mode_from_string));
          }
        }};
    k["ablate.seeds"] = {
        [](const RunConfig& c) { return join(c.ablate.seeds, fmt_size); },
        [](RunConfig& c, const std::string& v) {
          c.ablate.seeds.clear();
          for (const auto& s : split_list(v)) c.ablate.seeds.push_back(parse_uint("ablate.seeds", s));
        }};
    return k;
  }();
  return keys;
}

#undef FMX_SIZE
#undef FMX_DOUBLE
#undef FMX_BOOL

// domain.N.{scale,bias,noise}
DomainSpec& domain_entry(RunConfig& cfg, std::size_t d) {
  for (auto& s : cfg.world.domains) {
    if (s.domain_id == d) return s;
  }
  cfg.world.domains.push_back(default_domain_spec(d, cfg.world.image_channels));
  return cfg.world.domains.back();
}

void set_domain_key(RunConfig& cfg, const std::string& section, const std::string& name,
                    const std::string& value) {
  const std::string key = section + "." + name;
  const std::size_t d = parse_uint(key, section.substr(std::string("domain.").size()));
  DomainSpec& spec = domain_entry(cfg, d);
  auto list = [&] {
    std::vector<double> out;
    for (const auto& s : split_list(value)) out.push_back(parse_double(key, s));
    return out;
  };
  if (name == "scale") {
    spec.scale = list();
  } else if (name == "bias") {
    spec.bias = list();
  } else if (name == "noise") {
    spec.noise_sigma = parse_double(key, value);
  } else {
    throw ConfigError(key, "unknown key '" + key + "'");
  }
}

void set_key(RunConfig& cfg, const std::string& section, const std::string& name,
             const std::string& value) {
  if (section.rfind("domain.", 0) == 0) {
    set_domain_key(cfg, section, name, value);
    return;
  }
  const std::string key = section + "." + name;
  const auto it = registry().find(key);
  if (it == registry().end()) throw ConfigError(key, "unknown key '" + key + "'");
  it->second.set(cfg, value);
}

}  // namespace

void RunConfig::finalize() {
  world.num_clients = training.fl.num_clients;
  training.head.in_channels = world.feature_channels;
  training.head.num_classes = kNumClasses;
  world.validate();
  training.validate();
  for (const auto& m : ablate.methods) {
    const auto& known = known_methods();
    if (std::find(known.begin(), known.end(), m) == known.end()) {
      throw ConfigError("ablate.methods", "unknown method '" + m + "'");
    }
  }
  for (double a : ablate.alphas) {
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("ablate.alphas", "alpha must lie in [0, 1]");
  }
  for (std::size_t k : ablate.num_experts) {
    if (k == 0) throw ConfigError("ablate.num_experts", "expert count must be positive");
  }
}

RunConfig default_run_config() {
  RunConfig c;
  c.world.feature_channels = 12;
  c.training.head.hidden_channels = 24;
  c.training.head.expert_out_channels = 16;
  c.training.head.num_experts = 3;
  c.training.warmup_optimizer.learning_rate = 0.05;
  c.training.server_optimizer.learning_rate = 0.005;
  c.training.client_optimizer.learning_rate = 0.05;
  c.finalize();
  return c;
}

const std::vector<std::string>& required_keys() {
  static const std::vector<std::string> keys{"world.num_domains", "federation.num_clients",
                                             "federation.rounds", "head.num_experts"};
  return keys;
}

RunConfig parse_config(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("", std::string("malformed config: ") + e.message() + " (line " +
                              std::to_string(e.line()) + ")");
  }
  RunConfig cfg = default_run_config();
  std::set<std::string> seen;
  // world.image_channels sizes the domain defaults, so apply it first.
  for (const auto& [section, body] : tree) {
    if (section == "world") {
      for (const auto& [name, value] : body) {
        if (name == "image_channels") set_key(cfg, section, name, value.data());
      }
    }
  }
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError(section, "key '" + section + "' is outside any section");
    }
    for (const auto& [name, value] : body) {
      set_key(cfg, section, name, value.data());
      seen.insert(section + "." + name);
    }
  }
  for (const auto& key : required_keys()) {
    if (!seen.count(key)) throw MissingKeyError(key);
  }
  cfg.finalize();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& cfg) {
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;
  for (const auto& [key, k] : registry()) {
    const auto dot = key.find('.');
    sections[key.substr(0, dot)].emplace_back(key.substr(dot + 1), k.get(cfg));
  }
  const std::vector<std::string> order{"world",           "head",
                                       "ssl",             "federation",
                                       "warmup_optimizer", "server_optimizer",
                                       "client_optimizer", "ablate"};
  std::ostringstream out;
  for (const auto& name : order) {
    out << '[' << name << "]\n";
    for (const auto& [k, v] : sections[name]) out << k << " = " << v << '\n';
    out << '\n';
  }
  std::vector<DomainSpec> domains = cfg.world.domains;
  std::sort(domains.begin(), domains.end(),
            [](const DomainSpec& a, const DomainSpec& b) { return a.domain_id < b.domain_id; });
  for (const auto& d : domains) {
    out << "[domain." << d.domain_id << "]\n";
    out << "scale = " << join(d.scale, fmt_double) << '\n';
    out << "bias = " << join(d.bias, fmt_double) << '\n';
    out << "noise = " << fmt_double(d.noise_sigma) << "\n\n";
  }
  return out.str();
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError(assignment, "override '" + assignment + "' must look like section.key=value");
  }
  const std::string key = trim(assignment.substr(0, eq));
  const std::string value = assignment.substr(eq + 1);
  const auto dot = key.rfind('.');
  if (dot == std::string::npos || dot == 0) {
    throw ConfigError(key, "override key '" + key + "' must look like section.key");
  }
  set_key(cfg, key.substr(0, dot), key.substr(dot + 1), value);
  cfg.finalize();
}

std::string config_hash(const RunConfig& cfg) {
  RunConfig c = cfg;
  c.training.fl.seed = 0;
  const std::string text = serialize_config(c);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m{"fedmox", "fedavg", "fedprox", "server_only",
                                          "low_res_server"};
  return m;
}

void apply_method(RunConfig& cfg, const std::string& method) {
  auto& t = cfg.training;
  if (method == "fedmox") {
  } else if (method == "fedavg") {
    t.fl.alpha = 0.0;
    t.head.num_experts = 1;
  } else if (method == "fedprox") {
    t.fl.alpha = 0.0;
    t.head.num_experts = 1;
    t.ssl.prox_mu = 0.001;
  } else if (method == "server_only") {
    t.fl.use_clients = false;
    t.head.num_experts = 1;
  } else if (method == "low_res_server") {
    t.fl.low_res_server = true;
  } else {
    throw ConfigError("ablate.methods", "unknown method '" + method + "'");
  }
  if (t.head.num_experts == 1) t.head.domain_assignment.clear();
  cfg.finalize();
}

}  // namespace fedmox
