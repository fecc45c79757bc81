#include "trgrpo/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace trgrpo {

ConfigError::ConfigError(std::string key, int line, const std::string& what)
    : std::runtime_error(line > 0 ? "config line " + std::to_string(line) + ", key '" + key + "': " + what
                                  : "config override, key '" + key + "': " + what),
      key_(std::move(key)),
      line_(line) {}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("expected a number, got '" + v + "'");
  return out;
}

long long to_integer(const std::string& v) {
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("expected an integer, got '" + v + "'");
  return out;
}

int to_int(const std::string& v) {
  const long long x = to_integer(v);
  if (x < INT32_MIN || x > INT32_MAX) throw std::invalid_argument("integer out of range: '" + v + "'");
  return static_cast<int>(x);
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("expected true or false, got '" + v + "'");
}

std::string fmt(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

std::string fmt(bool v) { return v ? "true" : "false"; }

ConfigKey real(std::string key, std::string desc, double TrainConfig::*field) {
  return {std::move(key), std::move(desc), [field](TrainConfig& c, const std::string& v) { c.*field = to_double(v); },
          [field](const TrainConfig& c) { return fmt(c.*field); }};
}

ConfigKey integer(std::string key, std::string desc, int TrainConfig::*field) {
  return {std::move(key), std::move(desc), [field](TrainConfig& c, const std::string& v) { c.*field = to_int(v); },
          [field](const TrainConfig& c) { return std::to_string(c.*field); }};
}

ConfigKey boolean(std::string key, std::string desc, bool TrainConfig::*field) {
  return {std::move(key), std::move(desc), [field](TrainConfig& c, const std::string& v) { c.*field = to_bool(v); },
          [field](const TrainConfig& c) { return fmt(c.*field); }};
}

template <typename Get>
ConfigKey custom(std::string key, std::string desc, std::function<void(TrainConfig&, const std::string&)> set,
                 Get get) {
  return {std::move(key), std::move(desc), std::move(set), get};
}

std::vector<ConfigKey> build_schema() {
  std::vector<ConfigKey> s;
  s.push_back(custom(
      "algorithm", "grpo | tr_grpo", [](TrainConfig& c, const std::string& v) { c.algorithm = parse_algorithm(v); },
      [](const TrainConfig& c) { return std::string(algorithm_name(c.algorithm)); }));
  s.push_back(custom(
      "weight_mode", "verbatim (sigmoid(pi/tau)) | scaled (sigmoid(pi*tau))",
      [](TrainConfig& c, const std::string& v) { c.weights.mode = parse_weight_mode(v); },
      [](const TrainConfig& c) { return std::string(weight_mode_name(c.weights.mode)); }));
  s.push_back(custom(
      "weight_scheme", "tr | equal | random | reverse",
      [](TrainConfig& c, const std::string& v) { c.weights.scheme = parse_weight_scheme(v); },
      [](const TrainConfig& c) { return std::string(weight_scheme_name(c.weights.scheme)); }));
  auto wreal = [&](const char* key, const char* desc, double WeightConfig::*f) {
    s.push_back(custom(
        key, desc, [f](TrainConfig& c, const std::string& v) { c.weights.*f = to_double(v); },
        [f](const TrainConfig& c) { return fmt(c.weights.*f); }));
  };
  wreal("alpha", "weight scale alpha", &WeightConfig::alpha);
  wreal("mu", "weight offset mu", &WeightConfig::mu);
  wreal("tau", "weight temperature tau", &WeightConfig::tau);
  wreal("weight_lower", "weight clip lower bound L", &WeightConfig::lower);
  wreal("weight_upper", "weight clip upper bound U", &WeightConfig::upper);
  wreal("random_weight_low", "random scheme lower bound", &WeightConfig::random_low);
  wreal("random_weight_high", "random scheme upper bound", &WeightConfig::random_high);
  auto sreal = [&](const char* key, const char* desc, double SurrogateConfig::*f) {
    s.push_back(custom(
        key, desc, [f](TrainConfig& c, const std::string& v) { c.surrogate.*f = to_double(v); },
        [f](const TrainConfig& c) { return fmt(c.surrogate.*f); }));
  };
  sreal("epsilon_l", "lower clip range", &SurrogateConfig::epsilon_low);
  sreal("epsilon_h", "upper clip range", &SurrogateConfig::epsilon_high);
  sreal("beta", "KL penalty coefficient", &SurrogateConfig::beta);
  s.push_back(custom(
      "sample_std", "Bessel-corrected advantage std",
      [](TrainConfig& c, const std::string& v) { c.surrogate.sample_std = to_bool(v); },
      [](const TrainConfig& c) { return fmt(c.surrogate.sample_std); }));
  s.push_back(integer("group_size", "rollouts per prompt G", &TrainConfig::group_size));
  s.push_back(real("temperature", "sampling temperature (0 = greedy)", &TrainConfig::temperature));
  s.push_back(integer("max_length", "maximum response length t_max", &TrainConfig::max_length));
  auto areal = [&](const char* key, const char* desc, double AdamConfig::*f) {
    s.push_back(custom(
        key, desc, [f](TrainConfig& c, const std::string& v) { c.adam.*f = to_double(v); },
        [f](const TrainConfig& c) { return fmt(c.adam.*f); }));
  };
  areal("lr", "learning rate", &AdamConfig::lr);
  areal("adam_beta1", "Adam first-moment decay", &AdamConfig::beta1);
  areal("adam_beta2", "Adam second-moment decay", &AdamConfig::beta2);
  areal("adam_eps", "Adam epsilon", &AdamConfig::eps);
  areal("weight_decay", "decoupled weight decay", &AdamConfig::weight_decay);
  s.push_back(integer("prompts_per_step", "prompts (groups) per step", &TrainConfig::prompts_per_step));
  s.push_back(integer("total_steps", "training steps", &TrainConfig::total_steps));
  s.push_back(custom(
      "seed", "master seed",
      [](TrainConfig& c, const std::string& v) {
        const long long x = to_integer(v);
        if (x < 0) throw std::invalid_argument("seed must be non-negative");
        c.seed = static_cast<std::uint64_t>(x);
      },
      [](const TrainConfig& c) { return std::to_string(c.seed); }));
  s.push_back(custom(
      "task", "brackets | mini_kk", [](TrainConfig& c, const std::string& v) { c.task = parse_task(v); },
      [](const TrainConfig& c) { return std::string(task_name(c.task)); }));
  s.push_back(integer("difficulty_min", "smallest prompt difficulty", &TrainConfig::difficulty_min));
  s.push_back(integer("difficulty_max", "largest prompt difficulty", &TrainConfig::difficulty_max));
  s.push_back(integer("bracket_types", "bracket pair kinds for the brackets task (1..4)", &TrainConfig::bracket_types));
  auto pint = [&](const char* key, const char* desc, int PolicyShape::*f) {
    s.push_back(custom(
        key, desc, [f](TrainConfig& c, const std::string& v) { c.policy.*f = to_int(v); },
        [f](const TrainConfig& c) { return std::to_string(c.policy.*f); }));
  };
  pint("embedding_dim", "token embedding width", &PolicyShape::embedding_dim);
  pint("context_window", "tokens of context seen by the policy", &PolicyShape::context_window);
  pint("hidden_width", "hidden layer width", &PolicyShape::hidden_width);
  pint("hidden_layers", "hidden layer count", &PolicyShape::hidden_layers);
  s.push_back(real("init_scale", "uniform init half-width", &TrainConfig::init_scale));
  s.push_back(custom(
      "reward", "binary | composite", [](TrainConfig& c, const std::string& v) { c.reward = parse_reward_kind(v); },
      [](const TrainConfig& c) { return std::string(reward_kind_name(c.reward)); }));
  s.push_back(real("rho", "sharpness surrogate radius", &TrainConfig::rho));
  s.push_back(integer("checkpoint_every", "checkpoint period in steps (0 = off)", &TrainConfig::checkpoint_every));
  s.push_back(
      integer("updates_per_collection", "gradient updates per sampled batch", &TrainConfig::updates_per_collection));
  s.push_back(boolean("wall_clock", "write measured wall_ms into metrics.csv", &TrainConfig::wall_clock));
  s.push_back(integer("threads", "rollout collection threads", &TrainConfig::threads));
  s.push_back(boolean("dump_rollouts", "write rollouts.jsonl", &TrainConfig::dump_rollouts));
  return s;
}

const ConfigKey* find_key(const std::string& key) {
  for (const auto& k : config_schema())
    if (k.key == key) return &k;
  return nullptr;
}

void apply(TrainConfig& cfg, const std::string& key, const std::string& value, int line) {
  const ConfigKey* k = find_key(key);
  if (!k) throw ConfigError(key, line, "unknown key");
  if (value.empty()) throw ConfigError(key, line, "missing value");
  try {
    k->set(cfg, value);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key, line, e.what());
  }
}

std::pair<std::string, std::string> split(const std::string& entry, const std::string& where, int line) {
  const auto eq = entry.find('=');
  if (eq == std::string::npos) throw ConfigError(trim(entry), line, "expected key = value in " + where);
  return {trim(entry.substr(0, eq)), trim(entry.substr(eq + 1))};
}

}  // namespace

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = build_schema();
  return schema;
}

TrainConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides) {
  TrainConfig cfg;
  std::istringstream is(text);
  std::string raw;
  int line = 0;
  std::set<std::string> seen;
  while (std::getline(is, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string body = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (body.empty()) continue;
    auto [key, value] = split(body, "config file", line);
    if (!seen.insert(key).second) throw ConfigError(key, line, "duplicate key");
    apply(cfg, key, value, line);
  }
  for (const auto& o : overrides) {
    auto [key, value] = split(o, "override", 0);
    apply(cfg, key, value, 0);
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("(config)", 0, e.what());
  }
  return cfg;
}

TrainConfig parse_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) throw ConfigError("(file)", 0, "cannot read config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str(), overrides);
}

std::string config_to_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& k : config_schema()) out += k.key + " = " + k.get(cfg) + "\n";
  return out;
}

std::string config_help() {
  const TrainConfig defaults;
  std::string out = "Config keys (key = value, default in brackets):\n";
  char buf[256];
  for (const auto& k : config_schema()) {
    std::snprintf(buf, sizeof(buf), "  %-24s %s [%s]\n", k.key.c_str(), k.description.c_str(), k.get(defaults).c_str());
    out += buf;
  }
  return out;
}

}  // namespace trgrpo
