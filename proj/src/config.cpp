#include "fedagg/config.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "fedagg/error.hpp"

namespace fedagg {

using nlohmann::json;

Threshold Threshold::absolute(std::uint64_t n) {
  if (n == 0) throw Error(ErrorCode::ConfigError, "threshold must be at least 1", "threshold");
  Threshold t;
  t.count = n;
  return t;
}

Threshold Threshold::of_registered(double f) {
  if (!(f > 0.0 && f <= 1.0)) {
    throw Error(ErrorCode::ConfigError, "threshold fraction must lie in (0, 1]", "threshold");
  }
  Threshold t;
  t.is_fraction = true;
  t.fraction = f;
  return t;
}

std::uint64_t Threshold::resolve(std::uint64_t registered) const {
  if (!is_fraction) return count;
  const auto n = static_cast<std::uint64_t>(std::ceil(fraction * static_cast<double>(registered)));
  return std::max<std::uint64_t>(n, 1);
}

std::string Threshold::str() const {
  if (!is_fraction) return std::to_string(count);
  std::ostringstream os;
  os << fraction << " of registered";
  return os.str();
}

std::uint64_t parse_size(std::string_view text) {
  const std::string s(text);
  std::size_t pos = 0;
  double value = 0;
  try {
    value = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw Error(ErrorCode::ConfigError, "not a size: '" + s + "'", "size");
  }
  std::string unit = s.substr(pos);
  while (!unit.empty() && unit.front() == ' ') unit.erase(unit.begin());
  for (auto& c : unit) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  double mult = 0;
  if (unit.empty() || unit == "b") mult = 1;
  else if (unit == "k" || unit == "kb") mult = 1e3;
  else if (unit == "m" || unit == "mb") mult = 1e6;
  else if (unit == "g" || unit == "gb") mult = 1e9;
  else if (unit == "kib") mult = 1024.0;
  else if (unit == "mib") mult = static_cast<double>(kMiB);
  else if (unit == "gib") mult = static_cast<double>(kGiB);
  else if (unit == "tib") mult = static_cast<double>(kGiB) * 1024.0;
  if (mult == 0 || !(value >= 0) || !std::isfinite(value)) {
    throw Error(ErrorCode::ConfigError, "not a size: '" + s + "'", "size");
  }
  return static_cast<std::uint64_t>(std::llround(value * mult));
}

Threshold parse_threshold(std::string_view text) {
  const std::string s(text);
  try {
    std::size_t pos = 0;
    if (s.find('.') != std::string::npos) {
      const double f = std::stod(s, &pos);
      if (pos == s.size()) return Threshold::of_registered(f);
    } else {
      const auto n = std::stoull(s, &pos);
      if (pos == s.size()) return Threshold::absolute(n);
    }
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::ConfigError, "not a threshold: '" + s + "'", "threshold");
}

void ServiceConfig::validate() const {
  try {
    capacity.validate();
    fusion.validate();
    model.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::ConfigError, e.what(), e.subject());
  }
  if (min_parties == 0) throw Error(ErrorCode::ConfigError, "must be at least 1", "min_parties");
  if (!threshold.is_fraction && threshold.count < min_parties) {
    throw Error(ErrorCode::ConfigError, "threshold below min_parties", "threshold");
  }
  if (!(poll_interval_s > 0)) throw Error(ErrorCode::ConfigError, "must be positive", "poll_interval_s");
  if (!(timeout_s > poll_interval_s)) {
    throw Error(ErrorCode::ConfigError, "timeout_s must exceed poll_interval_s", "timeout_s");
  }
  if (task_timeout_s && !(*task_timeout_s > 0)) {
    throw Error(ErrorCode::ConfigError, "must be positive", "task_timeout_s");
  }
  if (store_backend != "memory" && store_backend != "dir" && store_backend != "local") {
    throw Error(ErrorCode::ConfigError, "unknown backend '" + store_backend + "'", "store.backend");
  }
}

namespace {

std::uint64_t as_size(const json& v, const std::string& key) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return v.get<std::uint64_t>();
  if (v.is_number_float() && v.get<double>() >= 0) return static_cast<std::uint64_t>(v.get<double>());
  if (v.is_string()) {
    try {
      return parse_size(v.get<std::string>());
    } catch (const Error& e) {
      throw Error(ErrorCode::ConfigError, e.what(), key);
    }
  }
  throw Error(ErrorCode::ConfigError, "expected a size", key);
}

std::uint64_t as_count(const json& v, const std::string& key) {
  if (v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
    return v.get<std::uint64_t>();
  }
  throw Error(ErrorCode::ConfigError, "expected a non-negative integer", key);
}

double as_real(const json& v, const std::string& key) {
  if (v.is_number()) return v.get<double>();
  throw Error(ErrorCode::ConfigError, "expected a number", key);
}

std::string as_string(const json& v, const std::string& key) {
  if (v.is_string()) return v.get<std::string>();
  throw Error(ErrorCode::ConfigError, "expected a string", key);
}

bool as_bool(const json& v, const std::string& key) {
  if (v.is_boolean()) return v.get<bool>();
  throw Error(ErrorCode::ConfigError, "expected true or false", key);
}

template <typename F>
auto wrap(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ConfigError) throw;
    throw Error(ErrorCode::ConfigError, e.what(), key);
  }
}

void apply_key(ServiceConfig& c, const std::string& key, const json& v) {
  auto& cap = c.capacity;
  if (key == "memory_budget") cap.node_memory_budget_bytes = as_size(v, key);
  else if (key == "safety_factor") cap.safety_factor = as_real(v, key);
  else if (key == "cores") cap.core_count = static_cast<std::uint32_t>(as_count(v, key));
  else if (key == "distributed") cap.distributed_available = as_bool(v, key);
  else if (key == "workers") cap.worker_count = static_cast<std::uint32_t>(as_count(v, key));
  else if (key == "worker_memory") cap.worker_memory_budget_bytes = as_size(v, key);
  else if (key == "target_partition_bytes") cap.target_partition_bytes = as_size(v, key);
  else if (key == "local_memory_cap") c.local_memory_cap_bytes = as_size(v, key);
  else if (key == "threshold") {
    if (v.is_number_integer() || v.is_number_unsigned()) {
      c.threshold = wrap(key, [&] { return Threshold::absolute(as_count(v, key)); });
    } else if (v.is_number_float()) {
      c.threshold = wrap(key, [&] { return Threshold::of_registered(v.get<double>()); });
    } else if (v.is_string()) {
      c.threshold = parse_threshold(v.get<std::string>());
    } else {
      throw Error(ErrorCode::ConfigError, "expected a count or fraction", key);
    }
  } else if (key == "timeout_s") c.timeout_s = as_real(v, key);
  else if (key == "min_parties") c.min_parties = as_count(v, key);
  else if (key == "poll_interval_s") c.poll_interval_s = as_real(v, key);
  else if (key == "task_timeout_s") c.task_timeout_s = as_real(v, key);
  else if (key == "fusion.algo") c.fusion.algo = wrap(key, [&] { return parse_fusion_algo(as_string(v, key)); });
  else if (key == "fusion.epsilon") c.fusion.epsilon = as_real(v, key);
  else if (key == "fusion.summation") c.fusion.summation = wrap(key, [&] { return parse_summation(as_string(v, key)); });
  else if (key == "fusion.output_dtype") c.fusion.output_dtype = wrap(key, [&] { return parse_dtype(as_string(v, key)); });
  else if (key == "store.backend") c.store_backend = as_string(v, key);
  else if (key == "store.root") c.store_root = as_string(v, key);
  else if (key == "model") c.model = wrap(key, [&] { return parse_model_spec(as_string(v, key)); });
  else if (key == "registered") c.registered = as_count(v, key);
  else if (key == "listen") c.listen = as_string(v, key);
  else throw Error(ErrorCode::ConfigError, "unknown key", key);
}

void apply_object(ServiceConfig& c, const json& obj, const std::string& prefix) {
  for (const auto& [k, v] : obj.items()) {
    const auto key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object() && (key == "fusion" || key == "store")) {
      apply_object(c, v, key);
    } else {
      apply_key(c, key, v);
    }
  }
}

const std::vector<std::string>& env_keys() {
  static const std::vector<std::string> keys = {
      "memory_budget", "safety_factor",   "cores",          "distributed",      "workers",
      "worker_memory", "target_partition_bytes", "local_memory_cap", "threshold", "timeout_s",
      "min_parties",   "poll_interval_s", "task_timeout_s", "fusion.algo",      "fusion.epsilon",
      "fusion.summation", "fusion.output_dtype", "store.backend", "store.root", "model",
      "registered",    "listen"};
  return keys;
}

std::string env_name(const std::string& key) {
  std::string name = "FEDAGG_";
  for (char ch : key) {
    name += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  }
  return name;
}

}  // namespace

std::optional<std::string> process_env(const std::string& name) {
  if (const char* v = std::getenv(name.c_str())) return std::string(v);
  return std::nullopt;
}

ServiceConfig config_from_json(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, e.what(), "json");
  }
  if (!doc.is_object()) throw Error(ErrorCode::ConfigError, "top level must be an object", "json");
  ServiceConfig cfg;
  apply_object(cfg, doc, "");
  return cfg;
}

void apply_env_overrides(ServiceConfig& cfg, const EnvLookup& env) {
  for (const auto& key : env_keys()) {
    const auto value = env(env_name(key));
    if (!value) continue;
    json v;
    // numbers and booleans parse as JSON; anything else is taken verbatim
    try {
      v = json::parse(*value);
      if (!v.is_number() && !v.is_boolean()) v = *value;
    } catch (const json::exception&) {
      v = *value;
    }
    apply_key(cfg, key, v);
  }
}

ServiceConfig load_config(const std::filesystem::path& path, const EnvLookup& env) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ConfigError, "cannot open", path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  auto cfg = config_from_json(ss.str());
  apply_env_overrides(cfg, env);
  cfg.validate();
  return cfg;
}

std::string config_to_json(const ServiceConfig& c) {
  nlohmann::ordered_json j;
  j["memory_budget"] = c.capacity.node_memory_budget_bytes;
  j["safety_factor"] = c.capacity.safety_factor;
  j["cores"] = c.capacity.core_count;
  j["distributed"] = c.capacity.distributed_available;
  j["workers"] = c.capacity.worker_count;
  j["worker_memory"] = c.capacity.worker_memory_budget_bytes;
  j["target_partition_bytes"] = c.capacity.target_partition_bytes;
  if (c.local_memory_cap_bytes) j["local_memory_cap"] = *c.local_memory_cap_bytes;
  if (c.threshold.is_fraction) j["threshold"] = c.threshold.fraction;
  else j["threshold"] = c.threshold.count;
  j["timeout_s"] = c.timeout_s;
  j["min_parties"] = c.min_parties;
  j["poll_interval_s"] = c.poll_interval_s;
  if (c.task_timeout_s) j["task_timeout_s"] = *c.task_timeout_s;
  j["fusion"]["algo"] = std::string(to_string(c.fusion.algo));
  j["fusion"]["epsilon"] = c.fusion.epsilon;
  j["fusion"]["summation"] = std::string(to_string(c.fusion.summation));
  if (c.fusion.output_dtype) j["fusion"]["output_dtype"] = std::string(to_string(*c.fusion.output_dtype));
  j["store"]["backend"] = c.store_backend;
  j["store"]["root"] = c.store_root;
  std::ostringstream model;
  model << c.model.name << '@' << c.model.scale << ':' << to_string(c.model.dtype);
  j["model"] = model.str();
  j["registered"] = c.registered;
  j["listen"] = c.listen;
  return j.dump(2);
}

}  // namespace fedagg
