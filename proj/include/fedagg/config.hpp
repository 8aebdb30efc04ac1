#pragma once

// Service configuration: a JSON file plus FEDAGG_* environment overrides.
//
//   {
//     "memory_budget": "8GiB", "safety_factor": 0.5, "cores": 4,
//     "distributed": true, "workers": 4, "worker_memory": "1GiB",
//     "target_partition_bytes": "64MiB", "local_memory_cap": "4GiB",
//     "threshold": 10,            // integer: count, real in (0,1]: fraction
//     "timeout_s": 60, "min_parties": 1, "poll_interval_s": 0.5,
//     "task_timeout_s": 120,
//     "fusion": {"algo": "fedavg", "epsilon": 1e-6, "summation": "naive"},
//     "store": {"backend": "dir", "root": "./fedagg-store"},
//     "model": "cnn4.6@0.01:f32",
//     "registered": 0,
//     "listen": "127.0.0.1:8080"
//   }
//
// Environment overrides use the upper-cased key with a FEDAGG_ prefix and
// nested keys joined by '_': FEDAGG_WORKERS, FEDAGG_FUSION_ALGO,
// FEDAGG_STORE_ROOT, ...

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include "fedagg/dispatch.hpp"
#include "fedagg/fusion.hpp"
#include "fedagg/model_spec.hpp"

namespace fedagg {

// Absolute update count or a fraction of registered clients.
struct Threshold {
  bool is_fraction = false;
  std::uint64_t count = 1;
  double fraction = 1.0;

  static Threshold absolute(std::uint64_t n);
  static Threshold of_registered(double f);

  // Fractions round up and never go below 1.
  std::uint64_t resolve(std::uint64_t registered) const;
  std::string str() const;
  friend bool operator==(const Threshold&, const Threshold&) = default;
};

// "1048576", "64MiB", "1.5GiB", "500MB", "4k" -> bytes
std::uint64_t parse_size(std::string_view text);

// Integer text is absolute, text with a '.' is a fraction.
Threshold parse_threshold(std::string_view text);

struct ServiceConfig {
  CapacityConfig capacity;
  std::optional<std::uint64_t> local_memory_cap_bytes;
  Threshold threshold = Threshold::absolute(10);
  double timeout_s = 60;
  std::uint64_t min_parties = 1;
  double poll_interval_s = 0.5;
  std::optional<double> task_timeout_s;
  FusionConfig fusion;
  std::string store_backend = "dir";
  std::string store_root = "fedagg-store";
  ModelSpec model;
  std::uint64_t registered = 0;
  std::string listen = "127.0.0.1:8080";

  void validate() const;
};

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;
std::optional<std::string> process_env(const std::string& name);

// Unknown keys and bad values throw ConfigError naming the key. Cross-field
// checks live in ServiceConfig::validate, which load_config runs last.
ServiceConfig config_from_json(std::string_view json_text);
void apply_env_overrides(ServiceConfig& cfg, const EnvLookup& env = process_env);
ServiceConfig load_config(const std::filesystem::path& path, const EnvLookup& env = process_env);

std::string config_to_json(const ServiceConfig& cfg);

}  // namespace fedagg
