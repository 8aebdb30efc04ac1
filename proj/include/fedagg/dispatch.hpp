#pragma once

// Workload classification: S = w_s * n against a safety-scaled single-node
// memory budget, and the resulting execution plan.

#include <cstdint>
#include <string>
#include <variant>

#include "fedagg/tensor_model.hpp"

namespace fedagg {

inline constexpr std::uint64_t kMiB = 1024ull * 1024ull;
inline constexpr std::uint64_t kGiB = 1024ull * kMiB;

struct CapacityConfig {
  std::uint64_t node_memory_budget_bytes = 8 * kGiB;
  double safety_factor = 0.5;
  std::uint32_t core_count = 1;
  bool distributed_available = true;
  std::uint32_t worker_count = 4;
  std::uint64_t worker_memory_budget_bytes = 1 * kGiB;
  std::uint64_t target_partition_bytes = 64 * kMiB;

  void validate() const;
  // floor(safety_factor * node_memory_budget_bytes)
  std::uint64_t small_limit_bytes() const;
};

struct WorkloadDescriptor {
  std::uint64_t update_size_bytes = 0;
  std::uint64_t party_count = 0;

  WorkloadDescriptor(std::uint64_t update_size, std::uint64_t parties);
  std::uint64_t total_bytes() const { return update_size_bytes * party_count; }
};

enum class WorkloadClass { Small, Large };
std::string_view to_string(WorkloadClass c);

struct LocalPlan {
  std::uint32_t chunk_count = 1;
  friend bool operator==(const LocalPlan&, const LocalPlan&) = default;
};

struct DistributedPlan {
  std::uint32_t partition_count = 1;
  std::uint32_t worker_count = 1;
  friend bool operator==(const DistributedPlan&, const DistributedPlan&) = default;
};

using EnginePlan = std::variant<LocalPlan, DistributedPlan>;

// Exact FAUF size of an update for this schema, using a nominal client id.
inline constexpr std::size_t kNominalClientIdLen = 16;
std::uint64_t estimate_update_size(const ModelSchema& schema);

WorkloadClass classify(const WorkloadDescriptor& w, const CapacityConfig& c);

// Throws CapacityExceeded for Large workloads without a distributed backend.
EnginePlan plan(const WorkloadDescriptor& w, const CapacityConfig& c);

}  // namespace fedagg
