#include "fedagg/dispatch.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fedagg {

void CapacityConfig::validate() const {
  auto require = [](bool ok, const char* field) {
    if (!ok) throw Error(ErrorCode::ConfigError, "must be positive", field);
  };
  require(node_memory_budget_bytes > 0, "memory_budget");
  require(core_count > 0, "cores");
  require(worker_count > 0, "workers");
  require(worker_memory_budget_bytes > 0, "worker_memory");
  require(target_partition_bytes > 0, "target_partition_bytes");
  if (!(safety_factor > 0.0 && safety_factor <= 1.0)) {
    throw Error(ErrorCode::ConfigError, "must lie in (0, 1]", "safety_factor");
  }
}

std::uint64_t CapacityConfig::small_limit_bytes() const {
  const long double limit =
      std::floor(static_cast<long double>(safety_factor) * node_memory_budget_bytes);
  return static_cast<std::uint64_t>(limit);
}

WorkloadDescriptor::WorkloadDescriptor(std::uint64_t update_size, std::uint64_t parties)
    : update_size_bytes(update_size), party_count(parties) {
  if (update_size == 0 || parties == 0) {
    throw Error(ErrorCode::InvalidValue, "update size and party count must be positive");
  }
  if (update_size > std::numeric_limits<std::uint64_t>::max() / parties) {
    throw Error(ErrorCode::InvalidValue, "total workload size overflows u64");
  }
}

std::string_view to_string(WorkloadClass c) {
  return c == WorkloadClass::Small ? "small" : "large";
}

std::uint64_t estimate_update_size(const ModelSchema& schema) {
  return encoded_update_size(schema, kNominalClientIdLen);
}

WorkloadClass classify(const WorkloadDescriptor& w, const CapacityConfig& c) {
  c.validate();
  return w.total_bytes() <= c.small_limit_bytes() ? WorkloadClass::Small : WorkloadClass::Large;
}

EnginePlan plan(const WorkloadDescriptor& w, const CapacityConfig& c) {
  if (classify(w, c) == WorkloadClass::Small) {
    const auto chunks = std::min<std::uint64_t>(c.core_count, w.party_count);
    return LocalPlan{static_cast<std::uint32_t>(chunks)};
  }
  if (!c.distributed_available) {
    throw Error(ErrorCode::CapacityExceeded,
                std::to_string(w.total_bytes()) + " bytes exceed the single-node limit of " +
                    std::to_string(c.small_limit_bytes()) +
                    " and no distributed backend is available");
  }
  const auto by_size = (w.total_bytes() + c.target_partition_bytes - 1) / c.target_partition_bytes;
  const auto partitions = std::max<std::uint64_t>(c.worker_count, by_size);
  return DistributedPlan{static_cast<std::uint32_t>(partitions), c.worker_count};
}

}  // namespace fedagg
