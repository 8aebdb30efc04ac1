#pragma once

#include <cstdint>
#include <limits>
#include <span>

#include "fedagg/dispatch.hpp"
#include "fedagg/fusion.hpp"

namespace fedagg {

// Wall-clock phase breakdown, seconds.
//   read_partition: ordering / partitioning and (distributed) blob reads + decode
//   sum:            accumulation of weighted sums and sample-count totals
//   reduce:         merging partials
//   finalize:       division and output cast (plus publish, when a caller adds it)
struct PhaseTimings {
  double read_partition_s = 0;
  double sum_s = 0;
  double reduce_s = 0;
  double finalize_s = 0;
  double total_s = 0;
};

struct LocalEngineOptions {
  std::uint64_t memory_cap_bytes = std::numeric_limits<std::uint64_t>::max();
};

struct LocalResult {
  GlobalModel model;
  PhaseTimings timings;
  std::uint64_t peak_accumulator_bytes = 0;
};

// Working set the local engine reserves: the resident updates plus one
// accumulator per chunk.
std::uint64_t local_memory_required(const ModelSchema& schema, std::uint64_t party_count,
                                    std::uint32_t chunk_count, Summation summation);

// Data-parallel fusion. Updates are ordered by client_id, split into
// contiguous chunks, each chunk folded on its own thread, and the chunk
// partials merged on the calling thread in chunk order. Output bytes depend
// only on the update multiset and chunk_count.
LocalResult fuse_local(std::span<const ModelUpdate> updates, const FusionConfig& cfg,
                       const LocalPlan& plan, const LocalEngineOptions& opts = {},
                       std::uint64_t round = 0);

}  // namespace fedagg
