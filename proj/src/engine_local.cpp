#include "fedagg/engine_local.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <numeric>
#include <optional>
#include <thread>

namespace fedagg {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

}  // namespace

std::uint64_t local_memory_required(const ModelSchema& schema, std::uint64_t party_count,
                                    std::uint32_t chunk_count, Summation summation) {
  const std::uint64_t acc = schema.elements() * sizeof(double) *
                            (summation == Summation::Compensated ? 2 : 1);
  return party_count * schema.payload_bytes() + std::uint64_t{chunk_count} * acc;
}

LocalResult fuse_local(std::span<const ModelUpdate> updates, const FusionConfig& cfg,
                       const LocalPlan& plan, const LocalEngineOptions& opts,
                       std::uint64_t round) {
  const auto start = Clock::now();
  cfg.validate();
  if (updates.empty()) throw Error(ErrorCode::EmptyInput, "no updates to fuse");
  if (plan.chunk_count == 0) throw Error(ErrorCode::InvalidValue, "chunk_count must be >= 1");

  const auto schema = schema_of(updates.front());
  for (const auto& u : updates) {
    try {
      check_compatible(schema, schema_of(u));
    } catch (const Error& e) {
      throw Error(ErrorCode::SchemaMismatch, e.what(), u.client_id());
    }
  }
  const auto chunks = static_cast<std::uint32_t>(
      std::min<std::size_t>(plan.chunk_count, updates.size()));
  const auto required = local_memory_required(schema, updates.size(), chunks, cfg.summation);
  if (required > opts.memory_cap_bytes) {
    throw Error(ErrorCode::MemoryCapExceeded,
                std::to_string(required) + " bytes needed, cap is " +
                    std::to_string(opts.memory_cap_bytes));
  }

  std::vector<std::size_t> order(updates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ua = updates[a];
    const auto& ub = updates[b];
    if (ua.client_id() != ub.client_id()) return ua.client_id() < ub.client_id();
    return ua.sample_count() < ub.sample_count();
  });
  auto chunk_begin = [&](std::uint32_t c) { return order.size() * c / chunks; };

  LocalResult result;
  result.timings.read_partition_s = seconds_since(start);

  const auto sum_start = Clock::now();
  std::vector<std::optional<PartialAggregate>> partials(chunks);
  std::vector<std::exception_ptr> errors(chunks);
  std::atomic<std::uint32_t> next{0};
  auto worker = [&] {
    for (auto c = next++; c < chunks; c = next++) {
      try {
        PartialAggregate p(schema, cfg.algo, cfg.summation);
        for (auto i = chunk_begin(c); i < chunk_begin(c + 1); ++i) p.accumulate(updates[order[i]]);
        partials[c].emplace(std::move(p));
      } catch (...) {
        errors[c] = std::current_exception();
      }
    }
  };
  const auto threads = std::min<std::uint32_t>(
      chunks, std::max(1u, std::thread::hardware_concurrency()));
  {
    std::vector<std::jthread> pool;
    for (std::uint32_t t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  result.peak_accumulator_bytes = std::uint64_t{chunks} * partials.front()->accumulator_bytes();
  result.timings.sum_s = seconds_since(sum_start);

  const auto reduce_start = Clock::now();
  PartialAggregate total = std::move(*partials.front());
  for (std::uint32_t c = 1; c < chunks; ++c) {
    total.merge(*partials[c]);
    partials[c].reset();
  }
  result.timings.reduce_s = seconds_since(reduce_start);

  const auto finalize_start = Clock::now();
  result.model = finalize(total, cfg, round);
  result.timings.finalize_s = seconds_since(finalize_start);
  result.timings.total_s = seconds_since(start);
  return result;
}

}  // namespace fedagg
