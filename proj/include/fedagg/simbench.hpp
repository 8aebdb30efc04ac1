#pragma once

// Client simulator and benchmark harness.
//
// Bench CSV columns (header row included):
//   model_size_bytes,parties,engine,read_partition_s,sum_s,reduce_s,total_s,
//   peak_mem_bytes,avg_write_s,error
// `error` is empty for timed rows; failed cells carry the error code and
// zero timings.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fedagg/coordinator.hpp"
#include "fedagg/model_spec.hpp"

namespace fedagg {

// Where simulated clients send their updates.
class UpdateSink {
 public:
  virtual ~UpdateSink() = default;
  virtual void submit(const std::string& client_id, std::uint64_t round, ByteView bytes) = 0;
};

class StoreSink final : public UpdateSink {
 public:
  explicit StoreSink(BlobStore& store) : store_(store) {}
  void submit(const std::string& client_id, std::uint64_t round, ByteView bytes) override;

 private:
  BlobStore& store_;
};

class CoordinatorSink final : public UpdateSink {
 public:
  explicit CoordinatorSink(Coordinator& c) : coord_(c) {}
  void submit(const std::string& client_id, std::uint64_t round, ByteView bytes) override;

 private:
  Coordinator& coord_;
};

// POSTs to <url>/v1/updates/<round>, mapping error statuses back to codes.
class HttpSink final : public UpdateSink {
 public:
  explicit HttpSink(std::string base_url);
  void submit(const std::string& client_id, std::uint64_t round, ByteView bytes) override;

 private:
  std::string base_url_;
};

struct SimConfig {
  std::uint64_t parties = 64;
  ModelSchema schema;
  std::uint64_t round = 1;
  std::uint32_t concurrency = 8;
  std::uint64_t seed = 1;
  std::uint64_t min_samples = 1;
  std::uint64_t max_samples = 100;
  // Extra submissions reusing already-used client ids.
  std::uint64_t duplicates = 0;
  std::string id_prefix = "client-";
};

struct SimFailure {
  std::string client_id;
  ErrorCode code = ErrorCode::InvalidValue;
  std::string message;
};

struct SimStats {
  std::uint64_t attempted = 0;
  std::uint64_t committed = 0;
  std::vector<SimFailure> failures;
  double avg_write_s = 0;
  double min_write_s = 0;
  double max_write_s = 0;
  double p50_write_s = 0;
  double p90_write_s = 0;
  double p99_write_s = 0;
  double wall_s = 0;
};

// Client i gets id <prefix><i, 5 digits>, n_i uniform in
// [min_samples, max_samples] and weights synth_update(seed-derived, ...).
// Identical config => identical bytes.
std::string sim_client_id(const SimConfig& cfg, std::uint64_t i);
std::uint64_t sim_sample_count(const SimConfig& cfg, std::uint64_t i);
ModelUpdate sim_update(const SimConfig& cfg, std::uint64_t i);

// Write times cover encode + commit. Individual failures are recorded, not
// thrown; TargetUnavailable only when no submission could reach the sink.
SimStats simulate_clients(const SimConfig& cfg, UpdateSink& sink);

struct BenchRow {
  std::uint64_t model_size_bytes = 0;
  std::uint64_t parties = 0;
  std::string engine;
  double read_partition_s = 0;
  double sum_s = 0;
  double reduce_s = 0;
  double total_s = 0;
  std::uint64_t peak_mem_bytes = 0;
  double avg_write_s = 0;
  std::string error;

  friend bool operator==(const BenchRow&, const BenchRow&) = default;
};

inline constexpr std::string_view kBenchHeader =
    "model_size_bytes,parties,engine,read_partition_s,sum_s,reduce_s,total_s,peak_mem_bytes,"
    "avg_write_s,error";

std::string bench_csv(const std::vector<BenchRow>& rows);
// MalformedCsv with the 1-based line number as subject.
std::vector<BenchRow> parse_bench_csv(std::string_view text);
void write_bench_csv(const std::filesystem::path& path, const std::vector<BenchRow>& rows);
std::vector<BenchRow> read_bench_csv(const std::filesystem::path& path);

// Engines: "local" (chunk_count = cores), "local-seq" (chunk_count = 1),
// "distributed" (in-process worker pool).
struct BenchMatrix {
  std::vector<ModelSpec> specs;
  std::vector<std::uint64_t> parties;
  std::vector<std::string> engines;
  std::uint32_t reps = 1;
  std::uint64_t seed = 1;
  FusionConfig fusion;
  std::uint32_t cores = 1;
  std::uint32_t workers = 4;
  std::uint64_t local_memory_cap = std::numeric_limits<std::uint64_t>::max();
  std::uint64_t worker_memory_budget = 1 * kGiB;
  std::uint64_t target_partition_bytes = 64 * kMiB;
  double tolerance = 1e-12;
};

// One row per cell and repetition. Every timed row has been checked against
// the sequential fold; mismatches and engine errors become error rows.
std::vector<BenchRow> bench_fusion(const BenchMatrix& m);

struct ReportOptions {
  double speedup_bar = 0.25;  // flagged, never fatal
  double scalability_bar = 3.0;
};

struct Report {
  std::string text;
  std::map<std::string, std::string> plot_data;  // file name -> contents

  // model size -> engine -> largest party count with a timed row
  std::map<std::uint64_t, std::map<std::string, std::uint64_t>> max_parties;
  std::vector<std::string> flags;
};

Report make_report(const std::vector<BenchRow>& rows, const ReportOptions& opts = {});
void write_plot_data(const Report& r, const std::filesystem::path& dir);

struct EndToEndConfig {
  std::uint64_t clients = 500;
  ModelSpec spec{"cnn4.6", 0.01, Dtype::F32};
  std::uint32_t concurrency = 32;
  std::uint64_t seed = 7;
  std::uint32_t workers = 4;
  // Empty: in-memory store; otherwise a directory store at this path.
  std::string store_root;
  double timeout_s = 120;
};

struct EndToEndResult {
  GlobalModel model;
  double oracle_difference = 0;
  bool counts_match = false;
  SubmissionMode mode = SubmissionMode::Direct;
  RoundMetrics metrics;
  SimStats sim;
  BenchRow row;
};

// Registers `clients` parties with a node budget small enough that the
// coordinator predicts a Large workload, opens a Store-mode round, lets the
// simulated clients write into the store and fuses on the worker pool.
EndToEndResult run_end_to_end(const EndToEndConfig& cfg);

}  // namespace fedagg
