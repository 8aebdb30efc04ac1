#pragma once

// Round lifecycle: open a round (manifest + advertised submission mode),
// wait for a threshold of committed updates or a timeout, snapshot the
// committed set, pick an engine via dispatch, publish the fused model and
// choose the submission mode for the next round.

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stop_token>
#include <string>

#include "fedagg/config.hpp"
#include "fedagg/engine_distributed.hpp"
#include "fedagg/store.hpp"

namespace fedagg {

enum class MonitorOutcome { Triggered, TimedOut, Cancelled };
std::string_view to_string(MonitorOutcome o);

struct MonitorResult {
  MonitorOutcome outcome = MonitorOutcome::TimedOut;
  std::uint64_t count = 0;
  double elapsed_s = 0;
};

// Polls count_updates every poll_s. Triggered as soon as count >= threshold,
// TimedOut(count) once timeout_s has passed. StoreUnavailable is retried
// with backoff until the timeout, then rethrown.
MonitorResult monitor(const BlobStore& source, std::uint64_t round, std::uint64_t threshold,
                      double timeout_s, double poll_s, std::stop_token stop = {});

struct RoundConfig {
  std::uint64_t round = 0;
  Threshold threshold = Threshold::absolute(1);
  double timeout_s = 60;
  std::uint64_t min_parties = 1;
  FusionConfig fusion;
  SubmissionMode submission_mode = SubmissionMode::Direct;
  double poll_interval_s = 0.5;

  // threshold (resolved against `registered`) >= min_parties and
  // timeout_s > poll_interval_s; ConfigError otherwise.
  void validate(std::uint64_t registered) const;
};

enum class RoundStatus { Idle, Collecting, Fusing, Published, Failed };
std::string_view to_string(RoundStatus s);

struct RoundState {
  std::uint64_t round = 0;
  std::uint64_t received = 0;
  std::uint64_t registered = 0;
  std::uint64_t threshold = 0;
  RoundStatus status = RoundStatus::Idle;
  std::string failure_reason;
  SubmissionMode mode = SubmissionMode::Direct;
  SubmissionMode mode_next = SubmissionMode::Direct;
};

// Store as soon as a Large workload is predicted; back to Direct only after
// two consecutive Small predictions.
class ModeSelector {
 public:
  explicit ModeSelector(SubmissionMode initial = SubmissionMode::Direct) : mode_(initial) {}
  SubmissionMode observe(WorkloadClass predicted);
  SubmissionMode mode() const { return mode_; }

 private:
  SubmissionMode mode_;
  int small_streak_ = 0;
};

// Predicted next-round workload: registered * estimate_update_size(schema).
WorkloadClass predict_class(std::uint64_t registered, const CapacityConfig& capacity,
                            const ModelSchema& schema);
SubmissionMode decide_next_mode(ModeSelector& selector, std::uint64_t registered,
                                const CapacityConfig& capacity, const ModelSchema& schema);

struct RoundMetrics {
  std::uint64_t round = 0;
  MonitorOutcome outcome = MonitorOutcome::Triggered;
  std::uint64_t received = 0;  // count seen by the monitor
  std::uint64_t fused = 0;     // snapshot size
  std::uint64_t workload_bytes = 0;
  WorkloadClass workload = WorkloadClass::Small;
  std::string engine;  // "local" or "distributed"
  std::uint32_t parallelism = 0;  // chunks or partitions
  std::uint32_t retries = 0;
  PhaseTimings timings;
};

struct RoundReport {
  GlobalModel model;
  RoundMetrics metrics;
  SubmissionMode mode_next = SubmissionMode::Direct;
};

struct HealthReport {
  bool ok = true;
  std::uint32_t workers_live = 0;
  bool store_ok = true;
};

class Coordinator {
 public:
  // `store` holds manifests, published models and Store-mode updates.
  Coordinator(ServiceConfig cfg, BlobStore& store);
  ~Coordinator();
  Coordinator(const Coordinator&) = delete;
  Coordinator& operator=(const Coordinator&) = delete;

  const ServiceConfig& config() const { return cfg_; }
  const ModelSchema& schema() const { return schema_; }
  void set_schema(ModelSchema schema);

  std::uint64_t register_client(const std::string& client_id);
  // Scripted population for simulations; registered() never drops below it.
  void set_registered(std::uint64_t n);
  std::uint64_t registered() const;

  // Starts round `round` in the currently selected mode and writes its
  // manifest. The mode is fixed for the round's lifetime.
  RoundManifest open_round(std::uint64_t round);
  // Monitor, snapshot, fuse, publish. InsufficientParties when the timeout
  // passes with fewer than min_parties updates.
  RoundReport run_round(std::stop_token stop = {});

  // Direct-mode upload for the open round.
  // WrongMode in a Store-mode round, RoundClosed once sealed or for a past
  // round, NotFound for a future round, DuplicateUpdate, ValidationFailed.
  void submit_direct(std::uint64_t round, ByteView bytes);

  std::chrono::duration<double> warmup_distributed();

  RoundState state() const;
  std::optional<RoundManifest> manifest() const;
  SubmissionMode next_mode() const;
  std::string store_hint() const;
  std::optional<Bytes> published_model(std::uint64_t round) const;
  std::optional<RoundMetrics> metrics(std::uint64_t round) const;
  HealthReport health();

  BlobStore& store() { return store_; }
  WorkerPool& workers() { return *pool_; }

  // Opens and runs rounds first_round, first_round+1, ... until stopped.
  void serve(std::stop_token stop, std::uint64_t first_round = 1);

 private:
  GlobalModel fuse_snapshot(BlobStore& source, std::uint64_t round,
                            const std::vector<BlobEntry>& entries, RoundMetrics& m);

  ServiceConfig cfg_;
  BlobStore& store_;
  MemoryStore inbox_;
  std::unique_ptr<WorkerPool> pool_;
  ModelSchema schema_;

  mutable std::mutex mu_;
  std::set<std::string> clients_;
  std::uint64_t scripted_registered_ = 0;
  ModeSelector selector_;
  RoundState state_;
  std::optional<RoundManifest> manifest_;
  std::map<std::uint64_t, Bytes> published_;
  std::map<std::uint64_t, RoundMetrics> metrics_;
};

}  // namespace fedagg
