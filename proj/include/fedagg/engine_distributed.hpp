#pragma once

// Large-workload path: update blobs are packed into balanced partitions, each
// partition is folded into a PartialAggregate by a map task on a worker, and
// the driver merges the partials in ascending partition id before a single
// finalize. Workers talk to the driver only through TaskSpec / TaskResult
// frames, so the same protocol runs in-process or across a pipe
// (see serve_worker_stream).

#include <chrono>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "fedagg/blocking_queue.hpp"
#include "fedagg/engine_local.hpp"
#include "fedagg/store.hpp"

namespace fedagg {

struct Partition {
  std::uint32_t partition_id = 0;
  std::vector<std::string> keys;  // ascending
  std::uint64_t bytes = 0;
  friend bool operator==(const Partition&, const Partition&) = default;
};

struct PartitionPlan {
  std::vector<Partition> partitions;

  std::uint64_t max_partition_bytes() const;
  std::uint64_t min_partition_bytes() const;
  friend bool operator==(const PartitionPlan&, const PartitionPlan&) = default;
};

// Longest-processing-time packing: entries sorted by (size desc, key asc) go
// to the currently lightest of max(min_partitions, ceil(total / target_bytes))
// bins (capped at the entry count). If a bin would exceed the worker budget
// the bin count grows until none does.
PartitionPlan make_partitions(std::vector<BlobEntry> entries, std::uint64_t target_bytes,
                              std::uint64_t worker_memory_budget,
                              std::uint32_t min_partitions = 1);

// Coverage, disjointness, dense ids and the budget; throws InvalidValue.
void validate_plan(const PartitionPlan& plan, const std::vector<BlobEntry>& entries,
                   std::uint64_t worker_memory_budget);

struct TaskSpec {
  std::uint32_t partition_id = 0;
  std::vector<std::string> keys;
  FusionConfig fusion;
  std::uint32_t attempt = 1;
  std::uint64_t round = 0;
  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

struct TaskResult {
  std::uint32_t partition_id = 0;
  std::uint32_t attempt = 1;
  Bytes partial;  // FPAG; empty when error is set
  double read_s = 0;
  double sum_s = 0;
  std::optional<ErrorCode> error;
  std::string error_subject;
  std::string error_message;

  bool ok() const { return !error.has_value(); }
  friend bool operator==(const TaskResult&, const TaskResult&) = default;
};

inline constexpr std::string_view kTaskSpecMagic = "FTSK";
inline constexpr std::string_view kTaskResultMagic = "FTRS";

Bytes encode_task_spec(const TaskSpec& t);
TaskSpec decode_task_spec(ByteView bytes);
Bytes encode_task_result(const TaskResult& r);
TaskResult decode_task_result(ByteView bytes);

// Decodes each blob in ascending key order and folds it into one partial.
// Errors carry the offending key as subject: StoreReadError, the decode
// error code, or SchemaMismatch.
TaskResult run_map_task(const TaskSpec& t, const BlobStore& store);

// As run_map_task, but failures come back inside the result.
TaskResult execute_task(const TaskSpec& t, const BlobStore& store);

// Merges in ascending partition id, then finalizes. Ids must be exactly
// 0..partition_count-1: MissingPartition / DuplicatePartition otherwise.
GlobalModel reduce_results(const std::vector<TaskResult>& results, const FusionConfig& cfg,
                           std::uint32_t partition_count, std::uint64_t round = 0);

// Reads u64-length-prefixed TaskSpec frames from `in` until EOF and writes
// one length-prefixed TaskResult frame per spec to `out`.
void serve_worker_stream(std::istream& in, std::ostream& out, const BlobStore& store);

// Test hooks for the in-process pool.
struct FaultPlan {
  // worker -> number of tasks it completes before dying on the next one
  std::map<std::uint32_t, std::uint32_t> die_after_tasks;
  // partitions whose every attempt fails
  std::set<std::uint32_t> always_fail_partitions;
  // (partition, attempt) -> sleep before running
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::chrono::milliseconds> delays;
};

struct WorkerEvent {
  enum class Kind { Result, Lost, Pong } kind = Kind::Result;
  std::uint32_t worker = 0;
  std::uint32_t partition_id = 0;
  std::uint32_t attempt = 0;
  Bytes frame;  // encoded TaskResult for Kind::Result
};

using EventQueue = BlockingQueue<WorkerEvent>;

class WorkerPool {
 public:
  explicit WorkerPool(std::uint32_t worker_count, FaultPlan faults = {});
  ~WorkerPool();
  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  // Spawns worker threads (no-op when already running) and pings each one.
  // Returns the spin-up duration; NoWorkers when worker_count is 0.
  std::chrono::duration<double> start();
  bool started() const;

  std::uint32_t size() const { return static_cast<std::uint32_t>(slots_.size()); }
  std::vector<std::uint32_t> live_workers() const;
  std::uint32_t live_count() const { return static_cast<std::uint32_t>(live_workers().size()); }

  // Round-trips a ping through every live worker.
  bool health_check(std::chrono::milliseconds timeout = std::chrono::milliseconds(2000));

  void set_faults(FaultPlan faults);

  // Queues an encoded TaskSpec on one worker; its outcome lands on `reply`.
  void dispatch(std::uint32_t worker, Bytes spec_frame, const BlobStore& store,
                std::shared_ptr<EventQueue> reply);

 private:
  struct Command {
    enum class Kind { Task, Ping, Stop } kind = Kind::Task;
    Bytes frame;
    const BlobStore* store = nullptr;
    std::shared_ptr<EventQueue> reply;
  };
  struct Slot {
    BlockingQueue<Command> inbox;
    std::thread thread;
    bool alive = false;
    std::uint32_t tasks_done = 0;
  };

  void run(std::uint32_t id);
  void stop_all();

  mutable std::mutex mu_;
  std::vector<std::unique_ptr<Slot>> slots_;
  FaultPlan faults_;
  bool started_ = false;
};

struct PartitionStatus {
  enum class State { Pending, Running, Done, Failed } state = State::Pending;
  std::optional<std::uint32_t> worker;
  std::uint32_t attempts = 0;  // attempts started so far
};

struct JobState {
  std::uint64_t job_id = 0;
  std::uint64_t round = 0;
  PartitionPlan plan;
  std::vector<PartitionStatus> partitions;
  std::chrono::system_clock::time_point started_at;
  std::chrono::system_clock::time_point finished_at;
  std::uint32_t retries = 0;
  std::uint32_t duplicate_results = 0;

  bool complete() const;
};

struct JobOptions {
  std::uint32_t max_attempts = 3;
  // Fixed timeout; when unset it is 10x the EWMA task duration, floored at
  // min_task_timeout.
  std::optional<std::chrono::duration<double>> task_timeout;
  std::chrono::duration<double> min_task_timeout = std::chrono::seconds(30);
  bool publish = true;  // write the result to rounds/<r>/global.fau
  std::uint64_t job_id = 0;
};

struct JobResult {
  GlobalModel model;
  PhaseTimings timings;
  JobState state;
};

// Drives the plan to completion on the pool. JobFailed(partition id) once a
// partition has failed max_attempts times; NoWorkers when no live worker is
// left with work outstanding.
JobResult run_job(const PartitionPlan& plan, const FusionConfig& cfg, WorkerPool& workers,
                  BlobStore& store, std::uint64_t round, const JobOptions& opts = {});

}  // namespace fedagg
