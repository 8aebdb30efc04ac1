#include "fedagg/engine_distributed.hpp"

#include <algorithm>
#include <deque>
#include <istream>
#include <ostream>

namespace fedagg {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

constexpr std::uint16_t kFrameVersion = 1;
constexpr std::uint8_t kNoOutputDtype = 0xFF;

}  // namespace

// --- partitioning -----------------------------------------------------------

std::uint64_t PartitionPlan::max_partition_bytes() const {
  std::uint64_t m = 0;
  for (const auto& p : partitions) m = std::max(m, p.bytes);
  return m;
}

std::uint64_t PartitionPlan::min_partition_bytes() const {
  if (partitions.empty()) return 0;
  std::uint64_t m = partitions.front().bytes;
  for (const auto& p : partitions) m = std::min(m, p.bytes);
  return m;
}

namespace {

PartitionPlan pack_lpt(const std::vector<BlobEntry>& sorted, std::size_t bins) {
  PartitionPlan plan;
  plan.partitions.resize(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    plan.partitions[b].partition_id = static_cast<std::uint32_t>(b);
  }
  for (const auto& e : sorted) {
    auto lightest = std::min_element(
        plan.partitions.begin(), plan.partitions.end(),
        [](const Partition& a, const Partition& b) { return a.bytes < b.bytes; });
    lightest->keys.push_back(e.key);
    lightest->bytes += e.size;
  }
  for (auto& p : plan.partitions) std::sort(p.keys.begin(), p.keys.end());
  return plan;
}

}  // namespace

PartitionPlan make_partitions(std::vector<BlobEntry> entries, std::uint64_t target_bytes,
                              std::uint64_t worker_memory_budget,
                              std::uint32_t min_partitions) {
  if (target_bytes == 0 || worker_memory_budget == 0) {
    throw Error(ErrorCode::InvalidValue, "target and worker budget must be positive");
  }
  if (entries.empty()) throw Error(ErrorCode::EmptyInput, "nothing to partition");
  std::uint64_t total = 0;
  for (const auto& e : entries) {
    if (e.size == 0) throw Error(ErrorCode::InvalidValue, "zero-sized entry", e.key);
    if (e.size > worker_memory_budget) {
      throw Error(ErrorCode::OversizedEntry,
                  std::to_string(e.size) + " bytes exceed the worker budget of " +
                      std::to_string(worker_memory_budget),
                  e.key);
    }
    total += e.size;
  }
  std::sort(entries.begin(), entries.end(), [](const BlobEntry& a, const BlobEntry& b) {
    return a.size != b.size ? a.size > b.size : a.key < b.key;
  });
  const std::uint64_t by_size = (total + target_bytes - 1) / target_bytes;
  std::size_t bins = std::min<std::uint64_t>(
      entries.size(), std::max<std::uint64_t>(min_partitions == 0 ? 1 : min_partitions, by_size));
  while (true) {
    auto plan = pack_lpt(entries, bins);
    if (plan.max_partition_bytes() <= worker_memory_budget || bins == entries.size()) return plan;
    ++bins;
  }
}

void validate_plan(const PartitionPlan& plan, const std::vector<BlobEntry>& entries,
                   std::uint64_t worker_memory_budget) {
  std::map<std::string, std::uint64_t> expected;
  for (const auto& e : entries) expected.emplace(e.key, e.size);
  std::set<std::string> seen;
  for (std::size_t i = 0; i < plan.partitions.size(); ++i) {
    const auto& p = plan.partitions[i];
    if (p.partition_id != i) {
      throw Error(ErrorCode::InvalidValue, "partition ids are not dense", std::to_string(i));
    }
    if (p.keys.empty()) throw Error(ErrorCode::InvalidValue, "empty partition", std::to_string(i));
    if (p.bytes > worker_memory_budget) {
      throw Error(ErrorCode::InvalidValue, "partition exceeds worker budget", std::to_string(i));
    }
    std::uint64_t bytes = 0;
    for (const auto& k : p.keys) {
      auto it = expected.find(k);
      if (it == expected.end()) throw Error(ErrorCode::InvalidValue, "unknown key", k);
      if (!seen.insert(k).second) throw Error(ErrorCode::InvalidValue, "key in two partitions", k);
      bytes += it->second;
    }
    if (bytes != p.bytes) {
      throw Error(ErrorCode::InvalidValue, "partition byte count is wrong", std::to_string(i));
    }
  }
  if (seen.size() != expected.size()) {
    throw Error(ErrorCode::InvalidValue, "plan does not cover every key");
  }
}

// --- frames -----------------------------------------------------------------

// FTSK v1: magic · version u16 · partition_id u32 · attempt u32 · round u64 ·
// algo u8 · summation u8 · output_dtype u8 (0xFF = input) · epsilon f64 ·
// key_count u32 · keys (u16 len + bytes) · crc32c.
Bytes encode_task_spec(const TaskSpec& t) {
  ByteWriter w;
  w.put_magic(kTaskSpecMagic);
  w.put<std::uint16_t>(kFrameVersion);
  w.put<std::uint32_t>(t.partition_id);
  w.put<std::uint32_t>(t.attempt);
  w.put<std::uint64_t>(t.round);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.fusion.algo));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.fusion.summation));
  w.put<std::uint8_t>(t.fusion.output_dtype ? static_cast<std::uint8_t>(*t.fusion.output_dtype)
                                            : kNoOutputDtype);
  w.put<double>(t.fusion.epsilon);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.keys.size()));
  for (const auto& k : t.keys) w.put_str16(k);
  w.put_crc();
  return std::move(w).take();
}

namespace {

void check_frame_head(ByteView bytes, std::string_view magic) {
  ByteReader head(bytes);
  head.expect_magic(magic);
  const auto version = head.get<std::uint16_t>("version");
  if (version != kFrameVersion) {
    throw Error(ErrorCode::UnsupportedVersion, "version " + std::to_string(version), "version", 4);
  }
}

}  // namespace

TaskSpec decode_task_spec(ByteView bytes) {
  check_frame_head(bytes, kTaskSpecMagic);
  ByteReader r(checked_body(bytes));
  r.expect_magic(kTaskSpecMagic);
  r.get<std::uint16_t>("version");
  TaskSpec t;
  t.partition_id = r.get<std::uint32_t>("partition_id");
  t.attempt = r.get<std::uint32_t>("attempt");
  t.round = r.get<std::uint64_t>("round");
  const auto at = r.pos();
  const auto algo = r.get<std::uint8_t>("algo");
  const auto summation = r.get<std::uint8_t>("summation");
  const auto dtype = r.get<std::uint8_t>("output_dtype");
  if (algo > 1 || summation > 1 || (dtype > 1 && dtype != kNoOutputDtype)) {
    throw Error(ErrorCode::InvalidValue, "bad fusion config", "fusion", at);
  }
  t.fusion.algo = static_cast<FusionAlgo>(algo);
  t.fusion.summation = static_cast<Summation>(summation);
  if (dtype != kNoOutputDtype) t.fusion.output_dtype = static_cast<Dtype>(dtype);
  t.fusion.epsilon = r.get<double>("epsilon");
  const auto n = r.get<std::uint32_t>("key_count");
  for (std::uint32_t i = 0; i < n; ++i) t.keys.push_back(r.get_str16("key"));
  r.expect_end("keys");
  return t;
}

// FTRS v1: magic · version u16 · partition_id u32 · attempt u32 · read_s f64 ·
// sum_s f64 · status u8 · (ok: partial_len u64 · FPAG bytes |
// error: code u16 · subject str16 · message str16) · crc32c.
Bytes encode_task_result(const TaskResult& res) {
  ByteWriter w(res.partial.size() + 64);
  w.put_magic(kTaskResultMagic);
  w.put<std::uint16_t>(kFrameVersion);
  w.put<std::uint32_t>(res.partition_id);
  w.put<std::uint32_t>(res.attempt);
  w.put<double>(res.read_s);
  w.put<double>(res.sum_s);
  w.put<std::uint8_t>(res.ok() ? 0 : 1);
  if (res.ok()) {
    w.put<std::uint64_t>(res.partial.size());
    w.put_bytes(res.partial);
  } else {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(*res.error));
    w.put_str16(std::string_view(res.error_subject).substr(0, 0xFFFF));
    w.put_str16(std::string_view(res.error_message).substr(0, 0xFFFF));
  }
  w.put_crc();
  return std::move(w).take();
}

TaskResult decode_task_result(ByteView bytes) {
  check_frame_head(bytes, kTaskResultMagic);
  ByteReader r(checked_body(bytes));
  r.expect_magic(kTaskResultMagic);
  r.get<std::uint16_t>("version");
  TaskResult res;
  res.partition_id = r.get<std::uint32_t>("partition_id");
  res.attempt = r.get<std::uint32_t>("attempt");
  res.read_s = r.get<double>("read_s");
  res.sum_s = r.get<double>("sum_s");
  const auto status_at = r.pos();
  const auto status = r.get<std::uint8_t>("status");
  if (status == 0) {
    const auto len = r.get<std::uint64_t>("partial_len");
    if (len > r.remaining()) throw Error(ErrorCode::Truncated, "partial", "partial", r.pos());
    const auto view = r.get_bytes(len, "partial");
    res.partial.assign(view.begin(), view.end());
  } else if (status == 1) {
    const auto code_at = r.pos();
    const auto code = r.get<std::uint16_t>("error_code");
    if (code > static_cast<std::uint16_t>(ErrorCode::MalformedCsv)) {
      throw Error(ErrorCode::InvalidValue, "unknown error code", "error_code", code_at);
    }
    res.error = static_cast<ErrorCode>(code);
    res.error_subject = r.get_str16("error_subject");
    res.error_message = r.get_str16("error_message");
  } else {
    throw Error(ErrorCode::InvalidValue, "unknown status", "status", status_at);
  }
  r.expect_end("result");
  return res;
}

// --- map / reduce -----------------------------------------------------------

TaskResult run_map_task(const TaskSpec& t, const BlobStore& store) {
  if (t.keys.empty()) {
    throw Error(ErrorCode::InvalidValue, "task has no keys", std::to_string(t.partition_id));
  }
  auto keys = t.keys;
  std::sort(keys.begin(), keys.end());

  TaskResult res;
  res.partition_id = t.partition_id;
  res.attempt = t.attempt;
  std::optional<PartialAggregate> partial;
  for (const auto& key : keys) {
    const auto read_start = Clock::now();
    Bytes blob;
    try {
      blob = store.get(StoreKey(key));
    } catch (const Error& e) {
      throw Error(ErrorCode::StoreReadError, e.what(), key);
    }
    auto u = [&] {
      try {
        return decode_update(blob);
      } catch (const Error& e) {
        throw Error(e.code(), e.what(), key, e.offset());
      }
    }();
    blob = Bytes{};
    res.read_s += seconds_since(read_start);

    const auto sum_start = Clock::now();
    if (!partial) partial.emplace(schema_of(u), t.fusion.algo, t.fusion.summation);
    try {
      partial->accumulate(u);
    } catch (const Error& e) {
      throw Error(e.code(), e.what(), key);
    }
    res.sum_s += seconds_since(sum_start);
  }
  res.partial = encode_partial(*partial);
  return res;
}

TaskResult execute_task(const TaskSpec& t, const BlobStore& store) {
  try {
    return run_map_task(t, store);
  } catch (const Error& e) {
    TaskResult res;
    res.partition_id = t.partition_id;
    res.attempt = t.attempt;
    res.error = e.code();
    res.error_subject = e.subject();
    res.error_message = e.what();
    return res;
  } catch (const std::exception& e) {
    TaskResult res;
    res.partition_id = t.partition_id;
    res.attempt = t.attempt;
    res.error = ErrorCode::InvalidValue;
    res.error_message = e.what();
    return res;
  }
}

namespace {

PartialAggregate merge_results(const std::vector<TaskResult>& results,
                               std::uint32_t partition_count) {
  std::vector<const TaskResult*> by_id(partition_count, nullptr);
  for (const auto& r : results) {
    if (r.partition_id >= partition_count) {
      throw Error(ErrorCode::MissingPartition, "result for unplanned partition",
                  std::to_string(r.partition_id));
    }
    if (by_id[r.partition_id]) {
      throw Error(ErrorCode::DuplicatePartition, "two results for one partition",
                  std::to_string(r.partition_id));
    }
    if (!r.ok()) {
      throw Error(*r.error, r.error_message, std::to_string(r.partition_id));
    }
    by_id[r.partition_id] = &r;
  }
  for (std::uint32_t i = 0; i < partition_count; ++i) {
    if (!by_id[i]) throw Error(ErrorCode::MissingPartition, "no result", std::to_string(i));
  }
  if (partition_count == 0) throw Error(ErrorCode::MissingPartition, "no partitions", "0");
  auto total = decode_partial(by_id[0]->partial);
  for (std::uint32_t i = 1; i < partition_count; ++i) {
    const auto p = decode_partial(by_id[i]->partial);
    try {
      total.merge(p);
    } catch (const Error& e) {
      throw Error(ErrorCode::SchemaMismatch, e.what(), std::to_string(i));
    }
  }
  return total;
}

}  // namespace

GlobalModel reduce_results(const std::vector<TaskResult>& results, const FusionConfig& cfg,
                           std::uint32_t partition_count, std::uint64_t round) {
  return finalize(merge_results(results, partition_count), cfg, round);
}

void serve_worker_stream(std::istream& in, std::ostream& out, const BlobStore& store) {
  while (true) {
    std::uint64_t len = 0;
    if (!in.read(reinterpret_cast<char*>(&len), sizeof(len))) return;
    Bytes frame(len);
    if (!in.read(reinterpret_cast<char*>(frame.data()), static_cast<std::streamsize>(len))) {
      throw Error(ErrorCode::Truncated, "task frame cut short", "frame");
    }
    TaskResult res;
    try {
      res = execute_task(decode_task_spec(frame), store);
    } catch (const Error& e) {
      res.error = e.code();
      res.error_subject = e.subject();
      res.error_message = e.what();
    }
    const auto reply = encode_task_result(res);
    const std::uint64_t reply_len = reply.size();
    out.write(reinterpret_cast<const char*>(&reply_len), sizeof(reply_len));
    out.write(reinterpret_cast<const char*>(reply.data()), static_cast<std::streamsize>(reply.size()));
    out.flush();
  }
}

// --- worker pool ------------------------------------------------------------

WorkerPool::WorkerPool(std::uint32_t worker_count, FaultPlan faults)
    : faults_(std::move(faults)) {
  for (std::uint32_t i = 0; i < worker_count; ++i) slots_.push_back(std::make_unique<Slot>());
}

WorkerPool::~WorkerPool() { stop_all(); }

void WorkerPool::stop_all() {
  for (auto& s : slots_) s->inbox.push(Command{Command::Kind::Stop, {}, nullptr, nullptr});
  for (auto& s : slots_) {
    if (s->thread.joinable()) s->thread.join();
  }
}

std::chrono::duration<double> WorkerPool::start() {
  const auto t0 = Clock::now();
  if (slots_.empty()) throw Error(ErrorCode::NoWorkers, "pool configured with 0 workers");
  {
    std::lock_guard lock(mu_);
    if (started_) return std::chrono::duration<double>(0);
    for (std::uint32_t i = 0; i < slots_.size(); ++i) {
      slots_[i]->alive = true;
      slots_[i]->thread = std::thread([this, i] { run(i); });
    }
    started_ = true;
  }
  if (!health_check()) throw Error(ErrorCode::NoWorkers, "workers failed the health check");
  return Clock::now() - t0;
}

bool WorkerPool::started() const {
  std::lock_guard lock(mu_);
  return started_;
}

std::vector<std::uint32_t> WorkerPool::live_workers() const {
  std::lock_guard lock(mu_);
  std::vector<std::uint32_t> out;
  for (std::uint32_t i = 0; i < slots_.size(); ++i) {
    if (slots_[i]->alive) out.push_back(i);
  }
  return out;
}

bool WorkerPool::health_check(std::chrono::milliseconds timeout) {
  const auto live = live_workers();
  if (live.empty()) return false;
  auto reply = std::make_shared<EventQueue>();
  for (auto w : live) slots_[w]->inbox.push(Command{Command::Kind::Ping, {}, nullptr, reply});
  const auto deadline = Clock::now() + timeout;
  std::set<std::uint32_t> answered;
  while (answered.size() < live.size()) {
    const auto left = deadline - Clock::now();
    if (left <= Clock::duration::zero()) return false;
    auto ev = reply->pop_for(left);
    if (!ev) return false;
    if (ev->kind == WorkerEvent::Kind::Pong) answered.insert(ev->worker);
  }
  return true;
}

void WorkerPool::set_faults(FaultPlan faults) {
  std::lock_guard lock(mu_);
  faults_ = std::move(faults);
}

void WorkerPool::dispatch(std::uint32_t worker, Bytes spec_frame, const BlobStore& store,
                          std::shared_ptr<EventQueue> reply) {
  slots_.at(worker)->inbox.push(
      Command{Command::Kind::Task, std::move(spec_frame), &store, std::move(reply)});
}

void WorkerPool::run(std::uint32_t id) {
  auto& slot = *slots_[id];
  while (true) {
    auto cmd = slot.inbox.pop();
    if (cmd.kind == Command::Kind::Stop) return;
    if (cmd.kind == Command::Kind::Ping) {
      cmd.reply->push(WorkerEvent{WorkerEvent::Kind::Pong, id, 0, 0, {}});
      continue;
    }

    TaskSpec spec;
    try {
      spec = decode_task_spec(cmd.frame);
    } catch (const Error& e) {
      TaskResult res;
      res.error = e.code();
      res.error_message = e.what();
      cmd.reply->push(WorkerEvent{WorkerEvent::Kind::Result, id, 0, 0, encode_task_result(res)});
      continue;
    }

    bool die = false;
    bool fail = false;
    std::chrono::milliseconds delay{0};
    {
      std::lock_guard lock(mu_);
      if (auto it = faults_.die_after_tasks.find(id);
          it != faults_.die_after_tasks.end() && slot.tasks_done >= it->second) {
        slot.alive = false;
        die = true;
      }
      fail = faults_.always_fail_partitions.contains(spec.partition_id);
      if (auto it = faults_.delays.find({spec.partition_id, spec.attempt}); it != faults_.delays.end()) {
        delay = it->second;
      }
    }
    if (die) {
      cmd.reply->push(
          WorkerEvent{WorkerEvent::Kind::Lost, id, spec.partition_id, spec.attempt, {}});
      return;
    }
    if (delay.count() > 0) std::this_thread::sleep_for(delay);

    TaskResult res;
    if (fail) {
      res.partition_id = spec.partition_id;
      res.attempt = spec.attempt;
      res.error = ErrorCode::InvalidValue;
      res.error_message = "injected task failure";
    } else {
      res = execute_task(spec, *cmd.store);
    }
    {
      std::lock_guard lock(mu_);
      ++slot.tasks_done;
    }
    cmd.reply->push(WorkerEvent{WorkerEvent::Kind::Result, id, spec.partition_id, spec.attempt,
                                encode_task_result(res)});
  }
}

// --- driver -----------------------------------------------------------------

bool JobState::complete() const {
  return std::all_of(partitions.begin(), partitions.end(), [](const PartitionStatus& s) {
    return s.state == PartitionStatus::State::Done;
  });
}

JobResult run_job(const PartitionPlan& plan, const FusionConfig& cfg, WorkerPool& workers,
                  BlobStore& store, std::uint64_t round, const JobOptions& opts) {
  using State = PartitionStatus::State;
  const auto start = Clock::now();
  cfg.validate();
  if (plan.partitions.empty()) throw Error(ErrorCode::EmptyInput, "plan has no partitions");
  if (opts.max_attempts == 0) throw Error(ErrorCode::InvalidValue, "max_attempts must be >= 1");
  if (!workers.started()) workers.start();
  if (workers.live_count() == 0) throw Error(ErrorCode::NoWorkers, "no live workers");

  const auto count = static_cast<std::uint32_t>(plan.partitions.size());
  JobResult out;
  auto& state = out.state;
  state.job_id = opts.job_id;
  state.round = round;
  state.plan = plan;
  state.partitions.resize(count);
  state.started_at = std::chrono::system_clock::now();

  struct Running {
    std::uint32_t partition_id;
    std::uint32_t attempt;
    Clock::time_point started;
    bool timed_out = false;
  };
  std::map<std::uint32_t, Running> busy;  // worker -> task
  std::deque<std::uint32_t> pending;
  for (std::uint32_t i = 0; i < count; ++i) pending.push_back(i);
  std::vector<std::uint32_t> failures(count, 0);
  std::vector<std::optional<TaskResult>> accepted(count);
  std::uint32_t done = 0;
  std::optional<double> ewma_s;
  auto reply = std::make_shared<EventQueue>();

  auto timeout = [&]() -> std::chrono::duration<double> {
    if (opts.task_timeout) return *opts.task_timeout;
    if (!ewma_s) return opts.min_task_timeout;
    return std::max(opts.min_task_timeout, std::chrono::duration<double>(10.0 * *ewma_s));
  };
  auto running_elsewhere = [&](std::uint32_t pid) {
    return std::any_of(busy.begin(), busy.end(), [&](const auto& kv) {
      return kv.second.partition_id == pid && !kv.second.timed_out;
    });
  };
  auto record_failure = [&](std::uint32_t pid, const std::string& why) {
    if (state.partitions[pid].state == State::Done) return;
    if (++failures[pid] >= opts.max_attempts) {
      state.partitions[pid].state = State::Failed;
      throw Error(ErrorCode::JobFailed,
                  "partition " + std::to_string(pid) + " failed " +
                      std::to_string(failures[pid]) + " attempts; last: " + why,
                  std::to_string(pid));
    }
    if (!running_elsewhere(pid) &&
        std::find(pending.begin(), pending.end(), pid) == pending.end()) {
      state.partitions[pid].state = State::Pending;
      state.partitions[pid].worker.reset();
      pending.push_back(pid);
      ++state.retries;
    }
  };

  const auto map_start = Clock::now();
  while (done < count) {
    const auto live = workers.live_workers();
    for (auto w : live) {
      if (pending.empty()) break;
      if (busy.contains(w)) continue;
      const auto pid = pending.front();
      pending.pop_front();
      auto& st = state.partitions[pid];
      st.state = State::Running;
      st.worker = w;
      ++st.attempts;
      TaskSpec spec{pid, plan.partitions[pid].keys, cfg, st.attempts, round};
      busy[w] = Running{pid, st.attempts, Clock::now()};
      workers.dispatch(w, encode_task_spec(spec), store, reply);
    }
    if (busy.empty() && !pending.empty() && workers.live_count() == 0) {
      throw Error(ErrorCode::NoWorkers, "all workers lost with " + std::to_string(pending.size()) +
                                            " partitions outstanding");
    }

    auto wait = std::chrono::duration<double>(0.2);
    for (const auto& [w, r] : busy) {
      if (r.timed_out) continue;
      wait = std::min(wait, std::chrono::duration<double>(r.started + timeout() - Clock::now()));
    }
    wait = std::max(wait, std::chrono::duration<double>(0.001));

    if (auto ev = reply->pop_for(wait)) {
      if (ev->kind == WorkerEvent::Kind::Lost) {
        // A timed-out attempt was already counted as a failure.
        auto it = busy.find(ev->worker);
        const bool counted = it != busy.end() && it->second.timed_out;
        if (it != busy.end()) busy.erase(it);
        if (!counted) {
          record_failure(ev->partition_id, "worker " + std::to_string(ev->worker) + " lost");
        }
      } else if (ev->kind == WorkerEvent::Kind::Result) {
        auto it = busy.find(ev->worker);
        std::optional<Running> ran;
        if (it != busy.end()) {
          ran = it->second;
          busy.erase(it);
        }
        auto res = decode_task_result(ev->frame);
        const auto pid = res.partition_id;
        if (pid >= count) continue;
        if (!res.ok()) {
          if (!(ran && ran->timed_out)) record_failure(pid, res.error_message);
        } else if (state.partitions[pid].state == State::Done) {
          ++state.duplicate_results;
        } else {
          if (ran) {
            const double took = seconds_since(ran->started);
            ewma_s = ewma_s ? 0.7 * *ewma_s + 0.3 * took : took;
          }
          state.partitions[pid].state = State::Done;
          state.partitions[pid].worker = ev->worker;
          std::erase(pending, pid);
          accepted[pid] = std::move(res);
          ++done;
        }
      }
    }

    const auto now = Clock::now();
    for (auto& [w, r] : busy) {
      if (r.timed_out || now - r.started < timeout()) continue;
      r.timed_out = true;
      record_failure(r.partition_id, "attempt " + std::to_string(r.attempt) + " timed out");
    }
  }
  const double map_wall = seconds_since(map_start);

  double read_total = 0, sum_total = 0;
  std::vector<TaskResult> results;
  results.reserve(count);
  for (auto& r : accepted) {
    read_total += r->read_s;
    sum_total += r->sum_s;
    results.push_back(std::move(*r));
  }
  const double read_frac = read_total + sum_total > 0 ? read_total / (read_total + sum_total) : 0.5;
  out.timings.read_partition_s = map_wall * read_frac;
  out.timings.sum_s = map_wall - out.timings.read_partition_s;

  const auto reduce_start = Clock::now();
  auto total = merge_results(results, count);
  results.clear();
  out.timings.reduce_s = seconds_since(reduce_start);

  const auto finalize_start = Clock::now();
  out.model = finalize(total, cfg, round);
  if (opts.publish) publish_global(store, round, out.model);
  out.timings.finalize_s = seconds_since(finalize_start);
  state.finished_at = std::chrono::system_clock::now();
  out.timings.total_s = seconds_since(start);
  return out;
}

}  // namespace fedagg
