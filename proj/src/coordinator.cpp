#include "fedagg/coordinator.hpp"

#include <algorithm>
#include <iostream>
#include <thread>

#include "fedagg/error.hpp"

namespace fedagg {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Sleeps up to `s` seconds, waking early on stop.
void sleep_for(double s, const std::stop_token& stop) {
  const auto until = Clock::now() + std::chrono::duration<double>(s);
  while (!stop.stop_requested()) {
    const auto left = until - Clock::now();
    if (left <= Clock::duration::zero()) return;
    std::this_thread::sleep_for(std::min<std::chrono::duration<double>>(left, std::chrono::milliseconds(20)));
  }
}

}  // namespace

std::string_view to_string(MonitorOutcome o) {
  switch (o) {
    case MonitorOutcome::Triggered: return "Triggered";
    case MonitorOutcome::TimedOut: return "TimedOut";
    case MonitorOutcome::Cancelled: return "Cancelled";
  }
  return "?";
}

std::string_view to_string(RoundStatus s) {
  switch (s) {
    case RoundStatus::Idle: return "Idle";
    case RoundStatus::Collecting: return "Collecting";
    case RoundStatus::Fusing: return "Fusing";
    case RoundStatus::Published: return "Published";
    case RoundStatus::Failed: return "Failed";
  }
  return "?";
}

MonitorResult monitor(const BlobStore& source, std::uint64_t round, std::uint64_t threshold,
                      double timeout_s, double poll_s, std::stop_token stop) {
  const auto t0 = Clock::now();
  double backoff = poll_s;
  std::optional<Error> last_error;
  std::uint64_t count = 0;
  for (;;) {
    if (stop.stop_requested()) return {MonitorOutcome::Cancelled, count, seconds_since(t0)};
    double wait = poll_s;
    try {
      count = count_updates(source, round);
      last_error.reset();
      backoff = poll_s;
      if (count >= threshold) return {MonitorOutcome::Triggered, count, seconds_since(t0)};
    } catch (const Error& e) {
      if (e.code() != ErrorCode::StoreUnavailable) throw;
      last_error = e;
      wait = backoff;
      backoff = std::min(backoff * 2, std::max(poll_s, timeout_s / 4));
    }
    const double elapsed = seconds_since(t0);
    if (elapsed >= timeout_s) {
      if (last_error) throw *last_error;
      return {MonitorOutcome::TimedOut, count, elapsed};
    }
    // The final poll lands on the timeout itself.
    sleep_for(std::min(wait, timeout_s - elapsed), stop);
  }
}

void RoundConfig::validate(std::uint64_t registered) const {
  if (min_parties == 0) throw Error(ErrorCode::ConfigError, "must be at least 1", "min_parties");
  if (threshold.resolve(registered) < min_parties) {
    throw Error(ErrorCode::ConfigError, "threshold below min_parties", "threshold");
  }
  if (!(poll_interval_s > 0)) throw Error(ErrorCode::ConfigError, "must be positive", "poll_interval_s");
  if (!(timeout_s > poll_interval_s)) {
    throw Error(ErrorCode::ConfigError, "timeout_s must exceed poll_interval_s", "timeout_s");
  }
  fusion.validate();
}

SubmissionMode ModeSelector::observe(WorkloadClass predicted) {
  if (predicted == WorkloadClass::Large) {
    mode_ = SubmissionMode::Store;
    small_streak_ = 0;
  } else if (mode_ == SubmissionMode::Store) {
    if (++small_streak_ >= 2) {
      mode_ = SubmissionMode::Direct;
      small_streak_ = 0;
    }
  }
  return mode_;
}

WorkloadClass predict_class(std::uint64_t registered, const CapacityConfig& capacity,
                            const ModelSchema& schema) {
  if (registered == 0) return WorkloadClass::Small;
  return classify(WorkloadDescriptor(estimate_update_size(schema), registered), capacity);
}

SubmissionMode decide_next_mode(ModeSelector& selector, std::uint64_t registered,
                                const CapacityConfig& capacity, const ModelSchema& schema) {
  return selector.observe(predict_class(registered, capacity, schema));
}

Coordinator::Coordinator(ServiceConfig cfg, BlobStore& store)
    : cfg_(std::move(cfg)),
      store_(store),
      pool_(std::make_unique<WorkerPool>(cfg_.capacity.distributed_available
                                             ? cfg_.capacity.worker_count
                                             : 0)),
      schema_(make_schema(cfg_.model)) {
  cfg_.validate();
  scripted_registered_ = cfg_.registered;
  state_.mode = state_.mode_next =
      decide_next_mode(selector_, registered(), cfg_.capacity, schema_);
}

Coordinator::~Coordinator() = default;

void Coordinator::set_schema(ModelSchema schema) {
  schema.validate();
  std::lock_guard lock(mu_);
  schema_ = std::move(schema);
}

std::uint64_t Coordinator::register_client(const std::string& client_id) {
  if (client_id.empty()) throw Error(ErrorCode::ValidationFailed, "empty client id", "client_id");
  std::lock_guard lock(mu_);
  clients_.insert(client_id);
  return std::max<std::uint64_t>(clients_.size(), scripted_registered_);
}

void Coordinator::set_registered(std::uint64_t n) {
  std::lock_guard lock(mu_);
  scripted_registered_ = n;
}

std::uint64_t Coordinator::registered() const {
  std::lock_guard lock(mu_);
  return std::max<std::uint64_t>(clients_.size(), scripted_registered_);
}

RoundManifest Coordinator::open_round(std::uint64_t round) {
  const auto reg = registered();
  std::lock_guard lock(mu_);
  if (state_.status == RoundStatus::Collecting || state_.status == RoundStatus::Fusing) {
    throw Error(ErrorCode::InvalidValue, "round still in progress", std::to_string(state_.round));
  }
  if (state_.status != RoundStatus::Idle && round <= state_.round) {
    throw Error(ErrorCode::RoundClosed, "round already used", std::to_string(round));
  }
  RoundConfig rc{round, cfg_.threshold, cfg_.timeout_s, cfg_.min_parties, cfg_.fusion,
                 state_.mode_next, cfg_.poll_interval_s};
  const auto threshold = std::max(rc.threshold.resolve(reg), rc.min_parties);
  rc.threshold = Threshold::absolute(threshold);
  rc.validate(reg);

  RoundManifest m;
  m.round = round;
  m.threshold = threshold;
  m.timeout_s = cfg_.timeout_s;
  m.fusion_algo = cfg_.fusion.algo;
  m.epsilon = cfg_.fusion.epsilon;
  m.submission_mode = state_.mode_next;
  m.schema_digest = schema_digest(schema_);
  write_manifest(store_, m);

  state_.round = round;
  state_.received = 0;
  state_.registered = reg;
  state_.threshold = threshold;
  state_.status = RoundStatus::Collecting;
  state_.failure_reason.clear();
  state_.mode = m.submission_mode;
  manifest_ = m;
  return m;
}

GlobalModel Coordinator::fuse_snapshot(BlobStore& source, std::uint64_t round,
                                       const std::vector<BlobEntry>& entries, RoundMetrics& m) {
  std::uint64_t total = 0;
  for (const auto& e : entries) total += e.size;
  const std::uint64_t n = entries.size();
  const WorkloadDescriptor wd((total + n - 1) / n, n);
  m.workload_bytes = wd.total_bytes();
  m.workload = classify(wd, cfg_.capacity);
  const auto p = plan(wd, cfg_.capacity);

  if (const auto* lp = std::get_if<LocalPlan>(&p)) {
    m.engine = "local";
    m.parallelism = lp->chunk_count;
    LocalEngineOptions opts;
    if (cfg_.local_memory_cap_bytes) opts.memory_cap_bytes = *cfg_.local_memory_cap_bytes;
    const auto t0 = Clock::now();
    std::vector<ModelUpdate> updates;
    updates.reserve(entries.size());
    for (const auto& e : entries) updates.push_back(decode_update(source.get(StoreKey(e.key))));
    const double read_s = seconds_since(t0);
    auto res = fuse_local(updates, cfg_.fusion, *lp, opts, round);
    res.timings.read_partition_s += read_s;
    res.timings.total_s += read_s;
    m.timings = res.timings;
    return std::move(res.model);
  }

  const auto& dp = std::get<DistributedPlan>(p);
  m.engine = "distributed";
  pool_->start();
  const auto parts = make_partitions(entries, cfg_.capacity.target_partition_bytes,
                                     cfg_.capacity.worker_memory_budget_bytes,
                                     dp.partition_count);
  m.parallelism = static_cast<std::uint32_t>(parts.partitions.size());
  JobOptions jo;
  jo.publish = false;
  jo.job_id = round;
  if (cfg_.task_timeout_s) jo.task_timeout = std::chrono::duration<double>(*cfg_.task_timeout_s);
  auto res = run_job(parts, cfg_.fusion, *pool_, source, round, jo);
  m.retries = res.state.retries;
  m.timings = res.timings;
  return std::move(res.model);
}

RoundReport Coordinator::run_round(std::stop_token stop) {
  std::uint64_t round, threshold;
  SubmissionMode mode;
  {
    std::lock_guard lock(mu_);
    if (state_.status != RoundStatus::Collecting) {
      throw Error(ErrorCode::InvalidValue, "no round is collecting", std::to_string(state_.round));
    }
    round = state_.round;
    threshold = state_.threshold;
    mode = state_.mode;
  }
  BlobStore& source = mode == SubmissionMode::Direct ? static_cast<BlobStore&>(inbox_) : store_;

  auto fail = [&](const std::string& reason) {
    std::lock_guard lock(mu_);
    state_.status = RoundStatus::Failed;
    state_.failure_reason = reason;
    state_.mode_next = decide_next_mode(selector_, std::max<std::uint64_t>(clients_.size(), scripted_registered_),
                                        cfg_.capacity, schema_);
  };

  const auto mon = monitor(source, round, threshold, cfg_.timeout_s, cfg_.poll_interval_s, stop);
  {
    std::lock_guard lock(mu_);
    state_.received = mon.count;
  }
  if (mon.outcome == MonitorOutcome::Cancelled) {
    fail("cancelled");
    throw Error(ErrorCode::RoundClosed, "coordinator stopping", std::to_string(round));
  }
  if (mon.outcome == MonitorOutcome::TimedOut && mon.count < cfg_.min_parties) {
    snapshot_round(source, round);
    const auto msg = std::to_string(mon.count) + " update(s) at timeout, need " +
                     std::to_string(cfg_.min_parties);
    fail("InsufficientParties: " + msg);
    throw Error(ErrorCode::InsufficientParties, msg, "round " + std::to_string(round));
  }

  const auto entries = snapshot_round(source, round);
  {
    std::lock_guard lock(mu_);
    state_.status = RoundStatus::Fusing;
    state_.received = entries.size();
  }

  RoundReport report;
  auto& m = report.metrics;
  m.round = round;
  m.outcome = mon.outcome;
  m.received = mon.count;
  m.fused = entries.size();
  try {
    report.model = fuse_snapshot(source, round, entries, m);
    const auto t0 = Clock::now();
    publish_global(store_, round, report.model);
    const double publish_s = seconds_since(t0);
    m.timings.finalize_s += publish_s;
    m.timings.total_s += publish_s;
  } catch (const Error& e) {
    fail(std::string(to_string(e.code())) + ": " + e.what());
    throw Error(e.code(), "round " + std::to_string(round) + ": " + e.what(), e.subject());
  }

  auto bytes = encode_global(report.model);
  if (mode == SubmissionMode::Direct) {
    for (const auto& e : entries) inbox_.remove(StoreKey(e.key));
  }
  std::lock_guard lock(mu_);
  published_[round] = std::move(bytes);
  metrics_[round] = m;
  state_.status = RoundStatus::Published;
  state_.mode_next = decide_next_mode(
      selector_, std::max<std::uint64_t>(clients_.size(), scripted_registered_), cfg_.capacity, schema_);
  report.mode_next = state_.mode_next;
  return report;
}

void Coordinator::submit_direct(std::uint64_t round, ByteView bytes) {
  {
    std::lock_guard lock(mu_);
    if (state_.status == RoundStatus::Idle || round > state_.round) {
      throw Error(ErrorCode::NotFound, "round not open", std::to_string(round));
    }
    if (round < state_.round || state_.status != RoundStatus::Collecting) {
      throw Error(ErrorCode::RoundClosed, "round no longer accepts updates", std::to_string(round));
    }
    if (state_.mode == SubmissionMode::Store) {
      throw Error(ErrorCode::WrongMode, "round collects updates through the store",
                  std::to_string(round));
    }
  }
  std::string client_id;
  try {
    client_id = decode_update(bytes).client_id();
  } catch (const Error& e) {
    throw Error(ErrorCode::ValidationFailed, e.what(), "body");
  }
  put_update(inbox_, round, client_id, bytes);
}

std::chrono::duration<double> Coordinator::warmup_distributed() {
  if (!cfg_.capacity.distributed_available) {
    throw Error(ErrorCode::NoWorkers, "distributed backend disabled");
  }
  const auto d = pool_->start();
  if (!pool_->health_check()) throw Error(ErrorCode::NoWorkers, "worker health check failed");
  return d;
}

RoundState Coordinator::state() const {
  std::lock_guard lock(mu_);
  auto s = state_;
  s.registered = std::max<std::uint64_t>(clients_.size(), scripted_registered_);
  return s;
}

std::optional<RoundManifest> Coordinator::manifest() const {
  std::lock_guard lock(mu_);
  return manifest_;
}

SubmissionMode Coordinator::next_mode() const {
  std::lock_guard lock(mu_);
  return state_.mode_next;
}

std::string Coordinator::store_hint() const {
  if (const auto* d = dynamic_cast<const DirStore*>(&store_)) return d->root().string();
  return "memory";
}

std::optional<Bytes> Coordinator::published_model(std::uint64_t round) const {
  {
    std::lock_guard lock(mu_);
    if (auto it = published_.find(round); it != published_.end()) return it->second;
  }
  try {
    return fetch_global_bytes(store_, round);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::NotYetPublished) return std::nullopt;
    throw;
  }
}

std::optional<RoundMetrics> Coordinator::metrics(std::uint64_t round) const {
  std::lock_guard lock(mu_);
  if (auto it = metrics_.find(round); it != metrics_.end()) return it->second;
  return std::nullopt;
}

HealthReport Coordinator::health() {
  HealthReport h;
  h.workers_live = pool_->started() ? pool_->live_count() : 0;
  try {
    store_.list("rounds/");
  } catch (const Error&) {
    h.store_ok = false;
  }
  const bool workers_ok = !pool_->started() || h.workers_live > 0;
  h.ok = h.store_ok && workers_ok;
  return h;
}

void Coordinator::serve(std::stop_token stop, std::uint64_t first_round) {
  for (auto r = first_round; !stop.stop_requested(); ++r) {
    const auto m = open_round(r);
    std::clog << "round " << r << " open: mode " << to_string(m.submission_mode) << ", threshold "
              << m.threshold << "\n";
    try {
      const auto rep = run_round(stop);
      std::clog << "round " << r << " published: " << rep.metrics.fused << " updates via "
                << rep.metrics.engine << " in " << rep.metrics.timings.total_s << " s\n";
    } catch (const Error& e) {
      if (stop.stop_requested()) return;
      std::clog << "round " << r << " failed: " << e.what() << "\n";
    }
  }
}

}  // namespace fedagg
