#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <random>
#include <sstream>

#include "fedagg/engine_distributed.hpp"
#include "fedagg/error.hpp"

using namespace fedagg;
using namespace std::chrono_literals;

namespace {

const ModelSchema kSchema{{{"conv", Dtype::F32, {4, 3, 3}}, {"dense", Dtype::F32, {300}}}};

// Fills a MemoryStore with n updates for round r and returns their entries.
std::vector<BlobEntry> fill(BlobStore& store, int n, std::uint64_t round = 1, std::uint64_t seed = 1) {
  std::mt19937_64 gen(seed);
  for (int i = 0; i < n; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "u%04d", i);
    const auto u = synth_update(seed * 1000 + i, kSchema, id, round, 1 + gen() % 100);
    put_update(store, round, id, encode_update(u));
  }
  return list_updates(store, round);
}

std::vector<ModelUpdate> load_all(const BlobStore& store, const std::vector<BlobEntry>& entries) {
  std::vector<ModelUpdate> out;
  for (const auto& e : entries) out.push_back(decode_update(store.get(StoreKey(e.key))));
  return out;
}

std::vector<BlobEntry> sized(const std::vector<std::uint64_t>& sizes) {
  std::vector<BlobEntry> out;
  for (std::size_t i = 0; i < sizes.size(); ++i) out.push_back({"k" + std::to_string(i), sizes[i]});
  return out;
}

// Smallest achievable max-bin load over every assignment to `bins` bins.
std::uint64_t optimal_makespan(const std::vector<std::uint64_t>& sizes, std::size_t bins) {
  std::uint64_t best = UINT64_MAX;
  std::vector<std::size_t> assign(sizes.size(), 0);
  while (true) {
    std::vector<std::uint64_t> load(bins, 0);
    for (std::size_t i = 0; i < sizes.size(); ++i) load[assign[i]] += sizes[i];
    best = std::min(best, *std::max_element(load.begin(), load.end()));
    std::size_t i = 0;
    while (i < assign.size() && ++assign[i] == bins) assign[i++] = 0;
    if (i == assign.size()) break;
  }
  return best;
}

PartitionPlan plan_of(const std::vector<BlobEntry>& entries, std::uint32_t parts) {
  return make_partitions(entries, 1ull << 40, UINT64_MAX, parts);
}

JobOptions no_publish() {
  JobOptions o;
  o.publish = false;
  return o;
}

}  // namespace

TEST(Partitioning, EqualSizesSplitEvenly) {
  const auto plan = make_partitions(sized({10, 10, 10, 10}), 20, 1000);
  ASSERT_EQ(plan.partitions.size(), 2u);
  for (const auto& p : plan.partitions) {
    EXPECT_EQ(p.keys.size(), 2u);
    EXPECT_EQ(p.bytes, 20u);
  }
}

TEST(Partitioning, SmallExampleWithinBalance) {
  const std::vector<std::uint64_t> sizes{5, 4, 3, 3, 3};
  const auto plan = make_partitions(sized(sizes), 9, 100);
  ASSERT_EQ(plan.partitions.size(), 2u);
  EXPECT_LE(plan.max_partition_bytes(), 2 * plan.min_partition_bytes());
  EXPECT_LE(3 * plan.max_partition_bytes(), 4 * optimal_makespan(sizes, 2));
  validate_plan(plan, sized(sizes), 100);
}

TEST(Partitioning, LptAgainstExhaustiveOptimum) {
  std::mt19937_64 gen(42);
  for (int trial = 0; trial < 300; ++trial) {
    const auto n = std::uniform_int_distribution<std::size_t>(1, 8)(gen);
    std::vector<std::uint64_t> sizes(n);
    for (auto& s : sizes) s = std::uniform_int_distribution<std::uint64_t>(1, 50)(gen);
    const auto target = std::uniform_int_distribution<std::uint64_t>(10, 120)(gen);
    const auto plan = make_partitions(sized(sizes), target, 1u << 20);
    validate_plan(plan, sized(sizes), 1u << 20);
    const auto k = plan.partitions.size();
    const auto opt = optimal_makespan(sizes, k);
    // Graham: LPT <= (4/3 - 1/(3k)) OPT
    EXPECT_LE(3 * k * plan.max_partition_bytes(), (4 * k - 1) * opt) << "trial " << trial;
  }
}

TEST(Partitioning, BalanceRatioOnRandomInstances) {
  std::mt19937_64 gen(7);
  for (int trial = 0; trial < 500; ++trial) {
    const std::uint64_t target = std::uniform_int_distribution<std::uint64_t>(100, 10000)(gen);
    const auto n = std::uniform_int_distribution<std::size_t>(2, 300)(gen);
    std::vector<std::uint64_t> sizes(n);
    for (auto& s : sizes) s = std::uniform_int_distribution<std::uint64_t>(1, target / 2)(gen);
    const auto entries = sized(sizes);
    const auto plan = make_partitions(entries, target, UINT64_MAX);
    validate_plan(plan, entries, UINT64_MAX);
    EXPECT_LE(plan.max_partition_bytes(), 2 * plan.min_partition_bytes()) << "trial " << trial;
  }
}

TEST(Partitioning, DeterministicAndBinCount) {
  auto entries = sized({7, 3, 9, 1, 4, 4, 8, 2});
  const auto a = make_partitions(entries, 10, 100);
  std::reverse(entries.begin(), entries.end());
  EXPECT_EQ(make_partitions(entries, 10, 100), a);
  EXPECT_EQ(a.partitions.size(), 4u);
  EXPECT_EQ(make_partitions(entries, 10, 100, 6).partitions.size(), 6u);
  EXPECT_EQ(make_partitions(entries, 10, 100, 50).partitions.size(), 8u);
  for (const auto& p : a.partitions) EXPECT_TRUE(std::is_sorted(p.keys.begin(), p.keys.end()));
}

TEST(Partitioning, BudgetGrowsBinCount) {
  const auto entries = sized(std::vector<std::uint64_t>(12, 10));
  const auto plan = make_partitions(entries, 1000, 30);
  validate_plan(plan, entries, 30);
  EXPECT_LE(plan.max_partition_bytes(), 30u);
  EXPECT_EQ(plan.partitions.size(), 4u);
}

TEST(Partitioning, Errors) {
  try {
    make_partitions(sized({5, 200, 5}), 10, 100);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::OversizedEntry);
    EXPECT_EQ(e.subject(), "k1");
  }
  EXPECT_THROW(make_partitions({}, 10, 100), Error);
  EXPECT_THROW(make_partitions(sized({0}), 10, 100), Error);
  const auto entries = sized({1, 2, 3});
  auto plan = make_partitions(entries, 3, 100);
  plan.partitions[0].keys.push_back(plan.partitions[1].keys[0]);
  EXPECT_THROW(validate_plan(plan, entries, 100), Error);
}

TEST(Frames, TaskSpecAndResultRoundtrip) {
  TaskSpec t{3, {"rounds/1/updates/a.fau", "rounds/1/updates/b.fau"}, FusionConfig{}, 2, 9};
  t.fusion.summation = Summation::Compensated;
  t.fusion.epsilon = 0.25;
  EXPECT_EQ(decode_task_spec(encode_task_spec(t)), t);
  TaskResult ok{3, 2, Bytes{1, 2, 3, 4}, 0.5, 0.25, std::nullopt, "", ""};
  EXPECT_EQ(decode_task_result(encode_task_result(ok)), ok);
  TaskResult bad{4, 1, {}, 0, 0, ErrorCode::StoreReadError, "rounds/1/updates/x.fau", "gone"};
  EXPECT_EQ(decode_task_result(encode_task_result(bad)), bad);
  auto frame = encode_task_spec(t);
  frame[frame.size() / 2] ^= 4;
  EXPECT_THROW(decode_task_spec(frame), Error);
  EXPECT_THROW(decode_task_result(encode_task_spec(t)), Error);
}

TEST(MapTask, SingleUpdateEqualsOneAccumulate) {
  MemoryStore store;
  const auto entries = fill(store, 1);
  const auto u = decode_update(store.get(StoreKey(entries[0].key)));
  const FusionConfig cfg;
  const auto r = run_map_task(TaskSpec{0, {entries[0].key}, cfg, 1, 1}, store);
  EXPECT_EQ(decode_partial(r.partial), partial_accumulate(partial_new(kSchema, cfg), u, cfg));
}

TEST(MapTask, FoldInKeyOrderAndIdempotent) {
  MemoryStore store;
  const auto entries = fill(store, 10);
  std::vector<std::string> keys;
  for (const auto& e : entries) keys.push_back(e.key);
  const FusionConfig cfg;
  auto oracle = partial_new(kSchema, cfg);
  for (const auto& u : load_all(store, entries)) oracle.accumulate(u);
  const TaskSpec t{0, keys, cfg, 1, 1};
  const auto a = run_map_task(t, store);
  const auto b = run_map_task(t, store);
  EXPECT_EQ(a.partial, b.partial);
  EXPECT_EQ(decode_partial(a.partial), oracle);
}

TEST(MapTask, ErrorsNameTheKey) {
  MemoryStore store;
  const auto entries = fill(store, 2);
  const FusionConfig cfg;
  try {
    run_map_task(TaskSpec{0, {entries[0].key, "rounds/1/updates/ghost.fau"}, cfg, 1, 1}, store);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::StoreReadError);
    EXPECT_EQ(e.subject(), "rounds/1/updates/ghost.fau");
  }
  auto bytes = store.get(StoreKey(entries[1].key));
  bytes[40] ^= 1;
  store.put_atomic(StoreKey("rounds/1/updates/zz.fau"), bytes);
  const auto r = execute_task(TaskSpec{0, {"rounds/1/updates/zz.fau"}, cfg, 1, 1}, store);
  ASSERT_FALSE(r.ok());
  EXPECT_EQ(*r.error, ErrorCode::ChecksumMismatch);
  EXPECT_EQ(r.error_subject, "rounds/1/updates/zz.fau");

  const ModelSchema other{{{"w", Dtype::F32, {2}}}};
  store.put_atomic(StoreKey("rounds/1/updates/zz-odd.fau"), encode_update(synth_update(1, other, "odd", 1, 1)));
  const auto m = execute_task(TaskSpec{0, {entries[0].key, "rounds/1/updates/zz-odd.fau"}, cfg, 1, 1}, store);
  ASSERT_FALSE(m.ok());
  EXPECT_EQ(*m.error, ErrorCode::SchemaMismatch);
  EXPECT_EQ(m.error_subject, "rounds/1/updates/zz-odd.fau");
}

TEST(Reduce, PartitionCountsAndErrors) {
  MemoryStore store;
  const auto entries = fill(store, 20);
  const FusionConfig cfg;
  const auto updates = load_all(store, entries);
  const auto oracle = fuse_sequential(updates, cfg, 1);

  const auto one = make_partitions(entries, UINT64_MAX / 2, UINT64_MAX, 1);
  const auto one_result = reduce_results({run_map_task(TaskSpec{0, one.partitions[0].keys, cfg, 1, 1}, store)}, cfg, 1, 1);
  EXPECT_EQ(encode_global(one_result), encode_global(oracle));

  const auto plan = make_partitions(entries, 1, UINT64_MAX);
  ASSERT_EQ(plan.partitions.size(), 20u);
  std::vector<TaskResult> rs;
  for (const auto& p : plan.partitions) rs.push_back(run_map_task(TaskSpec{p.partition_id, p.keys, cfg, 1, 1}, store));
  std::vector<TaskResult> shuffled = rs;
  std::shuffle(shuffled.begin(), shuffled.end(), std::mt19937_64(1));
  const auto g = reduce_results(shuffled, cfg, 20, 1);
  EXPECT_EQ(encode_global(g), encode_global(reduce_results(rs, cfg, 20, 1)));
  EXPECT_EQ(g.count_sum, oracle.count_sum);
  EXPECT_EQ(g.update_count, oracle.update_count);
  EXPECT_LE(max_relative_difference(g.layers, oracle.layers), 1e-12);

  auto missing = rs;
  missing.erase(missing.begin() + 5);
  try {
    reduce_results(missing, cfg, 20, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingPartition);
    EXPECT_EQ(e.subject(), "5");
  }
  auto dup = rs;
  dup.push_back(rs[3]);
  try {
    reduce_results(dup, cfg, 20, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DuplicatePartition);
  }
}

TEST(Job, MatchesLocalOracle) {
  MemoryStore store;
  const auto entries = fill(store, 40);
  const auto updates = load_all(store, entries);
  for (auto algo : {FusionAlgo::FedAvg, FusionAlgo::IterAvg}) {
    FusionConfig cfg;
    cfg.algo = algo;
    const auto oracle = fuse_local(updates, cfg, LocalPlan{1}, {}, 1).model;
    for (std::uint32_t workers : {2u, 4u}) {
      WorkerPool pool(workers);
      for (std::uint32_t parts : {1u, 4u, 16u}) {
        const auto plan = plan_of(entries, parts);
        const auto r = run_job(plan, cfg, pool, store, 1, no_publish());
        EXPECT_TRUE(r.state.complete());
        EXPECT_EQ(r.model.count_sum, oracle.count_sum);
        EXPECT_EQ(r.model.update_count, oracle.update_count);
        EXPECT_LE(max_relative_difference(r.model.layers, oracle.layers), 1e-12);
      }
    }
  }
}

TEST(Job, PublishesAndReportsTimings) {
  MemoryStore store;
  const auto entries = fill(store, 12);
  WorkerPool pool(2);
  const auto plan = plan_of(entries, 4);
  const auto r = run_job(plan, FusionConfig{}, pool, store, 1);
  EXPECT_EQ(fetch_global_bytes(store, 1), encode_global(r.model));
  const auto& t = r.timings;
  EXPECT_GT(t.read_partition_s, 0);
  EXPECT_GT(t.sum_s, 0);
  EXPECT_GE(t.reduce_s, 0);
  EXPECT_LE(t.read_partition_s + t.sum_s + t.reduce_s + t.finalize_s, t.total_s + 1e-9);
  EXPECT_EQ(r.state.retries, 0u);
  EXPECT_GE(r.state.finished_at, r.state.started_at);
}

TEST(Job, KilledWorkerGivesIdenticalBytes) {
  MemoryStore store;
  const auto entries = fill(store, 60);
  const auto plan = plan_of(entries, 9);
  const FusionConfig cfg;
  WorkerPool clean(3);
  const auto ref = run_job(plan, cfg, clean, store, 1, no_publish());

  FaultPlan faults;
  faults.die_after_tasks[1] = 1;
  WorkerPool faulty(3, faults);
  const auto r = run_job(plan, cfg, faulty, store, 1, no_publish());
  EXPECT_EQ(encode_global(r.model), encode_global(ref.model));
  EXPECT_EQ(faulty.live_count(), 2u);
  EXPECT_GE(r.state.retries, 1u);
}

TEST(Job, PermanentFailureNamesPartition) {
  MemoryStore store;
  const auto entries = fill(store, 8);
  const auto plan = plan_of(entries, 4);
  FaultPlan faults;
  faults.always_fail_partitions = {2};
  WorkerPool pool(2, faults);
  try {
    run_job(plan, FusionConfig{}, pool, store, 1, no_publish());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::JobFailed);
    EXPECT_EQ(e.subject(), "2");
  }
  EXPECT_FALSE(store.exists(RoundPaths(1).global()));
}

TEST(Job, StragglerIsReassigned) {
  MemoryStore store;
  const auto entries = fill(store, 8);
  const auto plan = plan_of(entries, 4);
  const FusionConfig cfg;
  WorkerPool clean(2);
  const auto ref = run_job(plan, cfg, clean, store, 1, no_publish());

  FaultPlan faults;
  faults.delays[{0, 1}] = 1500ms;
  WorkerPool pool(3, faults);
  JobOptions opts = no_publish();
  opts.task_timeout = 200ms;
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = run_job(plan, cfg, pool, store, 1, opts);
  const double took = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(took, 1.0);
  EXPECT_EQ(encode_global(r.model), encode_global(ref.model));
  EXPECT_GE(r.state.partitions[0].attempts, 2u);
}

TEST(Job, NoWorkers) {
  MemoryStore store;
  const auto entries = fill(store, 4);
  const auto plan = plan_of(entries, 2);
  WorkerPool none(0);
  try {
    run_job(plan, FusionConfig{}, none, store, 1, no_publish());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoWorkers);
  }
  FaultPlan faults;
  faults.die_after_tasks[0] = 0;
  WorkerPool dying(1, faults);
  try {
    run_job(plan, FusionConfig{}, dying, store, 1, no_publish());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoWorkers);
  }
}

TEST(Pool, StartIsIdempotentAndHealthy) {
  WorkerPool pool(4);
  const auto first = pool.start();
  EXPECT_LT(first.count(), 5.0);
  EXPECT_TRUE(pool.started());
  EXPECT_EQ(pool.live_count(), 4u);
  EXPECT_TRUE(pool.health_check());
  const auto again = pool.start();
  EXPECT_LT(again.count(), 0.05);
  WorkerPool empty(0);
  EXPECT_THROW(empty.start(), Error);
}

TEST(WorkerStream, ServesFramesOverAPipe) {
  MemoryStore store;
  const auto entries = fill(store, 6);
  const auto plan = plan_of(entries, 3);
  const FusionConfig cfg;
  std::stringstream in, out;
  auto write_frame = [&](const Bytes& b) {
    const std::uint64_t n = b.size();
    in.write(reinterpret_cast<const char*>(&n), 8);
    in.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  };
  for (const auto& p : plan.partitions) write_frame(encode_task_spec(TaskSpec{p.partition_id, p.keys, cfg, 1, 1}));
  write_frame(encode_task_spec(TaskSpec{9, {"rounds/1/updates/none.fau"}, cfg, 1, 1}));
  serve_worker_stream(in, out, store);

  std::vector<TaskResult> results;
  for (int i = 0; i < 4; ++i) {
    std::uint64_t n = 0;
    ASSERT_TRUE(out.read(reinterpret_cast<char*>(&n), 8));
    Bytes b(n);
    out.read(reinterpret_cast<char*>(b.data()), static_cast<std::streamsize>(n));
    results.push_back(decode_task_result(b));
  }
  EXPECT_FALSE(results.back().ok());
  EXPECT_EQ(*results.back().error, ErrorCode::StoreReadError);
  results.pop_back();
  const auto g = reduce_results(results, cfg, 3, 1);
  WorkerPool pool(2);
  EXPECT_EQ(encode_global(g), encode_global(run_job(plan, cfg, pool, store, 1, no_publish()).model));
}
