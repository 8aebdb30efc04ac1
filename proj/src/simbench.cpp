#include "fedagg/simbench.hpp"

#include <httplib.h>

#include <algorithm>
#include <atomic>
#include <cinttypes>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "fedagg/error.hpp"

namespace fedagg {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::uint64_t accumulator_bytes(const ModelSchema& schema, Summation s) {
  return schema.elements() * sizeof(double) * (s == Summation::Compensated ? 2 : 1);
}

// Largest of a worker's resident partition plus accumulator and the driver
// holding every partial before the reduce.
std::uint64_t distributed_peak(const ModelSchema& schema, const PartitionPlan& plan, Summation s) {
  const auto acc = accumulator_bytes(schema, s);
  const auto worker = plan.max_partition_bytes() + acc;
  const auto driver = (plan.partitions.size() + 1) * acc;
  return std::max(worker, driver);
}

double percentile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0;
  const auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(sorted.size()))) ;
  return sorted[std::min(sorted.size() - 1, idx == 0 ? 0 : idx - 1)];
}

}  // namespace

void StoreSink::submit(const std::string& client_id, std::uint64_t round, ByteView bytes) {
  put_update(store_, round, client_id, bytes);
}

void CoordinatorSink::submit(const std::string&, std::uint64_t round, ByteView bytes) {
  coord_.submit_direct(round, bytes);
}

HttpSink::HttpSink(std::string base_url) : base_url_(std::move(base_url)) {
  while (!base_url_.empty() && base_url_.back() == '/') base_url_.pop_back();
}

void HttpSink::submit(const std::string& client_id, std::uint64_t round, ByteView bytes) {
  httplib::Client cli(base_url_);
  cli.set_connection_timeout(5);
  cli.set_read_timeout(60);
  const std::string body(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  auto res = cli.Post("/v1/updates/" + std::to_string(round), body, "application/octet-stream");
  if (!res) {
    throw Error(ErrorCode::TargetUnavailable, httplib::to_string(res.error()), base_url_);
  }
  if (res->status == 201) return;
  ErrorCode code = ErrorCode::TargetUnavailable;
  std::string msg = "HTTP " + std::to_string(res->status);
  try {
    const auto j = nlohmann::json::parse(res->body);
    if (auto c = parse_error_code(j.value("error", ""))) code = *c;
    msg += ": " + j.value("message", "");
  } catch (const nlohmann::json::exception&) {
  }
  throw Error(code, msg, client_id);
}

std::string sim_client_id(const SimConfig& cfg, std::uint64_t i) {
  std::ostringstream os;
  os << cfg.id_prefix << std::setw(5) << std::setfill('0') << i;
  return os.str();
}

std::uint64_t sim_sample_count(const SimConfig& cfg, std::uint64_t i) {
  std::mt19937_64 gen(cfg.seed * 0x9E3779B97F4A7C15ull + i);
  return std::uniform_int_distribution<std::uint64_t>(cfg.min_samples, cfg.max_samples)(gen);
}

ModelUpdate sim_update(const SimConfig& cfg, std::uint64_t i) {
  return synth_update(cfg.seed * 1000003ull + i + 1, cfg.schema, sim_client_id(cfg, i), cfg.round,
                      sim_sample_count(cfg, i));
}

SimStats simulate_clients(const SimConfig& cfg, UpdateSink& sink) {
  if (cfg.min_samples == 0 || cfg.min_samples > cfg.max_samples) {
    throw Error(ErrorCode::InvalidValue, "bad sample count range", "samples");
  }
  if (cfg.parties == 0 && cfg.duplicates > 0) {
    throw Error(ErrorCode::InvalidValue, "duplicates need at least one party", "duplicates");
  }
  cfg.schema.validate();
  const std::uint64_t total = cfg.parties + cfg.duplicates;
  std::atomic<std::uint64_t> next{0};
  std::mutex mu;
  std::vector<double> times;
  std::vector<SimFailure> failures;
  std::uint64_t committed = 0;

  auto client = [&] {
    std::vector<double> local_times;
    std::vector<SimFailure> local_failures;
    std::uint64_t local_committed = 0;
    for (auto k = next++; k < total; k = next++) {
      const auto i = k < cfg.parties ? k : (k - cfg.parties) % cfg.parties;
      const auto update = sim_update(cfg, i);
      const auto t0 = Clock::now();
      try {
        const auto bytes = encode_update(update);
        sink.submit(update.client_id(), cfg.round, bytes);
        local_times.push_back(seconds_since(t0));
        ++local_committed;
      } catch (const Error& e) {
        local_failures.push_back({update.client_id(), e.code(), e.what()});
      }
    }
    std::lock_guard lock(mu);
    times.insert(times.end(), local_times.begin(), local_times.end());
    failures.insert(failures.end(), local_failures.begin(), local_failures.end());
    committed += local_committed;
  };

  const auto t0 = Clock::now();
  {
    std::vector<std::jthread> pool;
    const auto threads = std::max<std::uint64_t>(1, std::min<std::uint64_t>(cfg.concurrency, total));
    for (std::uint64_t t = 0; t < threads; ++t) pool.emplace_back(client);
  }
  SimStats st;
  st.wall_s = seconds_since(t0);
  st.attempted = total;
  st.committed = committed;
  std::sort(failures.begin(), failures.end(),
            [](const SimFailure& a, const SimFailure& b) { return a.client_id < b.client_id; });
  st.failures = std::move(failures);
  if (committed == 0 && total > 0 &&
      std::all_of(st.failures.begin(), st.failures.end(),
                  [](const SimFailure& f) { return f.code == ErrorCode::TargetUnavailable; })) {
    throw Error(ErrorCode::TargetUnavailable, st.failures.front().message);
  }
  std::sort(times.begin(), times.end());
  if (!times.empty()) {
    double sum = 0;
    for (double t : times) sum += t;
    st.avg_write_s = sum / static_cast<double>(times.size());
    st.min_write_s = times.front();
    st.max_write_s = times.back();
    st.p50_write_s = percentile(times, 0.50);
    st.p90_write_s = percentile(times, 0.90);
    st.p99_write_s = percentile(times, 0.99);
  }
  return st;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << kBenchHeader << '\n';
  os << std::setprecision(9);
  for (const auto& r : rows) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    os << r.model_size_bytes << ',' << r.parties << ',' << r.engine << ',' << r.read_partition_s
       << ',' << r.sum_s << ',' << r.reduce_s << ',' << r.total_s << ',' << r.peak_mem_bytes << ','
       << r.avg_write_s << ',' << err << '\n';
  }
  return os.str();
}

std::vector<BenchRow> parse_bench_csv(std::string_view text) {
  std::vector<BenchRow> rows;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool header_seen = false;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string line(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto where = std::to_string(line_no);
    if (!header_seen) {
      if (line != kBenchHeader) throw Error(ErrorCode::MalformedCsv, "unexpected header", where);
      header_seen = true;
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 10) {
      throw Error(ErrorCode::MalformedCsv, "expected 10 fields, got " + std::to_string(f.size()),
                  where);
    }
    auto u64 = [&](const std::string& s) {
      std::size_t n = 0;
      try {
        if (!s.empty() && s[0] != '-') {
          const auto v = std::stoull(s, &n);
          if (n == s.size()) return static_cast<std::uint64_t>(v);
        }
      } catch (const std::exception&) {
      }
      throw Error(ErrorCode::MalformedCsv, "not an integer: '" + s + "'", where);
    };
    auto real = [&](const std::string& s) {
      std::size_t n = 0;
      try {
        const double v = std::stod(s, &n);
        if (n == s.size() && v >= 0 && std::isfinite(v)) return v;
      } catch (const std::exception&) {
      }
      throw Error(ErrorCode::MalformedCsv, "not a non-negative number: '" + s + "'", where);
    };
    BenchRow r;
    r.model_size_bytes = u64(f[0]);
    r.parties = u64(f[1]);
    r.engine = f[2];
    if (r.engine.empty()) throw Error(ErrorCode::MalformedCsv, "empty engine", where);
    r.read_partition_s = real(f[3]);
    r.sum_s = real(f[4]);
    r.reduce_s = real(f[5]);
    r.total_s = real(f[6]);
    r.peak_mem_bytes = u64(f[7]);
    r.avg_write_s = real(f[8]);
    r.error = f[9];
    rows.push_back(std::move(r));
  }
  if (!header_seen) throw Error(ErrorCode::MalformedCsv, "missing header", "1");
  return rows;
}

void write_bench_csv(const std::filesystem::path& path, const std::vector<BenchRow>& rows) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::TargetUnavailable, "cannot write", path.string());
  out << bench_csv(rows);
}

std::vector<BenchRow> read_bench_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MalformedCsv, "cannot open " + path.string(), "0");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_bench_csv(ss.str());
}

std::vector<BenchRow> bench_fusion(const BenchMatrix& m) {
  m.fusion.validate();
  for (const auto& e : m.engines) {
    if (e != "local" && e != "local-seq" && e != "distributed") {
      throw Error(ErrorCode::InvalidValue, "unknown engine", e);
    }
  }
  std::vector<BenchRow> rows;
  std::unique_ptr<WorkerPool> pool;
  if (std::find(m.engines.begin(), m.engines.end(), "distributed") != m.engines.end() &&
      !m.specs.empty() && !m.parties.empty()) {
    pool = std::make_unique<WorkerPool>(m.workers);
    pool->start();
  }

  for (const auto& spec : m.specs) {
    const auto schema = make_schema(spec);
    const auto size = estimate_update_size(schema);
    for (const auto parties : m.parties) {
      auto base_row = [&](const std::string& engine) {
        BenchRow r;
        r.model_size_bytes = size;
        r.parties = parties;
        r.engine = engine;
        return r;
      };
      MemoryStore store;
      SimConfig sc;
      sc.parties = parties;
      sc.schema = schema;
      sc.round = 1;
      sc.concurrency = 1;
      sc.seed = m.seed;
      StoreSink sink(store);
      std::optional<GlobalModel> oracle;
      SimStats sim;
      std::string setup_error;
      try {
        if (parties == 0) throw Error(ErrorCode::EmptyInput, "no parties");
        sim = simulate_clients(sc, sink);
        std::vector<ModelUpdate> updates;
        for (const auto& e : list_updates(store, 1)) {
          updates.push_back(decode_update(store.get(StoreKey(e.key))));
        }
        oracle = fuse_sequential(updates, m.fusion, 1);
      } catch (const Error& e) {
        setup_error = std::string(to_string(e.code()));
      }
      const auto entries = list_updates(store, 1);

      for (const auto& engine : m.engines) {
        for (std::uint32_t rep = 0; rep < m.reps; ++rep) {
          auto row = base_row(engine);
          if (!setup_error.empty()) {
            row.error = setup_error;
            rows.push_back(row);
            continue;
          }
          try {
            GlobalModel model;
            PhaseTimings t;
            if (engine == "distributed") {
              const auto plan = make_partitions(entries, m.target_partition_bytes,
                                                m.worker_memory_budget, m.workers);
              JobOptions jo;
              jo.publish = false;
              auto res = run_job(plan, m.fusion, *pool, store, 1, jo);
              model = std::move(res.model);
              t = res.timings;
              row.peak_mem_bytes = distributed_peak(schema, plan, m.fusion.summation);
            } else {
              const LocalPlan lp{engine == "local"
                                     ? std::max<std::uint32_t>(
                                           1, std::min<std::uint64_t>(m.cores, parties))
                                     : 1u};
              const auto need = local_memory_required(schema, parties, lp.chunk_count,
                                                      m.fusion.summation);
              if (need > m.local_memory_cap) {
                throw Error(ErrorCode::MemoryCapExceeded,
                            "needs " + std::to_string(need) + " bytes", "local");
              }
              const auto t0 = Clock::now();
              std::vector<ModelUpdate> updates;
              updates.reserve(entries.size());
              for (const auto& e : entries) {
                updates.push_back(decode_update(store.get(StoreKey(e.key))));
              }
              const double read_s = seconds_since(t0);
              LocalEngineOptions opts;
              opts.memory_cap_bytes = m.local_memory_cap;
              auto res = fuse_local(updates, m.fusion, lp, opts, 1);
              model = std::move(res.model);
              t = res.timings;
              t.read_partition_s += read_s;
              t.total_s += read_s;
              row.peak_mem_bytes = need;
            }
            const double diff = max_relative_difference(model.layers, oracle->layers);
            if (diff > m.tolerance || model.count_sum != oracle->count_sum ||
                model.update_count != oracle->update_count) {
              std::ostringstream os;
              os << "OracleMismatch " << diff;
              row.peak_mem_bytes = 0;
              row.error = os.str();
            } else {
              row.read_partition_s = t.read_partition_s;
              row.sum_s = t.sum_s;
              row.reduce_s = t.reduce_s;
              row.total_s = t.total_s;
              row.avg_write_s = sim.avg_write_s;
            }
          } catch (const Error& e) {
            row = base_row(engine);
            row.error = std::string(to_string(e.code()));
          }
          rows.push_back(row);
        }
      }
    }
  }
  return rows;
}

namespace {

struct CellKey {
  std::uint64_t size;
  std::uint64_t parties;
  std::string engine;
  auto operator<=>(const CellKey&) const = default;
};

struct CellMean {
  double read = 0, sum = 0, reduce = 0, total = 0, write = 0;
  std::uint64_t peak = 0;
  int n = 0;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

}  // namespace

Report make_report(const std::vector<BenchRow>& rows, const ReportOptions& opts) {
  Report rep;
  std::map<CellKey, CellMean> cells;
  std::vector<const BenchRow*> errors;
  std::set<std::string> engines;
  for (const auto& r : rows) {
    engines.insert(r.engine);
    if (!r.error.empty()) {
      errors.push_back(&r);
      continue;
    }
    auto& c = cells[{r.model_size_bytes, r.parties, r.engine}];
    c.read += r.read_partition_s;
    c.sum += r.sum_s;
    c.reduce += r.reduce_s;
    c.total += r.total_s;
    c.write += r.avg_write_s;
    c.peak = std::max(c.peak, r.peak_mem_bytes);
    ++c.n;
  }
  for (auto& [k, c] : cells) {
    c.read /= c.n;
    c.sum /= c.n;
    c.reduce /= c.n;
    c.total /= c.n;
    c.write /= c.n;
    auto& mp = rep.max_parties[k.size][k.engine];
    mp = std::max(mp, k.parties);
  }

  std::ostringstream os;
  std::ostringstream phases;
  phases << "# model_size_bytes parties engine read_partition_s sum_s reduce_s total_s "
            "peak_mem_bytes avg_write_s\n";
  os << "Phase breakdown (mean over repetitions)\n";
  os << std::left << std::setw(14) << "model_bytes" << std::setw(10) << "parties" << std::setw(13)
     << "engine" << std::setw(11) << "read_s" << std::setw(11) << "sum_s" << std::setw(11)
     << "reduce_s" << std::setw(11) << "total_s" << std::setw(14) << "peak_mem" << "avg_write_s\n";
  for (const auto& [k, c] : cells) {
    os << std::setw(14) << k.size << std::setw(10) << k.parties << std::setw(13) << k.engine
       << std::setw(11) << fmt(c.read) << std::setw(11) << fmt(c.sum) << std::setw(11)
       << fmt(c.reduce) << std::setw(11) << fmt(c.total) << std::setw(14) << c.peak
       << fmt(c.write, 6) << "\n";
    phases << k.size << ' ' << k.parties << ' ' << k.engine << ' ' << c.read << ' ' << c.sum << ' '
           << c.reduce << ' ' << c.total << ' ' << c.peak << ' ' << c.write << "\n";
  }
  if (cells.empty()) os << "(no timed rows)\n";

  os << "\nSpeedup against local-seq (wall-clock reduction)\n";
  std::ostringstream speed;
  speed << "# model_size_bytes parties engine total_s baseline_s reduction\n";
  bool any_speed = false;
  for (const auto& [k, c] : cells) {
    if (k.engine == "local-seq") continue;
    auto base = cells.find({k.size, k.parties, "local-seq"});
    if (base == cells.end() || base->second.total <= 0) continue;
    any_speed = true;
    const double red = (base->second.total - c.total) / base->second.total;
    os << std::setw(14) << k.size << std::setw(10) << k.parties << std::setw(13) << k.engine
       << fmt(c.total) << " s vs " << fmt(base->second.total) << " s  " << fmt(100 * red, 1) << "%";
    speed << k.size << ' ' << k.parties << ' ' << k.engine << ' ' << c.total << ' '
          << base->second.total << ' ' << red << "\n";
    if (k.engine == "local" && red < opts.speedup_bar) {
      const auto flag = "local speedup " + fmt(100 * red, 1) + "% below " +
                        fmt(100 * opts.speedup_bar, 0) + "% at " + std::to_string(k.size) +
                        " bytes x " + std::to_string(k.parties) + " parties (soft)";
      rep.flags.push_back(flag);
      os << "  [flag: below " << fmt(100 * opts.speedup_bar, 0) << "%]";
    }
    os << "\n";
  }
  if (!any_speed) os << "(no local-seq baseline)\n";

  os << "\nScalability (largest party count with a timed row)\n";
  std::ostringstream scal;
  scal << "# model_size_bytes engine max_parties\n";
  for (const auto& [size, per] : rep.max_parties) {
    os << std::setw(14) << size;
    for (const auto& [engine, mp] : per) {
      os << engine << '=' << mp << "  ";
      scal << size << ' ' << engine << ' ' << mp << "\n";
    }
    std::uint64_t local_max = 0;
    for (const char* e : {"local", "local-seq"}) {
      if (auto it = per.find(e); it != per.end()) local_max = std::max(local_max, it->second);
    }
    if (auto it = per.find("distributed"); it != per.end() && local_max > 0) {
      const double ratio = static_cast<double>(it->second) / static_cast<double>(local_max);
      os << "distributed/local=" << fmt(ratio, 2) << "x";
      if (ratio < opts.scalability_bar) {
        os << "  [flag: below " << fmt(opts.scalability_bar, 1) << "x]";
        rep.flags.push_back("distributed/local max parties " + fmt(ratio, 2) + "x at " +
                            std::to_string(size) + " bytes");
      }
    }
    os << "\n";
  }
  if (rep.max_parties.empty()) os << "(no timed rows)\n";

  os << "\nErrors\n";
  for (const auto* r : errors) {
    os << std::setw(14) << r->model_size_bytes << std::setw(10) << r->parties << std::setw(13)
       << r->engine << r->error << "\n";
  }
  if (errors.empty()) os << "(none)\n";

  if (!rep.flags.empty()) {
    os << "\nFlags\n";
    for (const auto& f : rep.flags) os << "- " << f << "\n";
  }
  rep.text = os.str();
  rep.plot_data["phases.dat"] = phases.str();
  rep.plot_data["speedup.dat"] = speed.str();
  rep.plot_data["scalability.dat"] = scal.str();
  return rep;
}

void write_plot_data(const Report& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, content] : r.plot_data) {
    std::ofstream out(dir / name);
    if (!out) throw Error(ErrorCode::TargetUnavailable, "cannot write", (dir / name).string());
    out << content;
  }
}

EndToEndResult run_end_to_end(const EndToEndConfig& cfg) {
  if (cfg.clients == 0) throw Error(ErrorCode::InvalidValue, "need at least one client", "clients");
  const auto schema = make_schema(cfg.spec);
  const auto size = estimate_update_size(schema);

  std::unique_ptr<BlobStore> store;
  if (cfg.store_root.empty()) {
    store = std::make_unique<MemoryStore>();
  } else {
    store = std::make_unique<DirStore>(cfg.store_root);
  }

  ServiceConfig sc;
  sc.model = cfg.spec;
  // Half the predicted workload fits: the coordinator must go distributed.
  sc.capacity.node_memory_budget_bytes = size * cfg.clients;
  sc.capacity.safety_factor = 0.5;
  sc.capacity.core_count = 1;
  sc.capacity.worker_count = cfg.workers;
  sc.capacity.worker_memory_budget_bytes = std::max<std::uint64_t>(size * cfg.clients, 64 * kMiB);
  sc.capacity.target_partition_bytes =
      std::max<std::uint64_t>(size, size * cfg.clients / (2ull * cfg.workers));
  sc.threshold = Threshold::absolute(cfg.clients);
  sc.timeout_s = cfg.timeout_s;
  sc.poll_interval_s = 0.02;
  sc.registered = cfg.clients;
  sc.store_backend = cfg.store_root.empty() ? "memory" : "dir";
  sc.store_root = cfg.store_root;

  Coordinator coord(sc, *store);
  coord.set_schema(schema);
  coord.warmup_distributed();
  const auto manifest = coord.open_round(1);

  EndToEndResult out;
  out.mode = manifest.submission_mode;
  std::exception_ptr round_error;
  RoundReport report;
  const auto t0 = Clock::now();
  std::thread runner([&] {
    try {
      report = coord.run_round();
    } catch (...) {
      round_error = std::current_exception();
    }
  });

  SimConfig sim;
  sim.parties = cfg.clients;
  sim.schema = schema;
  sim.round = 1;
  sim.concurrency = cfg.concurrency;
  sim.seed = cfg.seed;
  try {
    if (manifest.submission_mode == SubmissionMode::Store) {
      StoreSink sink(*store);
      out.sim = simulate_clients(sim, sink);
    } else {
      CoordinatorSink sink(coord);
      out.sim = simulate_clients(sim, sink);
    }
  } catch (...) {
    runner.join();
    throw;
  }
  runner.join();
  const double total = seconds_since(t0);
  if (round_error) std::rethrow_exception(round_error);

  std::vector<ModelUpdate> updates;
  for (std::uint64_t i = 0; i < cfg.clients; ++i) updates.push_back(sim_update(sim, i));
  const auto oracle = fuse_sequential(updates, sc.fusion, 1);
  out.model = std::move(report.model);
  out.oracle_difference = max_relative_difference(out.model.layers, oracle.layers);
  out.counts_match = out.model.count_sum == oracle.count_sum &&
                     out.model.update_count == oracle.update_count;
  out.metrics = report.metrics;

  auto& row = out.row;
  row.model_size_bytes = size;
  row.parties = cfg.clients;
  row.engine = report.metrics.engine;
  row.read_partition_s = report.metrics.timings.read_partition_s;
  row.sum_s = report.metrics.timings.sum_s;
  row.reduce_s = report.metrics.timings.reduce_s;
  row.total_s = total;
  const auto parts = std::max<std::uint32_t>(1, report.metrics.parallelism);
  const auto acc = accumulator_bytes(schema, sc.fusion.summation);
  row.peak_mem_bytes = std::max<std::uint64_t>((report.metrics.workload_bytes + parts - 1) / parts + acc,
                                (parts + 1ull) * acc);
  row.avg_write_s = out.sim.avg_write_s;
  return out;
}

}  // namespace fedagg
