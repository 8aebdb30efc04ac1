// fedagg: aggregation service, client simulator, benchmarks and offline tools.

#include <CLI11.hpp>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "fedagg/config.hpp"
#include "fedagg/coordinator.hpp"
#include "fedagg/engine_distributed.hpp"
#include "fedagg/error.hpp"
#include "fedagg/http_api.hpp"
#include "fedagg/simbench.hpp"

namespace fs = std::filesystem;
using namespace fedagg;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

Bytes read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorCode::NotFound, "cannot open", p.string());
  return Bytes(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& p, ByteView bytes) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error(ErrorCode::TargetUnavailable, "cannot write", p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }

int cmd_serve(const std::string& config_path, const std::string& listen) {
  ServiceConfig cfg;
  if (!config_path.empty()) {
    cfg = load_config(config_path);
  } else {
    apply_env_overrides(cfg);
    cfg.validate();
  }
  if (!listen.empty()) cfg.listen = listen;
  auto store = open_store(cfg.store_backend, cfg.store_root);
  Coordinator coord(cfg, *store);
  if (cfg.capacity.distributed_available) {
    const auto d = coord.warmup_distributed();
    std::clog << "workers ready in " << d.count() << " s\n";
  }
  HttpApi api(coord);
  const auto [host, port] = parse_listen(cfg.listen);
  const int bound = api.start(host, port);
  std::cout << "listening on " << host << ":" << bound << std::endl;

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::jthread rounds([&](std::stop_token st) { coord.serve(st); });
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  rounds.request_stop();
  rounds.join();
  api.stop();
  return 0;
}

std::unique_ptr<BlobStore> store_for_target(const std::string& target) {
  if (target == "memory") return std::make_unique<MemoryStore>();
  if (target.rfind("dir:", 0) == 0) return std::make_unique<DirStore>(target.substr(4));
  return std::make_unique<DirStore>(target);
}

int cmd_simulate(std::uint64_t parties, const std::string& model, double scale,
                 const std::string& target, std::uint64_t seed, std::uint64_t round,
                 std::uint32_t concurrency, std::uint64_t duplicates) {
  SimConfig sc;
  sc.parties = parties;
  sc.schema = make_schema(parse_model_spec(model, scale));
  sc.seed = seed;
  sc.round = round;
  sc.concurrency = concurrency;
  sc.duplicates = duplicates;

  SimStats st;
  std::uint64_t stored = 0;
  if (target.rfind("http://", 0) == 0) {
    HttpSink sink(target);
    st = simulate_clients(sc, sink);
  } else {
    auto store = store_for_target(target);
    StoreSink sink(*store);
    st = simulate_clients(sc, sink);
    stored = count_updates(*store, round);
  }
  std::cout << "attempted   " << st.attempted << "\n"
            << "committed   " << st.committed << "\n"
            << "failures    " << st.failures.size() << "\n";
  if (target.rfind("http://", 0) != 0) std::cout << "in store    " << stored << "\n";
  std::cout << "avg_write_s " << st.avg_write_s << "\n"
            << "min_write_s " << st.min_write_s << "\n"
            << "max_write_s " << st.max_write_s << "\n"
            << "p50_write_s " << st.p50_write_s << "\n"
            << "p90_write_s " << st.p90_write_s << "\n"
            << "p99_write_s " << st.p99_write_s << "\n"
            << "wall_s      " << st.wall_s << "\n";
  for (const auto& f : st.failures) {
    std::cout << "failed " << f.client_id << " " << to_string(f.code) << "\n";
  }
  return st.committed > 0 || st.attempted == 0 ? 0 : 1;
}

int cmd_fuse(const std::string& algo, const std::string& summation, const fs::path& input,
             const fs::path& output, std::uint64_t round) {
  FusionConfig cfg;
  cfg.algo = parse_fusion_algo(algo);
  cfg.summation = parse_summation(summation);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(input)) {
    if (e.is_regular_file() && e.path().extension() == ".fau") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error(ErrorCode::EmptyInput, "no .fau files", input.string());
  std::vector<ModelUpdate> updates;
  for (const auto& f : files) {
    try {
      updates.push_back(decode_update(read_file(f)));
    } catch (const Error& e) {
      throw Error(e.code(), e.what(), f.string());
    }
  }
  std::sort(updates.begin(), updates.end(),
            [](const ModelUpdate& a, const ModelUpdate& b) { return a.client_id() < b.client_id(); });
  const auto model = fuse_sequential(updates, cfg, round);
  write_file(output, encode_global(model));
  std::cout << "fused " << model.update_count << " updates (count_sum " << model.count_sum
            << ") -> " << output.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedagg: federated model-update aggregation"};
  app.require_subcommand(1);

  std::string config_path, listen;
  auto* serve = app.add_subcommand("serve", "run the coordinator and HTTP API");
  serve->add_option("--config", config_path, "JSON config file");
  serve->add_option("--listen", listen, "host:port (overrides config)");

  std::uint64_t parties = 64, seed = 1, round = 1, duplicates = 0;
  std::string model = "cnn4.6", target = "memory";
  double scale = 0.01;
  std::uint32_t concurrency = 8;
  auto* simulate = app.add_subcommand("simulate", "write synthetic client updates");
  simulate->add_option("--parties", parties);
  simulate->add_option("--model", model, "model name, optionally name@scale:dtype");
  simulate->add_option("--scale", scale);
  simulate->add_option("--target", target, "memory | dir:<path> | <path> | http://host:port");
  simulate->add_option("--seed", seed);
  simulate->add_option("--round", round);
  simulate->add_option("--concurrency", concurrency);
  simulate->add_option("--duplicates", duplicates, "extra submissions reusing client ids");

  std::string models = "cnn4.6", party_list = "10,100,1000", engines = "local,distributed",
              out = "bench.csv", algo = "fedavg", summation = "naive";
  std::uint32_t reps = 3, cores = std::max(1u, std::thread::hardware_concurrency()), workers = 4;
  std::string memory_cap, worker_memory = "1GiB", target_partition = "64MiB";
  auto* bench = app.add_subcommand("bench", "fusion benchmark sweep");
  bench->add_option("--models", models, "comma-separated model names");
  bench->add_option("--scale", scale);
  bench->add_option("--parties", party_list, "comma-separated party counts");
  bench->add_option("--engines", engines, "local, local-seq, distributed");
  bench->add_option("--reps", reps);
  bench->add_option("--out", out);
  bench->add_option("--seed", seed);
  bench->add_option("--cores", cores);
  bench->add_option("--workers", workers);
  bench->add_option("--memory-cap", memory_cap, "local engine cap, e.g. 64MiB");
  bench->add_option("--worker-memory", worker_memory);
  bench->add_option("--target-partition", target_partition);
  bench->add_option("--algo", algo);
  bench->add_option("--summation", summation);

  std::string input, output = "global.fau";
  auto* fuse = app.add_subcommand("fuse", "offline one-shot fusion of a directory of updates");
  fuse->add_option("--algo", algo);
  fuse->add_option("--summation", summation);
  fuse->add_option("--input", input)->required();
  fuse->add_option("--output", output);
  fuse->add_option("--round", round);

  std::string csv_in, plot_dir;
  auto* report = app.add_subcommand("report", "summarize a bench CSV");
  report->add_option("--in", csv_in)->required();
  report->add_option("--plot-dir", plot_dir, "write plot data files here");

  std::string store_root;
  auto* worker = app.add_subcommand("worker", "serve map tasks over stdin/stdout");
  worker->add_option("--store", store_root, "directory store root")->required();

  std::uint64_t clients = 500;
  std::string e2e_out;
  auto* e2e = app.add_subcommand("e2e", "end-to-end Store-mode round with simulated clients");
  e2e->add_option("--clients", clients);
  e2e->add_option("--model", model);
  e2e->add_option("--scale", scale);
  e2e->add_option("--concurrency", concurrency);
  e2e->add_option("--seed", seed);
  e2e->add_option("--store-root", store_root, "directory store (default in-memory)");
  e2e->add_option("--out", e2e_out, "bench CSV for the round");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*serve) return cmd_serve(config_path, listen);
    if (*simulate) {
      return cmd_simulate(parties, model, scale, target, seed, round, concurrency, duplicates);
    }
    if (*bench) {
      BenchMatrix m;
      for (const auto& name : split_list(models)) m.specs.push_back(parse_model_spec(name, scale));
      for (const auto& p : split_list(party_list)) m.parties.push_back(std::stoull(p));
      m.engines = split_list(engines);
      m.reps = reps;
      m.seed = seed;
      m.cores = cores;
      m.workers = workers;
      m.fusion.algo = parse_fusion_algo(algo);
      m.fusion.summation = parse_summation(summation);
      if (!memory_cap.empty()) m.local_memory_cap = parse_size(memory_cap);
      m.worker_memory_budget = parse_size(worker_memory);
      m.target_partition_bytes = parse_size(target_partition);
      const auto rows = bench_fusion(m);
      write_bench_csv(out, rows);
      std::cout << "wrote " << rows.size() << " rows to " << out << "\n";
      return 0;
    }
    if (*fuse) return cmd_fuse(algo, summation, input, output, round);
    if (*report) {
      const auto r = make_report(read_bench_csv(csv_in));
      std::cout << r.text;
      if (!plot_dir.empty()) write_plot_data(r, plot_dir);
      return 0;
    }
    if (*worker) {
      DirStore store(store_root);
      serve_worker_stream(std::cin, std::cout, store);
      return 0;
    }
    if (*e2e) {
      EndToEndConfig c;
      c.clients = clients;
      c.spec = parse_model_spec(model, scale);
      c.concurrency = concurrency;
      c.seed = seed;
      c.store_root = store_root;
      const auto r = run_end_to_end(c);
      std::cout << "mode              " << to_string(r.mode) << "\n"
                << "engine            " << r.metrics.engine << " (" << r.metrics.parallelism
                << ")\n"
                << "fused             " << r.metrics.fused << "\n"
                << "oracle rel diff   " << r.oracle_difference << "\n"
                << "counts match      " << (r.counts_match ? "yes" : "no") << "\n"
                << "avg_write_s       " << r.row.avg_write_s << "\n"
                << "read_partition_s  " << r.row.read_partition_s << "\n"
                << "sum_s             " << r.row.sum_s << "\n"
                << "reduce_s          " << r.row.reduce_s << "\n"
                << "total_s           " << r.row.total_s << "\n";
      if (!e2e_out.empty()) write_bench_csv(e2e_out, {r.row});
      return r.counts_match && r.oracle_difference <= 1e-12 ? 0 : 1;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
