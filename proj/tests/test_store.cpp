#include <gtest/gtest.h>
#include <unistd.h>

#include <json.hpp>

#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <future>
#include <random>
#include <thread>

#include "fedagg/error.hpp"
#include "fedagg/store.hpp"

using namespace fedagg;
namespace fs = std::filesystem;

namespace {

const ModelSchema kSchema{{{"w", Dtype::F32, {64}}, {"b", Dtype::F32, {4}}}};

Bytes update_bytes(const std::string& id, std::uint64_t round, std::uint64_t seed = 1) {
  return encode_update(synth_update(seed, kSchema, id, round, 5));
}

struct TempDir {
  fs::path path;
  TempDir() {
    static std::atomic<int> n{0};
    path = fs::temp_directory_path() / ("fedagg-store-test-" + std::to_string(::getpid()) + "-" + std::to_string(n++));
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

class StoreTest : public ::testing::TestWithParam<std::string> {
 protected:
  void SetUp() override {
    if (GetParam() == "memory") {
      store_ = std::make_unique<MemoryStore>();
    } else {
      store_ = std::make_unique<DirStore>(dir_.path);
    }
  }
  TempDir dir_;
  std::unique_ptr<BlobStore> store_;
};

// Blocks commits of one key until released.
struct CommitGate {
  std::mutex mu;
  std::condition_variable cv;
  bool reached = false;
  bool open = false;

  CommitHook hook(std::string key) {
    return [this, key](const std::string& k) {
      if (k != key) return;
      std::unique_lock lock(mu);
      reached = true;
      cv.notify_all();
      cv.wait(lock, [this] { return open; });
    };
  }
  void wait_reached() {
    std::unique_lock lock(mu);
    cv.wait(lock, [this] { return reached; });
  }
  void release() {
    std::lock_guard lock(mu);
    open = true;
    cv.notify_all();
  }
};

}  // namespace

TEST_P(StoreTest, PutGetListExists) {
  const StoreKey k("a/b/c.bin");
  EXPECT_FALSE(store_->exists(k));
  store_->put_atomic(k, Bytes{1, 2, 3});
  EXPECT_TRUE(store_->exists(k));
  EXPECT_EQ(store_->get(k), (Bytes{1, 2, 3}));
  EXPECT_EQ(store_->list("a/"), (std::vector<BlobEntry>{{"a/b/c.bin", 3}}));
  EXPECT_TRUE(store_->list("z/").empty());
  try {
    store_->put_atomic(k, Bytes{9});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::AlreadyExists);
  }
  EXPECT_EQ(store_->get(k), (Bytes{1, 2, 3}));
  store_->remove(k);
  EXPECT_FALSE(store_->exists(k));
  EXPECT_THROW(store_->get(k), Error);
  EXPECT_THROW(store_->remove(k), Error);
  store_->put_atomic(StoreKey("empty"), Bytes{});
  EXPECT_TRUE(store_->get(StoreKey("empty")).empty());
}

TEST_P(StoreTest, ListIsSortedAndPrefixScoped) {
  for (const char* k : {"p/3", "p/1", "q/1", "p/2", "pp/1"}) store_->put_atomic(StoreKey(k), Bytes{1});
  const auto l = store_->list("p/");
  ASSERT_EQ(l.size(), 3u);
  EXPECT_EQ(l[0].key, "p/1");
  EXPECT_EQ(l[2].key, "p/3");
}

TEST_P(StoreTest, PutUpdateCountAndDuplicates) {
  EXPECT_EQ(count_updates(*store_, 1), 0u);
  const auto b = update_bytes("alice", 1);
  put_update(*store_, 1, "alice", b);
  const auto l = list_updates(*store_, 1);
  ASSERT_EQ(l.size(), 1u);
  EXPECT_EQ(l[0].key, "rounds/1/updates/alice.fau");
  EXPECT_EQ(l[0].size, b.size());
  try {
    put_update(*store_, 1, "alice", update_bytes("alice", 1, 2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DuplicateUpdate);
  }
  for (int i = 0; i < 4; ++i) put_update(*store_, 1, "c" + std::to_string(i), update_bytes("c" + std::to_string(i), 1));
  EXPECT_EQ(count_updates(*store_, 1), 5u);
  EXPECT_EQ(count_updates(*store_, 2), 0u);
}

TEST_P(StoreTest, PutUpdateValidates) {
  auto expect_invalid = [&](const std::string& id, std::uint64_t round, const Bytes& b) {
    try {
      put_update(*store_, round, id, b);
      FAIL() << id;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::ValidationFailed) << id;
    }
  };
  expect_invalid("bob", 1, update_bytes("alice", 1));
  expect_invalid("alice", 2, update_bytes("alice", 1));
  auto b = update_bytes("alice", 1);
  b[b.size() - 9] ^= 1;
  expect_invalid("alice", 1, b);
  expect_invalid("alice", 1, Bytes{});
  EXPECT_EQ(count_updates(*store_, 1), 0u);
}

TEST_P(StoreTest, SealedRoundRejectsLateUpdates) {
  put_update(*store_, 3, "a", update_bytes("a", 3));
  EXPECT_FALSE(is_sealed(*store_, 3));
  seal_round(*store_, 3);
  EXPECT_TRUE(is_sealed(*store_, 3));
  try {
    put_update(*store_, 3, "b", update_bytes("b", 3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::RoundClosed);
  }
  EXPECT_EQ(count_updates(*store_, 3), 1u);
  put_update(*store_, 4, "b", update_bytes("b", 4));
}

TEST_P(StoreTest, PauseBeforeCommitIsInvisible) {
  CommitGate gate;
  const auto key = RoundPaths(1).update("slow").str();
  store_->set_commit_hook(gate.hook(key));
  put_update(*store_, 1, "fast", update_bytes("fast", 1));
  auto writer = std::async(std::launch::async, [&] { put_update(*store_, 1, "slow", update_bytes("slow", 1)); });
  gate.wait_reached();
  for (int i = 0; i < 50; ++i) {
    EXPECT_EQ(count_updates(*store_, 1), 1u);
    EXPECT_FALSE(store_->exists(StoreKey(key)));
    for (const auto& e : store_->list("")) EXPECT_NE(e.key, key);
    EXPECT_THROW(store_->get(StoreKey(key)), Error);
  }
  gate.release();
  writer.get();
  EXPECT_EQ(count_updates(*store_, 1), 2u);
  store_->set_commit_hook(nullptr);
}

TEST_P(StoreTest, ConcurrentWriters) {
  std::vector<std::jthread> ts;
  std::atomic<int> failures{0};
  for (int i = 0; i < 64; ++i) {
    ts.emplace_back([&, i] {
      const auto id = "writer-" + std::to_string(i);
      try {
        put_update(*store_, 7, id, update_bytes(id, 7, i));
      } catch (...) {
        ++failures;
      }
    });
  }
  ts.clear();
  EXPECT_EQ(failures, 0);
  const auto l = list_updates(*store_, 7);
  ASSERT_EQ(l.size(), 64u);
  for (const auto& e : l) {
    const auto u = decode_update(store_->get(StoreKey(e.key)));
    EXPECT_EQ(u.round(), 7u);
    EXPECT_EQ(encode_update(u).size(), e.size);
  }
}

TEST_P(StoreTest, ConcurrentDuplicateOnlyOneWins) {
  std::atomic<int> ok{0}, dup{0};
  {
    std::vector<std::jthread> ts;
    for (int i = 0; i < 16; ++i) {
      ts.emplace_back([&, i] {
        try {
          put_update(*store_, 1, "same", update_bytes("same", 1, i));
          ++ok;
        } catch (const Error& e) {
          if (e.code() == ErrorCode::DuplicateUpdate) ++dup;
        }
      });
    }
  }
  EXPECT_EQ(ok, 1);
  EXPECT_EQ(dup, 15);
}

TEST_P(StoreTest, PublishFetchWriteOnce) {
  try {
    fetch_global(*store_, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NotYetPublished);
  }
  GlobalModel m;
  m.round = 2;
  m.count_sum = 10;
  m.update_count = 2;
  m.layers = synth_update(1, kSchema, "x", 2, 1).layers();
  publish_global(*store_, 2, m);
  const auto bytes = fetch_global_bytes(*store_, 2);
  EXPECT_EQ(bytes, encode_global(m));
  auto stored = m;
  stored.update_count = 0;
  EXPECT_EQ(fetch_global(*store_, 2), stored);
  try {
    publish_global(*store_, 2, m);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::AlreadyExists);
  }
}

TEST_P(StoreTest, ManifestRoundtrip) {
  EXPECT_FALSE(read_manifest(*store_, 5).has_value());
  RoundManifest m;
  m.round = 5;
  m.threshold = 12;
  m.timeout_s = 30.5;
  m.fusion_algo = FusionAlgo::IterAvg;
  m.epsilon = 1e-6;
  m.submission_mode = SubmissionMode::Store;
  m.schema_digest = schema_digest(kSchema);
  write_manifest(*store_, m);
  EXPECT_EQ(read_manifest(*store_, 5), m);
  const auto j = nlohmann::json::parse(manifest_to_json(m));
  for (const char* k : {"round", "threshold", "timeout_s", "fusion_algo", "epsilon", "submission_mode", "schema_digest"}) {
    EXPECT_TRUE(j.contains(k)) << k;
  }
  EXPECT_EQ(j["submission_mode"], "store");
  EXPECT_EQ(manifest_from_json(manifest_to_json(m)), m);
  EXPECT_THROW(manifest_from_json("{\"round\": 1}"), Error);
  EXPECT_THROW(manifest_from_json("not json"), Error);
}

INSTANTIATE_TEST_SUITE_P(Backends, StoreTest, ::testing::Values("memory", "dir"));

TEST(StoreKeys, Validation) {
  for (const char* bad : {"", "/a", "a//b", "a/", "a/../b", "./a", ".staging/x"}) {
    EXPECT_THROW(StoreKey{bad}, Error) << bad;
  }
  EXPECT_NO_THROW(StoreKey("rounds/1/updates/x.fau"));
}

TEST(StoreKeys, LayoutIsDeterministic) {
  const RoundPaths p(12);
  EXPECT_EQ(p.prefix(), "rounds/12/");
  EXPECT_EQ(p.updates_prefix(), "rounds/12/updates/");
  EXPECT_EQ(p.update("client-00001").str(), "rounds/12/updates/client-00001.fau");
  EXPECT_EQ(p.global().str(), "rounds/12/global.fau");
  EXPECT_EQ(p.manifest().str(), "rounds/12/manifest.json");
  EXPECT_EQ(p.update("a/../b c").str(), "rounds/12/updates/a____b_c.fau");
  EXPECT_EQ(sanitize_client_id("Ab-9_z"), "Ab-9_z");
  EXPECT_EQ(sanitize_client_id("é"), "__");
}

TEST(DirStoreTest, SurvivesRestart) {
  TempDir dir;
  {
    DirStore s(dir.path);
    for (int i = 0; i < 5; ++i) put_update(s, 1, "c" + std::to_string(i), update_bytes("c" + std::to_string(i), 1));
    seal_round(s, 1);
  }
  DirStore again(dir.path);
  EXPECT_EQ(count_updates(again, 1), 5u);
  EXPECT_TRUE(is_sealed(again, 1));
  EXPECT_EQ(decode_update(again.get(RoundPaths(1).update("c3"))).client_id(), "c3");
  // Staging leftovers are never listed.
  std::ofstream(dir.path / ".staging" / "junk") << "x";
  EXPECT_EQ(again.list("").size(), 6u);
}

TEST(DirStoreTest, SingleBitCorruptionDetectedOnRead) {
  TempDir dir;
  DirStore s(dir.path);
  const auto b = update_bytes("victim", 1);
  put_update(s, 1, "victim", b);
  GlobalModel m;
  m.round = 1;
  m.count_sum = 5;
  m.update_count = 1;
  m.layers = synth_update(2, kSchema, "g", 1, 1).layers();
  publish_global(s, 1, m);

  std::mt19937_64 gen(8);
  for (const auto& key : {RoundPaths(1).update("victim"), RoundPaths(1).global()}) {
    const auto path = dir.path / key.str();
    const auto original = s.get(key);
    for (int trial = 0; trial < 40; ++trial) {
      auto flipped = original;
      const auto pos = std::uniform_int_distribution<std::size_t>(0, flipped.size() - 1)(gen);
      flipped[pos] ^= static_cast<std::uint8_t>(1u << (gen() % 8));
      {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(flipped.data()), static_cast<std::streamsize>(flipped.size()));
      }
      if (key.str().ends_with("global.fau")) {
        EXPECT_THROW(fetch_global(s, 1), Error) << pos;
      } else {
        EXPECT_THROW(decode_update(s.get(key)), Error) << pos;
      }
    }
  }
}

TEST(OpenStore, Backends) {
  TempDir dir;
  EXPECT_NE(dynamic_cast<MemoryStore*>(open_store("memory", "").get()), nullptr);
  EXPECT_NE(dynamic_cast<DirStore*>(open_store("dir", dir.path.string()).get()), nullptr);
  EXPECT_THROW(open_store("hdfs", "x"), Error);
  EXPECT_EQ(parse_submission_mode("store"), SubmissionMode::Store);
  EXPECT_EQ(to_string(SubmissionMode::Direct), "direct");
  EXPECT_THROW(parse_submission_mode("carrier-pigeon"), Error);
}
