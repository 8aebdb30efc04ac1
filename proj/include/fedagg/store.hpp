#pragma once

// Shared blob store with atomic, write-once commits, plus the round layout
// that clients write into and engines read from:
//
//   rounds/<r>/updates/<client_id>.fau   one committed update per client
//   rounds/<r>/global.fau                fused model (write-once)
//   rounds/<r>/manifest.json             round parameters
//   rounds/<r>/sealed                    present once the round stops accepting updates
//   rounds/<r>/snapshot                  newline-separated update keys the round fuses

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "fedagg/fusion.hpp"

namespace fedagg {

// Slash-separated key; no empty segments, no "." / "..", no leading slash.
class StoreKey {
 public:
  explicit StoreKey(std::string path);
  const std::string& str() const { return path_; }
  friend auto operator<=>(const StoreKey&, const StoreKey&) = default;

 private:
  std::string path_;
};

struct BlobEntry {
  std::string key;
  std::uint64_t size = 0;
  friend bool operator==(const BlobEntry&, const BlobEntry&) = default;
};

// Called after the blob bytes are staged and before they become visible.
using CommitHook = std::function<void(const std::string& key)>;

class BlobStore {
 public:
  virtual ~BlobStore() = default;

  // All-or-nothing; AlreadyExists if the key is already committed.
  virtual void put_atomic(const StoreKey& key, ByteView bytes) = 0;
  // NotFound if absent.
  virtual Bytes get(const StoreKey& key) const = 0;
  // Committed blobs whose key starts with `prefix`, sorted by key.
  virtual std::vector<BlobEntry> list(std::string_view prefix) const = 0;
  virtual bool exists(const StoreKey& key) const = 0;
  virtual void remove(const StoreKey& key) = 0;

  void set_commit_hook(CommitHook hook);

 protected:
  void run_commit_hook(const std::string& key) const;

 private:
  mutable std::mutex hook_mu_;
  CommitHook hook_;
};

// Volatile; contents vanish with the object.
class MemoryStore final : public BlobStore {
 public:
  void put_atomic(const StoreKey& key, ByteView bytes) override;
  Bytes get(const StoreKey& key) const override;
  std::vector<BlobEntry> list(std::string_view prefix) const override;
  bool exists(const StoreKey& key) const override;
  void remove(const StoreKey& key) override;

 private:
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<const Bytes>> blobs_;
};

// Blobs are files under `root`. Writes go to root/.staging/ and are
// published with link(2), which fails if the target exists, so commits are
// atomic and write-once. Survives process restarts.
class DirStore final : public BlobStore {
 public:
  explicit DirStore(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }

  void put_atomic(const StoreKey& key, ByteView bytes) override;
  Bytes get(const StoreKey& key) const override;
  std::vector<BlobEntry> list(std::string_view prefix) const override;
  bool exists(const StoreKey& key) const override;
  void remove(const StoreKey& key) override;

 private:
  std::filesystem::path path_of(const StoreKey& key) const;

  std::filesystem::path root_;
};

std::unique_ptr<BlobStore> open_store(std::string_view backend, const std::string& root);

// Replaces any byte outside [A-Za-z0-9_-] with '_'.
std::string sanitize_client_id(std::string_view client_id);

struct RoundPaths {
  std::uint64_t round;

  explicit RoundPaths(std::uint64_t r) : round(r) {}
  std::string prefix() const;
  std::string updates_prefix() const;
  StoreKey update(std::string_view client_id) const;
  StoreKey global() const;
  StoreKey manifest() const;
  StoreKey sealed() const;
  StoreKey snapshot() const;
};

// How long a writer that finds the round sealed right after its commit waits
// for the snapshot before withdrawing the blob.
inline constexpr std::chrono::seconds kSnapshotWait{30};

// Validates the FAUF bytes (decodes, matching client id and round) and
// commits them. DuplicateUpdate on a second submission, RoundClosed once the
// round is sealed, ValidationFailed on bad bytes. A commit that races the
// seal is kept only if the snapshot lists it; otherwise it is removed and
// RoundClosed is thrown, so every accepted update is fused.
void put_update(BlobStore& store, std::uint64_t round, std::string_view client_id,
                ByteView bytes);

// Committed update blobs for the round (M_r).
std::uint64_t count_updates(const BlobStore& store, std::uint64_t round);
std::vector<BlobEntry> list_updates(const BlobStore& store, std::uint64_t round);

void seal_round(BlobStore& store, std::uint64_t round);
// Seals the round, then records and returns the committed update set. Later
// calls return the recorded set.
std::vector<BlobEntry> snapshot_round(BlobStore& store, std::uint64_t round);
bool is_sealed(const BlobStore& store, std::uint64_t round);

// Write-once publish (AlreadyExists on a second call); fetch throws
// NotYetPublished until then.
void publish_global(BlobStore& store, std::uint64_t round, const GlobalModel& model);
Bytes fetch_global_bytes(const BlobStore& store, std::uint64_t round);
GlobalModel fetch_global(const BlobStore& store, std::uint64_t round);

enum class SubmissionMode { Direct, Store };
std::string_view to_string(SubmissionMode m);
SubmissionMode parse_submission_mode(std::string_view s);

struct RoundManifest {
  std::uint64_t round = 0;
  std::uint64_t threshold = 0;
  double timeout_s = 0;
  FusionAlgo fusion_algo = FusionAlgo::FedAvg;
  double epsilon = 1e-6;
  SubmissionMode submission_mode = SubmissionMode::Direct;
  std::string schema_digest;

  friend bool operator==(const RoundManifest&, const RoundManifest&) = default;
};

std::string manifest_to_json(const RoundManifest& m);
RoundManifest manifest_from_json(std::string_view json);
void write_manifest(BlobStore& store, const RoundManifest& m);
std::optional<RoundManifest> read_manifest(const BlobStore& store, std::uint64_t round);

}  // namespace fedagg
