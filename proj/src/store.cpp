#include "fedagg/store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <set>
#include <thread>
#include <json.hpp>

namespace fedagg {

namespace fs = std::filesystem;

StoreKey::StoreKey(std::string path) : path_(std::move(path)) {
  if (path_.empty()) throw Error(ErrorCode::InvalidValue, "empty store key");
  std::size_t start = 0;
  while (true) {
    const auto end = path_.find('/', start);
    const auto seg = std::string_view(path_).substr(start, end == std::string::npos
                                                               ? std::string::npos
                                                               : end - start);
    if (seg.empty() || seg == "." || seg == "..") {
      throw Error(ErrorCode::InvalidValue, "bad key segment", path_);
    }
    if (seg.find('\0') != std::string_view::npos) {
      throw Error(ErrorCode::InvalidValue, "NUL in key", path_);
    }
    if (end == std::string::npos) break;
    start = end + 1;
  }
  if (path_.front() == '.') throw Error(ErrorCode::InvalidValue, "reserved key", path_);
}

void BlobStore::set_commit_hook(CommitHook hook) {
  std::lock_guard lock(hook_mu_);
  hook_ = std::move(hook);
}

void BlobStore::run_commit_hook(const std::string& key) const {
  CommitHook hook;
  {
    std::lock_guard lock(hook_mu_);
    hook = hook_;
  }
  if (hook) hook(key);
}

// --- MemoryStore ------------------------------------------------------------

void MemoryStore::put_atomic(const StoreKey& key, ByteView bytes) {
  auto staged = std::make_shared<const Bytes>(bytes.begin(), bytes.end());
  run_commit_hook(key.str());
  std::lock_guard lock(mu_);
  if (!blobs_.emplace(key.str(), std::move(staged)).second) {
    throw Error(ErrorCode::AlreadyExists, "blob already committed", key.str());
  }
}

Bytes MemoryStore::get(const StoreKey& key) const {
  std::shared_ptr<const Bytes> blob;
  {
    std::lock_guard lock(mu_);
    auto it = blobs_.find(key.str());
    if (it == blobs_.end()) throw Error(ErrorCode::NotFound, "no such blob", key.str());
    blob = it->second;
  }
  return *blob;
}

std::vector<BlobEntry> MemoryStore::list(std::string_view prefix) const {
  std::lock_guard lock(mu_);
  std::vector<BlobEntry> out;
  for (auto it = blobs_.lower_bound(std::string(prefix));
       it != blobs_.end() && it->first.starts_with(prefix); ++it) {
    out.push_back({it->first, it->second->size()});
  }
  return out;
}

bool MemoryStore::exists(const StoreKey& key) const {
  std::lock_guard lock(mu_);
  return blobs_.contains(key.str());
}

void MemoryStore::remove(const StoreKey& key) {
  std::lock_guard lock(mu_);
  if (blobs_.erase(key.str()) == 0) throw Error(ErrorCode::NotFound, "no such blob", key.str());
}

// --- DirStore ---------------------------------------------------------------

namespace {

constexpr const char* kStagingDir = ".staging";

[[noreturn]] void throw_io(const std::string& what, const std::string& key, int err) {
  throw Error(ErrorCode::StoreUnavailable, what + ": " + std::strerror(err), key);
}

void write_all(int fd, ByteView bytes, const std::string& key) {
  const auto* p = bytes.data();
  std::size_t left = bytes.size();
  while (left > 0) {
    const auto n = ::write(fd, p, left);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw_io("write", key, errno);
    }
    p += n;
    left -= static_cast<std::size_t>(n);
  }
}

void fsync_dir(const fs::path& dir) {
  const int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY);
  if (fd >= 0) {
    ::fsync(fd);
    ::close(fd);
  }
}

}  // namespace

DirStore::DirStore(fs::path root) : root_(std::move(root)) {
  std::error_code ec;
  fs::create_directories(root_ / kStagingDir, ec);
  if (ec) {
    throw Error(ErrorCode::StoreUnavailable, "cannot create store root: " + ec.message(),
                root_.string());
  }
}

fs::path DirStore::path_of(const StoreKey& key) const { return root_ / key.str(); }

void DirStore::put_atomic(const StoreKey& key, ByteView bytes) {
  const auto target = path_of(key);
  std::error_code ec;
  fs::create_directories(target.parent_path(), ec);
  if (ec) throw Error(ErrorCode::StoreUnavailable, ec.message(), key.str());

  auto tmpl = (root_ / kStagingDir / "blob-XXXXXX").string();
  const int fd = ::mkstemp(tmpl.data());
  if (fd < 0) throw_io("mkstemp", key.str(), errno);
  const fs::path staged = tmpl;
  auto cleanup = [&] { ::unlink(staged.c_str()); };
  try {
    write_all(fd, bytes, key.str());
    if (::fsync(fd) != 0) throw_io("fsync", key.str(), errno);
  } catch (...) {
    ::close(fd);
    cleanup();
    throw;
  }
  ::close(fd);

  try {
    run_commit_hook(key.str());
  } catch (...) {
    cleanup();
    throw;
  }
  if (::link(staged.c_str(), target.c_str()) != 0) {
    const int err = errno;
    cleanup();
    if (err == EEXIST) throw Error(ErrorCode::AlreadyExists, "blob already committed", key.str());
    throw_io("link", key.str(), err);
  }
  cleanup();
  fsync_dir(target.parent_path());
}

Bytes DirStore::get(const StoreKey& key) const {
  const auto path = path_of(key);
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    if (!fs::exists(path)) throw Error(ErrorCode::NotFound, "no such blob", key.str());
    throw Error(ErrorCode::StoreUnavailable, "cannot open blob", key.str());
  }
  Bytes out;
  in.seekg(0, std::ios::end);
  out.resize(static_cast<std::size_t>(in.tellg()));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!in) throw Error(ErrorCode::StoreUnavailable, "short read", key.str());
  return out;
}

std::vector<BlobEntry> DirStore::list(std::string_view prefix) const {
  const auto slash = prefix.rfind('/');
  const fs::path base =
      slash == std::string_view::npos ? root_ : root_ / std::string(prefix.substr(0, slash));
  std::vector<BlobEntry> out;
  std::error_code ec;
  if (!fs::is_directory(base, ec)) return out;
  for (fs::recursive_directory_iterator it(base, ec), end; it != end; it.increment(ec)) {
    if (ec) throw Error(ErrorCode::StoreUnavailable, ec.message(), std::string(prefix));
    if (it->is_directory() && it->path().filename() == kStagingDir) {
      it.disable_recursion_pending();
      continue;
    }
    if (!it->is_regular_file()) continue;
    auto key = fs::relative(it->path(), root_).generic_string();
    if (key.starts_with(prefix)) out.push_back({std::move(key), it->file_size()});
  }
  if (ec) throw Error(ErrorCode::StoreUnavailable, ec.message(), std::string(prefix));
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.key < b.key; });
  return out;
}

bool DirStore::exists(const StoreKey& key) const {
  std::error_code ec;
  return fs::is_regular_file(path_of(key), ec);
}

void DirStore::remove(const StoreKey& key) {
  std::error_code ec;
  if (!fs::remove(path_of(key), ec)) {
    if (ec) throw Error(ErrorCode::StoreUnavailable, ec.message(), key.str());
    throw Error(ErrorCode::NotFound, "no such blob", key.str());
  }
}

std::unique_ptr<BlobStore> open_store(std::string_view backend, const std::string& root) {
  if (backend == "memory") return std::make_unique<MemoryStore>();
  if (backend == "dir" || backend == "local") return std::make_unique<DirStore>(root);
  throw Error(ErrorCode::ConfigError, "unknown store backend", std::string(backend));
}

// --- round layout -----------------------------------------------------------

std::string sanitize_client_id(std::string_view client_id) {
  std::string out(client_id);
  for (auto& c : out) {
    const bool ok = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') ||
                    (c >= '0' && c <= '9') || c == '_' || c == '-';
    if (!ok) c = '_';
  }
  return out;
}

std::string RoundPaths::prefix() const { return "rounds/" + std::to_string(round) + "/"; }
std::string RoundPaths::updates_prefix() const { return prefix() + "updates/"; }
StoreKey RoundPaths::update(std::string_view client_id) const {
  if (client_id.empty()) throw Error(ErrorCode::InvalidValue, "empty client id");
  return StoreKey(updates_prefix() + sanitize_client_id(client_id) + ".fau");
}
StoreKey RoundPaths::global() const { return StoreKey(prefix() + "global.fau"); }
StoreKey RoundPaths::manifest() const { return StoreKey(prefix() + "manifest.json"); }
StoreKey RoundPaths::sealed() const { return StoreKey(prefix() + "sealed"); }
StoreKey RoundPaths::snapshot() const { return StoreKey(prefix() + "snapshot"); }

namespace {

// Waits for the round's snapshot and reports whether `key` made it in.
bool in_snapshot(const BlobStore& store, std::uint64_t round, const std::string& key) {
  const auto snap = RoundPaths(round).snapshot();
  const auto deadline = std::chrono::steady_clock::now() + kSnapshotWait;
  while (!store.exists(snap)) {
    if (std::chrono::steady_clock::now() >= deadline) return false;
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }
  const auto bytes = store.get(snap);
  std::string_view text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  while (!text.empty()) {
    const auto nl = text.find('\n');
    if (text.substr(0, nl) == key) return true;
    if (nl == std::string_view::npos) break;
    text.remove_prefix(nl + 1);
  }
  return false;
}

}  // namespace

void put_update(BlobStore& store, std::uint64_t round, std::string_view client_id,
                ByteView bytes) {
  const RoundPaths paths(round);
  const auto key = paths.update(client_id);
  try {
    const auto u = decode_update(bytes);
    if (u.client_id() != client_id) {
      throw Error(ErrorCode::ValidationFailed, "client id in record is " + u.client_id());
    }
    if (u.round() != round) {
      throw Error(ErrorCode::ValidationFailed, "record is for round " + std::to_string(u.round()));
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ValidationFailed) {
      throw Error(ErrorCode::ValidationFailed, e.what(), key.str());
    }
    throw Error(ErrorCode::ValidationFailed, e.what(), key.str(), e.offset());
  }
  if (is_sealed(store, round)) {
    throw Error(ErrorCode::RoundClosed, "round " + std::to_string(round) + " is closed",
                key.str());
  }
  try {
    store.put_atomic(key, bytes);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::AlreadyExists) {
      throw Error(ErrorCode::DuplicateUpdate,
                  "client already submitted for round " + std::to_string(round), key.str());
    }
    throw;
  }
  // Sealed while we were committing: keep the blob only if the snapshot has it.
  if (is_sealed(store, round) && !in_snapshot(store, round, key.str())) {
    try {
      store.remove(key);
    } catch (const Error&) {
    }
    throw Error(ErrorCode::RoundClosed, "round " + std::to_string(round) + " closed during commit",
                key.str());
  }
}

std::vector<BlobEntry> list_updates(const BlobStore& store, std::uint64_t round) {
  auto entries = store.list(RoundPaths(round).updates_prefix());
  std::erase_if(entries, [](const BlobEntry& e) { return !e.key.ends_with(".fau"); });
  return entries;
}

std::uint64_t count_updates(const BlobStore& store, std::uint64_t round) {
  return list_updates(store, round).size();
}

void seal_round(BlobStore& store, std::uint64_t round) {
  static const std::uint8_t kMark[] = {'1'};
  try {
    store.put_atomic(RoundPaths(round).sealed(), kMark);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::AlreadyExists) throw;
  }
}

std::vector<BlobEntry> snapshot_round(BlobStore& store, std::uint64_t round) {
  seal_round(store, round);
  const auto snap = RoundPaths(round).snapshot();
  if (!store.exists(snap)) {
    std::string text;
    for (const auto& e : list_updates(store, round)) text += e.key + "\n";
    try {
      store.put_atomic(snap, ByteView(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::AlreadyExists) throw;
    }
  }
  const auto bytes = store.get(snap);
  std::set<std::string> keys;
  std::string_view text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  while (!text.empty()) {
    const auto nl = text.find('\n');
    keys.emplace(text.substr(0, nl));
    if (nl == std::string_view::npos) break;
    text.remove_prefix(nl + 1);
  }
  auto entries = list_updates(store, round);
  std::erase_if(entries, [&](const BlobEntry& e) { return !keys.contains(e.key); });
  return entries;
}

bool is_sealed(const BlobStore& store, std::uint64_t round) {
  return store.exists(RoundPaths(round).sealed());
}

void publish_global(BlobStore& store, std::uint64_t round, const GlobalModel& model) {
  if (model.round != round) {
    throw Error(ErrorCode::ValidationFailed, "model is for round " + std::to_string(model.round));
  }
  store.put_atomic(RoundPaths(round).global(), encode_global(model));
}

Bytes fetch_global_bytes(const BlobStore& store, std::uint64_t round) {
  try {
    return store.get(RoundPaths(round).global());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::NotFound) {
      throw Error(ErrorCode::NotYetPublished, "round " + std::to_string(round));
    }
    throw;
  }
}

GlobalModel fetch_global(const BlobStore& store, std::uint64_t round) {
  return decode_global(fetch_global_bytes(store, round));
}

std::string_view to_string(SubmissionMode m) {
  return m == SubmissionMode::Direct ? "direct" : "store";
}

SubmissionMode parse_submission_mode(std::string_view s) {
  if (s == "direct" || s == "Direct") return SubmissionMode::Direct;
  if (s == "store" || s == "Store") return SubmissionMode::Store;
  throw Error(ErrorCode::InvalidValue, "unknown submission mode", std::string(s));
}

std::string manifest_to_json(const RoundManifest& m) {
  nlohmann::ordered_json j;
  j["round"] = m.round;
  j["threshold"] = m.threshold;
  j["timeout_s"] = m.timeout_s;
  j["fusion_algo"] = to_string(m.fusion_algo);
  j["epsilon"] = m.epsilon;
  j["submission_mode"] = to_string(m.submission_mode);
  j["schema_digest"] = m.schema_digest;
  return j.dump();
}

RoundManifest manifest_from_json(std::string_view json) {
  try {
    const auto j = nlohmann::json::parse(json);
    RoundManifest m;
    m.round = j.at("round").get<std::uint64_t>();
    m.threshold = j.at("threshold").get<std::uint64_t>();
    m.timeout_s = j.at("timeout_s").get<double>();
    m.fusion_algo = parse_fusion_algo(j.at("fusion_algo").get<std::string>());
    m.epsilon = j.at("epsilon").get<double>();
    m.submission_mode = parse_submission_mode(j.at("submission_mode").get<std::string>());
    m.schema_digest = j.at("schema_digest").get<std::string>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ValidationFailed, e.what(), "manifest.json");
  }
}

void write_manifest(BlobStore& store, const RoundManifest& m) {
  const auto text = manifest_to_json(m);
  store.put_atomic(RoundPaths(m.round).manifest(),
                   ByteView(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::optional<RoundManifest> read_manifest(const BlobStore& store, std::uint64_t round) {
  const auto key = RoundPaths(round).manifest();
  if (!store.exists(key)) return std::nullopt;
  const auto bytes = store.get(key);
  return manifest_from_json(
      std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

}  // namespace fedagg
