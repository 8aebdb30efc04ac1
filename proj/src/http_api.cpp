#include "fedagg/http_api.hpp"

#include <httplib.h>

#include <json.hpp>

#include "fedagg/error.hpp"

namespace fedagg {

using nlohmann::ordered_json;

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::DuplicateUpdate:
    case ErrorCode::WrongMode:
    case ErrorCode::RoundClosed:
    case ErrorCode::AlreadyExists:
      return 409;
    case ErrorCode::NotFound:
    case ErrorCode::NotYetPublished:
      return 404;
    case ErrorCode::ValidationFailed:
    case ErrorCode::BadMagic:
    case ErrorCode::UnsupportedVersion:
    case ErrorCode::ChecksumMismatch:
    case ErrorCode::Truncated:
    case ErrorCode::InvalidValue:
    case ErrorCode::SchemaMismatch:
      return 422;
    case ErrorCode::StoreUnavailable:
    case ErrorCode::NoWorkers:
      return 503;
    default:
      return 500;
  }
}

namespace {

void send_error(httplib::Response& res, int status, std::string_view code, const std::string& msg) {
  ordered_json j;
  j["error"] = std::string(code);
  j["message"] = msg;
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

void send_error(httplib::Response& res, const Error& e) {
  send_error(res, http_status(e.code()), to_string(e.code()), e.what());
}

std::optional<std::uint64_t> round_param(const httplib::Request& req) {
  try {
    std::size_t pos = 0;
    const auto& s = req.matches[1].str();
    const auto r = std::stoull(s, &pos);
    if (pos == s.size()) return r;
  } catch (const std::exception&) {
  }
  return std::nullopt;
}

ordered_json timings_json(const PhaseTimings& t) {
  ordered_json j;
  j["read_partition_s"] = t.read_partition_s;
  j["sum_s"] = t.sum_s;
  j["reduce_s"] = t.reduce_s;
  j["finalize_s"] = t.finalize_s;
  j["total_s"] = t.total_s;
  return j;
}

}  // namespace

std::pair<std::string, int> parse_listen(const std::string& addr) {
  const auto colon = addr.rfind(':');
  std::string host = "127.0.0.1";
  std::string port = addr;
  if (colon != std::string::npos) {
    if (colon > 0) host = addr.substr(0, colon);
    port = addr.substr(colon + 1);
  }
  try {
    std::size_t pos = 0;
    const int p = std::stoi(port, &pos);
    if (pos == port.size() && p >= 0 && p <= 65535) return {host, p};
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::ConfigError, "bad listen address '" + addr + "'", "listen");
}

HttpApi::HttpApi(Coordinator& coordinator)
    : coord_(coordinator), server_(std::make_unique<httplib::Server>()) {
  install_routes();
}

HttpApi::~HttpApi() { stop(); }

void HttpApi::install_routes() {
  auto& srv = *server_;

  srv.Get("/v1/round", [this](const httplib::Request&, httplib::Response& res) {
    const auto st = coord_.state();
    const auto m = coord_.manifest();
    ordered_json j;
    j["round"] = st.round;
    j["submission_mode"] = std::string(to_string(st.mode));
    j["threshold"] = m ? m->threshold : st.threshold;
    j["timeout_s"] = m ? m->timeout_s : coord_.config().timeout_s;
    j["schema_digest"] = m ? m->schema_digest : schema_digest(coord_.schema());
    j["store_hint"] = coord_.store_hint();
    j["status"] = std::string(to_string(st.status));
    j["received"] = st.received;
    j["registered"] = st.registered;
    j["next_submission_mode"] = std::string(to_string(st.mode_next));
    res.set_content(j.dump(), "application/json");
  });

  srv.Get(R"(/v1/model/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const auto r = round_param(req);
    if (!r) return send_error(res, 400, "InvalidValue", "bad round");
    try {
      auto bytes = coord_.published_model(*r);
      if (!bytes) {
        return send_error(res, 404, "NotYetPublished", "round " + std::to_string(*r));
      }
      res.set_content(std::string(bytes->begin(), bytes->end()), "application/octet-stream");
    } catch (const Error& e) {
      send_error(res, e);
    }
  });

  srv.Post(R"(/v1/updates/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const auto r = round_param(req);
    if (!r) return send_error(res, 400, "InvalidValue", "bad round");
    try {
      const auto* p = reinterpret_cast<const std::uint8_t*>(req.body.data());
      coord_.submit_direct(*r, ByteView(p, req.body.size()));
      res.status = 201;
      res.set_content(R"({"status":"committed"})", "application/json");
    } catch (const Error& e) {
      send_error(res, e);
    }
  });

  srv.Post("/v1/register", [this](const httplib::Request& req, httplib::Response& res) {
    std::string id;
    try {
      const auto body = nlohmann::json::parse(req.body);
      id = body.at("client_id").get<std::string>();
    } catch (const std::exception& e) {
      return send_error(res, 422, "ValidationFailed", "expected {\"client_id\": string}");
    }
    try {
      const auto n = coord_.register_client(id);
      const auto st = coord_.state();
      ordered_json j;
      j["registered"] = n;
      j["round"] = st.round;
      j["submission_mode"] = std::string(to_string(st.mode));
      res.set_content(j.dump(), "application/json");
    } catch (const Error& e) {
      send_error(res, e);
    }
  });

  srv.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
    const auto h = coord_.health();
    ordered_json j;
    j["status"] = h.ok ? "ok" : "degraded";
    j["workers_live"] = h.workers_live;
    j["store_ok"] = h.store_ok;
    res.status = h.ok ? 200 : 503;
    res.set_content(j.dump(), "application/json");
  });

  srv.Get(R"(/v1/metrics/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const auto r = round_param(req);
    if (!r) return send_error(res, 400, "InvalidValue", "bad round");
    const auto m = coord_.metrics(*r);
    if (!m) return send_error(res, 404, "NotFound", "no metrics for round " + std::to_string(*r));
    ordered_json j = timings_json(m->timings);
    j["round"] = m->round;
    j["outcome"] = std::string(to_string(m->outcome));
    j["received"] = m->received;
    j["fused"] = m->fused;
    j["workload_bytes"] = m->workload_bytes;
    j["workload"] = std::string(to_string(m->workload));
    j["engine"] = m->engine;
    j["parallelism"] = m->parallelism;
    j["retries"] = m->retries;
    res.set_content(j.dump(), "application/json");
  });
}

int HttpApi::start(const std::string& host, int port) {
  if (thread_.joinable()) return port_;
  if (port == 0) {
    port_ = server_->bind_to_any_port(host);
  } else {
    port_ = server_->bind_to_port(host, port) ? port : -1;
  }
  if (port_ < 0) {
    throw Error(ErrorCode::TargetUnavailable, "cannot bind", host + ":" + std::to_string(port));
  }
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port_;
}

void HttpApi::stop() {
  if (thread_.joinable()) {
    server_->stop();
    thread_.join();
  }
}

}  // namespace fedagg
