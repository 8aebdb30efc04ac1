#pragma once

// HTTP control plane over a Coordinator.
//
//   GET  /v1/round            {round, submission_mode, threshold, timeout_s,
//                              schema_digest, store_hint, status}
//   GET  /v1/model/{round}    FAUF global model, 404 until published
//   POST /v1/updates/{round}  FAUF body; 201, 409 DuplicateUpdate / WrongMode /
//                              RoundClosed, 404 unknown round, 422 ValidationFailed
//   POST /v1/register         {"client_id": "..."} -> {registered, round, submission_mode}
//   GET  /v1/health           {status, workers_live, store_ok}
//   GET  /v1/metrics/{round}  phase timings and counts
//
// Error bodies are {"error": <code>, "message": <text>}.

#include <memory>
#include <string>
#include <thread>

#include "fedagg/coordinator.hpp"

namespace httplib {
class Server;
}

namespace fedagg {

// HTTP status for a coordinator error code.
int http_status(ErrorCode code);

class HttpApi {
 public:
  explicit HttpApi(Coordinator& coordinator);
  ~HttpApi();
  HttpApi(const HttpApi&) = delete;
  HttpApi& operator=(const HttpApi&) = delete;

  // Binds (port 0 picks a free port) and serves on a background thread.
  // Returns the bound port; TargetUnavailable if binding fails.
  int start(const std::string& host, int port);
  void stop();
  int port() const { return port_; }

 private:
  void install_routes();

  Coordinator& coord_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
};

// "127.0.0.1:8080" / ":8080" / "8080" -> (host, port)
std::pair<std::string, int> parse_listen(const std::string& addr);

}  // namespace fedagg
