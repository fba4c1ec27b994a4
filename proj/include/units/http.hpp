#pragma once

#include "units/service.hpp"

#include <memory>
#include <string>
#include <thread>

namespace httplib {
class Server;
}

// JSON over HTTP:
//   POST /datasets                  {samples, labels?, missing?, name?} -> {id}
//   POST /runs/pretrain             {dataset_id, configs: [...]}        -> {run_ids}
//   POST /runs/finetune             FinetuneRequest                     -> {run_id}
//   GET  /runs/{id}
//   GET  /runs/{id}/metrics         ?since=k; text/event-stream when asked
//   GET  /encoders
//   POST /models/{id}/predict       {samples, missing?}
//   GET  /models/{id}/export
//   GET  /models/{id}/evaluation    ?dataset=<id>&labels=<id>
// Errors are {"error": <kind>, "message": ...} with 400/404/409/422/500.
namespace units {

/// Items of a pre-training request: a full config (has "encoder"), or
/// {family, mode?: default|manual|smart, overrides?: {key: value}, budget?}.
std::vector<PretrainTemplateConfig> pretrain_configs_from_json(const Json& items, const TimeSeriesDataset& data);

/// {samples, labels?, missing?} to a dataset.
LoadedDataset dataset_from_json(const Json& body);

class HttpServer {
 public:
  explicit HttpServer(Service& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds (port 0 picks a free one) and serves on a background thread.
  /// Returns the bound port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  /// Binds and serves on the calling thread until stop().
  void serve(const std::string& host, int port);
  void stop();
  int port() const { return port_; }

 private:
  void routes();

  Service& service_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace units
