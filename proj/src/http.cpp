#include "units/http.hpp"

#include "units/tuning.hpp"

#include <httplib.h>

#include <chrono>

namespace units {

namespace {

void send_json(httplib::Response& res, const Json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& kind, const std::string& message) {
  send_json(res, {{"error", kind}, {"message", message}}, status);
}

// Maps library errors onto status codes.
template <typename F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const NotFoundError& e) {
      send_error(res, 404, "not_found", e.what());
    } catch (const StateError& e) {
      send_error(res, 409, "state", e.what());
    } catch (const VersionError& e) {
      send_error(res, 422, "version", e.what());
    } catch (const FormatError& e) {
      send_error(res, 400, "format", e.what());
    } catch (const ShapeError& e) {
      send_error(res, 400, "shape", e.what());
    } catch (const ParameterError& e) {
      send_error(res, 400, "parameter", e.what());
    } catch (const nlohmann::json::exception& e) {
      send_error(res, 400, "format", e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal", e.what());
    }
  };
}

Json parse_body(const httplib::Request& req) {
  try {
    return Json::parse(req.body);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("request body is not JSON: ") + e.what());
  }
}

Json metric_point_json(const MetricPoint& p) {
  Json j{{"step", p.step}, {"epoch", p.epoch}, {"wall_seconds", p.wall_seconds}};
  j["loss"] = std::isfinite(p.loss) ? Json(p.loss) : Json(nullptr);
  return j;
}

std::size_t since_param(const httplib::Request& req) {
  if (!req.has_param("since")) return 0;
  try {
    const long v = std::stol(req.get_param_value("since"));
    if (v < 0) throw ParameterError("since must be >= 0");
    return static_cast<std::size_t>(v);
  } catch (const std::logic_error&) {
    throw ParameterError("since must be an integer");
  }
}

// The dataset a model was fine-tuned on, found through its run record.
std::optional<Json> training_request_of(const Registry& registry, const std::string& model_id) {
  for (const auto& run : registry.runs()) {
    const auto ids = run->model_ids();
    if (std::find(ids.begin(), ids.end(), model_id) != ids.end()) return run->config();
  }
  return std::nullopt;
}

}  // namespace

LoadedDataset dataset_from_json(const Json& body) {
  LoadedDataset ds;
  if (!body.is_object() || !body.contains("samples")) throw FormatError("dataset body needs 'samples'");
  ds.data = samples_from_json(body.at("samples"));
  if (ds.data.empty()) throw ParameterError("dataset is empty");
  if (body.contains("labels") && !body.at("labels").is_null()) ds.labels = labels_from_json(body.at("labels"));
  ds.missing.positions.resize(static_cast<std::size_t>(ds.data.size()));
  if (body.contains("missing") && !body.at("missing").is_null()) {
    const Json& m = body.at("missing");
    ds.missing.positions.clear();
    for (const Json& sample : m) {
      std::vector<std::pair<int, int>> cells;
      for (const Json& cell : sample) cells.emplace_back(cell.at(0).get<int>(), cell.at(1).get<int>());
      ds.missing.positions.push_back(std::move(cells));
    }
    ds.missing.validate(ds.data.size(), ds.data.channels(), ds.data.length());
  }
  return ds;
}

std::vector<PretrainTemplateConfig> pretrain_configs_from_json(const Json& items, const TimeSeriesDataset& data) {
  if (!items.is_array()) throw FormatError("'configs' must be an array");
  std::vector<PretrainTemplateConfig> out;
  for (const Json& item : items) {
    if (item.contains("encoder")) {
      out.push_back(template_config_from_json(item));
      continue;
    }
    const TemplateFamily family = parse_template_family(item.at("family").get<std::string>());
    const TuningMode mode = parse_tuning_mode(item.value("mode", std::string("default")));
    std::map<std::string, std::string> overrides;
    if (item.contains("overrides"))
      for (auto it = item.at("overrides").begin(); it != item.at("overrides").end(); ++it)
        overrides[it.key()] = it.value().is_string() ? it.value().get<std::string>() : it.value().dump();
    out.push_back(resolve_config(mode, family, overrides, data, {}, item.value("budget", 10), item.value("seed", 0))
                      .config);
  }
  return out;
}

HttpServer::HttpServer(Service& service) : service_(service), server_(std::make_unique<httplib::Server>()) { routes(); }

HttpServer::~HttpServer() { stop(); }

void HttpServer::routes() {
  httplib::Server& s = *server_;
  Registry& reg = service_.registry();

  s.Post("/datasets", guarded([&reg](const httplib::Request& req, httplib::Response& res) {
           const Json body = parse_body(req);
           const std::string id = reg.put_dataset(dataset_from_json(body), body.value("name", std::string()));
           const auto ds = reg.dataset(id);
           send_json(res,
                     {{"id", id},
                      {"samples", ds->data.size()},
                      {"channels", ds->data.channels()},
                      {"length", ds->data.length()}},
                     201);
         }));

  s.Post("/runs/pretrain", guarded([this, &reg](const httplib::Request& req, httplib::Response& res) {
           const Json body = parse_body(req);
           const std::string dataset_id = body.at("dataset_id").get<std::string>();
           const auto data = reg.dataset(dataset_id);
           const auto configs = pretrain_configs_from_json(body.at("configs"), data->data);
           send_json(res, {{"run_ids", service_.submit_pretrain(configs, dataset_id)}}, 202);
         }));

  s.Post("/runs/finetune", guarded([this](const httplib::Request& req, httplib::Response& res) {
           const FinetuneRequest r = finetune_request_from_json(parse_body(req));
           send_json(res, {{"run_id", service_.submit_finetune(r)}}, 202);
         }));

  s.Get(R"(/runs/([^/]+))", guarded([&reg](const httplib::Request& req, httplib::Response& res) {
          send_json(res, reg.run(req.matches[1])->summary());
        }));

  s.Get(R"(/runs/([^/]+)/metrics)", guarded([&reg](const httplib::Request& req, httplib::Response& res) {
          const auto run = reg.run(req.matches[1]);
          const std::size_t since = since_param(req);
          const bool stream = req.get_header_value("Accept").find("text/event-stream") != std::string::npos ||
                              req.get_param_value("stream") == "1";
          if (!stream) {
            // Read the status first so a finished status never hides points.
            const RunStatus status = run->status();
            Json points = Json::array();
            for (const MetricPoint& p : run->metrics().snapshot(since)) points.push_back(metric_point_json(p));
            send_json(res, {{"run_id", run->id()},
                            {"status", to_string(status)},
                            {"since", since},
                            {"next", since + points.size()},
                            {"points", points}});
            return;
          }
          res.set_header("Cache-Control", "no-cache");
          res.set_chunked_content_provider(
              "text/event-stream", [run, next = since](std::size_t, httplib::DataSink& sink) mutable {
                const RunStatus status = run->status();
                for (const MetricPoint& p : run->metrics().snapshot(next)) {
                  const std::string event = "event: metric\nid: " + std::to_string(next) +
                                            "\ndata: " + metric_point_json(p).dump() + "\n\n";
                  if (!sink.write(event.data(), event.size())) return false;
                  ++next;
                }
                if (status != RunStatus::running) {
                  const std::string event = "event: status\ndata: " + run->summary().dump() + "\n\n";
                  sink.write(event.data(), event.size());
                  sink.done();
                  return true;
                }
                std::this_thread::sleep_for(std::chrono::milliseconds(50));
                return true;
              });
        }));

  s.Get("/encoders", guarded([&reg](const httplib::Request&, httplib::Response& res) {
          Json list = Json::array();
          for (const EncoderEntry& e : reg.encoders()) list.push_back(to_json(e));
          send_json(res, {{"encoders", list}});
        }));

  s.Post(R"(/models/([^/]+)/predict)", guarded([&reg](const httplib::Request& req, httplib::Response& res) {
           const auto model = reg.model(req.matches[1]);
           const LoadedDataset ds = dataset_from_json(parse_body(req));
           send_json(res, prediction_payload(*model, ds.data, &ds.missing));
         }));

  s.Get(R"(/models/([^/]+)/export)", guarded([&reg](const httplib::Request& req, httplib::Response& res) {
          const auto model = reg.model(req.matches[1]);
          res.set_header("Content-Disposition", "attachment; filename=\"" + std::string(req.matches[1]) + ".json\"");
          send_json(res, export_model_json(*model));
        }));

  s.Get(R"(/models/([^/]+)/evaluation)", guarded([&reg](const httplib::Request& req, httplib::Response& res) {
          const std::string model_id = req.matches[1];
          const auto model = reg.model(model_id);
          std::string dataset_id = req.get_param_value("dataset");
          std::string labels_id = req.get_param_value("labels");
          if (dataset_id.empty()) {
            const auto origin = training_request_of(reg, model_id);
            if (!origin) throw ParameterError("no training dataset on record; pass ?dataset=<id>");
            dataset_id = origin->at("dataset_id").get<std::string>();
            if (labels_id.empty() && origin->contains("labels_id") && !origin->at("labels_id").is_null())
              labels_id = origin->at("labels_id").get<std::string>();
          }
          const auto ds = reg.dataset(dataset_id);
          const std::optional<LabelSet> labels = labels_id.empty() ? ds->labels : reg.dataset(labels_id)->labels;
          if (model->spec.task == TaskKind::classification && (!labels || !labels->class_labels))
            throw ParameterError("classification evaluation needs class labels");
          Json payload = evaluation_payload(*model, ds->data, labels, ds->missing.empty() ? nullptr : &ds->missing);
          payload["model_id"] = model_id;
          payload["dataset_id"] = dataset_id;
          send_json(res, payload);
        }));
}

int HttpServer::start(const std::string& host, int port) {
  if (port == 0) {
    port_ = server_->bind_to_any_port(host);
  } else {
    port_ = server_->bind_to_port(host, port) ? port : -1;
  }
  if (port_ <= 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port_;
}

void HttpServer::serve(const std::string& host, int port) {
  if (!server_->bind_to_port(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
  port_ = port;
  server_->listen_after_bind();
}

void HttpServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace units
