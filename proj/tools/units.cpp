// units: command-line front end over a local artifact store.
#include "units/http.hpp"
#include "units/synthetic.hpp"
#include "units/tuning.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>

using namespace units;

namespace {

LoadedDataset load_with_labels(const std::string& data_path, const std::string& labels_path) {
  LoadedDataset ds = load_dataset(data_path);
  if (labels_path.empty()) return ds;
  if (labels_path.ends_with(".json")) {
    std::ifstream in(labels_path);
    if (!in) throw NotFoundError("cannot open " + labels_path);
    ds.labels = labels_from_json(Json::parse(in));
  } else {
    ds.labels = load_dataset(labels_path).labels;
    if (!ds.labels) throw ParameterError(labels_path + " carries no labels");
  }
  ds.labels->validate(ds.data.size());
  return ds;
}

std::map<std::string, std::string> parse_pairs(const std::vector<std::string>& items) {
  std::map<std::string, std::string> out;
  for (const std::string& kv : items) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ParameterError("expected key=value, got '" + kv + "'");
    out[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  return out;
}

void write_json(const std::string& path, const Json& j) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << j.dump() << "\n";
}

TaskSpec task_from_flags(const std::string& task, std::optional<int> classes, std::optional<int> horizon) {
  TaskSpec spec;
  switch (parse_task_kind(task)) {
    case TaskKind::classification:
      if (!classes) throw ParameterError("classification needs --classes");
      spec = TaskSpec::classification(*classes);
      break;
    case TaskKind::clustering:
      if (!classes) throw ParameterError("clustering needs --classes");
      spec = TaskSpec::clustering(*classes);
      break;
    case TaskKind::forecasting:
      if (!horizon) throw ParameterError("forecasting needs --horizon");
      spec = TaskSpec::forecasting(*horizon);
      break;
    case TaskKind::anomaly_detection:
      spec = TaskSpec::anomaly_detection();
      break;
    case TaskKind::imputation:
      spec = TaskSpec::imputation();
      break;
  }
  return spec;
}

std::vector<std::string> split_ids(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  for (std::string id; std::getline(ss, id, ',');)
    if (!id.empty()) out.push_back(id);
  return out;
}

HttpServer* g_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Universal time-series pre-training, fine-tuning and serving"};
  app.require_subcommand(1);
  std::string store = "units-store";
  app.add_option("--store", store, "Artifact store directory")->capture_default_str();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Pre-train encoders on unlabeled data");
  std::string pre_data, pre_mode = "default", pre_records;
  std::vector<std::string> pre_templates, pre_config;
  int pre_budget = 10;
  std::uint64_t pre_seed = 0;
  pre->add_option("--data", pre_data, "Dataset (.uts or csv)")->required();
  pre->add_option("--template", pre_templates, "Template family (repeatable)")->required();
  pre->add_option("--config", pre_config, "key=value override (repeatable)");
  pre->add_option("--mode", pre_mode, "default, manual or smart")->capture_default_str();
  pre->add_option("--budget", pre_budget, "Smart-mode trial budget")->capture_default_str();
  pre->add_option("--seed", pre_seed, "Smart-mode seed")->capture_default_str();
  pre->add_option("--records", pre_records, "Write smart-mode trials here as JSON lines");

  // finetune
  auto* ft = app.add_subcommand("finetune", "Fine-tune a task model");
  std::string ft_task, ft_encoders, ft_fusion = "concat", ft_data, ft_labels;
  std::optional<int> ft_classes, ft_horizon, ft_epochs, ft_fusion_dim;
  std::optional<double> ft_lr, ft_quantile;
  bool ft_scratch = false;
  std::uint64_t ft_seed = 0;
  ft->add_option("--task", ft_task, "classification, clustering, forecasting, anomaly or imputation")->required();
  ft->add_option("--encoders", ft_encoders, "Comma-separated encoder ids");
  ft->add_option("--fusion", ft_fusion, "concat or projection")->capture_default_str();
  ft->add_option("--fusion-dim", ft_fusion_dim, "Projection output size");
  ft->add_option("--data", ft_data, "Training data")->required();
  ft->add_option("--labels", ft_labels, "Labels (.json LabelSet or labeled .uts)");
  ft->add_option("--classes", ft_classes, "C for classification and clustering");
  ft->add_option("--horizon", ft_horizon, "H for forecasting");
  ft->add_option("--epochs", ft_epochs, "Fine-tuning epochs");
  ft->add_option("--lr", ft_lr, "Encoder and fusion learning rate");
  ft->add_option("--quantile", ft_quantile, "Anomaly threshold quantile");
  ft->add_option("--seed", ft_seed, "Seed")->capture_default_str();
  ft->add_flag("--from-scratch", ft_scratch, "Random encoders (baseline)");

  // predict / evaluate / export
  auto* pr = app.add_subcommand("predict", "Run a model on new data");
  std::string pr_model, pr_data, pr_out = "-";
  pr->add_option("--model", pr_model)->required();
  pr->add_option("--data", pr_data)->required();
  pr->add_option("--out", pr_out, "Output JSON path ('-' for stdout)")->capture_default_str();

  auto* ev = app.add_subcommand("evaluate", "Score a model against labels");
  std::string ev_model, ev_data, ev_labels, ev_out = "-";
  bool ev_full = false;
  ev->add_option("--model", ev_model)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--labels", ev_labels);
  ev->add_option("--out", ev_out)->capture_default_str();
  ev->add_flag("--full", ev_full, "Include the plotting payload");

  auto* ex = app.add_subcommand("export", "Write a model's JSON export");
  std::string ex_model, ex_out = "-";
  ex->add_option("--model", ex_model)->required();
  ex->add_option("--out", ex_out)->capture_default_str();

  auto* im = app.add_subcommand("import", "Register a model from its JSON export");
  std::string im_file;
  im->add_option("--file", im_file)->required();

  // pipelines
  auto* pipe = app.add_subcommand("pipeline", "Pretrained vs from-scratch comparisons");
  pipe->require_subcommand(1);
  std::uint64_t pl_seed = 0;
  int pl_classes = 0;
  std::optional<int> pl_epochs;
  auto* pl = pipe->add_subcommand("partial-labeling", "Fine-tune on a labeled fraction");
  std::string pl_data, pl_labels;
  double pl_rho = 0.1;
  pl->add_option("--data", pl_data)->required();
  pl->add_option("--labels", pl_labels);
  pl->add_option("--rho", pl_rho, "Labeled fraction")->capture_default_str();
  auto* dsh = pipe->add_subcommand("domain-shift", "Pre-train on a source, fine-tune on n target samples");
  std::string ds_source, ds_target;
  int ds_n = 20;
  dsh->add_option("--source", ds_source)->required();
  dsh->add_option("--target", ds_target)->required();
  dsh->add_option("--n", ds_n, "Target samples for fine-tuning")->capture_default_str();
  for (CLI::App* p : {pl, dsh}) {
    p->add_option("--classes", pl_classes)->required();
    p->add_option("--seed", pl_seed)->capture_default_str();
    p->add_option("--epochs", pl_epochs, "Fine-tuning epochs for both arms");
  }

  // generate
  auto* gen = app.add_subcommand("generate", "Write a synthetic benchmark dataset");
  std::string gen_kind, gen_out;
  int gen_n = 300, gen_length = 64, gen_channels = 1;
  double gen_gain = 1.0, gen_noise = -1.0;
  std::uint64_t gen_seed = 0;
  gen->add_option("kind", gen_kind, "frequency-warp, sinusoid-mixture, clusters or sinusoids")
      ->required()
      ->check(CLI::IsMember({"frequency-warp", "sinusoid-mixture", "clusters", "sinusoids"}));
  gen->add_option("--out", gen_out, "Output .uts or .csv")->required();
  gen->add_option("--n", gen_n)->capture_default_str();
  gen->add_option("--length", gen_length)->capture_default_str();
  gen->add_option("--channels", gen_channels, "sinusoids only")->capture_default_str();
  gen->add_option("--gain", gen_gain, "sinusoid-mixture amplitude scale")->capture_default_str();
  gen->add_option("--noise", gen_noise, "Noise std (generator default when omitted)");
  gen->add_option("--seed", gen_seed)->capture_default_str();

  // serve
  auto* sv = app.add_subcommand("serve", "Serve the HTTP API");
  int sv_port = 8080, sv_workers = 2;
  std::string sv_host = "127.0.0.1";
  sv->add_option("--port", sv_port)->capture_default_str();
  sv->add_option("--host", sv_host)->capture_default_str();
  sv->add_option("--workers", sv_workers)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      synthetic::LabeledSeries s;
      if (gen_kind == "frequency-warp")
        s = synthetic::frequency_warp_classes(gen_n, gen_length, gen_seed, gen_noise < 0 ? 0.5 : gen_noise);
      else if (gen_kind == "sinusoid-mixture")
        s = synthetic::sinusoid_mixture_classes(gen_n, gen_length, gen_seed, gen_gain, gen_noise < 0 ? 0.05 : gen_noise);
      else if (gen_kind == "clusters")
        s = synthetic::three_clusters(gen_n, gen_length, gen_seed, gen_noise < 0 ? 0.3 : gen_noise);
      else
        s.data = synthetic::sinusoids(gen_n, gen_channels, gen_length, gen_seed, gen_noise < 0 ? 0.02 : gen_noise);
      std::optional<LabelSet> labels;
      if (!s.labels.empty()) labels = LabelSet::classes(s.labels, s.num_classes);
      if (gen_out.ends_with(".uts")) {
        write_uts_binary(gen_out, s.data, labels);
      } else {
        write_csv_wide(gen_out, s.data);
        if (labels) write_json(gen_out + ".labels.json", to_json(*labels));
      }
      std::cout << "wrote " << s.data.size() << " samples to " << gen_out << "\n";
      return 0;
    }

    Registry registry{std::filesystem::path(store)};

    if (*pre) {
      const LoadedDataset ds = load_dataset(pre_data);
      const std::string dataset_id = registry.put_dataset(ds, pre_data);
      const TuningMode mode = parse_tuning_mode(pre_mode);
      const auto overrides = parse_pairs(pre_config);
      std::vector<PretrainTemplateConfig> configs;
      std::vector<TuningRecord> records;
      for (const std::string& t : pre_templates) {
        ResolvedConfig r = resolve_config(mode, parse_template_family(t), overrides, ds.data, {}, pre_budget, pre_seed);
        configs.push_back(r.config);
        records.insert(records.end(), r.records.begin(), r.records.end());
      }
      if (!pre_records.empty()) {
        std::ofstream out(pre_records);
        write_records_jsonl(out, records);
      }
      Json result = Json::array();
      bool ok = true;
      for (const std::string& id : run_pretrain(registry, configs, dataset_id)) {
        const auto run = registry.run(id);
        result.push_back(run->summary());
        ok = ok && run->status() == RunStatus::succeeded;
      }
      write_json("-", {{"dataset_id", dataset_id}, {"runs", result}});
      return ok ? 0 : 1;
    }

    if (*ft) {
      FinetuneRequest req;
      req.spec = task_from_flags(ft_task, ft_classes, ft_horizon);
      if (ft_epochs) req.spec.epochs = *ft_epochs;
      if (ft_lr) req.spec.learning_rate = *ft_lr;
      if (ft_quantile) req.spec.threshold = ThresholdRule::quantile(*ft_quantile);
      req.spec.seed = ft_seed;
      req.fusion.kind = parse_fusion_kind(ft_fusion);
      if (ft_fusion_dim) req.fusion.output_dim = *ft_fusion_dim;
      req.encoder_ids = split_ids(ft_encoders);
      req.from_scratch = ft_scratch;
      req.dataset_id = registry.put_dataset(load_with_labels(ft_data, ft_labels), ft_data);
      const FinetuneHandle h = run_finetune(registry, req);
      const auto run = registry.run(h.run_id);
      write_json("-", run->summary());
      return run->status() == RunStatus::succeeded ? 0 : 1;
    }

    if (*pr) {
      const auto model = registry.model(pr_model);
      const LoadedDataset ds = load_dataset(pr_data);
      write_json(pr_out, prediction_payload(*model, ds.data, &ds.missing));
      return 0;
    }

    if (*ev) {
      const auto model = registry.model(ev_model);
      const LoadedDataset ds = load_with_labels(ev_data, ev_labels);
      const Json payload = evaluation_payload(*model, ds.data, ds.labels, ds.missing.empty() ? nullptr : &ds.missing);
      write_json(ev_out, ev_full ? payload : payload.at("metrics"));
      return 0;
    }

    if (*ex) {
      write_json(ex_out, export_model_json(*registry.model(ex_model)));
      return 0;
    }

    if (*im) {
      std::ifstream in(im_file);
      if (!in) throw NotFoundError("cannot open " + im_file);
      const std::string id = registry.put_model(import_model_json(Json::parse(in)), "import");
      std::cout << id << "\n";
      return 0;
    }

    if (*pl) {
      const LoadedDataset ds = load_with_labels(pl_data, pl_labels);
      if (!ds.labels) throw ParameterError("partial labeling needs labels");
      TaskSpec spec = TaskSpec::classification(pl_classes);
      if (pl_epochs) spec.epochs = *pl_epochs;
      write_json("-", to_json(pipeline_partial_labeling(ds.data, *ds.labels, pl_rho, spec, pl_seed)));
      return 0;
    }

    if (*dsh) {
      const LoadedDataset src = load_dataset(ds_source), tgt = load_dataset(ds_target);
      if (!src.labels || !tgt.labels) throw ParameterError("domain shift needs labeled source and target");
      TaskSpec spec = TaskSpec::classification(pl_classes);
      if (pl_epochs) spec.epochs = *pl_epochs;
      write_json("-", to_json(pipeline_domain_shift(src.data, *src.labels, tgt.data, *tgt.labels, ds_n, spec, pl_seed)));
      return 0;
    }

    if (*sv) {
      Service service(registry, sv_workers);
      HttpServer server(service);
      g_server = &server;
      std::signal(SIGINT, [](int) {
        if (g_server) g_server->stop();
      });
      std::cout << "serving on http://" << sv_host << ":" << sv_port << " (store " << store << ")" << std::endl;
      server.serve(sv_host, sv_port);
      service.wait_idle();
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
