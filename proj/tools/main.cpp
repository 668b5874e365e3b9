#include <CLI11.hpp>
#include <httplib.h>

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "duhiv/annotation.hpp"
#include "duhiv/service.hpp"
#include "duhiv/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

struct GenDataArgs {
  std::string spec;
  std::size_t n = 2048;
  std::uint64_t seed = 0;
  std::string out;
};

int gen_data(const GenDataArgs& a) {
  duhiv::SyntheticSpec spec;
  if (!a.spec.empty()) spec = read_json_file(a.spec).get<duhiv::SyntheticSpec>();
  spec.seed = a.seed;
  const auto data = duhiv::generate_synthetic(spec, a.n);
  duhiv::save_dataset(a.out, data);
  std::cout << "wrote " << data.size() << " maps (" << data.rows << "x" << data.cols << ", " << data.num_labels
            << " labels) to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string config;
  std::string out;
  std::string history;
  std::string kind;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  bool quiet = false;
};

int train(const TrainArgs& a) {
  const auto data = duhiv::load_dataset(a.data);
  json description = {{"kind", "duhiv"}, {"config", duhiv::DuhivConfig{}}};
  duhiv::TrainConfig cfg;
  if (!a.config.empty()) {
    const json file = read_json_file(a.config);
    if (file.contains("model")) description = file.at("model");
    if (file.contains("train")) cfg = file.at("train").get<duhiv::TrainConfig>();
  }
  if (!a.kind.empty() && a.kind != description.value("kind", "")) {
    if (a.kind == "mlp-hvae") {
      duhiv::DuhivConfig reference;
      if (description.value("kind", "") == "duhiv" && description.contains("config")) {
        reference = description.at("config").get<duhiv::DuhivConfig>();
      }
      description = duhiv::describe_model(*duhiv::build_mlp_hvae(reference));
    } else if (a.kind == "duhiv") {
      description = {{"kind", "duhiv"}, {"config", duhiv::DuhivConfig{}}};
    } else {
      throw std::invalid_argument("unknown model kind '" + a.kind + "'");
    }
  }
  if (a.seed) cfg.seed = *a.seed;
  if (a.epochs) {
    cfg.epochs = *a.epochs;
    cfg.warmup_epochs = std::min(cfg.warmup_epochs, cfg.epochs);
  }
  auto model = duhiv::build_model(description);
  std::cout << model->kind() << ": " << model->parameter_count() << " parameters, " << cfg.epochs << " epochs\n";

  const fs::path out = a.out;
  duhiv::TrainCallbacks callbacks;
  callbacks.on_epoch = [&](const duhiv::EpochRecord& r) {
    if (a.quiet) return;
    std::cout << "epoch " << std::setw(4) << r.epoch << "  lr " << std::setprecision(4) << r.lr << "  beta "
              << r.beta << "  train " << std::fixed << std::setprecision(3) << r.train_elbo << "  eval "
              << r.eval_elbo << "  mse " << std::setprecision(5) << r.mse << std::defaultfloat << std::endl;
  };
  callbacks.on_eval = [&](const duhiv::EpochRecord& r, const duhiv::VaeModel& m) {
    duhiv::save_checkpoint(m, cfg, out, {{"epoch", r.epoch}, {"eval_elbo", r.eval_elbo}});
  };
  const auto history = duhiv::train(*model, data, cfg, callbacks);
  const auto& last = history.epochs.back();
  duhiv::save_checkpoint(*model, cfg, out, {{"epoch", last.epoch}, {"eval_elbo", last.eval_elbo}});
  const fs::path history_path = a.history.empty() ? fs::path(out.string() + ".history.csv") : fs::path(a.history);
  history.write_csv(history_path);
  std::cout << "checkpoint " << out.string() << ", history " << history_path.string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string data;
  std::string model;
  std::string baseline;
  std::size_t samples = 64;
  std::uint64_t seed = 0;
};

int eval_elbo(const EvalArgs& a) {
  const auto data = duhiv::load_dataset(a.data);
  std::vector<std::pair<std::string, duhiv::Checkpoint>> rows;
  rows.emplace_back(a.model, duhiv::load_checkpoint(a.model));
  if (!a.baseline.empty()) rows.emplace_back(a.baseline, duhiv::load_checkpoint(a.baseline));
  std::cout << "| model | parameters | train ELBO | test ELBO | test MSE |\n|---|---|---|---|---|\n";
  for (const auto& [path, ck] : rows) {
    const auto split = duhiv::default_split(data, ck.train_config.seed);
    const auto tr = duhiv::evaluate(*ck.model, data, split.train, a.samples, a.seed);
    const auto te = duhiv::evaluate(*ck.model, data, split.test, a.samples, a.seed);
    std::cout << "| " << ck.model->kind() << " | " << ck.model->parameter_count() << " | " << std::fixed
              << std::setprecision(3) << tr.elbo << " | " << te.elbo << " | " << std::setprecision(6) << te.mse
              << " |\n"
              << std::defaultfloat;
  }
  return 0;
}

struct AnnotateArgs {
  std::string data;
  std::string model;
  std::string insights;
  std::string mode = "unsupervised";
  double label_fraction = 1.0;
  std::size_t k = 10;
  std::size_t folds = 5;
  double threshold = 0.5;
  double bandwidth = 0.0;
  std::uint64_t seed = 0;
  std::string out;
  bool as_json = false;
};

int annotate(const AnnotateArgs& a) {
  const auto data = duhiv::load_dataset(a.data);
  const auto ck = duhiv::load_checkpoint(a.model);
  duhiv::AnnotateParams params;
  params.method = duhiv::annotation_method_from_string(a.mode);
  params.label_fraction = a.label_fraction;
  params.knn_k = a.k;
  params.folds = a.folds;
  params.threshold = a.threshold;
  params.bandwidth = a.bandwidth;
  params.seed = a.seed;
  std::vector<duhiv::Representation> prototypes;
  std::vector<std::string> names;
  if (!a.insights.empty()) {
    for (const auto& r : duhiv::load_insights(a.insights)) {
      prototypes.push_back(r.prototype);
      names.push_back(r.name);
    }
  }
  if (names.size() != data.num_labels) {
    names.clear();
    for (std::size_t j = 0; j < data.num_labels; ++j) names.push_back("P" + std::to_string(j + 1));
  }
  const auto reprs = duhiv::extract_all(*ck.model, data);
  const auto run = duhiv::run_annotation(data, reprs, params, prototypes);
  if (!a.out.empty()) duhiv::write_annotations(a.out, run.results);
  if (a.as_json) {
    json out = duhiv::annotation_run_json(run);
    out.erase("results");
    std::cout << out.dump(2) << "\n";
    return 0;
  }
  if (!run.metrics) {
    std::cout << "annotated " << run.results.size() << " samples; prototypes do not match the dataset labels, "
              << "no metrics\n";
    return 0;
  }
  std::string label = a.mode;
  if (params.method == duhiv::AnnotationMethod::Knn) {
    std::ostringstream s;
    s << "knn (k=" << a.k << ", labels " << a.label_fraction * 100.0 << "%)";
    label = s.str();
  }
  std::cout << duhiv::format_metrics_table(names, {{label, *run.metrics}});
  std::cout << "random-score mAP " << std::fixed << std::setprecision(1) << 100.0 * run.random_baseline_map << "\n";
  return 0;
}

struct ServeArgs {
  std::string model;
  std::string data;
  int port = 0;
  std::string host = "127.0.0.1";
  std::string registry;
};

httplib::Server* g_server = nullptr;

int serve(const ServeArgs& a) {
  duhiv::SessionOptions options;
  if (!a.registry.empty()) options.registry_file = a.registry;
  duhiv::Session session(options);
  auto ck = duhiv::load_checkpoint(a.model);
  session.load(std::shared_ptr<const duhiv::VaeModel>(std::move(ck.model)),
               std::make_shared<const duhiv::Dataset>(duhiv::load_dataset(a.data)));
  duhiv::Api api(session);
  httplib::Server server;
  duhiv::register_routes(server, api);
  g_server = &server;
  std::signal(SIGINT, [](int) { g_server->stop(); });
  std::signal(SIGTERM, [](int) { g_server->stop(); });
  const int port = a.port > 0 ? a.port : duhiv::default_port();
  std::cout << "listening on http://" << a.host << ":" << port << std::endl;
  if (!server.listen(a.host, port)) throw std::runtime_error("cannot listen on " + a.host + ":" + std::to_string(port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical VAE toolkit for power-grid pixel maps"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset archive");
  gen_cmd->add_option("--spec", gen.spec, "Synthetic spec JSON (defaults when omitted)")->check(CLI::ExistingFile);
  gen_cmd->add_option("--n", gen.n, "Number of maps")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--seed", gen.seed, "Generator seed");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint plus history table");
  train_cmd->add_option("--data", tr.data, "Dataset archive directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--config", tr.config, "JSON with optional 'model' and 'train' sections")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--out", tr.out, "Checkpoint path")->required();
  train_cmd->add_option("--history", tr.history, "History CSV path (default <out>.history.csv)");
  train_cmd->add_option("--model", tr.kind, "Override model kind")->check(CLI::IsMember({"duhiv", "mlp-hvae"}));
  train_cmd->add_option("--seed", tr.seed, "Training seed");
  train_cmd->add_option("--epochs", tr.epochs, "Override epoch count")->check(CLI::PositiveNumber);
  train_cmd->add_flag("--quiet", tr.quiet, "No per-epoch output");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval-elbo", "Print train/test ELBO for one or two checkpoints");
  eval_cmd->add_option("--data", ev.data, "Dataset archive directory")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--model", ev.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--baseline", ev.baseline, "Baseline checkpoint")->check(CLI::ExistingFile);
  eval_cmd->add_option("--samples", ev.samples, "Monte-Carlo samples per map")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seed", ev.seed, "Sampling seed");

  AnnotateArgs an;
  auto* annotate_cmd = app.add_subcommand("annotate", "Annotate a dataset and print cross-validated AP/mAP");
  annotate_cmd->add_option("--data", an.data, "Dataset archive directory")->required()->check(CLI::ExistingDirectory);
  annotate_cmd->add_option("--model", an.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  annotate_cmd->add_option("--insights", an.insights, "Insight registry file (line-delimited JSON)")
      ->check(CLI::ExistingFile);
  annotate_cmd->add_option("--mode", an.mode, "unsupervised or knn")->check(CLI::IsMember({"unsupervised", "knn"}));
  annotate_cmd->add_option("--label-fraction", an.label_fraction, "Labelled fraction for knn")
      ->check(CLI::Range(0.0, 1.0));
  annotate_cmd->add_option("--k", an.k, "Neighbours for knn")->check(CLI::PositiveNumber);
  annotate_cmd->add_option("--folds", an.folds, "Cross-validation folds")->check(CLI::Range(2, 1000));
  annotate_cmd->add_option("--threshold", an.threshold, "Decision threshold for unsupervised scores");
  annotate_cmd->add_option("--bandwidth", an.bandwidth, "Kernel bandwidth (median heuristic when omitted)");
  annotate_cmd->add_option("--seed", an.seed, "Fold and subsampling seed");
  annotate_cmd->add_option("--out", an.out, "Write per-sample results (line-delimited JSON)");
  annotate_cmd->add_flag("--json", an.as_json, "Print metrics as JSON");

  ServeArgs sv;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP/JSON service");
  serve_cmd->add_option("--model", sv.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  serve_cmd->add_option("--data", sv.data, "Dataset archive directory")->required()->check(CLI::ExistingDirectory);
  serve_cmd->add_option("--port", sv.port, "Port (default $DUHIV_PORT or 8080)");
  serve_cmd->add_option("--host", sv.host, "Bind address");
  serve_cmd->add_option("--registry", sv.registry, "Insight registry file, rewritten on every change");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) return gen_data(gen);
    if (*train_cmd) return train(tr);
    if (*eval_cmd) return eval_elbo(ev);
    if (*annotate_cmd) return annotate(an);
    if (*serve_cmd) return serve(sv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
