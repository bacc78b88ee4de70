// bbta: desk-scale black-box test-time adaptation toolkit.
//
// Subcommands: train-source, serve, adapt, sweep, analyze-gradients, report.
// Exit codes: 0 success, 2 configuration error, 3 transport error,
// 4 numerical error.

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "bbta/harness.hpp"

namespace {

volatile std::sig_atomic_t g_stop = 0;
void handle_signal(int) { g_stop = 1; }

bbta::ExperimentConfig load_config(const std::string& path,
                                   const std::vector<std::string>& overrides) {
  nlohmann::json j = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw bbta::ConfigError("cannot open config file " + path);
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw bbta::ConfigError("config file is not valid JSON: " + std::string(e.what()));
    }
  }
  for (const auto& o : overrides) bbta::apply_override(j, o);
  bbta::ExperimentConfig cfg = bbta::experiment_from_json(j);
  if (cfg.service.address == "in-process" && !j.contains("service")) {
    if (const char* env = std::getenv("BBTA_SERVICE_ADDR"); env && *env)
      cfg.service.address = env;
  }
  return cfg;
}

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> values;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    values.push_back(std::stod(item));
  }
  return values;
}

void print_summary(const bbta::ExperimentResult& res) {
  const auto& rep = res.report;
  std::cout << "method              " << rep.method << "\n"
            << "config hash         " << rep.config_hash << "\n"
            << "samples             " << rep.total_samples << " (" << rep.unanswered_samples
            << " unanswered)\n"
            << "accuracy (black)    " << rep.accuracy_black() << "\n"
            << "accuracy (harmon.)  " << rep.accuracy_harmonized() << "\n"
            << "headline accuracy   " << res.headline_accuracy << " [" << res.headline_source
            << "]\n"
            << "api requests        " << rep.total_requests << "\n"
            << "api cost            $" << rep.total_cost() << "\n"
            << "report              " << res.report_path << "\n";
}

int dispatch(int argc, char** argv) {
  CLI::App app{"black-box test-time adaptation toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "experiment config JSON file");
  app.add_option("--set", overrides,
                 "override config entries, e.g. --set engine.lambda=20 "
                 "--set stream.mode=continual");

  auto* train = app.add_subcommand("train-source", "train and save source checkpoints");
  bool train_force = false;
  train->add_flag("--force", train_force, "retrain even if checkpoints exist");

  auto* serve = app.add_subcommand("serve", "run the black-box classification service");
  std::string serve_checkpoint, bind_addr = "127.0.0.1";
  int port = 7465, admin_port = 7466, max_batch = 256;
  double price = bbta::kDefaultPricePerRequest, latency_ms = 45.0, jitter_ms = 5.0;
  bool clamp = false;
  serve->add_option("--checkpoint", serve_checkpoint, "model checkpoint to serve")->required();
  serve->add_option("--bind", bind_addr, "bind address")->capture_default_str();
  serve->add_option("--port", port, "classify port")->capture_default_str();
  serve->add_option("--admin-port", admin_port, "ledger dump port")->capture_default_str();
  serve->add_option("--price", price, "dollars per request")->capture_default_str();
  serve->add_option("--latency-ms", latency_ms, "fixed response latency")->capture_default_str();
  serve->add_option("--jitter-ms", jitter_ms, "uniform latency jitter")->capture_default_str();
  serve->add_option("--max-batch", max_batch, "largest accepted batch")->capture_default_str();
  serve->add_flag("--clamp", clamp, "clamp incoming pixels to [0,1]");

  auto* adapt = app.add_subcommand("adapt", "run one adaptation experiment");
  std::string adapt_method;
  adapt->add_option("--method", adapt_method,
                    "beta | zoo_rgf | zoo_spsa_gc | zoo_iso_es | tt_aug | distill | "
                    "source | adapt_ensemble | prompt_ensemble");
  std::string adapt_corruption;
  adapt->add_option("--corruption", adapt_corruption,
                    "kind:severity:seed (e.g. contrast:5:13)");
  std::string adapt_output;
  adapt->add_option("--output", adapt_output, "output directory");

  auto* sweep_cmd = app.add_subcommand("sweep", "run a hyperparameter or budget sweep");
  std::string axis, values_csv;
  sweep_cmd->add_option("--axis", axis, "alpha | lambda | epsilon | frame_width | budget")
      ->required();
  sweep_cmd->add_option("--values", values_csv, "comma-separated values")->required();

  auto* analyze = app.add_subcommand("analyze-gradients",
                                     "white-box gradient similarity table (simulator only)");
  std::string alphas_csv = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";
  int analyze_batches = 4;
  std::string analyze_output;
  analyze->add_option("--alphas", alphas_csv, "comma-separated fusion weights")
      ->capture_default_str();
  analyze->add_option("--batches", analyze_batches, "stream batches to average over")
      ->capture_default_str();
  analyze->add_option("--output", analyze_output, "CSV output path (default stdout)");

  auto* report_cmd = app.add_subcommand("report", "summarize one or more report.json files");
  std::vector<std::string> report_paths;
  report_cmd->add_option("paths", report_paths, "report.json files")->required();

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) {
    bbta::ExperimentConfig cfg = load_config(config_path, overrides);
    if (train_force) {
      std::remove(cfg.blackbox_checkpoint.c_str());
      std::remove(cfg.steering_checkpoint.c_str());
    }
    bbta::Fixture fix = bbta::ensure_checkpoints(cfg, true);
    std::cout << "black-box net  " << cfg.blackbox_checkpoint
              << "  train acc " << fix.blackbox_train_acc << "\n"
              << "steering net   " << cfg.steering_checkpoint
              << "  train acc " << fix.steering_train_acc << "\n";
    return 0;
  }

  if (serve->parsed()) {
    bbta::MlpNet net = bbta::load_net(serve_checkpoint);
    auto core = std::make_shared<bbta::ServiceCore>(
        std::move(net), price, bbta::LatencyModel{latency_ms, jitter_ms, 1}, max_batch, clamp);
    bbta::TcpService service(core, bind_addr, port, admin_port);
    std::signal(SIGINT, handle_signal);
    std::signal(SIGTERM, handle_signal);
    std::cout << "serving on " << bind_addr << ":" << service.port() << " (admin "
              << service.admin_port() << "), $" << price << "/request\n"
              << "press Ctrl-C to stop\n";
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    service.stop();
    const auto led = core->ledger();
    std::cout << "\nfinal ledger: " << led.total_requests << " requests, $"
              << led.total_cost() << "\n";
    return 0;
  }

  if (adapt->parsed()) {
    bbta::ExperimentConfig cfg = load_config(config_path, overrides);
    if (!adapt_method.empty()) cfg.method = adapt_method;
    if (!adapt_corruption.empty())
      cfg.corruptions = {bbta::parse_corruption(adapt_corruption)};
    if (!adapt_output.empty()) cfg.output_dir = adapt_output;
    bbta::ExperimentResult res = bbta::run_experiment(cfg, true);
    print_summary(res);
    return 0;
  }

  if (sweep_cmd->parsed()) {
    bbta::ExperimentConfig cfg = load_config(config_path, overrides);
    auto points = bbta::sweep(cfg, axis, parse_values(values_csv), false);
    std::cout << axis << ",headline_accuracy,requests,cost\n";
    for (const auto& p : points)
      std::cout << p.value << ',' << p.result.headline_accuracy << ','
                << p.result.report.total_requests << ',' << p.result.report.total_cost()
                << "\n";
    std::cout << "curve written to " << cfg.output_dir << "/curve_" << axis << ".csv\n";
    return 0;
  }

  if (analyze->parsed()) {
    bbta::ExperimentConfig cfg = load_config(config_path, overrides);
    auto rows = bbta::run_grad_analysis(cfg, parse_values(alphas_csv), analyze_batches);
    const std::string csv = bbta::grad_rows_to_csv(rows);
    if (analyze_output.empty()) {
      std::cout << csv;
    } else {
      bbta::write_text_file(analyze_output, csv);
      std::cout << "written to " << analyze_output << "\n";
    }
    return 0;
  }

  if (report_cmd->parsed()) {
    std::cout << "method,headline_accuracy,accuracy_black,accuracy_harmonized,samples,"
                 "requests,cost,config_hash\n";
    for (const auto& path : report_paths) {
      std::ifstream in(path);
      if (!in) throw bbta::ConfigError("cannot open " + path);
      nlohmann::json j;
      in >> j;
      const auto& t = j.at("totals");
      std::cout << j.value("method", "?") << ',' << j.value("headline_accuracy", 0.0) << ','
                << t.value("accuracy_black", 0.0) << ',' << t.value("accuracy_harmonized", 0.0)
                << ',' << t.value("samples", 0) << ',' << t.value("requests", 0) << ','
                << t.value("cost", 0.0) << ',' << j.value("config_hash", "?") << "\n";
    }
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const bbta::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const bbta::TransportError& e) {
    std::cerr << "transport error: " << e.what() << "\n";
    return 3;
  } catch (const bbta::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 4;
  } catch (const bbta::BudgetError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 4;
  }
}
