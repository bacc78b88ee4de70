#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "bbta/harness.hpp"

using namespace bbta;
namespace fs = std::filesystem;

namespace {

// Miniature experiment: small images and nets so harness tests stay quick.
ExperimentConfig mini_config(const std::string& tag) {
  ExperimentConfig cfg;
  cfg.method = "source";
  cfg.seed = 5;
  cfg.data.classes = 4;
  cfg.data.h = 12;
  cfg.data.w = 12;
  cfg.data.c = 3;
  cfg.data.source_n = 240;
  cfg.data.target_n = 96;
  cfg.prompt.frame_width = 2;
  cfg.stream.batch_size = 16;
  cfg.blackbox_hidden = {48, 48};
  cfg.steering_hidden = {24};
  cfg.blackbox_epochs = 6;
  cfg.steering_epochs = 6;
  cfg.zoo.q = 15;
  cfg.zoo.queries_per_sample = 16;
  cfg.corruptions = {{CorruptionKind::contrast, 4, 9}};
  const std::string root = "harness_test_" + tag;
  cfg.blackbox_checkpoint = root + "/bb.bbta";
  cfg.steering_checkpoint = root + "/st.bbta";
  cfg.output_dir = root + "/out";
  return cfg;
}

void cleanup(const ExperimentConfig& cfg) {
  fs::remove_all(fs::path(cfg.blackbox_checkpoint).parent_path());
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config: json round trip, overrides, stable hash") {
  nlohmann::json j = nlohmann::json::object();
  j["method"] = "beta";
  apply_override(j, "engine.lambda=20");
  apply_override(j, "stream.mode=label_imbalance");
  apply_override(j, "data.classes=6");
  ExperimentConfig cfg = experiment_from_json(j);
  CHECK(cfg.method == "beta");
  CHECK(cfg.engine.filter.lambda == 20.0);
  CHECK(cfg.stream.mode == StreamMode::label_imbalance);
  CHECK(cfg.data.classes == 6);
  // epsilon default resolves to the paper margin for K classes
  CHECK(cfg.engine.filter.epsilon == doctest::Approx(0.9 * std::log(6.0)));

  const std::string h1 = config_hash(cfg);
  const std::string h2 = config_hash(experiment_from_json(j));
  CHECK(h1 == h2);
  apply_override(j, "engine.lambda=21");
  CHECK(config_hash(experiment_from_json(j)) != h1);

  CHECK_THROWS_AS(experiment_from_json(nlohmann::json{{"method", "nope"}}), ConfigError);
  CHECK_THROWS_AS(apply_override(j, "missing-equals-sign"), ConfigError);
}

TEST_CASE("config: corruption list forms") {
  nlohmann::json j;
  j["corruptions"] = nlohmann::json::array({"gaussian_blur:3:7"});
  ExperimentConfig cfg = experiment_from_json(j);
  REQUIRE(cfg.corruptions.size() == 1);
  CHECK(cfg.corruptions[0].kind == CorruptionKind::gaussian_blur);
  CHECK(cfg.corruptions[0].severity == 3);

  j["corruptions"] = nlohmann::json::array(
      {{{"kind", "contrast"}, {"severity", 5}, {"seed", 3}},
       {{"kind", "pixelate"}, {"severity", 2}, {"seed", 4}}});
  cfg = experiment_from_json(j);
  CHECK(cfg.corruptions.size() == 2);
  CHECK(cfg.corruptions[1].kind == CorruptionKind::pixelate);
}

TEST_CASE("harness: source method equals direct evaluation; ledger is N") {
  ExperimentConfig cfg = mini_config("source");
  ExperimentResult res = run_experiment(cfg);
  CHECK(res.report.total_samples == 96);
  CHECK(res.report.total_requests == 96);  // one request per sample

  // direct evaluation of the served net on exactly the corrupted target set
  Fixture fix = ensure_checkpoints(cfg);
  Dataset target = gen_source(cfg.data.classes, cfg.data.target_n, cfg.data.h, cfg.data.w,
                              cfg.data.c, cfg.data.target_seed, 1 << 20);
  Dataset shifted = corrupt(target, cfg.corruptions[0]);
  Tensor probs = fix.blackbox.forward_probs(shifted.images);
  int correct = 0;
  for (int i = 0; i < shifted.size(); ++i)
    if (argmax_row(probs, i) == shifted.labels[static_cast<std::size_t>(i)]) ++correct;
  CHECK(res.report.accuracy_black() ==
        doctest::Approx(static_cast<double>(correct) / shifted.size()).epsilon(1e-12));
  cleanup(cfg);
}

TEST_CASE("harness: beta also issues exactly one request per sample") {
  ExperimentConfig cfg = mini_config("beta1");
  cfg.method = "beta";
  ExperimentResult res = run_experiment(cfg);
  CHECK(res.report.total_requests == 96);
  CHECK(res.headline_source == "black_box");
  cleanup(cfg);
}

TEST_CASE("harness: identical config and seeds give byte-identical reports") {
  ExperimentConfig cfg = mini_config("repro");
  cfg.method = "beta";
  cfg.output_dir = "harness_test_repro/out1";
  ExperimentResult a = run_experiment(cfg);
  cfg.output_dir = "harness_test_repro/out2";
  ExperimentResult b = run_experiment(cfg);
  CHECK(slurp(a.report_path) != "");
  CHECK(slurp(a.report_path) == slurp(b.report_path));
  CHECK(slurp(a.csv_path) == slurp(b.csv_path));
  cleanup(cfg);
}

TEST_CASE("harness: every method runs end to end on the miniature fixture") {
  ExperimentConfig base = mini_config("all");
  // train once; later runs reuse the checkpoints
  ensure_checkpoints(base);
  for (const std::string& method : known_methods()) {
    ExperimentConfig cfg = base;
    cfg.method = method;
    cfg.output_dir = "harness_test_all/out_" + method;
    if (method == "tt_aug") cfg.tt_aug_views = 4;  // keep the unit suite fast
    ExperimentResult res = run_experiment(cfg);
    INFO(method);
    CHECK(res.report.total_samples == 96);
    CHECK(res.report.unanswered_samples == 0);
    CHECK(fs::exists(res.report_path));
    CHECK(fs::exists(res.csv_path));
    CHECK(fs::exists(res.timing_path));
    CHECK(fs::exists(res.config_path));
    // per-method query multiplicity
    if (method == "beta" || method == "source" || method == "distill" ||
        method == "adapt_ensemble" || method == "prompt_ensemble")
      CHECK(res.report.total_requests == 96);
    else if (method == "tt_aug")
      CHECK(res.report.total_requests == 96 * 4);
    else
      CHECK(res.report.total_requests == 96 * 16);
  }
  cleanup(base);
}

TEST_CASE("harness: budget cap reproduces the full run's prefix") {
  ExperimentConfig cfg = mini_config("budget");
  cfg.method = "beta";
  cfg.output_dir = "harness_test_budget/full";
  ExperimentResult full = run_experiment(cfg);

  // cap at 48 requests = 3 batches of 16: the capped run must be the prefix
  cfg.budget_dollars = 48 * cfg.service.price;
  cfg.output_dir = "harness_test_budget/capped";
  ExperimentResult capped = run_experiment(cfg);
  CHECK(capped.report.total_requests == 48);
  REQUIRE(capped.report.rows.size() == 3);
  for (std::size_t i = 0; i < capped.report.rows.size(); ++i) {
    CHECK(capped.report.rows[i].correct_black == full.report.rows[i].correct_black);
    CHECK(capped.report.rows[i].requests == full.report.rows[i].requests);
  }
  cleanup(cfg);
}

TEST_CASE("harness: sweep writes one run per value plus a curve table") {
  ExperimentConfig cfg = mini_config("sweep");
  cfg.method = "beta";
  auto points = sweep(cfg, "alpha", {0.0, 1.0});
  CHECK(points.size() == 2);
  CHECK(fs::exists(cfg.output_dir + "/curve_alpha.csv"));
  const std::string curve = slurp(cfg.output_dir + "/curve_alpha.csv");
  CHECK(curve.find("alpha,headline_accuracy") != std::string::npos);
  CHECK(std::count(curve.begin(), curve.end(), '\n') == 3);

  CHECK_THROWS_AS(sweep(cfg, "alpha", {}), ConfigError);
  CHECK_THROWS_AS(sweep(cfg, "wobble", {0.1}), ConfigError);
  cleanup(cfg);
}

TEST_CASE("harness: gradient analysis runs locally and refuses remote services") {
  ExperimentConfig cfg = mini_config("grad");
  auto rows = run_grad_analysis(cfg, {0.2, 0.5, 1.0}, 2);
  REQUIRE(rows.size() == 3);
  CHECK(rows[2].cos_beta_ideal == doctest::Approx(1.0).epsilon(1e-9));
  const std::string csv = grad_rows_to_csv(rows);
  CHECK(csv.find("alpha,cos_ideal_black") != std::string::npos);

  cfg.service.address = "127.0.0.1:9";
  CHECK_THROWS_AS(run_grad_analysis(cfg, {0.5}, 1), ConfigError);
  cleanup(cfg);
}

TEST_CASE("harness: missing checkpoints without training permission is a config error") {
  ExperimentConfig cfg = mini_config("missing");
  cfg.train_if_missing = false;
  CHECK_THROWS_AS(run_experiment(cfg), ConfigError);
}
