#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bbta/data.hpp"
#include "bbta/engine.hpp"
#include "bbta/service.hpp"

namespace bbta {

// Scored run. Accuracy is joined out-of-band from the label table; wall
// times live in a separate timing report so the scored artifact is
// byte-reproducible for identical (config, seeds).
struct RunReport {
  std::string method;
  std::string config_hash;
  std::uint64_t seed = 0;
  double price_per_request = kDefaultPricePerRequest;

  struct Row {
    int batch = 0;
    int n = 0;
    bool skipped = false;
    int correct_black = 0;
    int correct_harmonized = 0;
    std::int64_t requests = 0;        // this batch
    std::int64_t requests_total = 0;  // ledger snapshot after this batch
    StepMetrics metrics;
  };
  std::vector<Row> rows;

  int total_samples = 0;
  int answered_samples = 0;
  int unanswered_samples = 0;
  int correct_black = 0;
  int correct_harmonized = 0;
  std::int64_t total_requests = 0;
  bool budget_exhausted = false;

  double accuracy_black() const {
    return total_samples == 0 ? 0.0 : static_cast<double>(correct_black) / total_samples;
  }
  double accuracy_harmonized() const {
    return total_samples == 0 ? 0.0
                              : static_cast<double>(correct_harmonized) / total_samples;
  }
  double total_cost() const {
    return static_cast<double>(total_requests) * price_per_request;
  }

  // Mean per-batch accuracy over the last quarter of non-skipped batches.
  double final_quarter_batch_accuracy() const {
    std::vector<double> accs;
    for (const Row& r : rows)
      if (!r.skipped && r.n > 0) accs.push_back(static_cast<double>(r.correct_black) / r.n);
    if (accs.empty()) return 0.0;
    const std::size_t start = accs.size() - std::max<std::size_t>(1, accs.size() / 4);
    double s = 0.0;
    for (std::size_t i = start; i < accs.size(); ++i) s += accs[i];
    return s / static_cast<double>(accs.size() - start);
  }
};

// Join predictions with labels by sample id. The only place where labels
// meet adaptation output.
inline RunReport score(const RunTrace& trace, const LabelTable& labels,
                       const std::string& method, const std::string& config_hash,
                       std::uint64_t seed,
                       double price = kDefaultPricePerRequest) {
  RunReport rep;
  rep.method = method;
  rep.config_hash = config_hash;
  rep.seed = seed;
  rep.price_per_request = price;
  rep.budget_exhausted = trace.budget_exhausted;

  std::int64_t running_requests = 0;
  for (const BatchTrace& bt : trace.batches) {
    RunReport::Row row;
    row.batch = bt.index;
    row.n = static_cast<int>(bt.ids.size());
    row.skipped = bt.skipped;
    row.requests = bt.metrics.requests;
    row.metrics = bt.metrics;
    running_requests += bt.metrics.requests;
    row.requests_total = running_requests;

    rep.total_samples += row.n;
    if (bt.skipped) {
      rep.unanswered_samples += row.n;
    } else {
      rep.answered_samples += row.n;
      for (std::size_t i = 0; i < bt.ids.size(); ++i) {
        auto it = labels.find(bt.ids[i]);
        if (it == labels.end())
          throw ConfigError("score: sample id missing from label table");
        if (bt.pred_black[i] == it->second) ++row.correct_black;
        if (bt.pred_harmonized[i] == it->second) ++row.correct_harmonized;
      }
    }
    rep.correct_black += row.correct_black;
    rep.correct_harmonized += row.correct_harmonized;
    rep.rows.push_back(row);
  }
  rep.total_requests = trace.total_requests;
  return rep;
}

// Deterministic JSON: no wall-clock fields.
inline nlohmann::json report_to_json(const RunReport& rep) {
  nlohmann::json j;
  j["method"] = rep.method;
  j["config_hash"] = rep.config_hash;
  j["seed"] = rep.seed;
  j["price_per_request"] = rep.price_per_request;
  j["totals"] = {
      {"samples", rep.total_samples},
      {"answered", rep.answered_samples},
      {"unanswered", rep.unanswered_samples},
      {"correct_black", rep.correct_black},
      {"correct_harmonized", rep.correct_harmonized},
      {"accuracy_black", rep.accuracy_black()},
      {"accuracy_harmonized", rep.accuracy_harmonized()},
      {"requests", rep.total_requests},
      {"cost", rep.total_cost()},
      {"budget_exhausted", rep.budget_exhausted},
  };
  auto rows = nlohmann::json::array();
  for (const auto& r : rep.rows) {
    rows.push_back({
        {"batch", r.batch},
        {"n", r.n},
        {"skipped", r.skipped},
        {"correct_black", r.correct_black},
        {"correct_harmonized", r.correct_harmonized},
        {"requests", r.requests},
        {"requests_total", r.requests_total},
        {"loss", r.metrics.loss},
        {"harmon_term", r.metrics.harmon_term},
        {"steer_term", r.metrics.steer_term},
        {"consist_term", r.metrics.consist_term},
        {"entropy_steering", r.metrics.mean_entropy_s},
        {"entropy_black", r.metrics.mean_entropy_b},
        {"entropy_harmonized", r.metrics.mean_entropy_h},
        {"reliable_fraction", r.metrics.reliable_fraction},
        {"diverse_fraction", r.metrics.diverse_fraction},
        {"grad_norm_delta", r.metrics.grad_norm_delta},
    });
  }
  j["batches"] = std::move(rows);
  return j;
}

inline std::string report_to_csv(const RunReport& rep) {
  std::ostringstream out;
  out << "batch,n,skipped,acc_black,acc_harmonized,cum_acc_black,cum_acc_harmonized,"
         "requests,requests_total,cost_total,loss,harmon_term,steer_term,consist_term,"
         "entropy_steering,entropy_black,entropy_harmonized,reliable_fraction,"
         "diverse_fraction\n";
  int cum_correct_b = 0, cum_correct_h = 0, cum_n = 0;
  for (const auto& r : rep.rows) {
    cum_n += r.n;
    cum_correct_b += r.correct_black;
    cum_correct_h += r.correct_harmonized;
    const double acc_b = r.n ? static_cast<double>(r.correct_black) / r.n : 0.0;
    const double acc_h = r.n ? static_cast<double>(r.correct_harmonized) / r.n : 0.0;
    out << r.batch << ',' << r.n << ',' << (r.skipped ? 1 : 0) << ',' << acc_b << ','
        << acc_h << ',' << (cum_n ? static_cast<double>(cum_correct_b) / cum_n : 0.0) << ','
        << (cum_n ? static_cast<double>(cum_correct_h) / cum_n : 0.0) << ',' << r.requests
        << ',' << r.requests_total << ','
        << static_cast<double>(r.requests_total) * rep.price_per_request << ','
        << r.metrics.loss << ',' << r.metrics.harmon_term << ',' << r.metrics.steer_term
        << ',' << r.metrics.consist_term << ',' << r.metrics.mean_entropy_s << ','
        << r.metrics.mean_entropy_b << ',' << r.metrics.mean_entropy_h << ','
        << r.metrics.reliable_fraction << ',' << r.metrics.diverse_fraction << '\n';
  }
  return out.str();
}

// Wall-clock sidecar, intentionally separate from the deterministic report.
inline nlohmann::json timing_to_json(const RunTrace& trace) {
  nlohmann::json j;
  auto per_batch = nlohmann::json::array();
  double total = 0.0;
  for (const auto& bt : trace.batches) {
    per_batch.push_back(bt.metrics.wall_ms);
    total += bt.metrics.wall_ms;
  }
  j["per_batch_ms"] = std::move(per_batch);
  j["total_ms"] = total;
  return j;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  out << content;
}

}  // namespace bbta
