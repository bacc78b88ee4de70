#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bbta/data.hpp"
#include "bbta/graph.hpp"
#include "bbta/net.hpp"
#include "bbta/prob.hpp"
#include "bbta/prompt.hpp"
#include "bbta/service.hpp"

namespace bbta {

enum class PredictionSource { black_box, harmonized };

inline PredictionSource prediction_source_from_name(const std::string& s) {
  if (s == "black_box") return PredictionSource::black_box;
  if (s == "harmonized") return PredictionSource::harmonized;
  throw ConfigError("unknown prediction source: " + s);
}

struct EngineConfig {
  FilterParams filter;     // epsilon (nats), d, alpha, lambda
  double lr_delta = 0.01;  // adaptive-moment step on the prompt
  double lr_theta = 2e-5;  // plain gradient step on LN affine params
  double ema_beta = 0.9;
  PredictionSource prediction_source = PredictionSource::black_box;
  bool weight_detach = true;
  // The filter weight is defined on x but applied at x'; default computes it
  // from p_S on the prompted input, the flag switches to the clean input.
  bool weight_from_prompted = true;
  bool use_diversity_gate = true;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;

  // A non-finite epsilon disables entropy filtering entirely (unit weights,
  // all samples reliable); used by the no-filter ablation.
  bool filtering_enabled() const { return std::isfinite(filter.epsilon); }

  void validate() const {
    if (filtering_enabled()) {
      FilterParams f = filter;
      f.validate();
    } else {
      if (!(filter.alpha >= 0.0 && filter.alpha <= 1.0))
        throw ConfigError("EngineConfig: alpha must be in [0,1]");
      if (!(filter.lambda >= 0.0)) throw ConfigError("EngineConfig: lambda must be >= 0");
    }
    // zero learning rates are permitted as a diagnostic (adaptation off)
    if (lr_delta < 0.0 || lr_theta < 0.0)
      throw ConfigError("EngineConfig: learning rates must be >= 0");
    if (!(ema_beta >= 0.0 && ema_beta < 1.0))
      throw ConfigError("EngineConfig: ema_beta must be in [0,1)");
  }
};

// Exponential moving average of past reliable predictions; a flag state
// before the first gate-passing sample.
struct EmaState {
  ProbVector p_bar;  // default-constructed sentinel until initialized
  bool initialized = false;
};

// Adaptive-moment optimizer state with decoupled weight decay.
struct AdamWState {
  std::vector<double> m, v;
  std::int64_t step = 0;

  void ensure(std::size_t n) {
    if (m.size() != n) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
      step = 0;
    }
  }

  void apply(std::vector<double>& params, const std::vector<double>& grad,
             const EngineConfig& cfg) {
    ensure(params.size());
    ++step;
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * grad[i];
      v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      params[i] -= cfg.lr_delta * (mhat / (std::sqrt(vhat) + cfg.adam_eps) +
                                   cfg.weight_decay * params[i]);
    }
  }
};

struct StepMetrics {
  int batch_size = 0;
  std::int64_t requests = 0;
  double loss = 0.0;
  double harmon_term = 0.0;   // mean w_H * H(p_H)
  double steer_term = 0.0;    // mean w_S * H(p_S)
  double consist_term = 0.0;  // mean lambda * KL
  double mean_entropy_s = 0.0;
  double mean_entropy_b = 0.0;
  double mean_entropy_h = 0.0;
  double reliable_fraction = 0.0;
  double diverse_fraction = 0.0;
  double grad_norm_delta = 0.0;
  double wall_ms = 0.0;  // reported separately, never part of golden output
};

struct StepOutcome {
  std::vector<int> pred_black;
  std::vector<int> pred_harmonized;
  Tensor probs_black;     // detached API output for this batch
  Tensor probs_steering;  // p_S on the prompted input
  StepMetrics metrics;
};

namespace detail {

inline double host_entropy_row(const Tensor& probs, int row) {
  double h = 0.0;
  for (int c = 0; c < probs.dim(1); ++c) {
    const double p = probs.at(row, c);
    if (p > kProbFloor) h -= p * std::log(p);
  }
  return h;
}

}  // namespace detail

// One online BETA step: a single black-box query on the prompted batch,
// joint loss assembly, one adaptive-moment step on the prompt from the full
// loss, one plain gradient step on the LN affine params from the steering
// term only, EMA bookkeeping, and per-sample predictions.
inline StepOutcome step(const AdaptBatch& batch, FramePrompt& prompt, MlpNet& steering,
                        BlackBoxClient& client, const EngineConfig& cfg, EmaState& ema,
                        AdamWState& opt, const std::string& ledger_tag = "beta") {
  if (batch.size() == 0) throw ConfigError("engine::step: empty batch");
  const auto t0 = std::chrono::steady_clock::now();
  const int n = batch.size();
  const double alpha = cfg.filter.alpha;
  const double lambda = cfg.filter.lambda;

  // §1 prompted input and the single API call (detached probabilities)
  Tensor prompted = prompt.apply(batch.images);
  BlackBoxClient::Result api = client.classify(prompted, ledger_tag);
  const Tensor& p_b = api.probs;
  const int k = p_b.dim(1);

  // §2 local forwards: prompted on the tape, clean as detached constants
  Graph g;
  Graph::NodeId delta = g.leaf(Tensor({prompt.param_count()}, prompt.params), true);
  Graph::NodeId frame = g.scatter_positions(delta, prompt.positions, prompt.image_dim());
  Graph::NodeId x_prompted = g.add_rowvec(g.constant(batch.images), frame);
  MlpNet::ParamNodes theta;
  Graph::NodeId p_s =
      steering.forward_on(g, x_prompted, MlpNet::TrackParams::norm_affine, &theta);
  Tensor p_s_clean = steering.forward_probs(batch.images);

  // §3 filter weights and gates from H(p_S)
  const Tensor& p_s_val = g.value(p_s);
  std::vector<double> h_s(static_cast<std::size_t>(n));
  std::vector<double> w_reliable(static_cast<std::size_t>(n), 1.0);
  std::vector<double> gate(static_cast<std::size_t>(n), 1.0);
  int reliable_count = 0, diverse_count = 0;
  for (int i = 0; i < n; ++i) {
    const Tensor& basis = cfg.weight_from_prompted ? p_s_val : p_s_clean;
    h_s[static_cast<std::size_t>(i)] = detail::host_entropy_row(basis, i);
    if (cfg.filtering_enabled())
      w_reliable[static_cast<std::size_t>(i)] =
          reliability_weight(h_s[static_cast<std::size_t>(i)], cfg.filter.epsilon);
    if (w_reliable[static_cast<std::size_t>(i)] > 0.0) ++reliable_count;
    if (cfg.use_diversity_gate) {
      std::vector<double> row(p_s_val.row(i), p_s_val.row(i) + k);
      const bool pass = diversity_gate(ProbVector(std::move(row)),
                                       ema.initialized ? ema.p_bar : ProbVector(),
                                       cfg.filter.d);
      gate[static_cast<std::size_t>(i)] = pass ? 1.0 : 0.0;
    }
    if (gate[static_cast<std::size_t>(i)] > 0.0) ++diverse_count;
  }

  // §4 loss assembly
  Graph::NodeId w_h_node, w_s_node;
  if (cfg.weight_detach) {
    Tensor wh({n}), ws({n});
    for (int i = 0; i < n; ++i) {
      wh.at(i) = w_reliable[static_cast<std::size_t>(i)];
      ws.at(i) = w_reliable[static_cast<std::size_t>(i)] * gate[static_cast<std::size_t>(i)];
    }
    w_h_node = g.constant(wh);
    w_s_node = g.constant(ws);
  } else {
    // weights stay differentiable: exp(eps - H(p_S)) masked by the
    // (non-differentiable) indicators
    Graph::NodeId h_rows = entropy_rows(g, p_s);
    Tensor eps_vec = Tensor::full({n}, cfg.filtering_enabled() ? cfg.filter.epsilon : 0.0);
    Graph::NodeId raw = g.exp_(g.sub(g.constant(eps_vec), h_rows));
    Tensor mask_rel({n}), mask_div({n});
    for (int i = 0; i < n; ++i) {
      mask_rel.at(i) = w_reliable[static_cast<std::size_t>(i)] > 0.0 ? 1.0 : 0.0;
      mask_div.at(i) = mask_rel.at(i) * gate[static_cast<std::size_t>(i)];
    }
    if (cfg.filtering_enabled()) {
      w_h_node = g.mul(raw, g.constant(mask_rel));
      w_s_node = g.mul(raw, g.constant(mask_div));
    } else {
      Tensor ones = Tensor::full({n}, 1.0);
      w_h_node = g.constant(ones);
      Tensor gates({n});
      for (int i = 0; i < n; ++i) gates.at(i) = gate[static_cast<std::size_t>(i)];
      w_s_node = g.constant(gates);
    }
  }

  Tensor p_b_scaled = p_b;
  for (double& v : p_b_scaled.data) v *= (1.0 - alpha);
  Graph::NodeId p_h = g.add(g.scale(p_s, alpha), g.constant(p_b_scaled));

  Graph::NodeId h_harmon = entropy_rows(g, p_h);
  Graph::NodeId h_steer = entropy_rows(g, p_s);
  Graph::NodeId harmon_rows = g.mul(w_h_node, h_harmon);
  Graph::NodeId steer_rows = g.mul(w_s_node, h_steer);

  Tensor log_clean = p_s_clean;
  for (double& v : log_clean.data) v = std::log(std::max(v, kProbFloor));
  Graph::NodeId kl_rows = g.row_sums(
      g.mul(g.constant(p_s_clean), g.sub(g.constant(log_clean), g.log_floor(p_s, kProbFloor))));

  Graph::NodeId total_rows =
      g.add(g.add(harmon_rows, steer_rows), g.scale(kl_rows, lambda));
  Graph::NodeId loss = g.scale(g.reduce_sum(total_rows), 1.0 / n);
  Graph::NodeId steer_loss = g.scale(g.reduce_sum(steer_rows), 1.0 / n);

  // §5 gradient routing: delta from the full loss, theta from the steering
  // term only
  g.backward(loss);
  std::vector<double> delta_grad = g.grad(delta).data;
  g.zero_grads();
  g.backward(steer_loss);

  opt.apply(prompt.params, delta_grad, cfg);
  for (std::size_t l = 0; l < steering.layers.size(); ++l) {
    const Tensor& ggain = g.grad(theta.ln_gains[l]);
    const Tensor& gshift = g.grad(theta.ln_shifts[l]);
    Tensor& gain = steering.layers[l].ln_gain;
    Tensor& shift = steering.layers[l].ln_shift;
    for (std::int64_t i = 0; i < gain.size(); ++i)
      gain.data[static_cast<std::size_t>(i)] -= cfg.lr_theta * ggain.data[static_cast<std::size_t>(i)];
    for (std::int64_t i = 0; i < shift.size(); ++i)
      shift.data[static_cast<std::size_t>(i)] -= cfg.lr_theta * gshift.data[static_cast<std::size_t>(i)];
  }

  // §6 EMA over samples passing both gates (reliable AND non-redundant)
  {
    std::vector<double> mean;
    int passing = 0;
    for (int i = 0; i < n; ++i) {
      if (!(w_reliable[static_cast<std::size_t>(i)] > 0.0 && gate[static_cast<std::size_t>(i)] > 0.0)) continue;
      if (mean.empty()) mean.assign(static_cast<std::size_t>(k), 0.0);
      for (int c = 0; c < k; ++c) mean[static_cast<std::size_t>(c)] += p_s_val.at(i, c);
      ++passing;
    }
    if (passing > 0) {
      for (double& v : mean) v /= passing;
      // renormalize away the accumulation rounding before constructing
      double sum = 0.0;
      for (double v : mean) sum += v;
      for (double& v : mean) v /= sum;
      if (!ema.initialized) {
        ema.p_bar = ProbVector(mean);
        ema.initialized = true;
      } else {
        std::vector<double> mixed(static_cast<std::size_t>(k));
        for (int c = 0; c < k; ++c)
          mixed[static_cast<std::size_t>(c)] = cfg.ema_beta * ema.p_bar[c] +
                                               (1.0 - cfg.ema_beta) * mean[static_cast<std::size_t>(c)];
        ema.p_bar = ProbVector(mixed);
      }
    }
  }

  // §7 predictions and metrics
  StepOutcome out;
  const Tensor& p_h_val = g.value(p_h);
  for (int i = 0; i < n; ++i) {
    out.pred_black.push_back(argmax_row(p_b, i));
    out.pred_harmonized.push_back(argmax_row(p_h_val, i));
  }
  out.probs_black = p_b;
  out.probs_steering = p_s_val;
  StepMetrics& m = out.metrics;
  m.batch_size = n;
  m.requests = n;
  m.loss = g.value(loss).at(0);
  m.steer_term = g.value(steer_loss).at(0);
  {
    double harmon = 0.0, consist = 0.0, hs = 0.0, hb = 0.0, hh = 0.0;
    const Tensor& harmon_val = g.value(harmon_rows);
    const Tensor& kl_val = g.value(kl_rows);
    for (int i = 0; i < n; ++i) {
      harmon += harmon_val.at(i);
      consist += lambda * kl_val.at(i);
      hs += detail::host_entropy_row(p_s_val, i);
      hb += detail::host_entropy_row(p_b, i);
      hh += detail::host_entropy_row(p_h_val, i);
    }
    m.harmon_term = harmon / n;
    m.consist_term = consist / n;
    m.mean_entropy_s = hs / n;
    m.mean_entropy_b = hb / n;
    m.mean_entropy_h = hh / n;
  }
  m.reliable_fraction = static_cast<double>(reliable_count) / n;
  m.diverse_fraction = static_cast<double>(diverse_count) / n;
  m.grad_norm_delta = l2_norm(delta_grad);
  m.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

struct BatchTrace {
  int index = 0;
  std::vector<std::int64_t> ids;
  std::vector<int> pred_black;
  std::vector<int> pred_harmonized;
  StepMetrics metrics;
  bool skipped = false;
  std::string error;
};

struct RunTrace {
  std::vector<BatchTrace> batches;
  std::int64_t total_requests = 0;
  int total_samples = 0;
  int skipped_samples = 0;
  bool budget_exhausted = false;
};

// Strictly online one-pass adaptation over a stream: one step per batch
// (steps_per_batch > 1 re-runs the step on the same batch, the multi-query
// experiment). A non-negative request_cap stops the run before any batch
// that would exceed it.
inline RunTrace run_stream(Stream& stream, FramePrompt& prompt, MlpNet& steering,
                           BlackBoxClient& client, const EngineConfig& cfg,
                           const std::string& ledger_tag = "beta",
                           int steps_per_batch = 1, std::int64_t request_cap = -1) {
  cfg.validate();
  if (steps_per_batch < 1) throw ConfigError("run_stream: steps_per_batch must be >= 1");
  RunTrace trace;
  EmaState ema;
  AdamWState opt;
  int index = 0;
  while (auto maybe = stream.next()) {
    AdaptBatch batch = std::move(*maybe);
    const std::int64_t expected =
        static_cast<std::int64_t>(batch.size()) * steps_per_batch;
    if (request_cap >= 0 && trace.total_requests + expected > request_cap) {
      trace.budget_exhausted = true;
      break;
    }
    BatchTrace bt;
    bt.index = index++;
    bt.ids = batch.ids;
    try {
      StepOutcome outcome;
      for (int rep = 0; rep < steps_per_batch; ++rep) {
        outcome = step(batch, prompt, steering, client, cfg, ema, opt, ledger_tag);
        bt.metrics.requests += outcome.metrics.requests;
      }
      const std::int64_t requests = bt.metrics.requests;
      bt.metrics = outcome.metrics;
      bt.metrics.requests = requests;
      bt.pred_black = std::move(outcome.pred_black);
      bt.pred_harmonized = std::move(outcome.pred_harmonized);
    } catch (const TransportError& e) {
      bt.skipped = true;
      bt.error = e.what();
      bt.metrics.batch_size = batch.size();
      bt.metrics.requests = 0;
      trace.skipped_samples += batch.size();
    }
    trace.total_requests += bt.metrics.requests;
    trace.total_samples += batch.size();
    trace.batches.push_back(std::move(bt));
  }
  return trace;
}

// Inference-only baseline: one query per batch, no adaptation. The `source`
// method of the harness.
inline RunTrace run_inference_stream(Stream& stream, BlackBoxClient& client,
                                     const std::string& ledger_tag = "source",
                                     std::int64_t request_cap = -1,
                                     const FramePrompt* fixed_prompt = nullptr) {
  RunTrace trace;
  int index = 0;
  while (auto maybe = stream.next()) {
    AdaptBatch batch = std::move(*maybe);
    if (request_cap >= 0 && trace.total_requests + batch.size() > request_cap) {
      trace.budget_exhausted = true;
      break;
    }
    BatchTrace bt;
    bt.index = index++;
    bt.ids = batch.ids;
    bt.metrics.batch_size = batch.size();
    try {
      Tensor images = fixed_prompt ? fixed_prompt->apply(batch.images) : batch.images;
      auto res = client.classify(images, ledger_tag);
      for (int i = 0; i < batch.size(); ++i) bt.pred_black.push_back(argmax_row(res.probs, i));
      bt.pred_harmonized = bt.pred_black;
      bt.metrics.requests = batch.size();
      for (int i = 0; i < batch.size(); ++i)
        bt.metrics.mean_entropy_b += detail::host_entropy_row(res.probs, i);
      bt.metrics.mean_entropy_b /= batch.size();
      bt.metrics.wall_ms = res.wall_ms;
    } catch (const TransportError& e) {
      bt.skipped = true;
      bt.error = e.what();
      trace.skipped_samples += batch.size();
    }
    trace.total_requests += bt.metrics.requests;
    trace.total_samples += batch.size();
    trace.batches.push_back(std::move(bt));
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Gradient-similarity analysis (white-box, simulator only).
// ---------------------------------------------------------------------------

struct GradSimilarityRow {
  double alpha = 0.0;
  double cos_ideal_black = 0.0;  // relevance
  double cos_beta_ideal = 0.0;   // effectiveness
  double cos_local_black = 0.0;  // naive transfer
};

// For each alpha: cos(g_Ideal, g_Black), cos(g_BETA, g_Ideal) and
// cos(g_Local, g_Black), where gradients are w.r.t. the prompt parameters.
// Takes the analysis-only white-box handle; an opaque client cannot be
// passed here by construction.
inline std::vector<GradSimilarityRow> grad_similarity_analysis(
    const AdaptBatch& batch, const FramePrompt& prompt, const MlpNet& steering,
    const WhiteboxHandle& target, const std::vector<double>& alphas) {
  if (batch.size() == 0) throw ConfigError("grad_similarity_analysis: empty batch");
  Graph g;
  Graph::NodeId delta = g.leaf(Tensor({prompt.param_count()}, prompt.params), true);
  Graph::NodeId frame = g.scatter_positions(delta, prompt.positions, prompt.image_dim());
  Graph::NodeId x_prompted = g.add_rowvec(g.constant(batch.images), frame);
  Graph::NodeId p_s = steering.forward_on(g, x_prompted);
  Graph::NodeId p_b = target.net().forward_on(g, x_prompted);
  const int n = batch.size();

  auto grad_of = [&](Graph::NodeId scalar) {
    g.zero_grads();
    g.backward(scalar);
    return g.grad(delta).data;
  };

  Graph::NodeId loss_black = g.scale(g.reduce_sum(entropy_rows(g, p_b)), 1.0 / n);
  Graph::NodeId loss_local = g.scale(g.reduce_sum(entropy_rows(g, p_s)), 1.0 / n);
  const std::vector<double> g_black = grad_of(loss_black);
  const std::vector<double> g_local = grad_of(loss_local);

  std::vector<GradSimilarityRow> rows;
  for (double alpha : alphas) {
    GradSimilarityRow row;
    row.alpha = alpha;
    Graph::NodeId ideal_mix = g.add(g.scale(p_s, alpha), g.scale(p_b, 1.0 - alpha));
    Graph::NodeId loss_ideal = g.scale(g.reduce_sum(entropy_rows(g, ideal_mix)), 1.0 / n);
    const std::vector<double> g_ideal = grad_of(loss_ideal);

    Tensor p_b_detached = g.value(p_b);
    for (double& v : p_b_detached.data) v *= (1.0 - alpha);
    Graph::NodeId beta_mix = g.add(g.scale(p_s, alpha), g.constant(p_b_detached));
    Graph::NodeId loss_beta = g.scale(g.reduce_sum(entropy_rows(g, beta_mix)), 1.0 / n);
    const std::vector<double> g_beta = grad_of(loss_beta);

    row.cos_ideal_black = cosine(g_ideal, g_black);
    row.cos_beta_ideal = cosine(g_beta, g_ideal);
    row.cos_local_black = cosine(g_local, g_black);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace bbta
