#pragma once

#include <functional>
#include <string>
#include <vector>

#include "bbta/data.hpp"
#include "bbta/engine.hpp"
#include "bbta/net.hpp"
#include "bbta/prompt.hpp"
#include "bbta/service.hpp"

namespace bbta {

// Raised when an estimate would exceed its per-batch query budget.
struct BudgetError : std::runtime_error {
  explicit BudgetError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class ZooMethod { rgf, spsa_gc, iso_es };

inline ZooMethod zoo_method_from_name(const std::string& name) {
  if (name == "rgf" || name == "zoo_rgf") return ZooMethod::rgf;
  if (name == "spsa_gc" || name == "zoo_spsa_gc") return ZooMethod::spsa_gc;
  if (name == "iso_es" || name == "zoo_iso_es") return ZooMethod::iso_es;
  throw ConfigError("unknown zoo method: " + name);
}

struct ZooConfig {
  ZooMethod method = ZooMethod::spsa_gc;
  int q = 15;                   // RGF directions per estimate
  double mu = 0.01;             // smoothing parameter, doubles as the step size
  int queries_per_sample = 16;  // batch-query budget per stream batch
  double momentum = 0.9;        // NAG correction for SPSA-GC
  int population = 16;          // iso-ES candidates per generation
  int elite = 4;                // iso-ES recombination size
  double sigma = 0.02;          // iso-ES sampling spread
  std::uint64_t seed = 0;

  int estimate_cost() const {
    switch (method) {
      case ZooMethod::rgf: return q + 1;
      case ZooMethod::spsa_gc: return 2;
      case ZooMethod::iso_es: return population;
    }
    return 1;
  }

  void validate() const {
    if (q < 1) throw ConfigError("ZooConfig: q must be >= 1");
    if (!(mu > 0.0)) throw ConfigError("ZooConfig: mu must be > 0");
    if (queries_per_sample < 1)
      throw ConfigError("ZooConfig: queries_per_sample must be >= 1");
    if (population < 2 || elite < 1 || elite > population)
      throw ConfigError("ZooConfig: need population >= 2 and 1 <= elite <= population");
    if (!(sigma > 0.0)) throw ConfigError("ZooConfig: sigma must be > 0");
    if (queries_per_sample == 1) return;  // inference-only degenerate budget
    // the budget must be consistent with the method's per-estimate cost
    const int cost = estimate_cost();
    const int spendable =
        method == ZooMethod::spsa_gc && queries_per_sample % 2 == 1
            ? queries_per_sample - 1  // odd budget: one query reserved for prediction
            : queries_per_sample;
    if (spendable % cost != 0)
      throw ConfigError("ZooConfig: budget " + std::to_string(queries_per_sample) +
                        " is not a multiple of the per-estimate cost " +
                        std::to_string(cost));
  }
};

// Scalar objective over prompt parameters, evaluated by querying the
// black box. One call = one batch query.
using ZooObjective = std::function<double(const std::vector<double>&)>;

// RGF estimate over explicit directions:
//   (1/q) * sum_i [f(d + mu*u_i) - f(d)] / mu * u_i
// Exactly dirs.size() + 1 objective evaluations.
inline std::vector<double> rgf_estimate(const ZooObjective& f,
                                        const std::vector<double>& delta, double mu,
                                        const std::vector<std::vector<double>>& dirs) {
  const double base = f(delta);
  std::vector<double> grad(delta.size(), 0.0);
  std::vector<double> probe(delta.size());
  for (const auto& u : dirs) {
    for (std::size_t j = 0; j < delta.size(); ++j) probe[j] = delta[j] + mu * u[j];
    const double scale = (f(probe) - base) / mu;
    for (std::size_t j = 0; j < delta.size(); ++j) grad[j] += scale * u[j];
  }
  for (double& v : grad) v /= static_cast<double>(dirs.size());
  return grad;
}

// Standard RGF with u_i ~ N(0, I); exactly q+1 objective evaluations.
inline std::vector<double> rgf_grad(const ZooObjective& f, const std::vector<double>& delta,
                                    const ZooConfig& cfg, Rng& rng) {
  std::vector<std::vector<double>> dirs(static_cast<std::size_t>(cfg.q));
  for (auto& u : dirs) {
    u.resize(delta.size());
    for (double& v : u) v = gaussian(rng);
  }
  return rgf_estimate(f, delta, cfg.mu, dirs);
}

struct SpsaState {
  std::vector<double> momentum;

  void ensure(std::size_t n) {
    if (momentum.size() != n) momentum.assign(n, 0.0);
  }
};

// Two-sided SPSA estimate at the NAG look-ahead point, with a momentum
// correction: exactly 2 objective evaluations per call.
//   g = [f(d_l + mu*D) - f(d_l - mu*D)] / (2 mu) * D,  d_l = d + beta*m
//   m <- beta*m - mu*g;  d <- d + m
inline void spsa_gc_step(const ZooObjective& f, std::vector<double>& delta,
                         SpsaState& state, const ZooConfig& cfg, Rng& rng) {
  state.ensure(delta.size());
  const double beta = cfg.momentum;
  std::vector<double> lookahead(delta.size());
  for (std::size_t j = 0; j < delta.size(); ++j)
    lookahead[j] = delta[j] + beta * state.momentum[j];

  std::vector<double> dir(delta.size());
  for (double& v : dir) v = uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0;

  std::vector<double> plus(delta.size()), minus(delta.size());
  for (std::size_t j = 0; j < delta.size(); ++j) {
    plus[j] = lookahead[j] + cfg.mu * dir[j];
    minus[j] = lookahead[j] - cfg.mu * dir[j];
  }
  const double scale = (f(plus) - f(minus)) / (2.0 * cfg.mu);
  for (std::size_t j = 0; j < delta.size(); ++j) {
    const double g = scale * dir[j];
    state.momentum[j] = beta * state.momentum[j] - cfg.mu * g;
    delta[j] += state.momentum[j];
  }
}

// One generation of an isotropic (elite/population) evolution strategy with
// rank-based recombination; stands in for full covariance adaptation.
// Exactly `population` objective evaluations.
inline void iso_es_step(const ZooObjective& f, std::vector<double>& mean,
                        const ZooConfig& cfg, Rng& rng) {
  std::vector<std::pair<double, std::vector<double>>> scored;
  scored.reserve(static_cast<std::size_t>(cfg.population));
  for (int i = 0; i < cfg.population; ++i) {
    std::vector<double> cand(mean.size());
    for (std::size_t j = 0; j < mean.size(); ++j) cand[j] = mean[j] + cfg.sigma * gaussian(rng);
    const double fit = f(cand);
    scored.emplace_back(fit, std::move(cand));
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<double> next(mean.size(), 0.0);
  for (int e = 0; e < cfg.elite; ++e)
    for (std::size_t j = 0; j < mean.size(); ++j) next[j] += scored[static_cast<std::size_t>(e)].second[j];
  for (std::size_t j = 0; j < mean.size(); ++j) mean[j] = next[j] / cfg.elite;
}

// ---------------------------------------------------------------------------
// Online ZOO adaptation over a stream.
// ---------------------------------------------------------------------------

namespace detail {

struct EvalRecord {
  Tensor probs;
  double objective = 0.0;
};

inline double mean_entropy(const Tensor& probs) {
  double h = 0.0;
  for (int r = 0; r < probs.dim(0); ++r) h += host_entropy_row(probs, r);
  return h / probs.dim(0);
}

}  // namespace detail

// Gradient-free mirror of the engine loop. The objective per batch is the
// mean black-box prediction entropy on the prompted images; query
// accounting is exact per method. The per-batch prediction reuses an
// already-paid evaluation:
//   rgf     - the base-point evaluation f(delta) of the first estimate
//   spsa_gc - the first evaluation of the batch (smallest perturbation of
//             the current prompt), or a dedicated query when the budget is
//             odd or too small for an estimate
//   iso_es  - the best-fitness candidate of the first generation
inline RunTrace zoo_adapt_stream(Stream& stream, FramePrompt& prompt,
                                 BlackBoxClient& client, const ZooConfig& cfg,
                                 const std::string& ledger_tag = "zoo") {
  cfg.validate();
  RunTrace trace;
  Rng rng(cfg.seed);
  SpsaState spsa;
  int index = 0;
  while (auto maybe = stream.next()) {
    AdaptBatch batch = std::move(*maybe);
    BatchTrace bt;
    bt.index = index++;
    bt.ids = batch.ids;
    bt.metrics.batch_size = batch.size();

    int remaining = cfg.queries_per_sample;
    std::vector<detail::EvalRecord> evals;
    FramePrompt scratch = prompt;  // shares layout; params swapped per eval
    auto objective = [&](const std::vector<double>& params) {
      if (remaining <= 0)
        throw BudgetError("query budget exhausted mid-estimate");
      --remaining;
      scratch.params = params;
      auto res = client.classify(scratch.apply(batch.images), ledger_tag);
      detail::EvalRecord rec;
      rec.objective = detail::mean_entropy(res.probs);
      rec.probs = std::move(res.probs);
      evals.push_back(rec);
      bt.metrics.requests += batch.size();
      return rec.objective;
    };

    try {
      int prediction_index = 0;
      if (cfg.queries_per_sample == 1) {
        objective(prompt.params);  // inference only
      } else {
        switch (cfg.method) {
          case ZooMethod::rgf: {
            const int n_est = cfg.queries_per_sample / (cfg.q + 1);
            for (int e = 0; e < n_est; ++e) {
              auto grad = rgf_grad(objective, prompt.params, cfg, rng);
              for (std::size_t j = 0; j < grad.size(); ++j)
                prompt.params[j] -= cfg.mu * grad[j];
            }
            break;
          }
          case ZooMethod::spsa_gc: {
            int budget = cfg.queries_per_sample;
            if (budget % 2 == 1) {
              objective(prompt.params);  // dedicated prediction query
              --budget;
            }
            for (int e = 0; e < budget / 2; ++e)
              spsa_gc_step(objective, prompt.params, spsa, cfg, rng);
            break;
          }
          case ZooMethod::iso_es: {
            const int n_gen = cfg.queries_per_sample / cfg.population;
            for (int gen = 0; gen < n_gen; ++gen)
              iso_es_step(objective, prompt.params, cfg, rng);
            // elitist prediction: best candidate of the first generation
            for (int i = 1; i < cfg.population; ++i)
              if (evals[static_cast<std::size_t>(i)].objective <
                  evals[static_cast<std::size_t>(prediction_index)].objective)
                prediction_index = i;
            break;
          }
        }
      }
      const detail::EvalRecord& rec = evals.at(static_cast<std::size_t>(prediction_index));
      for (int i = 0; i < batch.size(); ++i)
        bt.pred_black.push_back(argmax_row(rec.probs, i));
      bt.pred_harmonized = bt.pred_black;
      bt.metrics.loss = rec.objective;
      bt.metrics.mean_entropy_b = rec.objective;
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
// TT-Aug: prediction averaging over augmented views (no optimization).
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor hflip(const Tensor& images, int h, int w, int c) {
  Tensor out = images;
  for (int r = 0; r < images.dim(0); ++r) {
    const double* src = images.row(r);
    double* dst = out.row(r);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch)
          dst[(y * w + x) * c + ch] = src[(y * w + (w - 1 - x)) * c + ch];
  }
  return out;
}

inline Tensor crop_resize(const Tensor& images, int h, int w, int c, double scale,
                          double off_y, double off_x) {
  Tensor out = images;
  const double crop_h = scale * h, crop_w = scale * w;
  const double y0 = off_y * (h - crop_h), x0 = off_x * (w - crop_w);
  for (int r = 0; r < images.dim(0); ++r) {
    const double* src = images.row(r);
    double* dst = out.row(r);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double sy = std::min(y0 + (crop_h - 1.0) * y / std::max(h - 1, 1), h - 1.0);
        const double sx = std::min(x0 + (crop_w - 1.0) * x / std::max(w - 1, 1), w - 1.0);
        const int iy = static_cast<int>(sy), ix = static_cast<int>(sx);
        const double fy = sy - iy, fx = sx - ix;
        const int iy1 = std::min(iy + 1, h - 1), ix1 = std::min(ix + 1, w - 1);
        for (int ch = 0; ch < c; ++ch) {
          const double v00 = src[(iy * w + ix) * c + ch];
          const double v01 = src[(iy * w + ix1) * c + ch];
          const double v10 = src[(iy1 * w + ix) * c + ch];
          const double v11 = src[(iy1 * w + ix1) * c + ch];
          dst[(y * w + x) * c + ch] = (1 - fy) * ((1 - fx) * v00 + fx * v01) +
                                      fy * ((1 - fx) * v10 + fx * v11);
        }
      }
  }
  return out;
}

}  // namespace detail

// View 0 is the identity; later views compose flip / crop-resize / noise,
// seeded. Ledger cost: n_views per image.
inline Tensor tt_aug_view(const Tensor& images, int h, int w, int c, int view,
                          std::uint64_t seed) {
  if (view == 0) return images;
  Rng rng(seed ^ (0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(view)));
  Tensor out = images;
  if (uniform(rng, 0.0, 1.0) < 0.5) out = detail::hflip(out, h, w, c);
  if (uniform(rng, 0.0, 1.0) < 0.7) {
    const double scale = uniform(rng, 0.8, 0.99);
    out = detail::crop_resize(out, h, w, c, scale, uniform(rng, 0.0, 1.0),
                              uniform(rng, 0.0, 1.0));
  }
  const double noise = uniform(rng, 0.0, 0.04);
  if (noise > 0.0)
    for (double& v : out.data) v = std::clamp(v + gaussian(rng, 0.0, noise), 0.0, 1.0);
  return out;
}

struct TtAugResult {
  std::vector<int> predictions;
  Tensor mean_probs;
  std::int64_t requests = 0;
};

inline TtAugResult tt_aug_predict(const AdaptBatch& batch, BlackBoxClient& client,
                                  int n_views, std::uint64_t seed,
                                  const std::string& ledger_tag = "tt_aug") {
  if (n_views < 1) throw ConfigError("tt_aug_predict: n_views must be >= 1");
  TtAugResult result;
  for (int v = 0; v < n_views; ++v) {
    Tensor view = tt_aug_view(batch.images, batch.h, batch.w, batch.c, v, seed);
    auto res = client.classify(view, ledger_tag);
    result.requests += batch.size();
    if (v == 0) {
      result.mean_probs = res.probs;
    } else {
      for (std::int64_t i = 0; i < res.probs.size(); ++i)
        result.mean_probs.data[static_cast<std::size_t>(i)] += res.probs.data[static_cast<std::size_t>(i)];
    }
  }
  for (double& v : result.mean_probs.data) v /= n_views;
  for (int i = 0; i < batch.size(); ++i)
    result.predictions.push_back(argmax_row(result.mean_probs, i));
  return result;
}

inline RunTrace tt_aug_stream(Stream& stream, BlackBoxClient& client, int n_views,
                              std::uint64_t seed, const std::string& ledger_tag = "tt_aug") {
  RunTrace trace;
  int index = 0;
  while (auto maybe = stream.next()) {
    AdaptBatch batch = std::move(*maybe);
    BatchTrace bt;
    bt.index = index++;
    bt.ids = batch.ids;
    bt.metrics.batch_size = batch.size();
    try {
      TtAugResult res = tt_aug_predict(batch, client, n_views,
                                       seed + static_cast<std::uint64_t>(bt.index), ledger_tag);
      bt.pred_black = res.predictions;
      bt.pred_harmonized = res.predictions;
      bt.metrics.requests = res.requests;
      bt.metrics.mean_entropy_b = detail::mean_entropy(res.mean_probs);
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
// Test-time knowledge distillation baseline: the black box teaches the
// local student on clean inputs; reported accuracy is the student's.
// ---------------------------------------------------------------------------

inline RunTrace distill_adapt(Stream& stream, MlpNet& student, BlackBoxClient& client,
                              double lr, const std::string& ledger_tag = "distill") {
  if (lr < 0.0) throw ConfigError("distill_adapt: lr must be >= 0");
  RunTrace trace;
  int index = 0;
  while (auto maybe = stream.next()) {
    AdaptBatch batch = std::move(*maybe);
    BatchTrace bt;
    bt.index = index++;
    bt.ids = batch.ids;
    bt.metrics.batch_size = batch.size();
    try {
      auto teacher = client.classify(batch.images, ledger_tag);
      bt.metrics.requests = batch.size();

      // student prediction before this batch's update
      Graph g;
      MlpNet::ParamNodes pn;
      Graph::NodeId probs =
          student.forward_on(g, g.constant(batch.images), MlpNet::TrackParams::all, &pn);
      const Tensor& student_probs = g.value(probs);
      for (int i = 0; i < batch.size(); ++i)
        bt.pred_black.push_back(argmax_row(student_probs, i));
      bt.pred_harmonized = bt.pred_black;

      // KL(teacher || student), mean over the batch
      Tensor log_teacher = teacher.probs;
      for (double& v : log_teacher.data) v = std::log(std::max(v, kProbFloor));
      Graph::NodeId kl = g.row_sums(g.mul(
          g.constant(teacher.probs),
          g.sub(g.constant(log_teacher), g.log_floor(probs, kProbFloor))));
      Graph::NodeId loss = g.scale(g.reduce_sum(kl), 1.0 / batch.size());
      bt.metrics.loss = g.value(loss).at(0);
      bt.metrics.mean_entropy_b = detail::mean_entropy(teacher.probs);
      bt.metrics.mean_entropy_s = detail::mean_entropy(student_probs);
      g.backward(loss);

      std::vector<Graph::NodeId> leaf_ids;
      for (std::size_t layer = 0; layer < student.layers.size(); ++layer) {
        leaf_ids.push_back(pn.weights[2 * layer]);
        leaf_ids.push_back(pn.weights[2 * layer + 1]);
        leaf_ids.push_back(pn.ln_gains[layer]);
        leaf_ids.push_back(pn.ln_shifts[layer]);
      }
      leaf_ids.push_back(pn.weights[2 * student.layers.size()]);
      leaf_ids.push_back(pn.weights[2 * student.layers.size() + 1]);
      auto params = student.all_params();
      for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor& gr = g.grad(leaf_ids[i]);
        for (std::int64_t j = 0; j < params[i]->size(); ++j)
          params[i]->data[static_cast<std::size_t>(j)] -= lr * gr.data[static_cast<std::size_t>(j)];
      }
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

}  // namespace bbta
