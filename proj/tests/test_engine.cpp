#include <doctest.h>

#include "bbta/engine.hpp"
#include "bbta/report.hpp"
#include "testutil.hpp"

using namespace bbta;

namespace {

constexpr int kH = 4, kW = 4, kC = 1, kDim = 16, kK = 4;

struct Rig {
  MlpNet steering = MlpNet::init(kDim, {12}, kK, 11);
  std::shared_ptr<ServiceCore> core =
      std::make_shared<ServiceCore>(MlpNet::init(kDim, {16, 16}, kK, 22));
  InProcessClient client{core};
  EngineConfig cfg;
  EmaState ema;
  AdamWState opt;

  Rig() {
    cfg.filter = FilterParams{0.9 * std::log(static_cast<double>(kK)), 0.6, 0.4, 50.0};
    cfg.lr_delta = 0.01;
    cfg.lr_theta = 1e-3;
  }
};

AdaptBatch make_batch(Rng& rng, int n, std::int64_t id0 = 0) {
  AdaptBatch b;
  b.h = kH;
  b.w = kW;
  b.c = kC;
  b.images = Tensor({n, kDim});
  for (double& v : b.images.data) v = uniform(rng, 0.0, 1.0);
  for (int i = 0; i < n; ++i) b.ids.push_back(id0 + i);
  return b;
}

std::vector<Tensor> theta_snapshot(const MlpNet& net) {
  std::vector<Tensor> snap;
  for (const auto& l : net.layers) {
    snap.push_back(l.ln_gain);
    snap.push_back(l.ln_shift);
  }
  return snap;
}

}  // namespace

TEST_CASE("step: filtered batch zeroes entropy terms, theta frozen, KL still drives delta") {
  Rig rig;
  // shrink the head so outputs sit near uniform: H(p_S) ~ ln K, far above a
  // tiny margin, while gradients still flow through the hidden stack
  for (double& v : rig.steering.head_weight.data) v *= 0.05;
  for (double& v : rig.steering.head_bias.data) v = 0.0;
  rig.cfg.filter.epsilon = 0.01;

  Rng rng(7);
  AdaptBatch batch = make_batch(rng, 6);
  FramePrompt prompt = FramePrompt::init_gaussian(kH, kW, kC, 1, 0.1, 3);
  const std::vector<double> before = prompt.params;
  const auto theta_before = theta_snapshot(rig.steering);

  StepOutcome out = step(batch, prompt, rig.steering, rig.client, rig.cfg, rig.ema, rig.opt);

  CHECK(out.metrics.reliable_fraction == 0.0);
  CHECK(out.metrics.harmon_term == 0.0);
  CHECK(out.metrics.steer_term == 0.0);
  CHECK(out.metrics.consist_term > 0.0);
  CHECK(prompt.params != before);  // KL gradient moved the prompt
  const auto theta_after = theta_snapshot(rig.steering);
  for (std::size_t i = 0; i < theta_after.size(); ++i)
    CHECK(theta_after[i].data == theta_before[i].data);  // bitwise frozen
}

TEST_CASE("step: lambda=0, alpha=1 reduces the delta gradient to the steering entropy path") {
  Rig rig;
  rig.cfg.filter.alpha = 1.0;
  rig.cfg.filter.lambda = 0.0;
  rig.cfg.filter.epsilon = 10.0;  // gates open
  rig.cfg.use_diversity_gate = false;

  Rng rng(9);
  AdaptBatch batch = make_batch(rng, 5);
  FramePrompt prompt = FramePrompt::init_gaussian(kH, kW, kC, 1, 0.05, 4);

  // expected gradient: mean over batch of (w_H + w_S) * H(p_S(x')), by hand
  Graph g;
  Graph::NodeId delta = g.leaf(Tensor({prompt.param_count()}, prompt.params), true);
  Graph::NodeId xp = g.add_rowvec(g.constant(batch.images),
                                  g.scatter_positions(delta, prompt.positions, kDim));
  Graph::NodeId ps = rig.steering.forward_on(g, xp);
  Tensor wvec({batch.size()});
  for (int i = 0; i < batch.size(); ++i) {
    double h = 0.0;
    for (int c = 0; c < kK; ++c) {
      const double p = g.value(ps).at(i, c);
      if (p > kProbFloor) h -= p * std::log(p);
    }
    const double w = reliability_weight(h, rig.cfg.filter.epsilon);
    wvec.at(i) = 2.0 * w;  // w_H + w_S with the gate open
  }
  Graph::NodeId loss = g.scale(
      g.reduce_sum(g.mul(g.constant(wvec), entropy_rows(g, ps))), 1.0 / batch.size());
  g.backward(loss);
  std::vector<double> expected_grad = g.grad(delta).data;

  FramePrompt expected_prompt = prompt;
  AdamWState expected_opt;
  expected_opt.apply(expected_prompt.params, expected_grad, rig.cfg);

  step(batch, prompt, rig.steering, rig.client, rig.cfg, rig.ema, rig.opt);
  for (std::size_t i = 0; i < prompt.params.size(); ++i)
    CHECK(prompt.params[i] == doctest::Approx(expected_prompt.params[i]).epsilon(1e-12));
}

TEST_CASE("step: delta frozen bitwise at lr 0") {
  Rig rig;
  rig.cfg.lr_delta = 0.0;
  Rng rng(13);
  AdaptBatch batch = make_batch(rng, 4);
  FramePrompt prompt = FramePrompt::init_gaussian(kH, kW, kC, 1, 0.05, 5);
  const std::vector<double> before = prompt.params;
  step(batch, prompt, rig.steering, rig.client, rig.cfg, rig.ema, rig.opt);
  CHECK(prompt.params == before);
}

TEST_CASE("step: weight detachment makes gradients proportional in the weights") {
  // replicate the engine's loss with detached weights w and 2w: gradients
  // must scale exactly, with no path through the weights
  Rig rig;
  Rng rng(17);
  AdaptBatch batch = make_batch(rng, 3);
  FramePrompt prompt = FramePrompt::init_gaussian(kH, kW, kC, 1, 0.05, 6);

  auto grad_with_weight_scale = [&](double scale_w) {
    Graph g;
    Graph::NodeId delta = g.leaf(Tensor({prompt.param_count()}, prompt.params), true);
    Graph::NodeId xp = g.add_rowvec(g.constant(batch.images),
                                    g.scatter_positions(delta, prompt.positions, kDim));
    Graph::NodeId ps = rig.steering.forward_on(g, xp);
    Tensor w = Tensor::full({batch.size()}, 0.7 * scale_w);
    Graph::NodeId loss = g.scale(
        g.reduce_sum(g.mul(g.constant(w), entropy_rows(g, ps))), 1.0 / batch.size());
    g.backward(loss);
    return g.grad(delta).data;
  };
  const auto g1 = grad_with_weight_scale(1.0);
  const auto g2 = grad_with_weight_scale(2.0);
  for (std::size_t i = 0; i < g1.size(); ++i)
    CHECK(g2[i] == doctest::Approx(2.0 * g1[i]).epsilon(1e-12));
}

TEST_CASE("step: perturbing detached p_B leaves the steering-path gradient unchanged") {
  Rig rig;
  Rng rng(19);
  AdaptBatch batch = make_batch(rng, 3);
  FramePrompt prompt = FramePrompt::init_gaussian(kH, kW, kC, 1, 0.05, 7);
  Tensor prompted = prompt.apply(batch.images);
  Tensor p_b = rig.core->net_for_analysis().forward_probs(prompted);

  auto steering_path_grad = [&](const Tensor& pb_const) {
    (void)pb_const;  // constant by construction: it never enters these terms
    Graph g;
    Graph::NodeId delta = g.leaf(Tensor({prompt.param_count()}, prompt.params), true);
    Graph::NodeId xp = g.add_rowvec(g.constant(batch.images),
                                    g.scatter_positions(delta, prompt.positions, kDim));
    Graph::NodeId ps = rig.steering.forward_on(g, xp);
    Tensor clean = rig.steering.forward_probs(batch.images);
    Tensor log_clean = clean;
    for (double& v : log_clean.data) v = std::log(std::max(v, kProbFloor));
    Graph::NodeId kl = g.row_sums(g.mul(
        g.constant(clean), g.sub(g.constant(log_clean), g.log_floor(ps, kProbFloor))));
    Graph::NodeId loss = g.scale(
        g.reduce_sum(g.add(entropy_rows(g, ps), g.scale(kl, rig.cfg.filter.lambda))),
        1.0 / batch.size());
    g.backward(loss);
    return g.grad(delta).data;
  };

  Tensor perturbed = p_b;
  for (double& v : perturbed.data) v = std::min(1.0, v + 0.01);
  CHECK(steering_path_grad(p_b) == steering_path_grad(perturbed));
}

TEST_CASE("step: filtering monotonicity at zero prompt (summed loss)") {
  Rig rig;
  rig.cfg.filter.epsilon = 1.0;  // tight enough that some samples filter out
  rig.cfg.use_diversity_gate = false;
  Rng rng(23);
  AdaptBatch batch = make_batch(rng, 6);
  FramePrompt zero = FramePrompt::init_gaussian(kH, kW, kC, 1, 0.0, 8);

  // find a filtered (high-entropy) sample
  Tensor ps = rig.steering.forward_probs(batch.images);
  int victim = -1;
  for (int i = 0; i < batch.size() && victim < 0; ++i) {
    double h = 0.0;
    for (int c = 0; c < kK; ++c)
      if (ps.at(i, c) > kProbFloor) h -= ps.at(i, c) * std::log(ps.at(i, c));
    if (h >= rig.cfg.filter.epsilon) victim = i;
  }
  REQUIRE(victim >= 0);

  auto run_once = [&](const AdaptBatch& b) {
    FramePrompt p = zero;
    MlpNet net = rig.steering;
    EmaState ema;
    AdamWState opt;
    StepOutcome out = step(b, p, net, rig.client, rig.cfg, ema, opt);
    return out.metrics.loss * b.size();  // summed loss
  };

  AdaptBatch reduced;
  reduced.h = kH;
  reduced.w = kW;
  reduced.c = kC;
  reduced.images = Tensor({batch.size() - 1, kDim});
  int at = 0;
  for (int i = 0; i < batch.size(); ++i) {
    if (i == victim) continue;
    std::copy(batch.images.row(i), batch.images.row(i) + kDim, reduced.images.row(at));
    reduced.ids.push_back(batch.ids[static_cast<std::size_t>(i)]);
    ++at;
  }
  CHECK(run_once(batch) == doctest::Approx(run_once(reduced)).epsilon(1e-12));
}

TEST_CASE("step: EMA updates only from samples passing both gates") {
  Rig rig;
  rig.cfg.filter.epsilon = 10.0;  // everything is reliable
  rig.cfg.filter.d = 0.999;
  rig.cfg.lr_delta = 0.0;  // freeze state so the repeat batch is bit-identical
  rig.cfg.lr_theta = 0.0;
  Rng rng(29);
  AdaptBatch batch = make_batch(rng, 1);
  // four copies of one sample: all p_S rows identical
  AdaptBatch rep;
  rep.h = kH;
  rep.w = kW;
  rep.c = kC;
  rep.images = Tensor({4, kDim});
  for (int i = 0; i < 4; ++i) {
    std::copy(batch.images.row(0), batch.images.row(0) + kDim, rep.images.row(i));
    rep.ids.push_back(i);
  }
  FramePrompt prompt = FramePrompt::init_gaussian(kH, kW, kC, 1, 0.0, 9);

  CHECK_FALSE(rig.ema.initialized);
  StepOutcome first = step(rep, prompt, rig.steering, rig.client, rig.cfg, rig.ema, rig.opt);
  CHECK(first.metrics.diverse_fraction == 1.0);  // sentinel passes everything
  REQUIRE(rig.ema.initialized);
  const std::vector<double> bar = rig.ema.p_bar.values();

  // same batch again: every p_S row is exactly parallel to the EMA, the
  // diversity gate blocks them all, and the EMA stays put
  StepOutcome out = step(rep, prompt, rig.steering, rig.client, rig.cfg, rig.ema, rig.opt);
  CHECK(out.metrics.diverse_fraction == 0.0);
  CHECK(rig.ema.p_bar.values() == bar);
}

TEST_CASE("run_stream: empty stream gives an empty report and zero queries") {
  Rig rig;
  Stream empty({});
  FramePrompt prompt = FramePrompt::init_gaussian(kH, kW, kC, 1, 0.02, 10);
  RunTrace trace = run_stream(empty, prompt, rig.steering, rig.client, rig.cfg);
  CHECK(trace.batches.empty());
  CHECK(trace.total_requests == 0);
  CHECK(rig.core->ledger().total_requests == 0);
}

TEST_CASE("run_stream: single query per sample; adaptation off equals source") {
  Rig rig;
  rig.cfg.lr_delta = 0.0;
  rig.cfg.lr_theta = 0.0;
  rig.cfg.filter.lambda = 0.0;

  Rng rng(31);
  std::vector<AdaptBatch> batches;
  for (int b = 0; b < 5; ++b) batches.push_back(make_batch(rng, 8, b * 8));
  std::vector<AdaptBatch> batches_copy = batches;

  FramePrompt zero = FramePrompt::init_gaussian(kH, kW, kC, 1, 0.0, 11);
  Stream st(std::move(batches));
  RunTrace adapted = run_stream(st, zero, rig.steering, rig.client, rig.cfg, "beta");
  CHECK(adapted.total_requests == 40);
  CHECK(rig.core->ledger().total_requests == 40);

  Stream st2(std::move(batches_copy));
  RunTrace source = run_inference_stream(st2, rig.client, "source");
  REQUIRE(source.batches.size() == adapted.batches.size());
  for (std::size_t b = 0; b < source.batches.size(); ++b)
    CHECK(source.batches[b].pred_black == adapted.batches[b].pred_black);
}

TEST_CASE("run_stream: transport failures become skipped batches, ledger untouched") {
  Rig rig;
  Rng rng(37);
  std::vector<AdaptBatch> batches;
  for (int b = 0; b < 3; ++b) batches.push_back(make_batch(rng, 4, b * 4));
  Stream st(std::move(batches));

  class FlakyClient final : public BlackBoxClient {
   public:
    explicit FlakyClient(BlackBoxClient& inner) : inner_(inner) {}
    Result classify(const Tensor& images, const std::string& tag) override {
      if (++calls_ == 2) throw TransportError("injected outage");
      return inner_.classify(images, tag);
    }
    int class_count() const override { return inner_.class_count(); }

   private:
    BlackBoxClient& inner_;
    int calls_ = 0;
  };

  FlakyClient flaky(rig.client);
  FramePrompt prompt = FramePrompt::init_gaussian(kH, kW, kC, 1, 0.02, 12);
  RunTrace trace = run_stream(st, prompt, rig.steering, flaky, rig.cfg);
  REQUIRE(trace.batches.size() == 3);
  CHECK_FALSE(trace.batches[0].skipped);
  CHECK(trace.batches[1].skipped);
  CHECK_FALSE(trace.batches[2].skipped);
  CHECK(trace.skipped_samples == 4);
  CHECK(trace.total_requests == 8);
  CHECK(rig.core->ledger().total_requests == 8);
}

TEST_CASE("run_stream: request cap cuts the run into an exact prefix") {
  Rig rig;
  Rng rng(41);
  std::vector<AdaptBatch> batches;
  for (int b = 0; b < 6; ++b) batches.push_back(make_batch(rng, 4, b * 4));
  Stream st(std::move(batches));
  FramePrompt prompt = FramePrompt::init_gaussian(kH, kW, kC, 1, 0.02, 13);
  RunTrace trace = run_stream(st, prompt, rig.steering, rig.client, rig.cfg, "beta", 1, 10);
  CHECK(trace.budget_exhausted);
  CHECK(trace.total_requests == 8);  // two full batches fit under cap 10
  CHECK(trace.batches.size() == 2);
}

TEST_CASE("run_stream: fixed seeds reproduce the scored report byte for byte") {
  auto run_once = [] {
    Dataset ds = gen_source(4, 40, kH, kW, 3, 99);
    MlpNet steering = MlpNet::init(ds.image_dim(), {10}, 4, 1);
    auto core = std::make_shared<ServiceCore>(MlpNet::init(ds.image_dim(), {12}, 4, 2));
    InProcessClient client(core);
    EngineConfig cfg;
    cfg.filter = FilterParams{0.9 * std::log(4.0), 0.6, 0.4, 50.0};
    Dataset shifted = corrupt(ds, {CorruptionKind::contrast, 5, 5});
    Stream st = make_stream(shifted, StreamMode::iid, 8, 7);
    FramePrompt prompt = FramePrompt::init_gaussian(kH, kW, 3, 1, 0.02, 3);
    RunTrace trace = run_stream(st, prompt, steering, client, cfg);
    RunReport rep = score(trace, ds.label_table(), "beta", "cfghash", 7);
    return report_to_json(rep).dump();
  };
  CHECK(run_once() == run_once());
}

TEST_CASE("multi-query toggle: repeating the step multiplies the ledger exactly") {
  Rig rig;
  Rng rng(59);
  std::vector<AdaptBatch> batches;
  for (int b = 0; b < 2; ++b) batches.push_back(make_batch(rng, 4, b * 4));
  Stream st(std::move(batches));
  FramePrompt prompt = FramePrompt::init_gaussian(kH, kW, kC, 1, 0.02, 17);
  RunTrace trace = run_stream(st, prompt, rig.steering, rig.client, rig.cfg, "beta", 3);
  CHECK(trace.total_requests == 24);  // 2 batches x 4 images x 3 repeats
  CHECK(rig.core->ledger().total_requests == 24);
}

TEST_CASE("grad similarity: endpoints and the symmetric-net case") {
  Rng rng(43);
  AdaptBatch batch = make_batch(rng, 4);
  FramePrompt prompt = FramePrompt::init_gaussian(kH, kW, kC, 1, 0.02, 14);

  MlpNet steering = MlpNet::init(kDim, {12}, 2, 51);
  MlpNet target = MlpNet::init(kDim, {12, 12}, 2, 52);
  WhiteboxHandle handle(target);

  auto rows = grad_similarity_analysis(batch, prompt, steering, handle, {0.0, 0.5, 1.0});
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].cos_beta_ideal == 0.0);  // no steering path at alpha=0
  CHECK(rows[2].cos_beta_ideal == doctest::Approx(1.0).epsilon(1e-12));

  // identical steering and target nets: the ideal gradient is symmetric in
  // the two paths, so the one-sided proxy stays positively aligned
  WhiteboxHandle same(steering);
  auto sym = grad_similarity_analysis(batch, prompt, steering, same, {0.5});
  CHECK(sym[0].cos_beta_ideal > 0.0);
}

TEST_CASE("grad similarity: white-box prompt gradient matches finite differences") {
  Rng rng(47);
  AdaptBatch batch = make_batch(rng, 3);
  FramePrompt prompt = FramePrompt::init_gaussian(kH, kW, kC, 1, 0.05, 15);
  MlpNet target = MlpNet::init(kDim, {10}, kK, 53);

  Graph g;
  Graph::NodeId delta = g.leaf(Tensor({prompt.param_count()}, prompt.params), true);
  Graph::NodeId xp = g.add_rowvec(g.constant(batch.images),
                                  g.scatter_positions(delta, prompt.positions, kDim));
  Graph::NodeId pb = target.forward_on(g, xp);
  Graph::NodeId loss = g.scale(g.reduce_sum(entropy_rows(g, pb)), 1.0 / batch.size());
  g.backward(loss);
  const Tensor& analytic = g.grad(delta);

  const double step_size = 1e-5;
  for (int rep = 0; rep < 8; ++rep) {
    const int c = static_cast<int>(uniform(rng, 0.0, 1.0) * prompt.param_count());
    auto eval = [&](double delta_c) {
      FramePrompt p = prompt;
      p.params[static_cast<std::size_t>(c)] += delta_c;
      Tensor probs = target.forward_probs(p.apply(batch.images));
      double h = 0.0;
      for (int i = 0; i < batch.size(); ++i)
        for (int cc = 0; cc < kK; ++cc)
          if (probs.at(i, cc) > kProbFloor) h -= probs.at(i, cc) * std::log(probs.at(i, cc));
      return h / batch.size();
    };
    const double fd = (eval(step_size) - eval(-step_size)) / (2 * step_size);
    const double an = analytic.at(c);
    CHECK(std::fabs(an - fd) / std::max({std::fabs(an), std::fabs(fd), 1e-6}) < 1e-4);
  }
}

TEST_CASE("report: csv and json carry ledger snapshots per row") {
  Rig rig;
  Rng rng(53);
  std::vector<AdaptBatch> batches;
  for (int b = 0; b < 3; ++b) batches.push_back(make_batch(rng, 4, b * 4));
  LabelTable labels;
  for (int i = 0; i < 12; ++i) labels[i] = i % kK;
  Stream st(std::move(batches));
  FramePrompt prompt = FramePrompt::init_gaussian(kH, kW, kC, 1, 0.02, 16);
  RunTrace trace = run_stream(st, prompt, rig.steering, rig.client, rig.cfg);
  RunReport rep = score(trace, labels, "beta", "h", 1);
  CHECK(rep.total_samples == 12);
  CHECK(rep.rows.size() == 3);
  CHECK(rep.rows[2].requests_total == 12);
  CHECK(rep.total_cost() == doctest::Approx(12 * 0.0032));

  nlohmann::json j = report_to_json(rep);
  CHECK(j["totals"]["requests"] == 12);
  CHECK(j["batches"].size() == 3);
  const std::string csv = report_to_csv(rep);
  CHECK(csv.find("requests_total") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);  // header + 3 rows
}
