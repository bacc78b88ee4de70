#include <doctest.h>

#include "bbta/graph.hpp"
#include "testutil.hpp"

using namespace bbta;
using testutil::check_gradients;

namespace {

Tensor rand_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = uniform(rng, lo, hi);
  return t;
}

// Wrap an op into a scalar loss with a cotangent that is FIXED across
// rebuilds, so finite differences and the analytic pass see the same loss.
using OpFn = std::function<Graph::NodeId(Graph&, const std::vector<Graph::NodeId>&)>;

testutil::BuildFn with_fixed_cotangent(const OpFn& op, const std::vector<Tensor>& inputs,
                                       Rng& rng) {
  Graph scratch;
  std::vector<Graph::NodeId> ids;
  for (const Tensor& t : inputs) ids.push_back(scratch.leaf(t, false));
  Tensor cot(scratch.value(op(scratch, ids)).shape);
  for (double& v : cot.data) v = uniform(rng, -1.0, 1.0);
  return [op, cot](Graph& g, const std::vector<Graph::NodeId>& in) {
    return g.reduce_sum(g.mul(op(g, in), g.constant(cot)));
  };
}

}  // namespace

TEST_CASE("gradcheck: elementwise primitives") {
  Rng rng(101);
  auto run = [&](const char* name, const OpFn& op, std::vector<Tensor> inputs) {
    INFO(name);
    auto rep = check_gradients(inputs, with_fixed_cotangent(op, inputs, rng), rng, 12);
    CHECK(rep.max_rel < 1e-4);
  };

  run("add", [&](Graph& g, const std::vector<Graph::NodeId>& in) {
    return g.add(in[0], in[1]);
  }, {rand_tensor(rng, {3, 4}), rand_tensor(rng, {3, 4})});

  run("sub", [&](Graph& g, const std::vector<Graph::NodeId>& in) {
    return g.sub(in[0], in[1]);
  }, {rand_tensor(rng, {3, 4}), rand_tensor(rng, {3, 4})});

  run("mul", [&](Graph& g, const std::vector<Graph::NodeId>& in) {
    return g.mul(in[0], in[1]);
  }, {rand_tensor(rng, {3, 4}), rand_tensor(rng, {3, 4})});

  run("scale", [&](Graph& g, const std::vector<Graph::NodeId>& in) {
    return g.scale(in[0], -2.5);
  }, {rand_tensor(rng, {2, 5})});

  run("exp", [&](Graph& g, const std::vector<Graph::NodeId>& in) {
    return g.exp_(in[0]);
  }, {rand_tensor(rng, {3, 3})});

  run("tanh", [&](Graph& g, const std::vector<Graph::NodeId>& in) {
    return g.tanh_(in[0]);
  }, {rand_tensor(rng, {3, 3}, -2.0, 2.0)});

  run("log_floor", [&](Graph& g, const std::vector<Graph::NodeId>& in) {
    return g.log_floor(in[0], 1e-12);
  }, {rand_tensor(rng, {3, 3}, 0.2, 2.0)});
}

TEST_CASE("gradcheck: structured primitives") {
  Rng rng(202);
  auto run = [&](const char* name, const OpFn& op, std::vector<Tensor> inputs) {
    INFO(name);
    auto rep = check_gradients(inputs, with_fixed_cotangent(op, inputs, rng), rng, 12);
    CHECK(rep.max_rel < 1e-4);
  };

  run("add_rowvec", [&](Graph& g, const std::vector<Graph::NodeId>& in) {
    return g.add_rowvec(in[0], in[1]);
  }, {rand_tensor(rng, {4, 6}), rand_tensor(rng, {6})});

  run("linear", [&](Graph& g, const std::vector<Graph::NodeId>& in) {
    return g.linear(in[0], in[1], in[2]);
  }, {rand_tensor(rng, {3, 5}), rand_tensor(rng, {4, 5}), rand_tensor(rng, {4})});

  run("layer_norm", [&](Graph& g, const std::vector<Graph::NodeId>& in) {
    return g.layer_norm(in[0], in[1], in[2]);
  }, {rand_tensor(rng, {4, 7}), rand_tensor(rng, {7}, 0.5, 1.5), rand_tensor(rng, {7})});

  run("softmax_rows", [&](Graph& g, const std::vector<Graph::NodeId>& in) {
    return g.softmax_rows(in[0]);
  }, {rand_tensor(rng, {4, 5}, -2.0, 2.0)});

  run("scale_rows", [&](Graph& g, const std::vector<Graph::NodeId>& in) {
    return g.scale_rows(in[0], in[1]);
  }, {rand_tensor(rng, {4, 5}), rand_tensor(rng, {4})});

  run("pick_rows", [&](Graph& g, const std::vector<Graph::NodeId>& in) {
    return g.pick_rows(in[0], {2, 0, 1, 2});
  }, {rand_tensor(rng, {4, 3})});

  run("row_sums", [&](Graph& g, const std::vector<Graph::NodeId>& in) {
    return g.row_sums(in[0]);
  }, {rand_tensor(rng, {4, 5})});

  run("reduce_sum", [&](Graph& g, const std::vector<Graph::NodeId>& in) {
    return g.reduce_sum(in[0]);
  }, {rand_tensor(rng, {3, 4})});

  run("reduce_mean", [&](Graph& g, const std::vector<Graph::NodeId>& in) {
    return g.reduce_mean(in[0]);
  }, {rand_tensor(rng, {3, 4})});

  run("scatter_positions", [&](Graph& g, const std::vector<Graph::NodeId>& in) {
    return g.scatter_positions(in[0], {1, 3, 5, 6}, 8);
  }, {rand_tensor(rng, {4})});

  run("entropy_rows", [&](Graph& g, const std::vector<Graph::NodeId>& in) {
    return entropy_rows(g, g.softmax_rows(in[0]));
  }, {rand_tensor(rng, {4, 6}, -2.0, 2.0)});
}

TEST_CASE("backward: sum of inputs gives all-ones gradient") {
  Graph g;
  Rng rng(5);
  Tensor x = rand_tensor(rng, {3, 4});
  Graph::NodeId xi = g.leaf(x, true);
  g.backward(g.reduce_sum(xi));
  for (double v : g.grad(xi).data) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("backward: errors and reuse") {
  Graph g;
  Graph::NodeId a = g.leaf(Tensor({2}, {1.0, 2.0}), true);
  Graph::NodeId c = g.constant(Tensor({2}, {3.0, 4.0}));
  Graph::NodeId out = g.mul(a, c);

  CHECK_THROWS_AS(g.backward(out), ConfigError);          // non-scalar root
  CHECK_THROWS_AS((void)g.grad(c), ConfigError);          // constant tracks no grad
  CHECK_THROWS_AS((void)g.value(999), ConfigError);       // not on the tape

  Graph::NodeId s = g.reduce_sum(out);
  g.backward(s);
  CHECK(g.grad(a).at(0) == doctest::Approx(3.0));
  CHECK(g.grad(a).at(1) == doctest::Approx(4.0));

  // second backward accumulates unless grads are reset
  g.zero_grads();
  g.backward(s);
  CHECK(g.grad(a).at(0) == doctest::Approx(3.0));
}

TEST_CASE("tape reverse sweep visits nodes once: diamond graph") {
  Graph g;
  Graph::NodeId x = g.leaf(Tensor({1}, {2.0}), true);
  Graph::NodeId a = g.scale(x, 3.0);
  Graph::NodeId out = g.reduce_sum(g.mul(a, a));  // (3x)^2, d/dx = 18x = 36
  g.backward(out);
  CHECK(g.grad(x).at(0) == doctest::Approx(36.0).epsilon(1e-12));
}

TEST_CASE("graph values are deterministic across identical builds") {
  Rng rng1(9), rng2(9);
  Tensor t1 = rand_tensor(rng1, {4, 4});
  Tensor t2 = rand_tensor(rng2, {4, 4});
  Graph g1, g2;
  Graph::NodeId o1 = g1.softmax_rows(g1.tanh_(g1.leaf(t1, false)));
  Graph::NodeId o2 = g2.softmax_rows(g2.tanh_(g2.leaf(t2, false)));
  CHECK(g1.value(o1).data == g2.value(o2).data);
}
