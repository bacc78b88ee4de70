#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "bbta/tensor.hpp"

namespace bbta {

// Reverse-mode tape over dense tensors. Nodes are created in topological
// order (ops only reference earlier nodes), so the reverse sweep is a single
// pass from the loss node down to node 0.
class Graph {
 public:
  using NodeId = int;

  NodeId leaf(Tensor value, bool requires_grad) {
    return push(std::move(value), requires_grad, {}, nullptr);
  }
  NodeId constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(NodeId id) const { return node(id).value; }

  // Gradient of the last backward() root with respect to node `id`.
  const Tensor& grad(NodeId id) {
    Node& n = node(id);
    if (!n.needs_grad)
      throw ConfigError("Graph::grad: node does not track gradients");
    if (n.grad.size() == 0) n.grad = Tensor(n.value.shape);
    return n.grad;
  }

  void zero_grads() {
    for (Node& n : nodes_) n.grad = Tensor();
  }

  // Reverse sweep from a scalar root. Accumulates into node grads; call
  // zero_grads() first when reusing the tape for a second root.
  void backward(NodeId root) {
    Node& r = node(root);
    if (r.value.size() != 1)
      throw ConfigError("Graph::backward: root must be scalar");
    std::vector<char> needed(nodes_.size(), 0);
    mark_needed(root, needed);
    if (r.grad.size() == 0) r.grad = Tensor(r.value.shape);
    r.grad.at(0) += 1.0;
    for (int id = root; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!needed[static_cast<std::size_t>(id)] || !n.back || n.grad.size() == 0) continue;
      n.back(*this, id);
    }
  }

  // ---- ops ----------------------------------------------------------------

  NodeId add(NodeId a, NodeId b) {
    check_same_shape(a, b, "add");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::int64_t i = 0; i < out.size(); ++i) out.data[static_cast<std::size_t>(i)] += vb.data[static_cast<std::size_t>(i)];
    return push(std::move(out), needs_grad(a) || needs_grad(b), {a, b},
                [](Graph& g, NodeId id) {
                  const Tensor& go = g.node(id).grad;
                  g.accumulate(g.node(id).parents[0], go, 1.0);
                  g.accumulate(g.node(id).parents[1], go, 1.0);
                });
  }

  NodeId sub(NodeId a, NodeId b) {
    check_same_shape(a, b, "sub");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::int64_t i = 0; i < out.size(); ++i) out.data[static_cast<std::size_t>(i)] -= vb.data[static_cast<std::size_t>(i)];
    return push(std::move(out), needs_grad(a) || needs_grad(b), {a, b},
                [](Graph& g, NodeId id) {
                  const Tensor& go = g.node(id).grad;
                  g.accumulate(g.node(id).parents[0], go, 1.0);
                  g.accumulate(g.node(id).parents[1], go, -1.0);
                });
  }

  NodeId mul(NodeId a, NodeId b) {
    check_same_shape(a, b, "mul");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::int64_t i = 0; i < out.size(); ++i) out.data[static_cast<std::size_t>(i)] *= vb.data[static_cast<std::size_t>(i)];
    return push(std::move(out), needs_grad(a) || needs_grad(b), {a, b},
                [](Graph& g, NodeId id) {
                  const Node& n = g.node(id);
                  const NodeId pa = n.parents[0], pb = n.parents[1];
                  if (Tensor* ga = g.grad_if_required(pa)) {
                    const Tensor& vb2 = g.value(pb);
                    for (std::int64_t i = 0; i < n.grad.size(); ++i)
                      ga->data[static_cast<std::size_t>(i)] += n.grad.data[static_cast<std::size_t>(i)] * vb2.data[static_cast<std::size_t>(i)];
                  }
                  if (Tensor* gb = g.grad_if_required(pb)) {
                    const Tensor& va = g.value(pa);
                    for (std::int64_t i = 0; i < n.grad.size(); ++i)
                      gb->data[static_cast<std::size_t>(i)] += n.grad.data[static_cast<std::size_t>(i)] * va.data[static_cast<std::size_t>(i)];
                  }
                });
  }

  NodeId scale(NodeId a, double c) {
    Tensor out = value(a);
    for (double& v : out.data) v *= c;
    return push(std::move(out), needs_grad(a), {a},
                [c](Graph& g, NodeId id) {
                  g.accumulate(g.node(id).parents[0], g.node(id).grad, c);
                });
  }

  NodeId exp_(NodeId a) {
    Tensor out = value(a);
    for (double& v : out.data) v = std::exp(v);
    return push(std::move(out), needs_grad(a), {a},
                [](Graph& g, NodeId id) {
                  const Node& n = g.node(id);
                  if (Tensor* ga = g.grad_if_required(n.parents[0]))
                    for (std::int64_t i = 0; i < n.grad.size(); ++i)
                      ga->data[static_cast<std::size_t>(i)] += n.grad.data[static_cast<std::size_t>(i)] * n.value.data[static_cast<std::size_t>(i)];
                });
  }

  NodeId tanh_(NodeId a) {
    Tensor out = value(a);
    for (double& v : out.data) v = std::tanh(v);
    return push(std::move(out), needs_grad(a), {a},
                [](Graph& g, NodeId id) {
                  const Node& n = g.node(id);
                  if (Tensor* ga = g.grad_if_required(n.parents[0]))
                    for (std::int64_t i = 0; i < n.grad.size(); ++i) {
                      const double y = n.value.data[static_cast<std::size_t>(i)];
                      ga->data[static_cast<std::size_t>(i)] += n.grad.data[static_cast<std::size_t>(i)] * (1.0 - y * y);
                    }
                });
  }

  // log(max(x, floor)); zero gradient inside the clamped region. NaN is
  // propagated, not clamped, so divergence stays visible downstream.
  NodeId log_floor(NodeId a, double floor) {
    Tensor out = value(a);
    for (double& v : out.data) {
      if (v > floor)
        v = std::log(v);
      else if (!std::isnan(v))
        v = std::log(floor);
    }
    return push(std::move(out), needs_grad(a), {a},
                [floor](Graph& g, NodeId id) {
                  const Node& n = g.node(id);
                  if (Tensor* ga = g.grad_if_required(n.parents[0])) {
                    const Tensor& x = g.value(n.parents[0]);
                    for (std::int64_t i = 0; i < n.grad.size(); ++i) {
                      const double xv = x.data[static_cast<std::size_t>(i)];
                      if (xv > floor) ga->data[static_cast<std::size_t>(i)] += n.grad.data[static_cast<std::size_t>(i)] / xv;
                    }
                  }
                });
  }

  // x[N,D] + v[D], v broadcast over rows.
  NodeId add_rowvec(NodeId x, NodeId v) {
    const Tensor& xv = value(x);
    const Tensor& vv = value(v);
    if (xv.rank() != 2 || vv.size() != xv.dim(1))
      throw ConfigError("add_rowvec: shape mismatch");
    Tensor out = xv;
    const int n = xv.dim(0), d = xv.dim(1);
    for (int r = 0; r < n; ++r) {
      double* orow = out.row(r);
      for (int c = 0; c < d; ++c) orow[c] += vv.at(c);
    }
    return push(std::move(out), needs_grad(x) || needs_grad(v), {x, v},
                [](Graph& g, NodeId id) {
                  const Node& nd = g.node(id);
                  const int n2 = nd.value.dim(0), d2 = nd.value.dim(1);
                  g.accumulate(nd.parents[0], nd.grad, 1.0);
                  if (Tensor* gv = g.grad_if_required(nd.parents[1]))
                    for (int r = 0; r < n2; ++r) {
                      const double* grow = nd.grad.row(r);
                      for (int c = 0; c < d2; ++c) gv->at(c) += grow[c];
                    }
                });
  }

  // x[N,I] * w[O,I]^T + b[O] -> [N,O].
  NodeId linear(NodeId x, NodeId w, NodeId b) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    const Tensor& bv = value(b);
    if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1) || bv.size() != wv.dim(0))
      throw ConfigError("linear: shape mismatch");
    Tensor out;
    matmul_bias(xv, wv, bv, out);
    return push(std::move(out), needs_grad(x) || needs_grad(w) || needs_grad(b), {x, w, b},
                [](Graph& g, NodeId id) {
                  const Node& nd = g.node(id);
                  const Tensor& xv2 = g.value(nd.parents[0]);
                  const Tensor& wv2 = g.value(nd.parents[1]);
                  const int n = xv2.dim(0), in = xv2.dim(1), out2 = wv2.dim(0);
                  if (Tensor* gx = g.grad_if_required(nd.parents[0])) {
                    for (int r = 0; r < n; ++r) {
                      const double* grow = nd.grad.row(r);
                      double* gxr = gx->row(r);
                      for (int j = 0; j < out2; ++j) {
                        const double gj = grow[j];
                        if (gj == 0.0) continue;
                        const double* wj = wv2.row(j);
                        for (int k = 0; k < in; ++k) gxr[k] += gj * wj[k];
                      }
                    }
                  }
                  if (Tensor* gw = g.grad_if_required(nd.parents[1])) {
                    for (int r = 0; r < n; ++r) {
                      const double* grow = nd.grad.row(r);
                      const double* xr = xv2.row(r);
                      for (int j = 0; j < out2; ++j) {
                        const double gj = grow[j];
                        if (gj == 0.0) continue;
                        double* gwj = gw->row(j);
                        for (int k = 0; k < in; ++k) gwj[k] += gj * xr[k];
                      }
                    }
                  }
                  if (Tensor* gb = g.grad_if_required(nd.parents[2])) {
                    for (int r = 0; r < n; ++r) {
                      const double* grow = nd.grad.row(r);
                      for (int j = 0; j < out2; ++j) gb->at(j) += grow[j];
                    }
                  }
                });
  }

  // Per-row layer normalization with learnable affine: gain * x_hat + shift.
  NodeId layer_norm(NodeId x, NodeId gain, NodeId shift, double eps = 1e-5) {
    const Tensor& xv = value(x);
    const Tensor& gv = value(gain);
    const Tensor& sv = value(shift);
    if (xv.rank() != 2 || gv.size() != xv.dim(1) || sv.size() != xv.dim(1))
      throw ConfigError("layer_norm: shape mismatch");
    const int n = xv.dim(0), d = xv.dim(1);
    Tensor out({n, d});
    for (int r = 0; r < n; ++r) {
      const double* xr = xv.row(r);
      double* orow = out.row(r);
      double mean = 0.0;
      for (int c = 0; c < d; ++c) mean += xr[c];
      mean /= d;
      double var = 0.0;
      for (int c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
      var /= d;
      const double inv = 1.0 / std::sqrt(var + eps);
      for (int c = 0; c < d; ++c)
        orow[c] = gv.at(c) * ((xr[c] - mean) * inv) + sv.at(c);
    }
    return push(std::move(out), needs_grad(x) || needs_grad(gain) || needs_grad(shift),
                {x, gain, shift}, [eps](Graph& g, NodeId id) {
                  const Node& nd = g.node(id);
                  const Tensor& xv2 = g.value(nd.parents[0]);
                  const Tensor& gv2 = g.value(nd.parents[1]);
                  const int n2 = xv2.dim(0), d2 = xv2.dim(1);
                  Tensor* gx = g.grad_if_required(nd.parents[0]);
                  Tensor* gg = g.grad_if_required(nd.parents[1]);
                  Tensor* gs = g.grad_if_required(nd.parents[2]);
                  std::vector<double> xhat(static_cast<std::size_t>(d2));
                  std::vector<double> dxhat(static_cast<std::size_t>(d2));
                  for (int r = 0; r < n2; ++r) {
                    const double* xr = xv2.row(r);
                    const double* grow = nd.grad.row(r);
                    double mean = 0.0;
                    for (int c = 0; c < d2; ++c) mean += xr[c];
                    mean /= d2;
                    double var = 0.0;
                    for (int c = 0; c < d2; ++c) var += (xr[c] - mean) * (xr[c] - mean);
                    var /= d2;
                    const double inv = 1.0 / std::sqrt(var + eps);
                    for (int c = 0; c < d2; ++c) xhat[static_cast<std::size_t>(c)] = (xr[c] - mean) * inv;
                    if (gg || gs) {
                      for (int c = 0; c < d2; ++c) {
                        if (gg) gg->at(c) += grow[c] * xhat[static_cast<std::size_t>(c)];
                        if (gs) gs->at(c) += grow[c];
                      }
                    }
                    if (gx) {
                      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                      for (int c = 0; c < d2; ++c) {
                        dxhat[static_cast<std::size_t>(c)] = grow[c] * gv2.at(c);
                        mean_dxhat += dxhat[static_cast<std::size_t>(c)];
                        mean_dxhat_xhat += dxhat[static_cast<std::size_t>(c)] * xhat[static_cast<std::size_t>(c)];
                      }
                      mean_dxhat /= d2;
                      mean_dxhat_xhat /= d2;
                      double* gxr = gx->row(r);
                      for (int c = 0; c < d2; ++c)
                        gxr[c] += inv * (dxhat[static_cast<std::size_t>(c)] - mean_dxhat -
                                         xhat[static_cast<std::size_t>(c)] * mean_dxhat_xhat);
                    }
                  }
                });
  }

  NodeId softmax_rows(NodeId x) {
    const Tensor& xv = value(x);
    if (xv.rank() != 2) throw ConfigError("softmax_rows: rank-2 input required");
    const int n = xv.dim(0), k = xv.dim(1);
    Tensor out({n, k});
    for (int r = 0; r < n; ++r) {
      const double* xr = xv.row(r);
      double* orow = out.row(r);
      double mx = xr[0];
      for (int c = 1; c < k; ++c) mx = std::max(mx, xr[c]);
      double sum = 0.0;
      for (int c = 0; c < k; ++c) {
        orow[c] = std::exp(xr[c] - mx);
        sum += orow[c];
      }
      for (int c = 0; c < k; ++c) orow[c] /= sum;
    }
    return push(std::move(out), needs_grad(x), {x},
                [](Graph& g, NodeId id) {
                  const Node& nd = g.node(id);
                  if (Tensor* gx = g.grad_if_required(nd.parents[0])) {
                    const int n2 = nd.value.dim(0), k2 = nd.value.dim(1);
                    for (int r = 0; r < n2; ++r) {
                      const double* y = nd.value.row(r);
                      const double* grow = nd.grad.row(r);
                      double gdoty = 0.0;
                      for (int c = 0; c < k2; ++c) gdoty += grow[c] * y[c];
                      double* gxr = gx->row(r);
                      for (int c = 0; c < k2; ++c) gxr[c] += y[c] * (grow[c] - gdoty);
                    }
                  }
                });
  }

  // y[r,c] = x[r,c] * w[r]; w is a per-row weight vector of length N.
  NodeId scale_rows(NodeId x, NodeId w) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    if (xv.rank() != 2 || wv.size() != xv.dim(0))
      throw ConfigError("scale_rows: shape mismatch");
    const int n = xv.dim(0), k = xv.dim(1);
    Tensor out({n, k});
    for (int r = 0; r < n; ++r) {
      const double* xr = xv.row(r);
      double* orow = out.row(r);
      for (int c = 0; c < k; ++c) orow[c] = xr[c] * wv.at(r);
    }
    return push(std::move(out), needs_grad(x) || needs_grad(w), {x, w},
                [](Graph& g, NodeId id) {
                  const Node& nd = g.node(id);
                  const Tensor& xv2 = g.value(nd.parents[0]);
                  const Tensor& wv2 = g.value(nd.parents[1]);
                  const int n2 = xv2.dim(0), k2 = xv2.dim(1);
                  if (Tensor* gx = g.grad_if_required(nd.parents[0]))
                    for (int r = 0; r < n2; ++r) {
                      const double* grow = nd.grad.row(r);
                      double* gxr = gx->row(r);
                      for (int c = 0; c < k2; ++c) gxr[c] += grow[c] * wv2.at(r);
                    }
                  if (Tensor* gw = g.grad_if_required(nd.parents[1]))
                    for (int r = 0; r < n2; ++r) {
                      const double* grow = nd.grad.row(r);
                      const double* xr = xv2.row(r);
                      double s = 0.0;
                      for (int c = 0; c < k2; ++c) s += grow[c] * xr[c];
                      gw->at(r) += s;
                    }
                });
  }

  // y[r] = x[r, idx[r]].
  NodeId pick_rows(NodeId x, std::vector<int> idx) {
    const Tensor& xv = value(x);
    if (xv.rank() != 2 || static_cast<int>(idx.size()) != xv.dim(0))
      throw ConfigError("pick_rows: shape mismatch");
    const int n = xv.dim(0);
    Tensor out({n});
    for (int r = 0; r < n; ++r) out.at(r) = xv.at(r, idx[static_cast<std::size_t>(r)]);
    return push(std::move(out), needs_grad(x), {x},
                [idx = std::move(idx)](Graph& g, NodeId id) {
                  const Node& nd = g.node(id);
                  if (Tensor* gx = g.grad_if_required(nd.parents[0]))
                    for (int r = 0; r < nd.value.dim(0); ++r)
                      gx->at(r, idx[static_cast<std::size_t>(r)]) += nd.grad.at(r);
                });
  }

  // Row sums of a [N,K] tensor -> [N].
  NodeId row_sums(NodeId x) {
    const Tensor& xv = value(x);
    if (xv.rank() != 2) throw ConfigError("row_sums: rank-2 input required");
    const int n = xv.dim(0), k = xv.dim(1);
    Tensor out({n});
    for (int r = 0; r < n; ++r) {
      const double* xr = xv.row(r);
      double s = 0.0;
      for (int c = 0; c < k; ++c) s += xr[c];
      out.at(r) = s;
    }
    return push(std::move(out), needs_grad(x), {x},
                [](Graph& g, NodeId id) {
                  const Node& nd = g.node(id);
                  if (Tensor* gx = g.grad_if_required(nd.parents[0])) {
                    const int k2 = gx->dim(1);
                    for (int r = 0; r < nd.value.dim(0); ++r) {
                      double* gxr = gx->row(r);
                      for (int c = 0; c < k2; ++c) gxr[c] += nd.grad.at(r);
                    }
                  }
                });
  }

  NodeId reduce_sum(NodeId x) {
    const Tensor& xv = value(x);
    double s = 0.0;
    for (double v : xv.data) s += v;
    return push(Tensor({1}, {s}), needs_grad(x), {x},
                [](Graph& g, NodeId id) {
                  const Node& nd = g.node(id);
                  if (Tensor* gx = g.grad_if_required(nd.parents[0]))
                    for (double& v : gx->data) v += nd.grad.at(0);
                });
  }

  NodeId reduce_mean(NodeId x) {
    const Tensor& xv = value(x);
    double s = 0.0;
    for (double v : xv.data) s += v;
    const double inv = 1.0 / static_cast<double>(xv.size());
    return push(Tensor({1}, {s * inv}), needs_grad(x), {x},
                [inv](Graph& g, NodeId id) {
                  const Node& nd = g.node(id);
                  if (Tensor* gx = g.grad_if_required(nd.parents[0]))
                    for (double& v : gx->data) v += nd.grad.at(0) * inv;
                });
  }

  // Scatter a flat parameter vector into a length-D buffer at `positions`;
  // remaining entries are zero. Inverse of gathering a frame from an image.
  NodeId scatter_positions(NodeId params, std::vector<int> positions, int d) {
    const Tensor& pv = value(params);
    if (pv.size() != static_cast<std::int64_t>(positions.size()))
      throw ConfigError("scatter_positions: parameter count mismatch");
    Tensor out({d});
    for (std::size_t i = 0; i < positions.size(); ++i)
      out.at(positions[i]) = pv.data[i];
    return push(std::move(out), needs_grad(params), {params},
                [positions = std::move(positions)](Graph& g, NodeId id) {
                  const Node& nd = g.node(id);
                  if (Tensor* gp = g.grad_if_required(nd.parents[0]))
                    for (std::size_t i = 0; i < positions.size(); ++i)
                      gp->data[i] += nd.grad.at(positions[i]);
                });
  }

  // ---- internals ------------------------------------------------------

  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    std::vector<NodeId> parents;
    std::function<void(Graph&, NodeId)> back;
  };

  Node& node(NodeId id) {
    if (id < 0 || id >= static_cast<NodeId>(nodes_.size()))
      throw ConfigError("Graph: node id not on this tape");
    return nodes_[static_cast<std::size_t>(id)];
  }
  const Node& node(NodeId id) const {
    if (id < 0 || id >= static_cast<NodeId>(nodes_.size()))
      throw ConfigError("Graph: node id not on this tape");
    return nodes_[static_cast<std::size_t>(id)];
  }
  bool needs_grad(NodeId id) const { return node(id).needs_grad; }
  std::size_t node_count() const { return nodes_.size(); }

  Tensor* grad_if_required(NodeId id) {
    Node& n = node(id);
    if (!n.needs_grad) return nullptr;
    if (n.grad.size() == 0) n.grad = Tensor(n.value.shape);
    return &n.grad;
  }

 private:
  NodeId push(Tensor value, bool req, std::vector<NodeId> parents,
              std::function<void(Graph&, NodeId)> back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = req;
    n.parents = std::move(parents);
    if (req) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  void check_same_shape(NodeId a, NodeId b, const char* op) const {
    if (!value(a).same_shape(value(b)))
      throw ConfigError(std::string(op) + ": shape mismatch");
  }

  void accumulate(NodeId target, const Tensor& g, double factor) {
    if (Tensor* gt = grad_if_required(target))
      for (std::int64_t i = 0; i < g.size(); ++i)
        gt->data[static_cast<std::size_t>(i)] += factor * g.data[static_cast<std::size_t>(i)];
  }

  void mark_needed(NodeId root, std::vector<char>& needed) const {
    std::vector<NodeId> stack{root};
    while (!stack.empty()) {
      NodeId id = stack.back();
      stack.pop_back();
      if (needed[static_cast<std::size_t>(id)]) continue;
      needed[static_cast<std::size_t>(id)] = 1;
      for (NodeId p : node(id).parents)
        if (node(p).needs_grad) stack.push_back(p);
    }
  }

  // deque: node references stay valid while ops keep getting recorded
  std::deque<Node> nodes_;
};

// -sum_k p_k * log(max(p_k, floor)) per row -> [N]. Entropy of each row of a
// probability matrix, differentiable through `probs`.
inline Graph::NodeId entropy_rows(Graph& g, Graph::NodeId probs,
                                  double floor = 1e-12) {
  Graph::NodeId lg = g.log_floor(probs, floor);
  return g.scale(g.row_sums(g.mul(probs, lg)), -1.0);
}

}  // namespace bbta
