#pragma once

#include <string>
#include <vector>

#include "bbta/graph.hpp"
#include "bbta/prob.hpp"
#include "bbta/tensor.hpp"

namespace bbta {

// Multilayer perceptron over flattened pixels: each hidden layer is
// linear -> layer norm (learnable affine) -> tanh; the head is linear ->
// softmax. Serves as both the steering net and the simulator's black-box
// net, differing only in width/depth.
struct MlpNet {
  struct HiddenLayer {
    Tensor weight;    // [out, in]
    Tensor bias;      // [out]
    Tensor ln_gain;   // [out]
    Tensor ln_shift;  // [out]
  };

  int input_dim = 0;
  int class_count = 0;
  std::vector<HiddenLayer> layers;
  Tensor head_weight;  // [K, hidden]
  Tensor head_bias;    // [K]
  std::uint64_t init_seed = 0;

  static MlpNet init(int input_dim, std::vector<int> hidden, int class_count,
                     std::uint64_t seed) {
    if (input_dim < 1 || class_count < 2 || hidden.empty())
      throw ConfigError("MlpNet: bad architecture");
    MlpNet net;
    net.input_dim = input_dim;
    net.class_count = class_count;
    net.init_seed = seed;
    Rng rng(seed);
    int in = input_dim;
    for (int width : hidden) {
      HiddenLayer l;
      const double scale = std::sqrt(2.0 / (in + width));
      l.weight = Tensor::gaussian({width, in}, rng, 0.0, scale);
      l.bias = Tensor::zeros({width});
      l.ln_gain = Tensor::full({width}, 1.0);
      l.ln_shift = Tensor::zeros({width});
      net.layers.push_back(std::move(l));
      in = width;
    }
    const double scale = std::sqrt(2.0 / (in + class_count));
    net.head_weight = Tensor::gaussian({class_count, in}, rng, 0.0, scale);
    net.head_bias = Tensor::zeros({class_count});
    return net;
  }

  std::vector<int> hidden_widths() const {
    std::vector<int> w;
    for (const auto& l : layers) w.push_back(l.weight.dim(0));
    return w;
  }

  // Plain forward: per-sample softmax probabilities, no tape.
  Tensor forward_probs(const Tensor& batch) const {
    if (batch.rank() != 2 || batch.dim(1) != input_dim)
      throw ConfigError("MlpNet::forward_probs: input width mismatch");
    Tensor h = batch;
    Tensor z;
    for (const auto& l : layers) {
      matmul_bias(h, l.weight, l.bias, z);
      const int n = z.dim(0), d = z.dim(1);
      for (int r = 0; r < n; ++r) {
        double* row = z.row(r);
        double mean = 0.0;
        for (int c = 0; c < d; ++c) mean += row[c];
        mean /= d;
        double var = 0.0;
        for (int c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
        var /= d;
        const double inv = 1.0 / std::sqrt(var + 1e-5);
        for (int c = 0; c < d; ++c)
          row[c] = std::tanh(l.ln_gain.at(c) * ((row[c] - mean) * inv) + l.ln_shift.at(c));
      }
      h = z;
    }
    Tensor logits;
    matmul_bias(h, head_weight, head_bias, logits);
    const int n = logits.dim(0), k = logits.dim(1);
    for (int r = 0; r < n; ++r) {
      double* row = logits.row(r);
      double mx = row[0];
      for (int c = 1; c < k; ++c) mx = std::max(mx, row[c]);
      double sum = 0.0;
      for (int c = 0; c < k; ++c) {
        row[c] = std::exp(row[c] - mx);
        sum += row[c];
      }
      for (int c = 0; c < k; ++c) row[c] /= sum;
    }
    return logits;
  }

  // Tape node ids of parameters registered by forward_on.
  struct ParamNodes {
    std::vector<Graph::NodeId> weights;   // dense weights + biases, layer order
    std::vector<Graph::NodeId> ln_gains;  // one per hidden layer
    std::vector<Graph::NodeId> ln_shifts;
  };

  // Which parameter groups become gradient-tracking leaves on the tape.
  enum class TrackParams { none, norm_affine, all };

  // Records the forward pass on `g` starting from input node `x`
  // ([N, input_dim]); returns the softmax probabilities node.
  Graph::NodeId forward_on(Graph& g, Graph::NodeId x,
                           TrackParams track = TrackParams::none,
                           ParamNodes* out_params = nullptr) const {
    const bool track_all = track == TrackParams::all;
    const bool track_norm = track_all || track == TrackParams::norm_affine;
    Graph::NodeId h = x;
    for (const auto& l : layers) {
      Graph::NodeId w = g.leaf(l.weight, track_all);
      Graph::NodeId b = g.leaf(l.bias, track_all);
      Graph::NodeId gain = g.leaf(l.ln_gain, track_norm);
      Graph::NodeId shift = g.leaf(l.ln_shift, track_norm);
      if (out_params) {
        if (track_all) {
          out_params->weights.push_back(w);
          out_params->weights.push_back(b);
        }
        out_params->ln_gains.push_back(gain);
        out_params->ln_shifts.push_back(shift);
      }
      h = g.tanh_(g.layer_norm(g.linear(h, w, b), gain, shift));
    }
    Graph::NodeId w = g.leaf(head_weight, track_all);
    Graph::NodeId b = g.leaf(head_bias, track_all);
    if (out_params && track_all) {
      out_params->weights.push_back(w);
      out_params->weights.push_back(b);
    }
    return g.softmax_rows(g.linear(h, w, b));
  }

  // Flat views over every trainable tensor, layer order. Used by the
  // source trainer and checkpoint I/O.
  std::vector<Tensor*> all_params() {
    std::vector<Tensor*> ps;
    for (auto& l : layers) {
      ps.push_back(&l.weight);
      ps.push_back(&l.bias);
      ps.push_back(&l.ln_gain);
      ps.push_back(&l.ln_shift);
    }
    ps.push_back(&head_weight);
    ps.push_back(&head_bias);
    return ps;
  }
  std::vector<const Tensor*> all_params() const {
    std::vector<const Tensor*> ps;
    for (const auto& l : layers) {
      ps.push_back(&l.weight);
      ps.push_back(&l.bias);
      ps.push_back(&l.ln_gain);
      ps.push_back(&l.ln_shift);
    }
    ps.push_back(&head_weight);
    ps.push_back(&head_bias);
    return ps;
  }
};

struct TrainConfig {
  int epochs = 12;
  int batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  bool verbose = false;
  // Light input jitter (noise / brightness / contrast), e.g. for a steering
  // net that must stay informative under shift.
  bool augment = false;
};

struct TrainStats {
  double final_loss = 0.0;
  double train_accuracy = 0.0;
};

namespace detail {

inline void jitter_batch(Tensor& x, Rng& rng) {
  const double noise = uniform(rng, 0.0, 0.08);
  const double bright = uniform(rng, -0.12, 0.12);
  const double contrast = uniform(rng, 0.6, 1.25);
  const int n = x.dim(0), d = x.dim(1);
  for (int r = 0; r < n; ++r) {
    double* row = x.row(r);
    double mean = 0.0;
    for (int c = 0; c < d; ++c) mean += row[c];
    mean /= d;
    for (int c = 0; c < d; ++c) {
      double v = (row[c] - mean) * contrast + mean + bright + gaussian(rng, 0.0, noise);
      row[c] = std::clamp(v, 0.0, 1.0);
    }
  }
}

}  // namespace detail

// Cross-entropy SGD training on a labeled source set. Plain momentum SGD;
// aborts with a diagnostic if the loss diverges.
inline TrainStats train_source(MlpNet& net, const Tensor& images,
                               const std::vector<int>& labels,
                               const TrainConfig& cfg) {
  const int n = images.dim(0);
  if (n == 0 || static_cast<int>(labels.size()) != n)
    throw ConfigError("train_source: image/label count mismatch");
  TrainStats stats;
  if (cfg.epochs == 0) {
    Tensor probs = net.forward_probs(images);
    int correct = 0;
    for (int r = 0; r < n; ++r) {
      int arg = 0;
      for (int c = 1; c < net.class_count; ++c)
        if (probs.at(r, c) > probs.at(r, arg)) arg = c;
      if (arg == labels[static_cast<std::size_t>(r)]) ++correct;
    }
    stats.train_accuracy = static_cast<double>(correct) / n;
    return stats;
  }

  Rng rng(cfg.seed);
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  std::vector<Tensor> velocity;
  for (Tensor* p : net.all_params()) velocity.emplace_back(Tensor(p->shape));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    int batches = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int bs = std::min(cfg.batch_size, n - start);
      Tensor x({bs, net.input_dim});
      std::vector<int> y(static_cast<std::size_t>(bs));
      for (int i = 0; i < bs; ++i) {
        const int src = order[static_cast<std::size_t>(start + i)];
        std::copy(images.row(src), images.row(src) + net.input_dim, x.row(i));
        y[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(src)];
      }
      if (cfg.augment) detail::jitter_batch(x, rng);

      Graph g;
      Graph::NodeId xin = g.constant(std::move(x));
      MlpNet::ParamNodes pn;
      Graph::NodeId probs = net.forward_on(g, xin, MlpNet::TrackParams::all, &pn);
      Graph::NodeId logp = g.log_floor(probs, kProbFloor);
      Graph::NodeId nll = g.scale(g.reduce_mean(g.pick_rows(logp, y)), -1.0);
      const double loss = g.value(nll).at(0);
      if (!std::isfinite(loss))
        throw NumericalError("train_source: loss diverged (NaN/Inf) at epoch " +
                             std::to_string(epoch));
      epoch_loss += loss;
      ++batches;
      g.backward(nll);

      // Leaf order in forward_on matches all_params() order.
      std::vector<Graph::NodeId> leaf_ids;
      {
        std::size_t li = 0;
        for (std::size_t layer = 0; layer < net.layers.size(); ++layer) {
          leaf_ids.push_back(pn.weights[2 * layer]);
          leaf_ids.push_back(pn.weights[2 * layer + 1]);
          leaf_ids.push_back(pn.ln_gains[layer]);
          leaf_ids.push_back(pn.ln_shifts[layer]);
          (void)li;
        }
        leaf_ids.push_back(pn.weights[2 * net.layers.size()]);
        leaf_ids.push_back(pn.weights[2 * net.layers.size() + 1]);
      }
      auto params = net.all_params();
      for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor& gr = g.grad(leaf_ids[i]);
        Tensor& vel = velocity[i];
        Tensor& p = *params[i];
        for (std::int64_t j = 0; j < p.size(); ++j) {
          vel.data[static_cast<std::size_t>(j)] =
              cfg.momentum * vel.data[static_cast<std::size_t>(j)] - cfg.lr * gr.data[static_cast<std::size_t>(j)];
          p.data[static_cast<std::size_t>(j)] += vel.data[static_cast<std::size_t>(j)];
        }
      }
    }
    stats.final_loss = epoch_loss / std::max(batches, 1);
  }

  Tensor probs = net.forward_probs(images);
  int correct = 0;
  for (int r = 0; r < n; ++r) {
    int arg = 0;
    for (int c = 1; c < net.class_count; ++c)
      if (probs.at(r, c) > probs.at(r, arg)) arg = c;
    if (arg == labels[static_cast<std::size_t>(r)]) ++correct;
  }
  stats.train_accuracy = static_cast<double>(correct) / n;
  return stats;
}

inline int argmax_row(const Tensor& probs, int row) {
  int arg = 0;
  for (int c = 1; c < probs.dim(1); ++c)
    if (probs.at(row, c) > probs.at(row, arg)) arg = c;
  return arg;
}

}  // namespace bbta
