#pragma once

#include <vector>

#include "bbta/common.hpp"
#include "bbta/tensor.hpp"

namespace bbta {

// Flat indices of the border-frame pixels of an HxWxC image (row-major
// h, w, c layout), in deterministic scan order.
inline std::vector<int> frame_positions(int h, int w, int c, int f) {
  std::vector<int> pos;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const bool border = y < f || y >= h - f || x < f || x >= w - f;
      if (!border) continue;
      for (int ch = 0; ch < c; ++ch) pos.push_back((y * w + x) * c + ch);
    }
  return pos;
}

inline int frame_param_count(int h, int w, int c, int f) {
  return c * (h * w - (h - 2 * f) * (w - 2 * f));
}

// Additive visual prompt parameterized on a border frame of width f.
// Application never touches interior pixels.
struct FramePrompt {
  int h = 0, w = 0, c = 0, f = 0;
  std::vector<int> positions;   // flat image indices covered by the frame
  std::vector<double> params;   // one value per frame position

  FramePrompt() = default;
  FramePrompt(int height, int width, int channels, int frame_width)
      : h(height), w(width), c(channels), f(frame_width) {
    if (f <= 0 || 2 * f > std::min(h, w))
      throw ConfigError("FramePrompt: frame width must satisfy 0 < f <= min(H,W)/2");
    positions = frame_positions(h, w, c, f);
    params.assign(positions.size(), 0.0);
    if (static_cast<int>(params.size()) != frame_param_count(h, w, c, f))
      throw NumericalError("FramePrompt: parameter count does not match frame formula");
  }

  int param_count() const { return static_cast<int>(params.size()); }
  int image_dim() const { return h * w * c; }

  static FramePrompt init_gaussian(int h, int w, int c, int f, double sigma,
                                   std::uint64_t seed) {
    FramePrompt p(h, w, c, f);
    Rng rng(seed);
    for (double& v : p.params) v = sigma == 0.0 ? 0.0 : gaussian(rng, 0.0, sigma);
    return p;
  }

  // Expand params into a full image-sized delta (zeros in the interior).
  Tensor embed() const {
    Tensor delta({image_dim()});
    for (std::size_t i = 0; i < positions.size(); ++i)
      delta.at(positions[i]) = params[i];
    return delta;
  }

  // x' = x + delta, shared across the batch. Interior pixels bit-identical.
  Tensor apply(const Tensor& batch) const {
    if (batch.rank() != 2 || batch.dim(1) != image_dim())
      throw ConfigError("FramePrompt::apply: batch dimension mismatch");
    Tensor out = batch;
    const int n = batch.dim(0);
    for (int r = 0; r < n; ++r) {
      double* row = out.row(r);
      for (std::size_t i = 0; i < positions.size(); ++i)
        row[positions[i]] += params[i];
    }
    return out;
  }

  // Project a full image-shaped gradient (summed over the batch) onto the
  // frame parameters; interior entries are discarded.
  std::vector<double> scatter_grad(const Tensor& image_grad) const {
    std::vector<double> g(params.size(), 0.0);
    if (image_grad.rank() == 2) {
      if (image_grad.dim(1) != image_dim())
        throw ConfigError("scatter_grad: image dimension mismatch");
      for (int r = 0; r < image_grad.dim(0); ++r) {
        const double* row = image_grad.row(r);
        for (std::size_t i = 0; i < positions.size(); ++i) g[i] += row[positions[i]];
      }
    } else if (image_grad.size() == image_dim()) {
      for (std::size_t i = 0; i < positions.size(); ++i)
        g[i] = image_grad.at(positions[i]);
    } else {
      throw ConfigError("scatter_grad: gradient shape mismatch");
    }
    return g;
  }
};

}  // namespace bbta
