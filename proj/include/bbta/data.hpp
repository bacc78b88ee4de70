#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "bbta/common.hpp"
#include "bbta/tensor.hpp"

namespace bbta {

// Batch as seen by adaptation code: images and opaque sample ids only.
// Labels travel on a separate evaluation channel (LabelTable) and are joined
// by id after the run.
struct AdaptBatch {
  Tensor images;  // [N, H*W*C], values nominally in [0,1] before prompting
  std::vector<std::int64_t> ids;
  int h = 0, w = 0, c = 0;

  int size() const { return images.dim(0); }
};

using LabelTable = std::unordered_map<std::int64_t, int>;

struct Dataset {
  Tensor images;  // [N, H*W*C]
  std::vector<int> labels;
  std::vector<std::int64_t> ids;
  int h = 0, w = 0, c = 0, class_count = 0;

  int size() const { return images.dim(0); }
  int image_dim() const { return h * w * c; }

  LabelTable label_table() const {
    LabelTable t;
    for (std::size_t i = 0; i < ids.size(); ++i) t[ids[i]] = labels[i];
    return t;
  }
};

// ---------------------------------------------------------------------------
// Procedural source data: colored geometric shapes on textured backgrounds.
// Class identity = (shape kind, palette) pair; balanced and seed-exact.
// ---------------------------------------------------------------------------

namespace detail {

inline double shape_sdf(int kind, double dx, double dy, double r) {
  const double ax = std::fabs(dx), ay = std::fabs(dy);
  switch (kind) {
    case 0:  // disk
      return std::sqrt(dx * dx + dy * dy) - r;
    case 1:  // square
      return std::max(ax, ay) - r;
    case 2: {  // triangle (upward)
      const double d1 = dy - r * 0.8;
      const double d2 = 0.866 * ax - 0.5 * (dy - r * 0.8) - r * 0.85;
      return std::max(d1 - r * 1.6, d2) + r * 0.25;
    }
    case 3:  // ring
      return std::fabs(std::sqrt(dx * dx + dy * dy) - r * 0.75) - r * 0.3;
    default: {  // cross
      const double band = r * 0.4;
      return std::min(std::max(ax - band, ay - r), std::max(ay - band, ax - r));
    }
  }
}

inline void palette_color(int palette, int kind, double* rgb) {
  // two palettes x five shapes = 10 visually distinct classes
  static const double base[2][3] = {{0.95, 0.35, 0.20}, {0.20, 0.45, 0.95}};
  const double tint = 0.12 * kind;
  rgb[0] = std::clamp(base[palette][0] - tint * 0.5, 0.0, 1.0);
  rgb[1] = std::clamp(base[palette][1] + tint, 0.0, 1.0);
  rgb[2] = std::clamp(base[palette][2] + tint * 0.3, 0.0, 1.0);
}

}  // namespace detail

// Balanced, procedurally rendered K-class dataset. Deterministic per seed.
// id_base offsets the sample ids so distinct datasets never collide.
inline Dataset gen_source(int k, int n, int h, int w, int c, std::uint64_t seed,
                          std::int64_t id_base = 0, bool* truncated = nullptr) {
  if (k < 2) throw ConfigError("gen_source: K must be >= 2");
  if (k > 10) throw ConfigError("gen_source: at most 10 procedural classes");
  if (c != 3) throw ConfigError("gen_source: C must be 3");
  const int per_class = n / k;
  const int used = per_class * k;
  if (truncated) *truncated = used != n;

  Dataset ds;
  ds.h = h;
  ds.w = w;
  ds.c = c;
  ds.class_count = k;
  ds.images = Tensor({used, h * w * c});
  ds.labels.resize(static_cast<std::size_t>(used));
  ds.ids.resize(static_cast<std::size_t>(used));

  Rng rng(seed);
  for (int i = 0; i < used; ++i) {
    const int label = i % k;
    const int kind = label % 5;
    const int palette = label / 5;
    ds.labels[static_cast<std::size_t>(i)] = label;
    ds.ids[static_cast<std::size_t>(i)] = id_base + i;

    // low-frequency textured background
    const double fx = uniform(rng, 0.5, 2.0), fy = uniform(rng, 0.5, 2.0);
    const double phase = uniform(rng, 0.0, 6.28);
    const double bg = uniform(rng, 0.30, 0.55);
    const double amp = uniform(rng, 0.05, 0.12);

    const double cx = w / 2.0 + uniform(rng, -w / 8.0, w / 8.0);
    const double cy = h / 2.0 + uniform(rng, -h / 8.0, h / 8.0);
    const double radius = uniform(rng, 0.22, 0.34) * std::min(h, w);
    double rgb[3];
    detail::palette_color(palette, kind, rgb);

    double* row = ds.images.row(i);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double tex = bg + amp * std::sin(fx * 6.28 * x / w + phase) *
                                    std::cos(fy * 6.28 * y / h);
        const double sd = detail::shape_sdf(kind, x - cx, y - cy, radius);
        const double alpha = std::clamp(0.5 - sd / 1.5, 0.0, 1.0);  // soft edge
        for (int ch = 0; ch < 3; ++ch) {
          const double noise = uniform(rng, -0.02, 0.02);
          const double v = alpha * rgb[ch] + (1.0 - alpha) * tex + noise;
          row[(y * w + x) * 3 + ch] = std::clamp(v, 0.0, 1.0);
        }
      }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Corruption operators emulating distribution shift. Deterministic per
// (images, spec); severity scales distortion magnitude; output in [0,1].
// ---------------------------------------------------------------------------

enum class CorruptionKind { gaussian_noise, contrast, gaussian_blur, brightness, pixelate };

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 5;  // 1..5; 0 is the identity convention
  std::uint64_t seed = 0;

  std::string name() const {
    switch (kind) {
      case CorruptionKind::gaussian_noise: return "gaussian_noise";
      case CorruptionKind::contrast: return "contrast";
      case CorruptionKind::gaussian_blur: return "gaussian_blur";
      case CorruptionKind::brightness: return "brightness";
      case CorruptionKind::pixelate: return "pixelate";
    }
    return "?";
  }
};

inline CorruptionKind corruption_kind_from_name(const std::string& name) {
  if (name == "gaussian_noise") return CorruptionKind::gaussian_noise;
  if (name == "contrast") return CorruptionKind::contrast;
  if (name == "gaussian_blur") return CorruptionKind::gaussian_blur;
  if (name == "brightness") return CorruptionKind::brightness;
  if (name == "pixelate") return CorruptionKind::pixelate;
  throw ConfigError("unknown corruption kind: " + name);
}

// "kind:severity:seed" as given on the CLI.
inline CorruptionSpec parse_corruption(const std::string& triple) {
  const auto p1 = triple.find(':');
  const auto p2 = triple.find(':', p1 == std::string::npos ? p1 : p1 + 1);
  if (p1 == std::string::npos || p2 == std::string::npos)
    throw ConfigError("corruption spec must be kind:severity:seed, got " + triple);
  CorruptionSpec spec;
  spec.kind = corruption_kind_from_name(triple.substr(0, p1));
  spec.severity = std::stoi(triple.substr(p1 + 1, p2 - p1 - 1));
  spec.seed = static_cast<std::uint64_t>(std::stoull(triple.substr(p2 + 1)));
  return spec;
}

namespace detail {

inline void separable_blur(const double* src, double* dst, int h, int w, int c,
                           double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (double& v : kernel) v /= sum;

  std::vector<double> tmp(static_cast<std::size_t>(h * w * c));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int xx = std::clamp(x + i, 0, w - 1);
          acc += kernel[static_cast<std::size_t>(i + radius)] * src[(y * w + xx) * c + ch];
        }
        tmp[static_cast<std::size_t>((y * w + x) * c + ch)] = acc;
      }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int yy = std::clamp(y + i, 0, h - 1);
          acc += kernel[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>((yy * w + x) * c + ch)];
        }
        dst[(y * w + x) * c + ch] = acc;
      }
}

}  // namespace detail

// Apply a corruption to every image. Labels/ids are untouched by contract.
inline Tensor corrupt_images(const Tensor& images, int h, int w, int c,
                             const CorruptionSpec& spec) {
  if (spec.severity == 0) return images;  // identity convention
  if (spec.severity < 0 || spec.severity > 5)
    throw ConfigError("corrupt: severity must be in 0..5");
  const int n = images.dim(0);
  Tensor out = images;

  const int s = spec.severity - 1;
  static const double noise_sigma[5] = {0.04, 0.08, 0.13, 0.19, 0.26};
  static const double contrast_scale[5] = {0.75, 0.55, 0.40, 0.25, 0.12};
  static const double blur_sigma[5] = {0.5, 0.75, 1.1, 1.5, 2.0};
  static const double bright_shift[5] = {0.08, 0.15, 0.22, 0.30, 0.38};
  static const int pixel_block[5] = {2, 3, 4, 6, 8};

  for (int r = 0; r < n; ++r) {
    double* row = out.row(r);
    Rng rng(spec.seed * 0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(r) + 1);
    switch (spec.kind) {
      case CorruptionKind::gaussian_noise: {
        for (int i = 0; i < h * w * c; ++i)
          row[i] = std::clamp(row[i] + gaussian(rng, 0.0, noise_sigma[s]), 0.0, 1.0);
        break;
      }
      case CorruptionKind::contrast: {
        for (int ch = 0; ch < c; ++ch) {
          double mean = 0.0;
          for (int p = 0; p < h * w; ++p) mean += row[p * c + ch];
          mean /= h * w;
          for (int p = 0; p < h * w; ++p)
            row[p * c + ch] =
                std::clamp((row[p * c + ch] - mean) * contrast_scale[s] + mean, 0.0, 1.0);
        }
        break;
      }
      case CorruptionKind::gaussian_blur: {
        std::vector<double> src(row, row + h * w * c);
        detail::separable_blur(src.data(), row, h, w, c, blur_sigma[s]);
        for (int i = 0; i < h * w * c; ++i) row[i] = std::clamp(row[i], 0.0, 1.0);
        break;
      }
      case CorruptionKind::brightness: {
        for (int i = 0; i < h * w * c; ++i)
          row[i] = std::clamp(row[i] + bright_shift[s], 0.0, 1.0);
        break;
      }
      case CorruptionKind::pixelate: {
        const int b = pixel_block[s];
        for (int by = 0; by < h; by += b)
          for (int bx = 0; bx < w; bx += b)
            for (int ch = 0; ch < c; ++ch) {
              double acc = 0.0;
              int cnt = 0;
              for (int y = by; y < std::min(by + b, h); ++y)
                for (int x = bx; x < std::min(bx + b, w); ++x) {
                  acc += row[(y * w + x) * c + ch];
                  ++cnt;
                }
              acc /= cnt;
              for (int y = by; y < std::min(by + b, h); ++y)
                for (int x = bx; x < std::min(bx + b, w); ++x)
                  row[(y * w + x) * c + ch] = acc;
            }
        break;
      }
    }
  }
  return out;
}

inline Dataset corrupt(const Dataset& ds, const CorruptionSpec& spec) {
  Dataset out = ds;
  out.images = corrupt_images(ds.images, ds.h, ds.w, ds.c, spec);
  return out;
}

// Mean absolute per-pixel distortion; the module's monotonicity metric.
inline double distortion(const Tensor& a, const Tensor& b) {
  double d = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i)
    d += std::fabs(a.data[static_cast<std::size_t>(i)] - b.data[static_cast<std::size_t>(i)]);
  return d / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// Stream constructors. Streams are strictly one-pass: each batch is yielded
// once, and iterating again is an error.
// ---------------------------------------------------------------------------

enum class StreamMode { iid, label_imbalance, continual };

inline StreamMode stream_mode_from_name(const std::string& name) {
  if (name == "iid") return StreamMode::iid;
  if (name == "label_imbalance") return StreamMode::label_imbalance;
  if (name == "continual") return StreamMode::continual;
  throw ConfigError("unknown stream mode: " + name);
}

class Stream {
 public:
  explicit Stream(std::vector<AdaptBatch> batches) : batches_(std::move(batches)) {}

  // nullopt exactly once at exhaustion; any call after that is a second
  // iteration attempt and throws.
  std::optional<AdaptBatch> next() {
    if (exhausted_)
      throw ConfigError("Stream: one-pass contract violated (second iteration)");
    if (cursor_ == batches_.size()) {
      exhausted_ = true;
      return std::nullopt;
    }
    return std::move(batches_[cursor_++]);
  }

  std::size_t batch_count() const { return batches_.size(); }

 private:
  std::vector<AdaptBatch> batches_;
  std::size_t cursor_ = 0;
  bool exhausted_ = false;
};

namespace detail {

inline AdaptBatch slice_batch(const Dataset& ds, const std::vector<int>& rows) {
  AdaptBatch b;
  b.h = ds.h;
  b.w = ds.w;
  b.c = ds.c;
  b.images = Tensor({static_cast<int>(rows.size()), ds.image_dim()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(ds.images.row(rows[i]), ds.images.row(rows[i]) + ds.image_dim(),
              b.images.row(static_cast<int>(i)));
    b.ids.push_back(ds.ids[static_cast<std::size_t>(rows[i])]);
  }
  return b;
}

}  // namespace detail

// iid: global shuffle. label_imbalance: per-batch class skew (skew=1 means
// single-class batches). Each sample appears exactly once either way.
inline Stream make_stream(const Dataset& ds, StreamMode mode, int batch_size,
                          std::uint64_t seed, double skew = 1.0) {
  if (ds.size() == 0) return Stream({});
  if (batch_size <= 0 || batch_size > ds.size())
    throw ConfigError("make_stream: batch_size must be in [1, dataset size]");
  if (mode == StreamMode::continual)
    throw ConfigError("make_stream: continual mode needs corruption specs; use make_continual_stream");

  Rng rng(seed);
  std::vector<AdaptBatch> batches;

  if (mode == StreamMode::iid) {
    std::vector<int> order(static_cast<std::size_t>(ds.size()));
    for (int i = 0; i < ds.size(); ++i) order[static_cast<std::size_t>(i)] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (int start = 0; start < ds.size(); start += batch_size) {
      const int bs = std::min(batch_size, ds.size() - start);
      std::vector<int> rows(order.begin() + start, order.begin() + start + bs);
      batches.push_back(detail::slice_batch(ds, rows));
    }
    return Stream(std::move(batches));
  }

  // label_imbalance
  if (!(skew >= 0.0 && skew <= 1.0))
    throw ConfigError("make_stream: skew must be in [0,1]");
  std::vector<std::deque<int>> pools(static_cast<std::size_t>(ds.class_count));
  {
    std::vector<int> order(static_cast<std::size_t>(ds.size()));
    for (int i = 0; i < ds.size(); ++i) order[static_cast<std::size_t>(i)] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (int i : order) pools[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])].push_back(i);
  }

  if (skew == 1.0) {
    // fully sorted: contiguous per-class batches, partial batch at each
    // class boundary so every batch stays single-class
    for (auto& pool : pools) {
      while (!pool.empty()) {
        std::vector<int> rows;
        while (static_cast<int>(rows.size()) < batch_size && !pool.empty()) {
          rows.push_back(pool.front());
          pool.pop_front();
        }
        batches.push_back(detail::slice_batch(ds, rows));
      }
    }
    return Stream(std::move(batches));
  }

  int remaining = ds.size();
  int cls = 0;
  while (remaining > 0) {
    const int bs = std::min(batch_size, remaining);
    const int want_major = static_cast<int>(std::lround(skew * bs));
    std::vector<int> rows;
    int guard = 0;
    while (pools[static_cast<std::size_t>(cls)].empty() && guard++ <= ds.class_count)
      cls = (cls + 1) % ds.class_count;
    auto& major = pools[static_cast<std::size_t>(cls)];
    while (static_cast<int>(rows.size()) < want_major && !major.empty()) {
      rows.push_back(major.front());
      major.pop_front();
    }
    // fill the remainder round-robin from the other classes
    int scan = (cls + 1) % ds.class_count;
    int idle = 0;
    while (static_cast<int>(rows.size()) < bs && idle <= ds.class_count) {
      auto& pool = pools[static_cast<std::size_t>(scan)];
      if (!pool.empty()) {
        rows.push_back(pool.front());
        pool.pop_front();
        idle = 0;
      } else {
        ++idle;
      }
      scan = (scan + 1) % ds.class_count;
    }
    remaining -= static_cast<int>(rows.size());
    cls = (cls + 1) % ds.class_count;
    batches.push_back(detail::slice_batch(ds, rows));
  }
  return Stream(std::move(batches));
}

// Continual shift: contiguous per-corruption segments in spec order, no
// reset between them. The clean dataset is split into equal segments.
inline Stream make_continual_stream(const Dataset& clean,
                                    const std::vector<CorruptionSpec>& specs,
                                    int batch_size, std::uint64_t seed) {
  if (specs.empty()) throw ConfigError("make_continual_stream: no corruption specs");
  if (batch_size <= 0) throw ConfigError("make_continual_stream: bad batch size");
  Rng rng(seed);
  std::vector<int> order(static_cast<std::size_t>(clean.size()));
  for (int i = 0; i < clean.size(); ++i) order[static_cast<std::size_t>(i)] = i;
  std::shuffle(order.begin(), order.end(), rng);

  const int seg = clean.size() / static_cast<int>(specs.size());
  std::vector<AdaptBatch> batches;
  for (std::size_t si = 0; si < specs.size(); ++si) {
    const int lo = static_cast<int>(si) * seg;
    const int hi = si + 1 == specs.size() ? clean.size() : lo + seg;
    for (int start = lo; start < hi; start += batch_size) {
      const int bs = std::min(batch_size, hi - start);
      std::vector<int> rows(order.begin() + start, order.begin() + start + bs);
      AdaptBatch b = detail::slice_batch(clean, rows);
      b.images = corrupt_images(b.images, clean.h, clean.w, clean.c, specs[si]);
      batches.push_back(std::move(b));
    }
  }
  return Stream(std::move(batches));
}

}  // namespace bbta
