#pragma once

#include <evi/geometry.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace evi {

struct Event {
  double t = 0.0;
  int u = 0;
  int v = 0;
  int polarity = 1;  // -1 or +1, not used when rendering surfaces
};

struct TsmConfig {
  double decay_rate = 0.03;                     // seconds
  double truncation_threshold = std::exp(-3.0); // raw [0,1] domain, pre-negation
  int blur_kernel_size = 5;
  double blur_sigma = 1.0;

  void validate() const {
    if (decay_rate <= 0.0) throw std::invalid_argument("tsm: decay_rate must be positive");
    if (blur_kernel_size < 1 || blur_kernel_size % 2 == 0)
      throw std::invalid_argument("tsm: blur_kernel_size must be odd and >= 1");
    if (truncation_threshold < 0.0 || truncation_threshold > 1.0)
      throw std::invalid_argument("tsm: truncation_threshold must be in [0,1]");
    if (blur_sigma <= 0.0) throw std::invalid_argument("tsm: blur_sigma must be positive");
  }
};

/// Per-pixel timestamp of the most recent event. Out-of-order arrivals within
/// 1 ms are absorbed by the max(), anything older aborts ingestion.
class SurfaceOfActiveEvents {
 public:
  SurfaceOfActiveEvents(int width, int height)
      : width_(width),
        height_(height),
        t_last_(static_cast<size_t>(width) * height, -std::numeric_limits<double>::infinity()) {
    if (width <= 0 || height <= 0) throw std::invalid_argument("sae: non-positive size");
  }

  bool update(const Event& e) {
    if (e.u < 0 || e.u >= width_ || e.v < 0 || e.v >= height_) {
      ++rejected_;
      return false;
    }
    double& cell = t_last_[static_cast<size_t>(e.v) * width_ + e.u];
    if (e.t < cell - 1e-3)
      throw std::runtime_error("sae: event older than stored timestamp by more than 1 ms");
    cell = std::max(cell, e.t);
    latest_ = std::max(latest_, e.t);
    return true;
  }

  double t_last(int u, int v) const { return t_last_[static_cast<size_t>(v) * width_ + u]; }
  double latest_time() const { return latest_; }
  std::uint64_t rejected_count() const { return rejected_; }
  int width() const { return width_; }
  int height() const { return height_; }

 private:
  int width_;
  int height_;
  std::vector<double> t_last_;
  double latest_ = -std::numeric_limits<double>::infinity();
  std::uint64_t rejected_ = 0;
};

/// Immutable negated time-surface snapshot; low values mark recent edges,
/// 255 means no recent activity. Gradients are cached central differences.
class TimeSurfaceMap {
 public:
  TimeSurfaceMap() : TimeSurfaceMap(0, 0, 0.0) {}
  TimeSurfaceMap(int width, int height, double t_ref)
      : width_(width), height_(height), t_ref_(t_ref),
        values_(static_cast<size_t>(width) * height, 255.0),
        grad_u_(values_.size(), 0.0),
        grad_v_(values_.size(), 0.0) {}

  int width() const { return width_; }
  int height() const { return height_; }
  double t_ref() const { return t_ref_; }

  double value_at(int u, int v) const { return values_[idx(u, v)]; }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  // Bilinear interpolation; nullopt when outside [0,w-1]x[0,h-1].
  std::optional<double> sample(const Vec2& x) const {
    if (!(x.x() >= 0.0 && x.x() <= width_ - 1.0 && x.y() >= 0.0 && x.y() <= height_ - 1.0))
      return std::nullopt;
    return bilinear(values_, x);
  }

  // Interpolated central-difference gradient; zero in the 1-px border zone.
  Vec2 gradient(const Vec2& x) const {
    if (!(x.x() >= 1.0 && x.x() <= width_ - 2.0 && x.y() >= 1.0 && x.y() <= height_ - 2.0))
      return Vec2::Zero();
    return Vec2(bilinear(grad_u_, x), bilinear(grad_v_, x));
  }

  bool in_interior(const Vec2& x) const {
    return x.x() >= 1.0 && x.x() <= width_ - 2.0 && x.y() >= 1.0 && x.y() <= height_ - 2.0;
  }

  void rebuild_gradients() {
    for (int v = 1; v < height_ - 1; ++v) {
      for (int u = 1; u < width_ - 1; ++u) {
        grad_u_[idx(u, v)] = 0.5 * (values_[idx(u + 1, v)] - values_[idx(u - 1, v)]);
        grad_v_[idx(u, v)] = 0.5 * (values_[idx(u, v + 1)] - values_[idx(u, v - 1)]);
      }
    }
  }

 private:
  size_t idx(int u, int v) const { return static_cast<size_t>(v) * width_ + u; }

  double bilinear(const std::vector<double>& field, const Vec2& x) const {
    int u0 = static_cast<int>(std::floor(x.x()));
    int v0 = static_cast<int>(std::floor(x.y()));
    u0 = std::min(u0, width_ - 2);
    v0 = std::min(v0, height_ - 2);
    const double fu = x.x() - u0;
    const double fv = x.y() - v0;
    return (1.0 - fv) * ((1.0 - fu) * field[idx(u0, v0)] + fu * field[idx(u0 + 1, v0)]) +
           fv * ((1.0 - fu) * field[idx(u0, v0 + 1)] + fu * field[idx(u0 + 1, v0 + 1)]);
  }

  int width_;
  int height_;
  double t_ref_;
  std::vector<double> values_;
  std::vector<double> grad_u_;
  std::vector<double> grad_v_;
};

namespace detail {

inline std::vector<double> gaussian_kernel_1d(int size, double sigma) {
  std::vector<double> k(size);
  const int half = size / 2;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - half;
    k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Separable convolution with replicated borders, in place.
inline void gaussian_blur(std::vector<double>& img, int width, int height, int ksize,
                          double sigma) {
  if (ksize <= 1) return;
  const std::vector<double> k = gaussian_kernel_1d(ksize, sigma);
  const int half = ksize / 2;
  std::vector<double> tmp(img.size());
  for (int v = 0; v < height; ++v) {
    for (int u = 0; u < width; ++u) {
      double acc = 0.0;
      for (int i = 0; i < ksize; ++i) {
        const int su = std::clamp(u + i - half, 0, width - 1);
        acc += k[i] * img[static_cast<size_t>(v) * width + su];
      }
      tmp[static_cast<size_t>(v) * width + u] = acc;
    }
  }
  for (int v = 0; v < height; ++v) {
    for (int u = 0; u < width; ++u) {
      double acc = 0.0;
      for (int i = 0; i < ksize; ++i) {
        const int sv = std::clamp(v + i - half, 0, height - 1);
        acc += k[i] * tmp[static_cast<size_t>(sv) * width + u];
      }
      img[static_cast<size_t>(v) * width + u] = acc;
    }
  }
}

}  // namespace detail

// Renders the negated, truncated, scaled, blurred surface at query time t.
// Pixel pipeline: raw = exp(-(t - t_last)/delta), raw < threshold -> 0,
// value = 255 * (1 - raw), then Gaussian smoothing. Never-fired pixels
// behave as raw = 0.
inline TimeSurfaceMap build_tsm(const SurfaceOfActiveEvents& sae, double t,
                                const TsmConfig& cfg) {
  cfg.validate();
  if (t < sae.latest_time())
    throw std::runtime_error("tsm: query time precedes an ingested event");
  TimeSurfaceMap tsm(sae.width(), sae.height(), t);
  std::vector<double>& img = tsm.values();
  for (int v = 0; v < sae.height(); ++v) {
    for (int u = 0; u < sae.width(); ++u) {
      const double last = sae.t_last(u, v);
      double raw = 0.0;
      if (std::isfinite(last)) raw = std::exp(-(t - last) / cfg.decay_rate);
      if (raw < cfg.truncation_threshold) raw = 0.0;
      img[static_cast<size_t>(v) * sae.width() + u] = 255.0 * (1.0 - raw);
    }
  }
  detail::gaussian_blur(img, sae.width(), sae.height(), cfg.blur_kernel_size, cfg.blur_sigma);
  tsm.rebuild_gradients();
  return tsm;
}

inline void write_pgm(const TimeSurfaceMap& tsm, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("pgm: cannot open " + path);
  std::fprintf(f, "P5\n%d %d\n255\n", tsm.width(), tsm.height());
  std::vector<unsigned char> row(tsm.width());
  for (int v = 0; v < tsm.height(); ++v) {
    for (int u = 0; u < tsm.width(); ++u) {
      const double val = std::clamp(tsm.value_at(u, v), 0.0, 255.0);
      row[u] = static_cast<unsigned char>(std::lround(val));
    }
    std::fwrite(row.data(), 1, row.size(), f);
  }
  std::fclose(f);
}

}  // namespace evi
