#pragma once

#include <evi/event_surface.hpp>
#include <evi/geometry.hpp>
#include <evi/imu.hpp>
#include <evi/map_store.hpp>
#include <evi/rng.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace evi {

/// Natural cubic spline through strictly increasing knots; exposes exact
/// value and first/second derivatives.
class CubicSpline {
 public:
  CubicSpline() = default;
  CubicSpline(std::vector<double> ts, std::vector<double> ys)
      : t_(std::move(ts)), y_(std::move(ys)) {
    const size_t n = t_.size();
    if (n < 2 || y_.size() != n)
      throw std::invalid_argument("spline: need >= 2 knots with matching values");
    for (size_t i = 0; i + 1 < n; ++i)
      if (t_[i + 1] <= t_[i]) throw std::invalid_argument("spline: knots must increase");
    // second derivatives from the tridiagonal natural-spline system
    m_.assign(n, 0.0);
    if (n == 2) return;
    std::vector<double> a(n, 0.0), b(n, 0.0), c(n, 0.0), d(n, 0.0);
    for (size_t i = 1; i + 1 < n; ++i) {
      const double h0 = t_[i] - t_[i - 1];
      const double h1 = t_[i + 1] - t_[i];
      a[i] = h0 / 6.0;
      b[i] = (h0 + h1) / 3.0;
      c[i] = h1 / 6.0;
      d[i] = (y_[i + 1] - y_[i]) / h1 - (y_[i] - y_[i - 1]) / h0;
    }
    for (size_t i = 2; i + 1 < n; ++i) {
      const double w = a[i] / b[i - 1];
      b[i] -= w * c[i - 1];
      d[i] -= w * d[i - 1];
    }
    for (size_t i = n - 2; i >= 1; --i) {
      m_[i] = (d[i] - c[i] * m_[i + 1]) / b[i];
      if (i == 1) break;
    }
  }

  double value(double t) const { return eval(t, 0); }
  double derivative(double t) const { return eval(t, 1); }
  double second_derivative(double t) const { return eval(t, 2); }
  double t_min() const { return t_.front(); }
  double t_max() const { return t_.back(); }

 private:
  double eval(double t, int order) const {
    size_t i = 1;
    while (i + 1 < t_.size() && t > t_[i]) ++i;
    const double h = t_[i] - t_[i - 1];
    const double u = (t_[i] - t) / h;
    const double v = (t - t_[i - 1]) / h;
    const double ma = m_[i - 1], mb = m_[i];
    if (order == 0)
      return u * y_[i - 1] + v * y_[i] +
             ((u * u * u - u) * ma + (v * v * v - v) * mb) * h * h / 6.0;
    if (order == 1)
      return (y_[i] - y_[i - 1]) / h +
             (-(3.0 * u * u - 1.0) * ma + (3.0 * v * v - 1.0) * mb) * h / 6.0;
    return u * ma + v * mb;
  }

  std::vector<double> t_;
  std::vector<double> y_;
  std::vector<double> m_;  // second derivatives at knots
};

inline CameraModel default_camera() {
  CameraModel cam;
  cam.width = 640;
  cam.height = 480;
  cam.fx = 320.0;
  cam.fy = 320.0;
  cam.cx = 319.5;
  cam.cy = 239.5;
  return cam;
}

struct TrajectorySpec {
  enum Kind { kCircle, kLissajous, kSpline };
  Kind kind = kCircle;
  double amplitude = 0.5;  // m
  double rate = 0.5;       // rad/s
  double duration = 10.0;  // s
  Vec3 center{0, 0, 0};
  // yaw law psi(t) = yaw_rate*t + yaw_amp*sin(yaw_freq*t), applied about world z
  double yaw_rate = 0.0;
  double yaw_amp = 0.0;
  double yaw_freq = 1.0;
  Rotation base_orientation = wall_facing_orientation();
  // spline kind only
  std::vector<double> knot_times;
  std::vector<Vec3> knot_positions;
  std::vector<double> knot_yaws;

  // camera optical axis along world +y, image x along world x, image y downward
  static Rotation wall_facing_orientation() {
    Mat3 r;
    r.col(0) = Vec3(1, 0, 0);
    r.col(1) = Vec3(0, 0, -1);
    r.col(2) = Vec3(0, 1, 0);
    return Rotation(Quat(r));
  }

  void validate() const {
    if (duration <= 0.0) throw std::invalid_argument("trajectory: duration must be positive");
    if (kind == kSpline) {
      if (knot_times.size() < 2 || knot_times.size() != knot_positions.size())
        throw std::invalid_argument("trajectory: spline needs matching knot times/positions");
      if (!knot_yaws.empty() && knot_yaws.size() != knot_times.size())
        throw std::invalid_argument("trajectory: yaw knots must match knot times");
    }
  }
};

struct TrajectorySample {
  Rotation rotation;  // body to world
  Vec3 position;
  Vec3 velocity;
  Vec3 acceleration;
  Vec3 angular_velocity;  // body frame
};

namespace detail {

struct SplineCache {
  CubicSpline x, y, z, yaw;
  bool has_yaw = false;
};

inline SplineCache build_splines(const TrajectorySpec& spec) {
  std::vector<double> xs, ys, zs;
  for (const Vec3& p : spec.knot_positions) {
    xs.push_back(p.x());
    ys.push_back(p.y());
    zs.push_back(p.z());
  }
  SplineCache cache;
  cache.x = CubicSpline(spec.knot_times, xs);
  cache.y = CubicSpline(spec.knot_times, ys);
  cache.z = CubicSpline(spec.knot_times, zs);
  if (!spec.knot_yaws.empty()) {
    cache.yaw = CubicSpline(spec.knot_times, spec.knot_yaws);
    cache.has_yaw = true;
  }
  return cache;
}

}  // namespace detail

// Closed-form pose and derivatives along the trajectory, used as ground truth.
inline TrajectorySample eval_trajectory(const TrajectorySpec& spec, double t) {
  spec.validate();
  if (t < -1e-9 || t > spec.duration + 1e-9)
    throw std::out_of_range("trajectory: query outside [0, duration]");

  TrajectorySample s;
  double psi, dpsi;
  const double a = spec.amplitude;
  const double w = spec.rate;
  switch (spec.kind) {
    case TrajectorySpec::kCircle:
      s.position = spec.center + Vec3(a * std::cos(w * t), a * std::sin(w * t), 0.0);
      s.velocity = Vec3(-a * w * std::sin(w * t), a * w * std::cos(w * t), 0.0);
      s.acceleration = Vec3(-a * w * w * std::cos(w * t), -a * w * w * std::sin(w * t), 0.0);
      psi = spec.yaw_rate * t + spec.yaw_amp * std::sin(spec.yaw_freq * t);
      dpsi = spec.yaw_rate + spec.yaw_amp * spec.yaw_freq * std::cos(spec.yaw_freq * t);
      break;
    case TrajectorySpec::kLissajous:
      s.position = spec.center + Vec3(a * std::cos(w * t), 0.5 * a * std::sin(2.0 * w * t),
                                      0.15 * a * std::sin(3.0 * w * t));
      s.velocity = Vec3(-a * w * std::sin(w * t), a * w * std::cos(2.0 * w * t),
                        0.45 * a * w * std::cos(3.0 * w * t));
      s.acceleration =
          Vec3(-a * w * w * std::cos(w * t), -2.0 * a * w * w * std::sin(2.0 * w * t),
               -1.35 * a * w * w * std::sin(3.0 * w * t));
      psi = spec.yaw_rate * t + spec.yaw_amp * std::sin(spec.yaw_freq * t);
      dpsi = spec.yaw_rate + spec.yaw_amp * spec.yaw_freq * std::cos(spec.yaw_freq * t);
      break;
    case TrajectorySpec::kSpline: {
      const detail::SplineCache sp = detail::build_splines(spec);
      s.position = Vec3(sp.x.value(t), sp.y.value(t), sp.z.value(t));
      s.velocity = Vec3(sp.x.derivative(t), sp.y.derivative(t), sp.z.derivative(t));
      s.acceleration = Vec3(sp.x.second_derivative(t), sp.y.second_derivative(t),
                            sp.z.second_derivative(t));
      psi = sp.has_yaw ? sp.yaw.value(t) : 0.0;
      dpsi = sp.has_yaw ? sp.yaw.derivative(t) : 0.0;
      break;
    }
    default:
      throw std::logic_error("trajectory: unknown kind");
  }
  s.rotation = Rotation::from_axis_angle(Vec3(0, 0, psi)) * spec.base_orientation;
  s.angular_velocity = s.rotation.inverse() * Vec3(0, 0, dpsi);
  return s;
}

enum class SceneKind { kGrid, kParallelLines, kRandomEdges };

// Deterministic gravity-aligned point clouds on a wall plane facing the rig.
inline SemiDenseMap gen_scene(SceneKind kind, double density, double extent, uint64_t seed = 0,
                              double wall_y = 3.0, int n_lines = 4) {
  if (density <= 0.0) throw std::invalid_argument("scene: density must be positive");
  if (extent <= 0.0) throw std::invalid_argument("scene: extent must be positive");
  SemiDenseMap map;
  const double spacing = 1.0 / density;
  const int n = static_cast<int>(std::floor(extent * density + 1e-9)) + 1;
  const double half = 0.5 * (n - 1) * spacing;
  switch (kind) {
    case SceneKind::kGrid:
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          map.points.push_back(Vec3(-half + i * spacing, wall_y, -half + j * spacing));
      break;
    case SceneKind::kParallelLines:
      for (int l = 0; l < n_lines; ++l) {
        const double z = n_lines == 1 ? 0.0 : -half + l * (2.0 * half / (n_lines - 1));
        for (int i = 0; i < n; ++i)
          map.points.push_back(Vec3(-half + i * spacing, wall_y, z));
      }
      break;
    case SceneKind::kRandomEdges: {
      CounterRng rng(seed);
      const int segments = std::max(1, n / 2);
      const int per_segment = n;
      for (int sgm = 0; sgm < segments; ++sgm) {
        const Vec3 p0(-half + extent * rng.next_double(), wall_y - 0.3 + 0.6 * rng.next_double(),
                      -half + extent * rng.next_double());
        const Vec3 p1(-half + extent * rng.next_double(), wall_y - 0.3 + 0.6 * rng.next_double(),
                      -half + extent * rng.next_double());
        for (int i = 0; i < per_segment; ++i)
          map.points.push_back(p0 + (p1 - p0) * (double(i) / (per_segment - 1)));
      }
      break;
    }
  }
  return map;
}

struct SimConfig {
  CameraModel camera = default_camera();
  double imu_rate = 200.0;   // Hz
  ImuNoiseModel noise;       // densities for synthesized noise when enabled
  ImuBias bias;              // constant injected bias
  bool inject_noise = false;
  double contrast_step = 1.0;   // px of edge motion per event
  double fine_rate = 10000.0;   // Hz of the event-model tracking grid
  uint64_t seed = 0;

  void validate() const {
    if (imu_rate <= 0.0) throw std::invalid_argument("sim: imu rate must be positive");
    if (contrast_step <= 0.0) throw std::invalid_argument("sim: contrast step must be positive");
    if (fine_rate <= 0.0) throw std::invalid_argument("sim: fine rate must be positive");
  }
};

// Ideal or noisy IMU stream sampled from the analytic trajectory derivatives.
inline std::vector<ImuSample> gen_imu(const TrajectorySpec& spec, const SimConfig& sim) {
  sim.validate();
  spec.validate();
  const int n = static_cast<int>(std::floor(spec.duration * sim.imu_rate + 1e-9));
  const double noise_scale = std::sqrt(sim.imu_rate);
  CounterRng rng(sim.seed ^ 0x1a2b3c4d5e6f7788ULL);
  std::vector<ImuSample> out;
  out.reserve(n + 1);
  for (int i = 0; i <= n; ++i) {
    const double t = i / sim.imu_rate;
    const TrajectorySample ts = eval_trajectory(spec, t);
    ImuSample s;
    s.t = t;
    s.accel = ts.rotation.matrix().transpose() * (ts.acceleration - sim.noise.gravity) +
              sim.bias.accel;
    s.gyro = ts.angular_velocity + sim.bias.gyro;
    if (sim.inject_noise) {
      s.accel += sim.noise.sigma_accel * noise_scale *
                 Vec3(rng.next_gaussian(), rng.next_gaussian(), rng.next_gaussian());
      s.gyro += sim.noise.sigma_gyro * noise_scale *
                Vec3(rng.next_gaussian(), rng.next_gaussian(), rng.next_gaussian());
    }
    out.push_back(s);
  }
  return out;
}

// Edge-crossing event model: each map point emits an event whenever its
// projected subpixel track accumulates contrast_step pixels of motion. The
// merged stream is sorted by time with point id as the tie-break.
inline std::vector<Event> gen_events(const TrajectorySpec& spec, const SemiDenseMap& map,
                                     const SimConfig& sim) {
  sim.validate();
  spec.validate();
  const int steps = static_cast<int>(std::lround(spec.duration * sim.fine_rate));
  const double dt = spec.duration / steps;

  // precomputed camera-from-world transforms per fine step
  std::vector<Mat3> rot(steps + 1);
  std::vector<Vec3> trans(steps + 1);
  for (int k = 0; k <= steps; ++k) {
    const TrajectorySample ts = eval_trajectory(spec, k * dt);
    rot[k] = sim.camera.extrinsic_rotation.matrix() * ts.rotation.matrix().transpose();
    trans[k] = sim.camera.extrinsic_translation - rot[k] * ts.position;
  }

  struct Tagged {
    double t;
    int u, v, polarity, point_id;
  };
  std::vector<Tagged> events;
  const double w_max = sim.camera.width - 1.0;
  const double h_max = sim.camera.height - 1.0;
  const double crossing_eps = 1e-9;

  for (int pid = 0; pid < static_cast<int>(map.points.size()); ++pid) {
    const Vec3& pw = map.points[pid];
    bool valid_prev = false;
    Vec2 px_prev = Vec2::Zero();
    double accum = 0.0;
    for (int k = 0; k <= steps; ++k) {
      const Vec3 pc = rot[k] * pw + trans[k];
      std::optional<Vec2> px = project(pc, sim.camera);
      if (px && (px->x() < 0.0 || px->x() > w_max || px->y() < 0.0 || px->y() > h_max))
        px.reset();
      if (!px) {
        valid_prev = false;
        accum = 0.0;
        continue;
      }
      if (valid_prev) {
        const Vec2 seg = *px - px_prev;
        const double d = seg.norm();
        if (d > 0.0) {
          double consumed = 0.0;
          while (accum + (d - consumed) >= sim.contrast_step - crossing_eps) {
            const double need = sim.contrast_step - accum;
            consumed += need;
            accum = 0.0;
            const double f = consumed / d;
            const Vec2 at = px_prev + f * seg;
            const double t_cross = (k - 1) * dt + f * dt;
            const int eu = static_cast<int>(std::lround(at.x()));
            const int ev = static_cast<int>(std::lround(at.y()));
            if (eu >= 0 && eu < sim.camera.width && ev >= 0 && ev < sim.camera.height) {
              const int pol = std::abs(seg.x()) >= std::abs(seg.y())
                                  ? (seg.x() >= 0.0 ? 1 : -1)
                                  : (seg.y() >= 0.0 ? 1 : -1);
              events.push_back({t_cross, eu, ev, pol, pid});
            }
          }
          accum += d - consumed;
        }
      }
      valid_prev = true;
      px_prev = *px;
    }
  }

  std::sort(events.begin(), events.end(), [](const Tagged& a, const Tagged& b) {
    if (a.t != b.t) return a.t < b.t;
    return a.point_id < b.point_id;
  });
  std::vector<Event> out;
  out.reserve(events.size());
  for (const Tagged& e : events) out.push_back({e.t, e.u, e.v, e.polarity});
  return out;
}

}  // namespace evi
