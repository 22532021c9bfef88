#pragma once

#include <evi/frame_pipeline.hpp>
#include <evi/map_store.hpp>
#include <evi/solver.hpp>

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace evi {

enum class MotionModel { kZeroth, kFirst, kSecond };

inline const char* motion_model_name(MotionModel m) {
  switch (m) {
    case MotionModel::kZeroth: return "zeroth";
    case MotionModel::kFirst: return "first";
    case MotionModel::kSecond: return "second";
  }
  return "unknown";
}

// Whitening assumed by the window's inertial links. Looser than the raw
// sensor densities so the surface terms keep setting the absolute scale.
inline ImuNoiseModel tracking_noise_defaults() {
  ImuNoiseModel n;
  n.sigma_accel = 0.1;
  n.sigma_gyro = 0.01;
  return n;
}

// Surface terms flatten out past a few pixels of reprojection error, so
// uncapped Gauss-Newton steps overshoot onto the plateau and stall the
// damping schedule.
inline SolveOptions tracking_solver_defaults() {
  SolveOptions s;
  s.max_step = 0.05;
  return s;
}

struct TrackerConfig {
  int window_size = 5;
  MotionModel motion_model = MotionModel::kSecond;
  int init_frame_count = 5;
  int sample_size = 1500;
  double huber_scale = 10.0;        // TSM intensity units
  int min_in_view = 30;
  bool fix_first_pose_only = false; // otherwise all 15 dims of the first node
  double divergence_factor = 10.0;  // per-term cost jump that declares loss
  double anchored_value_max = 254.0;   // surface value still counted as on-texture
  double min_anchored_fraction = 0.5;  // of in-view sampled points, else lost
  // whitened cost per residual dimension; under the relaxed tracking
  // densities a coherent vision-only bootstrap lands near or below 1 while
  // a sequence with a misregistered pose lands an order of magnitude higher
  double init_max_avg_cost = 5.0;
  // zero-mean prior on the first init node's accelerometer bias; the walk
  // terms only pin changes between nodes, leaving the level free to soak up
  // pose noise
  double init_accel_bias_sigma = 0.02;  // m/s^2
  double lost_huber_widening = 5.0;
  std::uint64_t sample_seed = 0x9e3779b97f4a7c15ULL;
  FrustumConfig frustum;
  ImuNoiseModel noise = tracking_noise_defaults();
  SolveOptions solver = tracking_solver_defaults();

  void validate() const {
    if (window_size < 2) throw std::invalid_argument("tracker: window size must be >= 2");
    if (init_frame_count < 3)
      throw std::invalid_argument("tracker: init frame count must be >= 3");
    if (sample_size < 1) throw std::invalid_argument("tracker: sample size must be >= 1");
    if (huber_scale <= 0.0) throw std::invalid_argument("tracker: huber scale must be positive");
    if (min_in_view < 1) throw std::invalid_argument("tracker: min in-view must be >= 1");
    if (divergence_factor <= 1.0)
      throw std::invalid_argument("tracker: divergence factor must exceed 1");
    if (anchored_value_max <= 0.0 || anchored_value_max > 255.0)
      throw std::invalid_argument("tracker: anchored value max must be in (0, 255]");
    if (init_accel_bias_sigma <= 0.0)
      throw std::invalid_argument("tracker: init bias prior sigma must be positive");
    if (min_anchored_fraction < 0.0 || min_anchored_fraction >= 1.0)
      throw std::invalid_argument("tracker: min anchored fraction must be in [0, 1)");
    frustum.validate();
    noise.validate();
  }
};

class InsufficientOverlapError : public std::runtime_error {
 public:
  explicit InsufficientOverlapError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline Rotation rotation_from_coeffs(const Eigen::VectorXd& c) {
  return Rotation(Quat(c[3], c[0], c[1], c[2]));
}

// Scalar event term: the negated-TSM value at the point's reprojection.
// Out-of-view points read the border value 255 and carry zero gradient.
inline void add_event_terms(Problem& problem, int q_id, int p_id, const TimeSurfaceMap& tsm,
                            const CameraModel& camera, const std::vector<Vec3>& points,
                            const RobustLoss& loss, const std::string& tag) {
  for (size_t j = 0; j < points.size(); ++j) {
    const Vec3 point = points[j];
    problem.add_residual_block(
        tag + "/" + std::to_string(j), {q_id, p_id}, 1,
        [&tsm, &camera, point](const std::vector<Eigen::VectorXd>& params,
                               Eigen::VectorXd* residual,
                               std::vector<Eigen::MatrixXd>* jacobians) {
          const Rotation rot = rotation_from_coeffs(params[0]);
          const Vec3 pos = params[1];
          const Mat3 r_cb = camera.extrinsic_rotation.matrix();
          const Vec3 body = rot.matrix().transpose() * (point - pos);
          const Vec3 xc = r_cb * body + camera.extrinsic_translation;
          if (jacobians) {
            (*jacobians)[0].setZero(1, 3);
            (*jacobians)[1].setZero(1, 3);
          }
          const std::optional<Vec2> px = project(xc, camera);
          const std::optional<double> value = px ? tsm.sample(*px) : std::nullopt;
          if (!value) {
            (*residual)(0) = 255.0;
            return;
          }
          (*residual)(0) = *value;
          if (jacobians) {
            const Vec2 grad = tsm.gradient(*px);
            const Eigen::RowVector3d gpi =
                grad.transpose() * projection_jacobian(xc, camera) * r_cb;
            (*jacobians)[0] = gpi * skew(body);
            (*jacobians)[1] = -(gpi * rot.matrix().transpose());
          }
        },
        loss);
  }
}

// ids order: q_i p_i v_i ba_i bw_i q_j p_j v_j ba_j bw_j
inline void add_imu_term(Problem& problem, const std::array<int, 10>& ids, Preintegration pre,
                         double ti, double tj, const ImuNoiseModel& noise, std::string name) {
  problem.add_residual_block(
      std::move(name), std::vector<int>(ids.begin(), ids.end()), 15,
      [pre = std::move(pre), ti, tj, noise](const std::vector<Eigen::VectorXd>& params,
                                            Eigen::VectorXd* residual,
                                            std::vector<Eigen::MatrixXd>* jacobians) {
        FullState si, sj;
        si.rotation = rotation_from_coeffs(params[0]);
        si.position = params[1];
        si.velocity = params[2];
        si.bias.accel = params[3];
        si.bias.gyro = params[4];
        si.t = ti;
        sj.rotation = rotation_from_coeffs(params[5]);
        sj.position = params[6];
        sj.velocity = params[7];
        sj.bias.accel = params[8];
        sj.bias.gyro = params[9];
        sj.t = tj;
        const ImuResidualEval ev = evaluate_imu_residual(si, sj, pre, noise);
        *residual = ev.residual;
        if (jacobians) {
          (*jacobians)[0] = ev.j_theta_i;
          (*jacobians)[1] = ev.j_p_i;
          (*jacobians)[2] = ev.j_v_i;
          (*jacobians)[3] = ev.j_ba_i;
          (*jacobians)[4] = ev.j_bw_i;
          (*jacobians)[5] = ev.j_theta_j;
          (*jacobians)[6] = ev.j_p_j;
          (*jacobians)[7] = ev.j_v_j;
          (*jacobians)[8] = ev.j_ba_j;
          (*jacobians)[9] = ev.j_bw_j;
        }
      });
}

struct StateBlockIds {
  int q, p, v, ba, bw;
};

inline StateBlockIds add_state_blocks(Problem& problem, const FullState& s) {
  StateBlockIds ids;
  ids.q = problem.add_parameter_block(s.rotation.quat().coeffs(), BlockKind::kUnitQuaternion);
  ids.p = problem.add_parameter_block(s.position);
  ids.v = problem.add_parameter_block(s.velocity);
  ids.ba = problem.add_parameter_block(s.bias.accel);
  ids.bw = problem.add_parameter_block(s.bias.gyro);
  return ids;
}

inline FullState read_state_blocks(const Problem& problem, const StateBlockIds& ids, double t) {
  FullState s;
  s.rotation = rotation_from_coeffs(problem.value(ids.q));
  s.position = problem.value(ids.p);
  s.velocity = problem.value(ids.v);
  s.bias.accel = problem.value(ids.ba);
  s.bias.gyro = problem.value(ids.bw);
  s.t = t;
  return s;
}

}  // namespace detail

inline int count_in_view(const TimeSurfaceMap& tsm, const std::vector<Vec3>& points,
                         const Rotation& rot, const Vec3& pos, const CameraModel& camera) {
  int n = 0;
  for (const Vec3& pw : points) {
    const Vec3 xc = world_point_to_camera(pw, rot, pos, camera);
    const std::optional<Vec2> px = project(xc, camera);
    if (px && tsm.sample(*px)) ++n;
  }
  return n;
}

struct LocalizePose {
  Problem problem;
  int q_id = -1;
  int p_id = -1;
};

// Event-only alignment problem of a single TSM against fixed world points,
// free over the 6-dof body pose.
inline LocalizePose build_localize_problem(const TimeSurfaceMap& tsm,
                                           const std::vector<Vec3>& points, const Pose& pose,
                                           const CameraModel& camera, const TrackerConfig& cfg) {
  LocalizePose lp;
  lp.q_id = lp.problem.add_parameter_block(pose.rotation.quat().coeffs(),
                                           BlockKind::kUnitQuaternion);
  lp.p_id = lp.problem.add_parameter_block(pose.translation);
  detail::add_event_terms(lp.problem, lp.q_id, lp.p_id, tsm, camera, points,
                          {RobustLoss::kHuber, cfg.huber_scale}, "event");
  return lp;
}

struct LocalizeResult {
  Pose pose;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int in_view = 0;
  SolveReport report;
};

inline LocalizeResult localize_single_frame(const TimeSurfaceMap& tsm,
                                            const std::vector<Vec3>& points,
                                            const Pose& initial_pose, const CameraModel& camera,
                                            const TrackerConfig& cfg) {
  const int in_view =
      count_in_view(tsm, points, initial_pose.rotation, initial_pose.translation, camera);
  if (in_view < cfg.min_in_view)
    throw InsufficientOverlapError("localize: only " + std::to_string(in_view) + " of " +
                                   std::to_string(points.size()) +
                                   " points project into the frame");
  LocalizePose lp = build_localize_problem(tsm, points, initial_pose, camera, cfg);
  LocalizeResult out;
  out.in_view = in_view;
  out.report = solve(lp.problem, cfg.solver);
  out.initial_cost = out.report.initial_cost;
  out.final_cost = out.report.final_cost;
  out.pose.rotation = detail::rotation_from_coeffs(lp.problem.value(lp.q_id));
  out.pose.translation = lp.problem.value(lp.p_id);
  return out;
}

struct InitResult {
  bool success = false;
  std::vector<FullState> states;
  ImuBias bias;  // the last frame's estimate
  double avg_cost = 0.0;
  SolveReport report;
};

// Velocity and bias recovery against fixed vision poses: the inertial
// residuals alone are optimized over {v_i, b_a_i, b_w_i}.
inline InitResult initialize(const std::vector<Keyframe>& frames, const TrackerConfig& cfg) {
  if (static_cast<int>(frames.size()) < cfg.init_frame_count || frames.size() < 3)
    throw std::invalid_argument("init: need at least " +
                                std::to_string(std::max(cfg.init_frame_count, 3)) + " keyframes");
  for (size_t i = 1; i < frames.size(); ++i)
    if (!frames[i].pre_from_prev)
      throw std::invalid_argument("init: keyframes are not linked by preintegrations");

  Problem problem;
  std::vector<detail::StateBlockIds> ids;
  for (size_t i = 0; i < frames.size(); ++i) {
    FullState guess = frames[i].state;
    if (i + 1 < frames.size()) {
      const double dt = frames[i + 1].t - frames[i].t;
      guess.velocity = (frames[i + 1].state.position - frames[i].state.position) / dt;
    } else {
      guess.velocity = ids.empty() ? Vec3::Zero() : Vec3(problem.value(ids.back().v));
    }
    ids.push_back(detail::add_state_blocks(problem, guess));
    problem.set_fixed(ids.back().q, true);
    problem.set_fixed(ids.back().p, true);
  }
  for (size_t i = 1; i < frames.size(); ++i) {
    const detail::StateBlockIds& a = ids[i - 1];
    const detail::StateBlockIds& b = ids[i];
    detail::add_imu_term(problem, {a.q, a.p, a.v, a.ba, a.bw, b.q, b.p, b.v, b.ba, b.bw},
                         *frames[i].pre_from_prev, frames[i - 1].t, frames[i].t, cfg.noise,
                         "imu/" + std::to_string(i));
  }
  // zero-mean prior on the first accelerometer bias: the walk terms only pin
  // changes between nodes, so without an absolute anchor the bias level is
  // the cheapest absorber of vision-pose scatter; gyro bias is left free so
  // a real sensor offset is recovered undamped
  const Vec3 prior_ba = frames.front().state.bias.accel;
  const double sa = cfg.init_accel_bias_sigma;
  problem.add_residual_block(
      "bias_prior", {ids.front().ba}, 3,
      [prior_ba, sa](const std::vector<Eigen::VectorXd>& params, Eigen::VectorXd* residual,
                     std::vector<Eigen::MatrixXd>* jacobians) {
        *residual = (Vec3(params[0]) - prior_ba) / sa;
        if (jacobians) (*jacobians)[0] = Mat3::Identity() / sa;
      });

  InitResult out;
  out.report = solve(problem, cfg.solver);
  out.avg_cost = out.report.final_cost / (15.0 * double(frames.size() - 1));
  out.success = std::isfinite(out.avg_cost) && out.avg_cost < cfg.init_max_avg_cost;
  for (size_t i = 0; i < frames.size(); ++i)
    out.states.push_back(detail::read_state_blocks(problem, ids[i], frames[i].t));
  out.bias = out.states.back().bias;
  return out;
}

struct WindowNode {
  Keyframe kf;
  std::vector<Vec3> points;  // world points sampled for this node's event terms
};

struct SlidingWindow {
  std::vector<WindowNode> nodes;
  std::vector<int> last_visible;
  bool first_fixed = false;
  int frame_counter = 0;
  double last_cost_per_term = -1.0;
};

enum class TrackStatus { kOk, kLost };

struct TrackResult {
  TrackStatus status = TrackStatus::kOk;
  FullState state;
  int in_view = 0;
  SolveReport report;
  std::string reason;
};

inline FullState predict_state(const SlidingWindow& window, const Keyframe& kf,
                               const TrackerConfig& cfg) {
  const FullState& last = window.nodes.back().kf.state;
  FullState pred = last;
  pred.t = kf.t;
  switch (cfg.motion_model) {
    case MotionModel::kZeroth:
      break;
    case MotionModel::kFirst: {
      if (window.nodes.size() < 2) break;
      const FullState& prev = window.nodes[window.nodes.size() - 2].kf.state;
      const Rotation rel_rot = prev.rotation.inverse() * last.rotation;
      const Vec3 rel_p = prev.rotation.inverse() * (last.position - prev.position);
      pred.rotation = last.rotation * rel_rot;
      pred.position = last.position + last.rotation * rel_p;
      const double dt = kf.t - last.t;
      if (dt > 0.0) pred.velocity = (pred.position - last.position) / dt;
      break;
    }
    case MotionModel::kSecond:
      pred = predict(last, kf.imu_span, cfg.noise).state;
      break;
  }
  return pred;
}

struct WindowProblem {
  Problem problem;
  std::vector<detail::StateBlockIds> ids;
  int event_terms = 0;
};

// Joint problem over every node in the window: per-node event terms against
// that node's own TSM plus inertial links between adjacent nodes.
inline WindowProblem build_window_problem(const std::vector<const WindowNode*>& nodes,
                                          const CameraModel& camera, const TrackerConfig& cfg,
                                          bool fix_first) {
  WindowProblem wp;
  for (const WindowNode* node : nodes)
    wp.ids.push_back(detail::add_state_blocks(wp.problem, node->kf.state));
  if (fix_first) {
    wp.problem.set_fixed(wp.ids[0].q, true);
    wp.problem.set_fixed(wp.ids[0].p, true);
    if (!cfg.fix_first_pose_only) {
      wp.problem.set_fixed(wp.ids[0].v, true);
      wp.problem.set_fixed(wp.ids[0].ba, true);
      wp.problem.set_fixed(wp.ids[0].bw, true);
    }
  }
  for (size_t i = 0; i < nodes.size(); ++i) {
    detail::add_event_terms(wp.problem, wp.ids[i].q, wp.ids[i].p, nodes[i]->kf.tsm, camera,
                            nodes[i]->points, {RobustLoss::kHuber, cfg.huber_scale},
                            "event/" + std::to_string(i));
    wp.event_terms += static_cast<int>(nodes[i]->points.size());
  }
  for (size_t i = 1; i < nodes.size(); ++i) {
    if (!nodes[i]->kf.pre_from_prev)
      throw std::invalid_argument("window: node lacks a preintegration link");
    const detail::StateBlockIds& a = wp.ids[i - 1];
    const detail::StateBlockIds& b = wp.ids[i];
    detail::add_imu_term(wp.problem, {a.q, a.p, a.v, a.ba, a.bw, b.q, b.p, b.v, b.ba, b.bw},
                         *nodes[i]->kf.pre_from_prev, nodes[i - 1]->kf.t, nodes[i]->kf.t,
                         cfg.noise, "imu/" + std::to_string(i));
  }
  return wp;
}

// One tracking step: predict the new state, sample map points, solve the
// joint window, slide. On loss the window is left untouched and the last
// good state is returned.
inline TrackResult track_keyframe(SlidingWindow& window, Keyframe kf, const SemiDenseMap& map,
                                  const CameraModel& camera, const TrackerConfig& cfg) {
  if (window.nodes.empty())
    throw std::logic_error("tracker: cannot track with an empty window; initialize first");
  const int frame_id = window.frame_counter++;
  TrackResult out;
  out.state = window.nodes.back().kf.state;

  kf.state = predict_state(window, kf, cfg);
  const ActivePointSet active =
      refresh_active_set(map, kf.state.rotation, kf.state.position, camera, cfg.frustum,
                         window.last_visible, frame_id);
  const std::vector<int> chosen =
      sample_points(active, cfg.sample_size, cfg.sample_seed ^ std::uint64_t(frame_id));
  std::vector<Vec3> points;
  points.reserve(chosen.size());
  for (int idx : chosen) points.push_back(map.points[idx]);

  out.in_view = count_in_view(kf.tsm, points, kf.state.rotation, kf.state.position, camera);
  if (out.in_view < cfg.min_in_view) {
    out.status = TrackStatus::kLost;
    out.reason = "overlap";
    return out;
  }

  WindowNode incoming{std::move(kf), std::move(points)};
  std::vector<const WindowNode*> nodes;
  const bool evict = static_cast<int>(window.nodes.size()) >= cfg.window_size;
  for (size_t i = evict ? 1 : 0; i < window.nodes.size(); ++i) nodes.push_back(&window.nodes[i]);
  nodes.push_back(&incoming);
  const bool fix_first = static_cast<int>(nodes.size()) >= cfg.window_size;

  WindowProblem wp = build_window_problem(nodes, camera, cfg, fix_first);
  try {
    out.report = solve(wp.problem, cfg.solver);
  } catch (const std::runtime_error& err) {
    out.status = TrackStatus::kLost;
    out.reason = std::string("solver: ") + err.what();
    return out;
  }

  const double cost_per_term = out.report.final_cost / std::max(wp.event_terms, 1);
  if (window.last_cost_per_term >= 0.0 &&
      cost_per_term > cfg.divergence_factor * std::max(window.last_cost_per_term, 1.0)) {
    out.status = TrackStatus::kLost;
    out.reason = "divergence";
    return out;
  }

  // a solve can glide on inertial terms alone once reprojections leave the
  // textured part of the surface; demand that enough sampled points still
  // land on dark pixels at the solved pose
  const Rotation solved_rot =
      detail::rotation_from_coeffs(wp.problem.value(wp.ids.back().q));
  const Vec3 solved_pos = Vec3(wp.problem.value(wp.ids.back().p));
  int anchored = 0;
  for (const Vec3& pw : incoming.points) {
    const auto px = project(world_point_to_camera(pw, solved_rot, solved_pos, camera), camera);
    if (!px) continue;
    const std::optional<double> val = incoming.kf.tsm.sample(*px);
    if (val && *val <= cfg.anchored_value_max) ++anchored;
  }
  if (anchored < std::max(cfg.min_in_view,
                          static_cast<int>(cfg.min_anchored_fraction * out.in_view))) {
    out.status = TrackStatus::kLost;
    out.reason = "anchor";
    return out;
  }

  // commit: write states back, slide the window
  if (evict) window.nodes.erase(window.nodes.begin());
  window.nodes.push_back(std::move(incoming));
  for (size_t i = 0; i < nodes.size(); ++i) {
    FullState s = detail::read_state_blocks(wp.problem, wp.ids[i], 0.0);
    WindowNode& target = window.nodes[window.nodes.size() - nodes.size() + i];
    s.t = target.kf.t;
    target.kf.state = s;
  }
  window.first_fixed = fix_first;
  window.last_visible = active.indices;
  window.last_cost_per_term = cost_per_term;
  out.state = window.nodes.back().kf.state;
  return out;
}

enum class Phase { kBootstrap, kTracking };

struct StampedOutput {
  double t = 0.0;
  FullState state;
  TrackStatus status = TrackStatus::kOk;
  bool keyframe = true;
  Phase phase = Phase::kBootstrap;
};

struct SystemConfig {
  CameraModel camera;
  PipelineConfig pipeline;
  TsmConfig tsm;
  TrackerConfig tracker;
  Pose initial_pose;  // map-frame seed for the bootstrap localization
  ImuBias initial_bias;
  // single-frame localization is only trusted inside its convergence basin;
  // results jumping further than this are discarded as aliased minima
  double probe_jump_pos = 0.1;               // meters
  double probe_jump_ang = 5.0 * M_PI / 180;  // radians

  void validate() const {
    camera.validate();
    pipeline.validate();
    tsm.validate();
    tracker.validate();
    if (probe_jump_pos <= 0.0 || probe_jump_ang <= 0.0)
      throw std::invalid_argument("system: probe jump limits must be positive");
  }
};

/// Full pipeline: event/IMU ingestion, adaptive framing, bootstrap via
/// high-rate event-only localization, loosely-coupled velocity/bias
/// recovery, then windowed tracking.
class System {
 public:
  System(const SystemConfig& cfg, SemiDenseMap map)
      : cfg_(cfg),
        map_(std::move(map)),
        sae_(cfg.camera.width, cfg.camera.height),
        buffer_(cfg.pipeline),
        probe_interval_(std::max(1, cfg.pipeline.n_event / 4)) {
    cfg_.validate();
    if (map_.points.empty()) throw std::invalid_argument("system: map has no points");
    current_pose_ = cfg_.initial_pose;
    bias_ = cfg_.initial_bias;
  }

  void ingest_event(const Event& e) {
    const int dropped_before = buffer_.dropped_events();
    std::optional<FrameBundle> bundle = buffer_.ingest_event(e);
    if (buffer_.dropped_events() == dropped_before) {
      sae_.update(e);
      ++events_since_probe_;
    }
    if (bundle) {
      handle_bundle(*bundle);
    } else if (phase_ == Phase::kBootstrap && events_since_probe_ >= probe_interval_) {
      probe();
    }
  }

  void ingest_imu(const ImuSample& s) {
    if (std::optional<FrameBundle> bundle = buffer_.ingest_imu(s)) handle_bundle(*bundle);
  }

  const std::vector<StampedOutput>& outputs() const { return outputs_; }
  Phase phase() const { return phase_; }
  bool lost() const { return lost_; }
  const SlidingWindow& window() const { return window_; }
  const Pose& current_pose() const { return current_pose_; }
  int keyframe_count() const { return keyframe_count_; }
  int init_attempts() const { return init_attempts_; }
  double last_init_avg_cost() const { return last_init_avg_cost_; }

 private:
  bool within_jump_limits(const Pose& pose) const {
    return (pose.translation - current_pose_.translation).norm() <= cfg_.probe_jump_pos &&
           pose.rotation.angle_to(current_pose_.rotation) <= cfg_.probe_jump_ang;
  }

  std::vector<Vec3> sample_for_pose(const Rotation& rot, const Vec3& pos) {
    const ActivePointSet active = refresh_active_set(map_, rot, pos, cfg_.camera,
                                                     cfg_.tracker.frustum, bootstrap_visible_,
                                                     probe_counter_);
    bootstrap_visible_ = active.indices;
    const std::vector<int> chosen = sample_points(
        active, cfg_.tracker.sample_size,
        cfg_.tracker.sample_seed ^ (0x517cc1b727220a95ULL + std::uint64_t(probe_counter_)));
    ++probe_counter_;
    std::vector<Vec3> points;
    points.reserve(chosen.size());
    for (int idx : chosen) points.push_back(map_.points[idx]);
    return points;
  }

  void probe() {
    events_since_probe_ = 0;
    const TimeSurfaceMap tsm = build_tsm(sae_, sae_.latest_time(), cfg_.tsm);
    const std::vector<Vec3> points =
        sample_for_pose(current_pose_.rotation, current_pose_.translation);
    try {
      const Pose pose =
          localize_single_frame(tsm, points, current_pose_, cfg_.camera, cfg_.tracker).pose;
      if (!within_jump_limits(pose)) return;
      current_pose_ = pose;
      StampedOutput rec;
      rec.t = tsm.t_ref();
      rec.state.rotation = pose.rotation;
      rec.state.position = pose.translation;
      rec.state.bias = bias_;
      rec.state.t = tsm.t_ref();
      rec.keyframe = false;
      rec.phase = Phase::kBootstrap;
      outputs_.push_back(std::move(rec));
    } catch (const InsufficientOverlapError&) {
    }
  }

  void handle_bundle(const FrameBundle& bundle) {
    ++keyframe_count_;
    if (phase_ == Phase::kBootstrap)
      bootstrap_keyframe(bundle);
    else
      tracking_keyframe(bundle);
  }

  void bootstrap_keyframe(const FrameBundle& bundle) {
    std::optional<FullState> prev;
    if (!pending_.empty()) prev = pending_.back().state;
    Keyframe kf = make_keyframe(bundle, sae_, prev, bias_, cfg_.tsm, cfg_.tracker.noise);

    std::vector<Vec3> points = sample_for_pose(current_pose_.rotation, current_pose_.translation);
    TrackStatus status = TrackStatus::kOk;
    try {
      const Pose pose =
          localize_single_frame(kf.tsm, points, current_pose_, cfg_.camera, cfg_.tracker).pose;
      if (within_jump_limits(pose)) current_pose_ = pose;
    } catch (const InsufficientOverlapError&) {
      status = TrackStatus::kLost;
    }
    kf.state.rotation = current_pose_.rotation;
    kf.state.position = current_pose_.translation;
    kf.state.velocity = Vec3::Zero();
    kf.state.bias = bias_;
    kf.state.t = kf.t;

    StampedOutput rec;
    rec.t = kf.t;
    rec.state = kf.state;
    rec.status = status;
    rec.keyframe = true;
    rec.phase = Phase::kBootstrap;
    pending_record_idx_.push_back(outputs_.size());
    outputs_.push_back(rec);

    pending_.push_back(std::move(kf));
    pending_points_.push_back(std::move(points));
    if (static_cast<int>(pending_.size()) >= cfg_.tracker.init_frame_count) try_initialize();
  }

  void try_initialize() {
    const InitResult res = initialize(pending_, cfg_.tracker);
    ++init_attempts_;
    last_init_avg_cost_ = res.avg_cost;
    if (!res.success) {  // slide and retry with the next keyframe
      pending_.erase(pending_.begin());
      pending_points_.erase(pending_points_.begin());
      pending_record_idx_.erase(pending_record_idx_.begin());
      return;
    }
    for (size_t i = 0; i < pending_.size(); ++i) {
      pending_[i].state = res.states[i];
      if (i > 0)
        pending_[i].pre_from_prev =
            preintegrate(pending_[i].imu_span, res.states[i - 1].bias, cfg_.tracker.noise);
      window_.nodes.push_back({std::move(pending_[i]), std::move(pending_points_[i])});
      window_record_idx_.push_back(pending_record_idx_[i]);
    }
    pending_.clear();
    pending_points_.clear();
    pending_record_idx_.clear();
    refresh_window_records();
    window_.last_visible = bootstrap_visible_;
    window_.first_fixed = static_cast<int>(window_.nodes.size()) >= cfg_.tracker.window_size;
    bias_ = res.bias;
    phase_ = Phase::kTracking;
  }

  void tracking_keyframe(const FrameBundle& bundle) {
    Keyframe kf = make_keyframe(bundle, sae_, std::nullopt, bias_, cfg_.tsm, cfg_.tracker.noise);
    if (!carry_span_.empty()) {
      std::vector<ImuSample> full = carry_span_;
      full.insert(full.end(), kf.imu_span.begin() + 1, kf.imu_span.end());
      kf.imu_span = std::move(full);
    }
    kf.pre_from_prev = preintegrate(kf.imu_span, bias_, cfg_.tracker.noise);
    const std::vector<ImuSample> span = kf.imu_span;

    TrackerConfig effective = cfg_.tracker;
    if (lost_) effective.huber_scale *= effective.lost_huber_widening;
    const size_t size_before = window_.nodes.size();
    const TrackResult res = track_keyframe(window_, std::move(kf), map_, cfg_.camera, effective);

    StampedOutput rec;
    rec.t = bundle.t_frame;
    rec.keyframe = true;
    rec.phase = Phase::kTracking;
    rec.status = res.status;
    if (res.status == TrackStatus::kOk) {
      lost_ = false;
      carry_span_.clear();
      bias_ = res.state.bias;
      current_pose_ = Pose{res.state.rotation, res.state.position};
      rec.state = res.state;
      if (window_.nodes.size() == size_before)  // oldest node retired to admit this one
        window_record_idx_.erase(window_record_idx_.begin());
      window_record_idx_.push_back(outputs_.size());
      outputs_.push_back(std::move(rec));
      refresh_window_records();
      return;
    }
    lost_ = true;
    carry_span_ = span;  // span already begins with any previous carry
    rec.state = res.state;  // last good state, frozen
    rec.state.t = bundle.t_frame;
    outputs_.push_back(std::move(rec));
  }

  // records of keyframes still in the window follow the latest joint solve;
  // a record freezes at its refined state once the keyframe retires
  void refresh_window_records() {
    for (size_t i = 0; i < window_.nodes.size(); ++i) {
      StampedOutput& rec = outputs_[window_record_idx_[i]];
      rec.state = window_.nodes[i].kf.state;
      rec.state.t = rec.t;
    }
  }

  SystemConfig cfg_;
  SemiDenseMap map_;
  SurfaceOfActiveEvents sae_;
  FrameBuffer buffer_;
  SlidingWindow window_;
  std::vector<Keyframe> pending_;
  std::vector<std::vector<Vec3>> pending_points_;
  std::vector<size_t> pending_record_idx_;
  std::vector<size_t> window_record_idx_;
  std::vector<StampedOutput> outputs_;
  std::vector<ImuSample> carry_span_;
  std::vector<int> bootstrap_visible_;
  Pose current_pose_;
  ImuBias bias_;
  Phase phase_ = Phase::kBootstrap;
  bool lost_ = false;
  int probe_interval_;
  int events_since_probe_ = 0;
  int probe_counter_ = 0;
  int keyframe_count_ = 0;
  int init_attempts_ = 0;
  double last_init_avg_cost_ = -1.0;
};

}  // namespace evi
