#pragma once

#include <evi/event_surface.hpp>
#include <evi/imu.hpp>

#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

namespace evi {

struct PipelineConfig {
  int n_event = 15000;
  int n_imu = 4;
  double force_interval = 1.0;  // s without a frame before one is forced

  void validate() const {
    if (n_event < 1) throw std::invalid_argument("pipeline: n_event must be >= 1");
    if (n_imu < 1) throw std::invalid_argument("pipeline: n_imu must be >= 1");
    if (force_interval <= 0.0)
      throw std::invalid_argument("pipeline: force interval must be positive");
  }
};

struct FrameBundle {
  std::vector<Event> events;
  std::vector<ImuSample> imu;
  double t_frame = 0.0;
  bool forced = false;
};

/// Buffers the merged sensor stream and emits a bundle once both the event
/// and IMU count thresholds are met and an IMU sample bounds the last event.
/// The bundle closes at that IMU sample, which also seeds the next interval
/// so consecutive pre-integration spans share their boundary.
class FrameBuffer {
 public:
  explicit FrameBuffer(const PipelineConfig& cfg = PipelineConfig()) : cfg_(cfg) {
    cfg_.validate();
  }

  std::optional<FrameBundle> ingest_event(const Event& e) {
    note_epoch(e.t);
    if (e.t < max_event_t_ - 1e-3) {
      ++dropped_events_;
      return std::nullopt;
    }
    max_event_t_ = std::max(max_event_t_, e.t);
    events_.push_back(e);
    return maybe_emit();
  }

  std::optional<FrameBundle> ingest_imu(const ImuSample& s) {
    note_epoch(s.t);
    if (!imu_.empty() && s.t <= imu_.back().t)
      throw std::invalid_argument("pipeline: imu timestamps must strictly increase");
    imu_.push_back(s);
    if (auto bundle = maybe_emit()) return bundle;
    if (s.t - last_emit_t_ >= cfg_.force_interval && imu_.size() >= 2) return emit(true);
    return std::nullopt;
  }

  int dropped_events() const { return dropped_events_; }
  size_t pending_events() const { return events_.size(); }
  size_t pending_imu() const { return imu_.size(); }

 private:
  void note_epoch(double t) {
    if (last_emit_t_ == -std::numeric_limits<double>::infinity()) last_emit_t_ = t;
  }

  std::optional<FrameBundle> maybe_emit() {
    if (static_cast<int>(events_.size()) < cfg_.n_event) return std::nullopt;
    if (static_cast<int>(imu_.size()) < cfg_.n_imu) return std::nullopt;
    if (imu_.back().t < max_event_t_) return std::nullopt;
    return emit(false);
  }

  FrameBundle emit(bool forced) {
    FrameBundle bundle;
    bundle.events = std::move(events_);
    bundle.imu = imu_;
    bundle.t_frame = imu_.back().t;
    bundle.forced = forced;
    events_.clear();
    imu_ = {imu_.back()};  // shared boundary sample
    last_emit_t_ = bundle.t_frame;
    return bundle;
  }

  PipelineConfig cfg_;
  std::vector<Event> events_;
  std::vector<ImuSample> imu_;
  double max_event_t_ = -std::numeric_limits<double>::infinity();
  double last_emit_t_ = -std::numeric_limits<double>::infinity();
  int dropped_events_ = 0;
};

struct Keyframe {
  double t = 0.0;
  TimeSurfaceMap tsm;
  std::optional<Preintegration> pre_from_prev;
  std::vector<ImuSample> imu_span;  // raw samples backing pre_from_prev
  FullState state;
  bool forced = false;
};

/// Packages the frame observation from an already up-to-date event surface:
/// the TSM at the bundle close plus the IMU span from the previous keyframe
/// and a propagated state guess.
inline Keyframe make_keyframe(const FrameBundle& bundle, const SurfaceOfActiveEvents& sae,
                              const std::optional<FullState>& prev_state, const ImuBias& bias,
                              const TsmConfig& tsm_cfg, const ImuNoiseModel& noise) {
  Keyframe kf;
  kf.t = bundle.t_frame;
  kf.forced = bundle.forced;
  kf.tsm = build_tsm(sae, bundle.t_frame, tsm_cfg);
  kf.imu_span = bundle.imu;
  if (prev_state) {
    kf.pre_from_prev = preintegrate(bundle.imu, bias, noise);
    kf.state = predict(*prev_state, bundle.imu, noise).state;
  } else {
    kf.state.t = bundle.t_frame;
    kf.state.bias = bias;
  }
  return kf;
}

/// Same, but first folds the bundle's events into the surface (for callers
/// that do not stream events into the SAE themselves).
inline Keyframe build_keyframe(const FrameBundle& bundle, SurfaceOfActiveEvents& sae,
                               const std::optional<FullState>& prev_state, const ImuBias& bias,
                               const TsmConfig& tsm_cfg, const ImuNoiseModel& noise) {
  for (const Event& e : bundle.events) sae.update(e);
  return make_keyframe(bundle, sae, prev_state, bias, tsm_cfg, noise);
}

}  // namespace evi
