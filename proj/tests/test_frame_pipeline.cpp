#include <catch2/catch_amalgamated.hpp>

#include <evi/frame_pipeline.hpp>
#include <evi/synth.hpp>

#include <optional>

using namespace evi;

namespace {

PipelineConfig small_config(int n_event, int n_imu) {
  PipelineConfig cfg;
  cfg.n_event = n_event;
  cfg.n_imu = n_imu;
  return cfg;
}

Event ev(double t, int u = 10, int v = 12, int polarity = 1) { return {t, u, v, polarity}; }

ImuSample imu(double t) {
  ImuSample s;
  s.t = t;
  s.accel = Vec3(0, 0, 9.81);
  s.gyro = Vec3::Zero();
  return s;
}

}  // namespace

TEST_CASE("bundle emission waits for both thresholds and a closing imu sample") {
  FrameBuffer buf(small_config(3, 2));
  REQUIRE_FALSE(buf.ingest_event(ev(0.001)));
  REQUIRE_FALSE(buf.ingest_event(ev(0.002)));
  for (int i = 0; i < 5; ++i) REQUIRE_FALSE(buf.ingest_imu(imu(0.005 * (i + 1))));

  // third event is newer than every buffered imu sample, so nothing closes yet
  REQUIRE_FALSE(buf.ingest_event(ev(0.027)));
  const auto bundle = buf.ingest_imu(imu(0.030));
  REQUIRE(bundle);
  REQUIRE(bundle->t_frame == 0.030);
  REQUIRE(bundle->events.size() == 3);
  REQUIRE(bundle->imu.size() == 6);
  REQUIRE_FALSE(bundle->forced);
  REQUIRE(buf.pending_events() == 0);
  REQUIRE(buf.pending_imu() == 1);  // boundary sample seeds the next span
}

TEST_CASE("imu-only streams never emit") {
  FrameBuffer buf(small_config(3, 2));
  for (int i = 0; i < 300; ++i) {
    const auto bundle = buf.ingest_imu(imu(0.001 * (i + 1)));
    if (bundle) REQUIRE(bundle->forced);  // only the stillness guard may fire
  }
  REQUIRE(buf.pending_events() == 0);
}

TEST_CASE("paced burst yields one bundle per event group") {
  FrameBuffer buf(small_config(100, 2));
  std::vector<FrameBundle> bundles;
  double imu_t = 0.0;
  for (int group = 0; group < 10; ++group) {
    const double t0 = group * 0.05;
    for (int i = 0; i < 100; ++i)
      if (auto b = buf.ingest_event(ev(t0 + i * 1e-5))) bundles.push_back(*b);
    while (imu_t < t0 + 0.01) {
      imu_t += 0.005;
      if (auto b = buf.ingest_imu(imu(imu_t))) bundles.push_back(*b);
    }
  }
  REQUIRE(bundles.size() == 10);
  size_t total_events = 0;
  for (size_t i = 0; i < bundles.size(); ++i) {
    REQUIRE(bundles[i].events.size() == 100);
    total_events += bundles[i].events.size();
    if (i > 0) {
      REQUIRE(bundles[i].t_frame > bundles[i - 1].t_frame);
      // spans chain through the shared boundary sample
      REQUIRE(bundles[i].imu.front().t == bundles[i - 1].t_frame);
    }
    REQUIRE(bundles[i].t_frame == bundles[i].imu.back().t);
    for (const Event& e : bundles[i].events) REQUIRE(e.t <= bundles[i].t_frame);
  }
  REQUIRE(total_events == 1000);
  REQUIRE(buf.dropped_events() == 0);
}

TEST_CASE("stale events are dropped and counted, tolerance is 1 ms") {
  FrameBuffer buf(small_config(1000, 2));
  REQUIRE_FALSE(buf.ingest_event(ev(1.0)));
  REQUIRE_FALSE(buf.ingest_event(ev(0.9)));      // 100 ms stale
  REQUIRE_FALSE(buf.ingest_event(ev(0.9995)));   // within tolerance
  REQUIRE(buf.dropped_events() == 1);
  REQUIRE(buf.pending_events() == 2);
  REQUIRE_THROWS_AS([&] {
    buf.ingest_imu(imu(2.0));
    buf.ingest_imu(imu(2.0));
  }(), std::invalid_argument);
}

TEST_CASE("replay determinism") {
  const TrajectorySpec spec = [] {
    TrajectorySpec s;
    s.amplitude = 0.4;
    s.rate = 1.5;
    s.duration = 2.0;
    return s;
  }();
  const SemiDenseMap map = gen_scene(SceneKind::kGrid, 8.0, 2.0);
  SimConfig sim;
  const std::vector<Event> events = gen_events(spec, map, sim);
  const std::vector<ImuSample> samples = gen_imu(spec, sim);

  auto run = [&] {
    FrameBuffer buf(small_config(2000, 4));
    std::vector<double> frame_times;
    std::vector<size_t> sizes;
    size_t ei = 0;
    for (const ImuSample& s : samples) {
      while (ei < events.size() && events[ei].t <= s.t) {
        if (auto b = buf.ingest_event(events[ei++]))
          frame_times.push_back(b->t_frame), sizes.push_back(b->events.size());
      }
      if (auto b = buf.ingest_imu(s))
        frame_times.push_back(b->t_frame), sizes.push_back(b->events.size());
    }
    return std::pair(frame_times, sizes);
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.first == b.first);
  REQUIRE(a.second == b.second);
  REQUIRE(a.first.size() >= 3);
}

TEST_CASE("no data loss across bundles") {
  FrameBuffer buf(small_config(50, 3));
  std::vector<FrameBundle> bundles;
  size_t fed_events = 0;
  size_t fed_imu = 0;
  CounterRng rng(3);
  double next_ev = 0.0003;
  for (int i = 0; i < 400; ++i) {
    const double imu_t = 0.005 * (i + 1);
    while (next_ev <= imu_t) {
      ++fed_events;
      if (auto b = buf.ingest_event(ev(next_ev))) bundles.push_back(*b);
      next_ev += 0.0002 + 0.0002 * rng.next_double();
    }
    ++fed_imu;
    if (auto b = buf.ingest_imu(imu(imu_t))) bundles.push_back(*b);
  }
  REQUIRE(bundles.size() > 20);
  for (const auto& b : bundles) REQUIRE_FALSE(b.forced);
  size_t in_bundles = 0;
  for (const auto& b : bundles) in_bundles += b.events.size();
  REQUIRE(in_bundles + buf.pending_events() == fed_events);

  // interior imu samples appear in exactly one span, boundaries in two
  size_t span_samples = 0;
  for (const auto& b : bundles) span_samples += b.imu.size();
  REQUIRE(span_samples == fed_imu - buf.pending_imu() + (bundles.size() - 1) + 1);
}

TEST_CASE("stillness guard forces periodic frames") {
  PipelineConfig cfg = small_config(1000000, 4);
  cfg.force_interval = 1.0;
  FrameBuffer buf(cfg);
  std::vector<FrameBundle> bundles;
  for (int i = 0; i <= 500; ++i) {
    if (i % 50 == 0) buf.ingest_event(ev(0.005 * i));
    if (auto b = buf.ingest_imu(imu(0.005 * (i + 1)))) bundles.push_back(*b);
  }
  REQUIRE(bundles.size() == 2);
  REQUIRE(bundles[0].forced);
  REQUIRE(bundles[0].t_frame == Catch::Approx(1.0).margin(0.01));
  REQUIRE(bundles[1].t_frame == Catch::Approx(2.0).margin(0.01));
  REQUIRE(bundles[0].events.size() > 0);
}

TEST_CASE("keyframes package the frame observation") {
  const TrajectorySpec spec = [] {
    TrajectorySpec s;
    s.amplitude = 0.3;
    s.rate = 1.0;
    s.duration = 1.0;
    return s;
  }();
  const SemiDenseMap map = gen_scene(SceneKind::kGrid, 8.0, 2.0);
  SimConfig sim;
  const std::vector<Event> events = gen_events(spec, map, sim);
  const std::vector<ImuSample> samples = gen_imu(spec, sim);

  FrameBuffer buf(small_config(1000, 4));
  SurfaceOfActiveEvents sae(sim.camera.width, sim.camera.height);
  const TsmConfig tsm_cfg;
  const ImuNoiseModel noise;
  const ImuBias bias;

  std::vector<Keyframe> kfs;
  std::optional<FullState> prev;
  size_t ei = 0;
  auto handle = [&](const std::optional<FrameBundle>& b) {
    if (!b) return;
    Keyframe kf = build_keyframe(*b, sae, prev, bias, tsm_cfg, noise);
    if (!prev) {
      const TrajectorySample t0 = eval_trajectory(spec, kf.t);
      kf.state.rotation = t0.rotation;
      kf.state.position = t0.position;
      kf.state.velocity = t0.velocity;
    }
    prev = kf.state;
    kfs.push_back(std::move(kf));
  };
  for (const ImuSample& s : samples) {
    while (ei < events.size() && events[ei].t <= s.t) handle(buf.ingest_event(events[ei++]));
    handle(buf.ingest_imu(s));
  }

  REQUIRE(kfs.size() >= 4);
  REQUIRE_FALSE(kfs[0].pre_from_prev.has_value());
  for (size_t i = 1; i < kfs.size(); ++i) {
    REQUIRE(kfs[i].pre_from_prev.has_value());
    REQUIRE(std::abs(kfs[i].pre_from_prev->dt - (kfs[i].t - kfs[i - 1].t)) < 1e-6);
    REQUIRE(kfs[i].state.t == Catch::Approx(kfs[i].t).margin(1e-12));
  }
  // the propagated guesses track ground truth over this short noiseless run
  const Keyframe& last = kfs.back();
  const TrajectorySample gt = eval_trajectory(spec, last.t);
  REQUIRE((last.state.position - gt.position).norm() < 1e-3);
  REQUIRE(last.state.rotation.angle_to(gt.rotation) < 1e-3);

  // the TSM is anchored at the bundle close and sees recent activity
  int dark = 0;
  const TimeSurfaceMap& tsm = last.tsm;
  for (int v = 0; v < tsm.height(); ++v)
    for (int u = 0; u < tsm.width(); ++u)
      if (tsm.value_at(u, v) < 250.0) ++dark;
  REQUIRE(dark > 100);
  REQUIRE(tsm.t_ref() == last.t);
}

TEST_CASE("stationary bundles keep the predicted state put") {
  FrameBuffer buf(small_config(10, 4));
  SurfaceOfActiveEvents sae(64, 48);
  std::optional<FullState> prev;
  FullState init;
  init.position = Vec3(0.5, -0.2, 1.0);
  init.t = 0.0;

  std::vector<Keyframe> kfs;
  double t = 0.0;
  int made = 0;
  while (made < 3) {
    for (int i = 0; i < 10; ++i) buf.ingest_event(ev(t + 1e-4 * i, 5 + i, 7));
    t += 0.005;
    ImuSample s = imu(t);
    if (auto b = buf.ingest_imu(s)) {
      if (!prev) {
        // seed the span chain so the first real span starts at a known state
        Keyframe kf = build_keyframe(*b, sae, std::nullopt, ImuBias{}, TsmConfig{}, ImuNoiseModel{});
        kf.state = init;
        kf.state.t = kf.t;
        prev = kf.state;
        kfs.push_back(std::move(kf));
      } else {
        Keyframe kf = build_keyframe(*b, sae, prev, ImuBias{}, TsmConfig{}, ImuNoiseModel{});
        prev = kf.state;
        kfs.push_back(std::move(kf));
      }
      ++made;
    }
  }
  for (size_t i = 1; i < kfs.size(); ++i) {
    REQUIRE((kfs[i].state.position - init.position).norm() < 1e-9);
    REQUIRE(kfs[i].state.velocity.norm() < 1e-9);
    REQUIRE(kfs[i].state.rotation.angle_to(Rotation::identity()) < 1e-9);
  }
}

TEST_CASE("frame rate follows the event rate") {
  FrameBuffer buf(small_config(400, 2));
  int slow_frames = 0, fast_frames = 0;
  double next_ev = 1e-4;
  for (int i = 0; i < 2000; ++i) {
    const double imu_t = 0.005 * (i + 1);
    const bool fast = imu_t > 5.0;
    const double rate = fast ? 40000.0 : 10000.0;
    while (next_ev <= imu_t) {
      if (buf.ingest_event(ev(next_ev))) (fast ? fast_frames : slow_frames)++;
      next_ev += 1.0 / rate;
    }
    if (buf.ingest_imu(imu(imu_t))) (fast ? fast_frames : slow_frames)++;
  }
  REQUIRE(slow_frames > 10);
  const double ratio = double(fast_frames) / double(slow_frames);
  REQUIRE(ratio > 3.0);
  REQUIRE(ratio < 5.0);
}

TEST_CASE("pipeline config validation") {
  REQUIRE_THROWS_AS(FrameBuffer(small_config(0, 4)), std::invalid_argument);
  REQUIRE_THROWS_AS(FrameBuffer(small_config(10, 0)), std::invalid_argument);
  PipelineConfig cfg;
  cfg.force_interval = 0.0;
  REQUIRE_THROWS_AS(FrameBuffer(cfg), std::invalid_argument);
}
