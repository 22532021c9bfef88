#pragma once

#include <evi/geometry.hpp>

#include <Eigen/Cholesky>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace evi {

using Vec15 = Eigen::Matrix<double, 15, 1>;
using Mat15 = Eigen::Matrix<double, 15, 15>;
using Mat15x3 = Eigen::Matrix<double, 15, 3>;

struct ImuSample {
  double t = 0.0;
  Vec3 accel{0, 0, 0};  // m/s^2, specific force
  Vec3 gyro{0, 0, 0};   // rad/s
};

struct ImuBias {
  Vec3 accel{0, 0, 0};
  Vec3 gyro{0, 0, 0};
};

struct ImuNoiseModel {
  double sigma_accel = 1e-2;       // m/s^2/sqrt(Hz)
  double sigma_gyro = 1e-3;        // rad/s/sqrt(Hz)
  double sigma_accel_bias = 1e-4;  // random walk densities
  double sigma_gyro_bias = 1e-5;
  Vec3 gravity{0.0, 0.0, -9.81};   // world frame

  void validate() const {
    if (sigma_accel <= 0.0 || sigma_gyro <= 0.0 || sigma_accel_bias <= 0.0 ||
        sigma_gyro_bias <= 0.0)
      throw std::invalid_argument("imu noise: densities must be positive");
  }
};

struct FullState {
  Rotation rotation;             // body to world
  Vec3 position{0, 0, 0};
  Vec3 velocity{0, 0, 0};
  ImuBias bias;
  double t = 0.0;
};

/// Relative motion terms integrated in the frame of the interval's first
/// sample, gravity excluded. Error-state ordering throughout is
/// (d_alpha, d_beta, d_theta, d_bias_accel, d_bias_gyro).
struct Preintegration {
  double dt = 0.0;
  Vec3 alpha{0, 0, 0};  // position term, m
  Vec3 beta{0, 0, 0};   // velocity term, m/s
  Rotation gamma;
  Mat15 covariance = Mat15::Zero();
  Mat15 bias_jacobian = Mat15::Identity();
  ImuBias bias_ref;  // linearization point

  Mat3 j_alpha_ba() const { return bias_jacobian.block<3, 3>(0, 9); }
  Mat3 j_alpha_bw() const { return bias_jacobian.block<3, 3>(0, 12); }
  Mat3 j_beta_ba() const { return bias_jacobian.block<3, 3>(3, 9); }
  Mat3 j_beta_bw() const { return bias_jacobian.block<3, 3>(3, 12); }
  Mat3 j_gamma_bw() const { return bias_jacobian.block<3, 3>(6, 12); }
};

// Midpoint propagation of the relative terms with first-order error-state
// covariance and bias Jacobians accumulated alongside.
inline Preintegration preintegrate(const std::vector<ImuSample>& samples, const ImuBias& bias,
                                   const ImuNoiseModel& noise) {
  noise.validate();
  if (samples.size() < 2)
    throw std::invalid_argument("preintegration: need at least two samples");

  Preintegration pre;
  pre.bias_ref = bias;

  for (size_t k = 0; k + 1 < samples.size(); ++k) {
    const ImuSample& s0 = samples[k];
    const ImuSample& s1 = samples[k + 1];
    if (!(s0.accel.allFinite() && s0.gyro.allFinite() && s1.accel.allFinite() &&
          s1.gyro.allFinite()))
      throw std::invalid_argument("preintegration: non-finite sample");
    const double dt = s1.t - s0.t;
    if (dt <= 0.0) throw std::invalid_argument("preintegration: non-increasing timestamps");

    const Vec3 w_mid = 0.5 * (s0.gyro + s1.gyro) - bias.gyro;
    const Rotation gamma_next = pre.gamma * Rotation::from_axis_angle(w_mid * dt);
    const Mat3 r0 = pre.gamma.matrix();
    const Mat3 r1 = gamma_next.matrix();
    const Vec3 a0 = s0.accel - bias.accel;
    const Vec3 a1 = s1.accel - bias.accel;
    const Vec3 acc_mid = 0.5 * (r0 * a0 + r1 * a1);

    const Mat3 a0x = skew(a0);
    const Mat3 a1x = skew(a1);
    const Mat3 wx = skew(w_mid);
    const double dt2 = dt * dt;

    Mat15 f = Mat15::Identity();
    f.block<3, 3>(0, 3) = Mat3::Identity() * dt;
    f.block<3, 3>(0, 6) =
        -0.25 * r0 * a0x * dt2 - 0.25 * r1 * a1x * (Mat3::Identity() - wx * dt) * dt2;
    f.block<3, 3>(0, 9) = -0.25 * (r0 + r1) * dt2;
    f.block<3, 3>(0, 12) = 0.25 * r1 * a1x * dt2 * dt;
    f.block<3, 3>(3, 6) =
        -0.5 * r0 * a0x * dt - 0.5 * r1 * a1x * (Mat3::Identity() - wx * dt) * dt;
    f.block<3, 3>(3, 9) = -0.5 * (r0 + r1) * dt;
    f.block<3, 3>(3, 12) = 0.5 * r1 * a1x * dt2;
    f.block<3, 3>(6, 6) = Mat3::Identity() - wx * dt;
    f.block<3, 3>(6, 12) = -Mat3::Identity() * dt;

    // noise vector (n_a0, n_w0, n_a1, n_w1, n_ba, n_bw)
    Eigen::Matrix<double, 15, 18> v = Eigen::Matrix<double, 15, 18>::Zero();
    v.block<3, 3>(0, 0) = 0.25 * r0 * dt2;
    v.block<3, 3>(0, 3) = -0.125 * r1 * a1x * dt2 * dt;
    v.block<3, 3>(0, 6) = 0.25 * r1 * dt2;
    v.block<3, 3>(0, 9) = v.block<3, 3>(0, 3);
    v.block<3, 3>(3, 0) = 0.5 * r0 * dt;
    v.block<3, 3>(3, 3) = -0.25 * r1 * a1x * dt2;
    v.block<3, 3>(3, 6) = 0.5 * r1 * dt;
    v.block<3, 3>(3, 9) = v.block<3, 3>(3, 3);
    v.block<3, 3>(6, 3) = 0.5 * Mat3::Identity() * dt;
    v.block<3, 3>(6, 9) = 0.5 * Mat3::Identity() * dt;
    v.block<3, 3>(9, 12) = Mat3::Identity() * dt;
    v.block<3, 3>(12, 15) = Mat3::Identity() * dt;

    Eigen::Matrix<double, 18, 1> q;
    const double sa2 = noise.sigma_accel * noise.sigma_accel;
    const double sw2 = noise.sigma_gyro * noise.sigma_gyro;
    q << sa2, sa2, sa2, sw2, sw2, sw2, sa2, sa2, sa2, sw2, sw2, sw2,
        noise.sigma_accel_bias * noise.sigma_accel_bias,
        noise.sigma_accel_bias * noise.sigma_accel_bias,
        noise.sigma_accel_bias * noise.sigma_accel_bias,
        noise.sigma_gyro_bias * noise.sigma_gyro_bias,
        noise.sigma_gyro_bias * noise.sigma_gyro_bias,
        noise.sigma_gyro_bias * noise.sigma_gyro_bias;
    q /= dt;

    pre.alpha += pre.beta * dt + 0.5 * acc_mid * dt2;
    pre.beta += acc_mid * dt;
    pre.gamma = gamma_next;
    pre.covariance = f * pre.covariance * f.transpose() + v * q.asDiagonal() * v.transpose();
    pre.bias_jacobian = f * pre.bias_jacobian;
    pre.dt += dt;
  }
  pre.covariance = 0.5 * (pre.covariance + pre.covariance.transpose()).eval();
  return pre;
}

struct CorrectedTerms {
  Vec3 alpha;
  Vec3 beta;
  Rotation gamma;
  bool large_delta_warning = false;
};

// First-order update of the relative terms around the linearization biases,
// avoiding re-integration inside the optimizer.
inline CorrectedTerms bias_corrected_terms(const Preintegration& pre, const ImuBias& bias) {
  const Vec3 dba = bias.accel - pre.bias_ref.accel;
  const Vec3 dbw = bias.gyro - pre.bias_ref.gyro;
  CorrectedTerms c;
  c.large_delta_warning = dba.norm() > 0.1 || dbw.norm() > 0.1;
  c.alpha = pre.alpha + pre.j_alpha_ba() * dba + pre.j_alpha_bw() * dbw;
  c.beta = pre.beta + pre.j_beta_ba() * dba + pre.j_beta_bw() * dbw;
  c.gamma = pre.gamma * Rotation::from_axis_angle(pre.j_gamma_bw() * dbw);
  return c;
}

/// 15-row relative-motion residual between two states. Rows are ordered
/// (position, velocity, rotation, accel-bias walk, gyro-bias walk); the
/// residual and all Jacobian blocks are whitened by sqrt_info, which is the
/// inverse lower Cholesky factor of the preintegration covariance.
struct ImuResidualEval {
  Vec15 residual;
  Vec15 raw_residual;
  Mat15 sqrt_info;
  Mat15x3 j_theta_i, j_p_i, j_v_i, j_ba_i, j_bw_i;
  Mat15x3 j_theta_j, j_p_j, j_v_j, j_ba_j, j_bw_j;
  bool bias_delta_warning = false;
};

inline ImuResidualEval evaluate_imu_residual(const FullState& si, const FullState& sj,
                                             const Preintegration& pre,
                                             const ImuNoiseModel& noise) {
  const double dt = pre.dt;
  if (std::abs((sj.t - si.t) - dt) > 1e-6)
    throw std::runtime_error("imu residual: state interval does not match integration span");

  const CorrectedTerms corr = bias_corrected_terms(pre, si.bias);

  const Mat3 ri_t = si.rotation.matrix().transpose();
  const Vec3 g = noise.gravity;
  const Vec3 u_p = sj.position - si.position - si.velocity * dt - 0.5 * g * dt * dt;
  const Vec3 u_v = sj.velocity - si.velocity - g * dt;

  const Quat qi = si.rotation.quat();
  const Quat qj = sj.rotation.quat();
  const Quat gamma_inv = corr.gamma.quat().conjugate();
  const Quat m2 = qi.conjugate() * qj;
  const Quat k_raw = m2 * gamma_inv;
  const double s = k_raw.w() >= 0.0 ? 1.0 : -1.0;

  ImuResidualEval out;
  out.bias_delta_warning = corr.large_delta_warning;
  out.raw_residual.segment<3>(0) = ri_t * u_p - corr.alpha;
  out.raw_residual.segment<3>(3) = ri_t * u_v - corr.beta;
  out.raw_residual.segment<3>(6) = 2.0 * s * k_raw.vec();
  out.raw_residual.segment<3>(9) = sj.bias.accel - si.bias.accel;
  out.raw_residual.segment<3>(12) = sj.bias.gyro - si.bias.gyro;

  const Mat3 p_gamma = (quat_left(m2) * quat_right(gamma_inv)).topLeftCorner<3, 3>();
  const Vec3 phi = pre.j_gamma_bw() * (si.bias.gyro - pre.bias_ref.gyro);

  Mat15x3 jt_i = Mat15x3::Zero(), jp_i = Mat15x3::Zero(), jv_i = Mat15x3::Zero();
  Mat15x3 jba_i = Mat15x3::Zero(), jbw_i = Mat15x3::Zero();
  Mat15x3 jt_j = Mat15x3::Zero(), jp_j = Mat15x3::Zero(), jv_j = Mat15x3::Zero();
  Mat15x3 jba_j = Mat15x3::Zero(), jbw_j = Mat15x3::Zero();

  jt_i.block<3, 3>(0, 0) = skew(ri_t * u_p);
  jt_i.block<3, 3>(3, 0) = skew(ri_t * u_v);
  jt_i.block<3, 3>(6, 0) = -s * quat_right(k_raw).topLeftCorner<3, 3>();

  jp_i.block<3, 3>(0, 0) = -ri_t;
  jp_j.block<3, 3>(0, 0) = ri_t;

  jv_i.block<3, 3>(0, 0) = -ri_t * dt;
  jv_i.block<3, 3>(3, 0) = -ri_t;
  jv_j.block<3, 3>(3, 0) = ri_t;

  jba_i.block<3, 3>(0, 0) = -pre.j_alpha_ba();
  jba_i.block<3, 3>(3, 0) = -pre.j_beta_ba();
  jba_i.block<3, 3>(9, 0) = -Mat3::Identity();
  jba_j.block<3, 3>(9, 0) = Mat3::Identity();

  jbw_i.block<3, 3>(0, 0) = -pre.j_alpha_bw();
  jbw_i.block<3, 3>(3, 0) = -pre.j_beta_bw();
  jbw_i.block<3, 3>(6, 0) = -s * p_gamma * so3_right_jacobian(phi) * pre.j_gamma_bw();
  jbw_i.block<3, 3>(12, 0) = -Mat3::Identity();
  jbw_j.block<3, 3>(12, 0) = Mat3::Identity();

  jt_j.block<3, 3>(6, 0) = s * p_gamma;

  Eigen::LLT<Mat15> llt(pre.covariance);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("imu residual: covariance is not positive definite");
  out.sqrt_info = llt.matrixL().solve(Mat15::Identity());

  out.residual = out.sqrt_info * out.raw_residual;
  out.j_theta_i = out.sqrt_info * jt_i;
  out.j_p_i = out.sqrt_info * jp_i;
  out.j_v_i = out.sqrt_info * jv_i;
  out.j_ba_i = out.sqrt_info * jba_i;
  out.j_bw_i = out.sqrt_info * jbw_i;
  out.j_theta_j = out.sqrt_info * jt_j;
  out.j_p_j = out.sqrt_info * jp_j;
  out.j_v_j = out.sqrt_info * jv_j;
  out.j_ba_j = out.sqrt_info * jba_j;
  out.j_bw_j = out.sqrt_info * jbw_j;
  return out;
}

struct PredictResult {
  FullState state;
  bool empty_input = false;
};

// Forward midpoint integration of raw measurements with gravity, biases held.
inline PredictResult predict(const FullState& si, const std::vector<ImuSample>& samples,
                             const ImuNoiseModel& noise) {
  if (samples.empty()) return {si, true};
  if (std::abs(samples.front().t - si.t) > 1e-6)
    throw std::invalid_argument("predict: samples do not start at the state time");

  FullState s = si;
  const Vec3 g = noise.gravity;
  for (size_t k = 0; k + 1 < samples.size(); ++k) {
    const double dt = samples[k + 1].t - samples[k].t;
    if (dt <= 0.0) throw std::invalid_argument("predict: non-increasing timestamps");
    const Vec3 w_mid = 0.5 * (samples[k].gyro + samples[k + 1].gyro) - s.bias.gyro;
    const Rotation rot_next = s.rotation * Rotation::from_axis_angle(w_mid * dt);
    const Vec3 a0 = s.rotation * (samples[k].accel - s.bias.accel) + g;
    const Vec3 a1 = rot_next * (samples[k + 1].accel - s.bias.accel) + g;
    const Vec3 a_mid = 0.5 * (a0 + a1);
    s.position += s.velocity * dt + 0.5 * a_mid * dt * dt;
    s.velocity += a_mid * dt;
    s.rotation = rot_next;
  }
  s.t = samples.back().t;
  return {s, false};
}

}  // namespace evi
