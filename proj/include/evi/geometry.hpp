#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <optional>
#include <stdexcept>

namespace evi {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Quat = Eigen::Quaterniond;

inline Mat3 skew(const Vec3& w) {
  Mat3 s;
  s << 0.0, -w.z(), w.y(),
       w.z(), 0.0, -w.x(),
      -w.y(), w.x(), 0.0;
  return s;
}

/// Unit quaternion kept normalized and on the w >= 0 hemisphere after every
/// constructing or composing operation.
class Rotation {
 public:
  Rotation() : q_(1.0, 0.0, 0.0, 0.0) {}
  explicit Rotation(const Quat& q) : q_(q) { renormalize(); }
  Rotation(double w, double x, double y, double z) : q_(w, x, y, z) { renormalize(); }

  static Rotation identity() { return Rotation(); }

  // Exponential map. Near zero the sinc factor switches to its second-order
  // Taylor expansion.
  static Rotation from_axis_angle(const Vec3& axis_angle) {
    const double angle = axis_angle.norm();
    double half_sinc;  // sin(angle/2) / angle
    double w;
    if (angle < 1e-8) {
      half_sinc = 0.5 - angle * angle / 48.0;
      w = 1.0 - angle * angle / 8.0;
    } else {
      half_sinc = std::sin(0.5 * angle) / angle;
      w = std::cos(0.5 * angle);
    }
    const Vec3 xyz = half_sinc * axis_angle;
    return Rotation(Quat(w, xyz.x(), xyz.y(), xyz.z()));
  }

  // Logarithm map; returns the rotation vector with angle in [0, pi].
  Vec3 axis_angle() const {
    const Vec3 xyz(q_.x(), q_.y(), q_.z());
    const double sin_half = xyz.norm();
    const double cos_half = q_.w();
    if (sin_half < 1e-12) return 2.0 * xyz;  // first-order inverse near identity
    const double angle = 2.0 * std::atan2(sin_half, cos_half);
    return (angle / sin_half) * xyz;
  }

  Rotation operator*(const Rotation& rhs) const { return Rotation(q_ * rhs.q_); }
  Vec3 operator*(const Vec3& v) const { return q_ * v; }

  Rotation inverse() const { return Rotation(q_.conjugate()); }
  Mat3 matrix() const { return q_.toRotationMatrix(); }
  const Quat& quat() const { return q_; }

  double w() const { return q_.w(); }
  double x() const { return q_.x(); }
  double y() const { return q_.y(); }
  double z() const { return q_.z(); }

  // Geodesic distance in radians.
  double angle_to(const Rotation& other) const {
    return (inverse() * other).axis_angle().norm();
  }

  bool approx_equal(const Rotation& other, double tol) const {
    return angle_to(other) <= tol;
  }

 private:
  void renormalize() {
    q_.normalize();
    if (q_.w() < 0.0) q_.coeffs() = -q_.coeffs();
  }

  Quat q_;
};

struct Pose {
  Rotation rotation;
  Vec3 translation{0.0, 0.0, 0.0};

  static Pose identity() { return Pose{}; }

  Pose compose(const Pose& rhs) const {
    return Pose{rotation * rhs.rotation, rotation * rhs.translation + translation};
  }

  Pose inverse() const {
    const Rotation rinv = rotation.inverse();
    return Pose{rinv, -(rinv * translation)};
  }

  Vec3 transform(const Vec3& p) const { return rotation * p + translation; }
};

/// Pinhole camera with a fixed body-to-camera extrinsic transform.
struct CameraModel {
  int width = 0;
  int height = 0;
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  Rotation extrinsic_rotation;          // R^c_b
  Vec3 extrinsic_translation{0, 0, 0};  // t^c_b

  void validate() const {
    if (width <= 0 || height <= 0) throw std::invalid_argument("camera: non-positive image size");
    if (fx <= 0.0 || fy <= 0.0) throw std::invalid_argument("camera: focal lengths must be positive");
    if (cx <= 0.0 || cx >= width) throw std::invalid_argument("camera: cx outside image");
    if (cy <= 0.0 || cy >= height) throw std::invalid_argument("camera: cy outside image");
  }
};

// Quaternion kinematics matrix: d/dt q.coeffs() = 0.5 * omega_matrix(w) * q.coeffs()
// for body-frame angular velocity w, with coefficients ordered (x, y, z, w).
inline Mat4 quat_omega_matrix(const Vec3& w) {
  Mat4 omega;
  omega.topLeftCorner<3, 3>() = -skew(w);
  omega.topRightCorner<3, 1>() = w;
  omega.bottomLeftCorner<1, 3>() = -w.transpose();
  omega(3, 3) = 0.0;
  return omega;
}

// Left/right quaternion product matrices on (x, y, z, w)-ordered coefficients:
// (q * p).coeffs() == quat_left(q) * p.coeffs() == quat_right(p) * q.coeffs().
inline Mat4 quat_left(const Quat& q) {
  Mat4 m;
  m.topLeftCorner<3, 3>() = q.w() * Mat3::Identity() + skew(q.vec());
  m.topRightCorner<3, 1>() = q.vec();
  m.bottomLeftCorner<1, 3>() = -q.vec().transpose();
  m(3, 3) = q.w();
  return m;
}

inline Mat4 quat_right(const Quat& q) {
  Mat4 m;
  m.topLeftCorner<3, 3>() = q.w() * Mat3::Identity() - skew(q.vec());
  m.topRightCorner<3, 1>() = q.vec();
  m.bottomLeftCorner<1, 3>() = -q.vec().transpose();
  m(3, 3) = q.w();
  return m;
}

// Right Jacobian of SO(3): Exp(phi + d) ~= Exp(phi) * Exp(Jr(phi) d).
inline Mat3 so3_right_jacobian(const Vec3& phi) {
  const double angle = phi.norm();
  const Mat3 s = skew(phi);
  if (angle < 1e-6) {
    return Mat3::Identity() - 0.5 * s + (1.0 / 6.0) * s * s;
  }
  const double a2 = angle * angle;
  return Mat3::Identity() - (1.0 - std::cos(angle)) / a2 * s +
         (angle - std::sin(angle)) / (a2 * angle) * s * s;
}

// Body-frame world point: R^c_b * R^T(theta) * (P - p) + t^c_b.
inline Vec3 world_point_to_camera(const Vec3& point_world, const Rotation& body_rotation,
                                  const Vec3& body_position, const CameraModel& camera) {
  return camera.extrinsic_rotation * (body_rotation.inverse() * (point_world - body_position)) +
         camera.extrinsic_translation;
}

inline constexpr double kMinProjectionDepth = 1e-6;  // meters

// Pinhole projection; nullopt when the point is at or behind the camera plane.
inline std::optional<Vec2> project(const Vec3& point_camera, const CameraModel& camera) {
  if (point_camera.z() <= kMinProjectionDepth) return std::nullopt;
  const double inv_z = 1.0 / point_camera.z();
  return Vec2(camera.fx * point_camera.x() * inv_z + camera.cx,
              camera.fy * point_camera.y() * inv_z + camera.cy);
}

// d(pixel) / d(camera point), valid for z > kMinProjectionDepth.
inline Eigen::Matrix<double, 2, 3> projection_jacobian(const Vec3& point_camera,
                                                       const CameraModel& camera) {
  const double inv_z = 1.0 / point_camera.z();
  Eigen::Matrix<double, 2, 3> j;
  j << camera.fx * inv_z, 0.0, -camera.fx * point_camera.x() * inv_z * inv_z,
       0.0, camera.fy * inv_z, -camera.fy * point_camera.y() * inv_z * inv_z;
  return j;
}

}  // namespace evi
