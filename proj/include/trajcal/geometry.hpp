#pragma once

#include <Eigen/Dense>

#include "trajcal/common.hpp"

namespace trajcal {

using Vector6d = Eigen::Matrix<double, 6, 1>;

// Rigid pose: position plus intrinsic X-Y-Z (roll, pitch, yaw) Euler angles.
struct Pose {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Eigen::Vector3d rpy = Eigen::Vector3d::Zero();  // wrapped to (-pi, pi]
};

// R = Rx(roll) * Ry(pitch) * Rz(yaw), intrinsic X-Y-Z order.
inline Eigen::Matrix3d rotation_from_rpy(const Eigen::Vector3d& rpy) {
  const double ca = std::cos(rpy.x()), sa = std::sin(rpy.x());
  const double cb = std::cos(rpy.y()), sb = std::sin(rpy.y());
  const double cc = std::cos(rpy.z()), sc = std::sin(rpy.z());
  Eigen::Matrix3d r;
  r << cb * cc, -cb * sc, sb,
      sa * sb * cc + ca * sc, -sa * sb * sc + ca * cc, -sa * cb,
      -ca * sb * cc + sa * sc, ca * sb * sc + sa * cc, ca * cb;
  return r;
}

inline Eigen::Vector3d rpy_from_rotation(const Eigen::Matrix3d& r) {
  const double sb = std::clamp(r(0, 2), -1.0, 1.0);
  const double pitch = std::asin(sb);
  double roll, yaw;
  if (std::abs(sb) < 1.0 - 1e-12) {
    roll = std::atan2(-r(1, 2), r(2, 2));
    yaw = std::atan2(-r(0, 1), r(0, 0));
  } else {
    // Gimbal lock: split the remaining rotation into roll only.
    roll = std::atan2(r(2, 1), r(1, 1));
    yaw = 0.0;
  }
  return {roll, pitch, yaw};
}

inline Eigen::Vector3d wrap_rpy(const Eigen::Vector3d& rpy) {
  return {wrap_angle(rpy.x()), wrap_angle(rpy.y()), wrap_angle(rpy.z())};
}

inline Eigen::Isometry3d pose_to_isometry(const Pose& p) {
  Eigen::Isometry3d t = Eigen::Isometry3d::Identity();
  t.linear() = rotation_from_rpy(p.rpy);
  t.translation() = p.position;
  return t;
}

inline Pose isometry_to_pose(const Eigen::Isometry3d& t) {
  Pose p;
  p.position = t.translation();
  p.rpy = rpy_from_rotation(t.linear());
  return p;
}

inline Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

// Rotation-matrix logarithm, returned as a rotation vector.
inline Eigen::Vector3d so3_log(const Eigen::Matrix3d& r) {
  const double tr = std::clamp((r.trace() - 1.0) * 0.5, -1.0, 1.0);
  const double angle = std::acos(tr);
  if (angle < 1e-10) {
    return {0.5 * (r(2, 1) - r(1, 2)), 0.5 * (r(0, 2) - r(2, 0)),
            0.5 * (r(1, 0) - r(0, 1))};
  }
  if (angle > kPi - 1e-6) {
    // Near pi: extract the axis from the symmetric part.
    Eigen::Matrix3d s = 0.5 * (r + Eigen::Matrix3d::Identity());
    Eigen::Vector3d axis(std::sqrt(std::max(0.0, s(0, 0))),
                         std::sqrt(std::max(0.0, s(1, 1))),
                         std::sqrt(std::max(0.0, s(2, 2))));
    if (r(2, 1) - r(1, 2) < 0) axis.x() = -axis.x();
    if (r(0, 2) - r(2, 0) < 0) axis.y() = -axis.y();
    if (r(1, 0) - r(0, 1) < 0) axis.z() = -axis.z();
    return angle * axis.normalized();
  }
  const double k = angle / (2.0 * std::sin(angle));
  return {k * (r(2, 1) - r(1, 2)), k * (r(0, 2) - r(2, 0)),
          k * (r(1, 0) - r(0, 1))};
}

}  // namespace trajcal
