#pragma once

#include <array>
#include <ostream>
#include <vector>

#include "trajcal/geometry.hpp"

namespace trajcal {

inline constexpr int kActionDim = 36;
inline constexpr double kActionClip = 0.015;
inline constexpr double kRollPitchScale = 2.5;
inline constexpr double kYawScale = 5.0;
// Fourier harmonics of the looped trajectory basis.
inline constexpr std::array<int, 3> kHarmonics = {1, 2, 4};

using ActionVector = Eigen::Matrix<double, kActionDim, 1>;

// One MDP action: coefficients of the looped Fourier trajectory, ordered as
// a_1, b_1, a_2, b_2, a_4, b_4, each a 6-vector over
// (x[m], y[m], z[m], roll[rad], pitch[rad], yaw[rad]).
// Stored post clip-and-scale; roll/pitch/yaw components carry the 2.5/2.5/5
// gains on top of the raw +-0.015 box.
struct ActionParams {
  ActionVector coeffs = ActionVector::Zero();

  // a-coefficient block of the q-th harmonic (q_index into kHarmonics).
  Eigen::Ref<const Vector6d> a(int q_index) const {
    return coeffs.segment<6>(12 * q_index);
  }
  Eigen::Ref<const Vector6d> b(int q_index) const {
    return coeffs.segment<6>(12 * q_index + 6);
  }
};

// Looped waypoint path: a fixed base pose plus J pose offsets; the offset at
// j = J is the zero offset (the trajectory returns to base).
struct WaypointPath {
  Pose base;
  std::vector<Pose> offsets;  // j = 1..J; rpy offsets kept unwrapped

  int waypoint_count() const { return static_cast<int>(offsets.size()); }

  // Pose at waypoint j, j = 0..J; j = 0 is the base pose.
  Pose pose(int j) const {
    if (j == 0) return base;
    const Pose& off = offsets[static_cast<size_t>(j - 1)];
    Pose p;
    p.position = base.position + off.position;
    p.rpy = wrap_rpy(base.rpy + off.rpy);
    return p;
  }

  // Unwrapped Euler angles at waypoint j, for interpolation.
  Eigen::Vector3d unwrapped_rpy(int j) const {
    if (j == 0) return base.rpy;
    return base.rpy + offsets[static_cast<size_t>(j - 1)].rpy;
  }
};

// Clamps every raw element to the +-0.015 box.
inline ActionVector clip_raw(const ActionVector& raw) {
  return raw.cwiseMax(-kActionClip).cwiseMin(kActionClip);
}

// Applies the roll/pitch x2.5 and yaw x5 gains to a clipped coefficient set.
inline ActionVector scale_angles(const ActionVector& clipped) {
  ActionVector out = clipped;
  for (int block = 0; block < 6; ++block) {
    out[block * 6 + 3] *= kRollPitchScale;
    out[block * 6 + 4] *= kRollPitchScale;
    out[block * 6 + 5] *= kYawScale;
  }
  return out;
}

// Clip-then-scale: raw elements clamped to +-0.015, then angle components
// multiplied by their gains. Translation components are left untouched.
inline ActionParams clip_and_scale(const ActionVector& raw) {
  if (!raw.allFinite()) {
    throw invalid_action_error("clip_and_scale: non-finite action element");
  }
  ActionParams p;
  p.coeffs = scale_angles(clip_raw(raw));
  return p;
}

// Basis offset at waypoint j of J:
//   sum_{q in {1,2,4}} a_q * (1 - cos(2 q pi j / J)) + b_q * sin(2 q pi j / J)
inline Vector6d basis_offset(const ActionParams& params, int j, int J) {
  Vector6d off = Vector6d::Zero();
  for (size_t qi = 0; qi < kHarmonics.size(); ++qi) {
    const double phase = 2.0 * kHarmonics[qi] * kPi * j / J;
    off += params.a(static_cast<int>(qi)) * (1.0 - std::cos(phase)) +
           params.b(static_cast<int>(qi)) * std::sin(phase);
  }
  return off;
}

inline WaypointPath generate_waypoints(const ActionParams& params,
                                       const Pose& base, int J) {
  if (J < 2) throw std::invalid_argument("generate_waypoints: J must be >= 2");
  WaypointPath path;
  path.base = base;
  path.offsets.reserve(static_cast<size_t>(J));
  for (int j = 1; j <= J; ++j) {
    const Vector6d off = basis_offset(params, j, J);
    Pose p;
    p.position = off.head<3>();
    p.rpy = off.tail<3>();
    path.offsets.push_back(p);
  }
  return path;
}

// Path length per the weighted waypoint-to-waypoint sum:
//   sum_j ||dpos_j||_2 + C * ||deuler_j||_2
// with j running over consecutive pairs including base -> first waypoint.
inline double path_length(const WaypointPath& path, double euler_weight) {
  if (euler_weight < 0.0) {
    throw std::invalid_argument("path_length: C must be >= 0");
  }
  double total = 0.0;
  Eigen::Vector3d prev_pos = path.base.position;
  Eigen::Vector3d prev_rpy = path.base.rpy;
  for (int j = 1; j <= path.waypoint_count(); ++j) {
    const Pose p = path.pose(j);
    const Eigen::Vector3d rpy = path.unwrapped_rpy(j);
    Eigen::Vector3d drpy = rpy - prev_rpy;
    for (int k = 0; k < 3; ++k) drpy[k] = wrap_angle(drpy[k]);
    total += (p.position - prev_pos).norm() + euler_weight * drpy.norm();
    prev_pos = p.position;
    prev_rpy = rpy;
  }
  return total;
}

// CSV with columns j,x,y,z,roll,pitch,yaw (j = 0 is the base pose).
inline void write_waypoints_csv(const WaypointPath& path, std::ostream& os) {
  os << "j,x,y,z,roll,pitch,yaw\n";
  char buf[256];
  for (int j = 0; j <= path.waypoint_count(); ++j) {
    const Pose p = path.pose(j);
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  j, p.position.x(), p.position.y(), p.position.z(), p.rpy.x(),
                  p.rpy.y(), p.rpy.z());
    os << buf;
  }
}

}  // namespace trajcal
