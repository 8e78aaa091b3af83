#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <vector>

#include <json.hpp>

#include "trajcal/trajectory.hpp"

namespace trajcal {

// ---------------------------------------------------------------------------
// Sensor rig types
// ---------------------------------------------------------------------------

struct CameraIntrinsics {
  double fx = 0.0, fy = 0.0;  // [px]
  double cx = 0.0, cy = 0.0;  // [px]
  int width = 640, height = 480;

  Eigen::Vector4d vec() const { return {fx, fy, cx, cy}; }

  bool valid() const {
    return fx > 0 && fy > 0 && cx > 0 && cx < width && cy > 0 && cy < height;
  }
};

// Pose of the camera frame expressed in the IMU frame: x_imu = R * x_cam + t.
struct RigExtrinsics {
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();  // [m]
  Eigen::Vector3d rpy = Eigen::Vector3d::Zero();           // wrapped [rad]

  Vector6d vec() const {
    Vector6d v;
    v << translation, rpy;
    return v;
  }
};

struct Checkerboard {
  int rows = 6;  // interior corner counts
  int cols = 7;
  double square_size = 0.06;  // [m]
  Pose pose;                  // board frame -> world

  int corner_count() const { return rows * cols; }

  // World position of interior corner id = r * cols + c; the grid is centered
  // on the board frame origin.
  Eigen::Vector3d corner_world(int id) const {
    const int r = id / cols;
    const int c = id % cols;
    const Eigen::Vector3d local((c - 0.5 * (cols - 1)) * square_size,
                                (r - 0.5 * (rows - 1)) * square_size, 0.0);
    return rotation_from_rpy(pose.rpy) * local + pose.position;
  }

  bool valid() const { return rows >= 2 && cols >= 2 && square_size > 0; }
};

struct ImuSpec {
  double rate = 200.0;          // [Hz]
  double accel_noise = 0.004;   // sigma [m/s^2]
  double accel_drift = 0.006;   // random-walk magnitude [m/s^2]
  double gyro_noise = 0.0003394;     // sigma [rad/s]
  double gyro_drift = 0.000038785;   // random-walk magnitude [rad/s]

  bool valid() const {
    return rate > 0 && accel_noise >= 0 && accel_drift >= 0 &&
           gyro_noise >= 0 && gyro_drift >= 0;
  }
};

struct CornerDetection {
  int id = 0;
  double u = 0.0, v = 0.0;  // [px]
};

struct ImageObservation {
  double timestamp = 0.0;  // [s]
  std::vector<CornerDetection> corners;
  Pose camera_pose;  // camera -> world at capture time
};

struct ImuSample {
  double timestamp = 0.0;                                       // [s]
  Eigen::Vector3d specific_force = Eigen::Vector3d::Zero();     // [m/s^2]
  Eigen::Vector3d angular_velocity = Eigen::Vector3d::Zero();   // [rad/s]
};

// Nominal rig constants (the simulated desk setup).
inline Checkerboard nominal_board() {
  Checkerboard b;
  b.pose.position = Eigen::Vector3d(0.0, 0.0, 2.0);  // centered, 2 m ahead
  return b;
}

inline CameraIntrinsics intrinsics_from_fov(double horizontal_fov, int width,
                                            int height) {
  CameraIntrinsics intr;
  intr.width = width;
  intr.height = height;
  intr.fx = (width / 2.0) / std::tan(horizontal_fov / 2.0);
  intr.fy = intr.fx;
  intr.cx = width / 2.0;
  intr.cy = height / 2.0;
  return intr;
}

inline RigExtrinsics nominal_extrinsics() {
  RigExtrinsics e;
  e.translation = Eigen::Vector3d(0.06, 0.0, -0.10);
  e.rpy = Eigen::Vector3d(0.0, 0.0, 1.5708);
  return e;
}

// ---------------------------------------------------------------------------
// Camera model
// ---------------------------------------------------------------------------

// Projects the board through a pinhole camera at the given pose. Corners
// behind the camera or outside the image are omitted; Gaussian pixel noise is
// added when sigma > 0 (after which out-of-image corners are dropped too).
inline ImageObservation project_board(const Pose& camera_pose,
                                      const CameraIntrinsics& intr,
                                      const Checkerboard& board,
                                      double pixel_noise_sigma,
                                      std::mt19937_64& rng,
                                      double timestamp = 0.0) {
  ImageObservation obs;
  obs.timestamp = timestamp;
  obs.camera_pose = camera_pose;
  const Eigen::Matrix3d r_wc = rotation_from_rpy(camera_pose.rpy);
  const Eigen::Matrix3d r_cw = r_wc.transpose();
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int id = 0; id < board.corner_count(); ++id) {
    const Eigen::Vector3d pc = r_cw * (board.corner_world(id) - camera_pose.position);
    if (pc.z() <= 0.0) continue;
    double u = intr.fx * pc.x() / pc.z() + intr.cx;
    double v = intr.fy * pc.y() / pc.z() + intr.cy;
    if (pixel_noise_sigma > 0.0) {
      u += pixel_noise_sigma * noise(rng);
      v += pixel_noise_sigma * noise(rng);
    }
    if (u < 0.0 || u >= intr.width || v < 0.0 || v >= intr.height) continue;
    obs.corners.push_back({id, u, v});
  }
  return obs;
}

// ---------------------------------------------------------------------------
// IMU kinematics
// ---------------------------------------------------------------------------

// Uniformly spaced camera pose knots with unwrapped Euler angles.
struct PoseSeries {
  double t0 = 0.0;
  double dt = 0.0;  // knot spacing [s]
  std::vector<Eigen::Vector3d> positions;
  std::vector<Eigen::Vector3d> rpys;  // unwrapped

  size_t size() const { return positions.size(); }
};

inline PoseSeries pose_series_from_path(const WaypointPath& path,
                                        double duration) {
  PoseSeries s;
  const int J = path.waypoint_count();
  s.dt = duration / J;
  s.positions.reserve(static_cast<size_t>(J) + 1);
  s.rpys.reserve(static_cast<size_t>(J) + 1);
  for (int j = 0; j <= J; ++j) {
    s.positions.push_back(path.pose(j).position);
    s.rpys.push_back(path.unwrapped_rpy(j));
  }
  return s;
}

namespace detail {

// Uniform Catmull-Rom interpolation; end knots are extended by linear
// extrapolation so straight segments stay straight at the path boundaries.
inline Eigen::Vector3d catmull_rom(const std::vector<Eigen::Vector3d>& knots,
                                   int i, double s) {
  const int n = static_cast<int>(knots.size());
  auto at = [&](int k) -> Eigen::Vector3d {
    if (k < 0) return 2.0 * knots[0] - knots[1];
    if (k >= n) return 2.0 * knots[static_cast<size_t>(n - 1)] -
                       knots[static_cast<size_t>(n - 2)];
    return knots[static_cast<size_t>(k)];
  };
  const Eigen::Vector3d p0 = at(i - 1);
  const Eigen::Vector3d p1 = at(i);
  const Eigen::Vector3d p2 = at(i + 1);
  const Eigen::Vector3d p3 = at(i + 2);
  const double s2 = s * s, s3 = s2 * s;
  return 0.5 * ((2.0 * p1) + (-p0 + p2) * s +
                (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * s2 +
                (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * s3);
}

inline void interpolate_series(const PoseSeries& series, double t,
                               Eigen::Vector3d* pos, Eigen::Vector3d* rpy) {
  const int n = static_cast<int>(series.size());
  const double x = (t - series.t0) / series.dt;
  int i = static_cast<int>(std::floor(x));
  i = std::clamp(i, 0, n - 2);
  const double s = x - i;
  *pos = catmull_rom(series.positions, i, s);
  *rpy = catmull_rom(series.rpys, i, s);
}

}  // namespace detail

// Resamples the camera pose knots at the IMU rate, maps each pose through the
// rig extrinsics to the IMU frame, and differentiates: specific force from
// second-order central differences of IMU position minus gravity, angular
// velocity from the rotation log of neighboring orientations. Returns samples
// at interior grid points only. This is the single kinematic prediction path
// shared by the simulator and the extrinsic estimator.
inline std::vector<ImuSample> predict_imu(const PoseSeries& camera_knots,
                                          const RigExtrinsics& extr,
                                          double rate) {
  const double duration = camera_knots.dt * (camera_knots.size() - 1);
  const double dt = 1.0 / rate;
  const int n = static_cast<int>(std::floor(duration * rate + 0.5)) + 1;

  const Eigen::Matrix3d r_ic = rotation_from_rpy(extr.rpy);
  const Eigen::Matrix3d r_ci = r_ic.transpose();
  const Eigen::Vector3d gravity(0.0, 0.0, -kGravity);

  std::vector<Eigen::Vector3d> imu_pos(static_cast<size_t>(n));
  std::vector<Eigen::Matrix3d> imu_rot(static_cast<size_t>(n));
  for (int k = 0; k < n; ++k) {
    const double t = camera_knots.t0 + k * dt;
    Eigen::Vector3d pos, rpy;
    detail::interpolate_series(camera_knots, t, &pos, &rpy);
    const Eigen::Matrix3d r_wc = rotation_from_rpy(rpy);
    imu_rot[static_cast<size_t>(k)] = r_wc * r_ci;
    imu_pos[static_cast<size_t>(k)] =
        pos - imu_rot[static_cast<size_t>(k)] * extr.translation;
  }

  std::vector<ImuSample> samples;
  samples.reserve(static_cast<size_t>(std::max(0, n - 2)));
  for (int k = 1; k + 1 < n; ++k) {
    const size_t i = static_cast<size_t>(k);
    ImuSample s;
    s.timestamp = camera_knots.t0 + k * dt;
    const Eigen::Vector3d accel =
        (imu_pos[i + 1] - 2.0 * imu_pos[i] + imu_pos[i - 1]) / (dt * dt);
    s.specific_force = imu_rot[i].transpose() * (accel - gravity);
    s.angular_velocity =
        so3_log(imu_rot[i - 1].transpose() * imu_rot[i + 1]) / (2.0 * dt);
    samples.push_back(s);
  }
  return samples;
}

// Simulated IMU stream over one action: ideal kinematic prediction plus
// per-sample Gaussian noise and a random-walk bias whose per-step standard
// deviation is drift / sqrt(rate).
inline std::vector<ImuSample> simulate_imu(const WaypointPath& path,
                                           double duration, const ImuSpec& spec,
                                           const RigExtrinsics& extr,
                                           std::mt19937_64& rng) {
  if (!(duration > 0.0) || duration < 2.0 / spec.rate) {
    throw std::invalid_argument("simulate_imu: duration below two sample periods");
  }
  if (path.waypoint_count() < 1) {
    throw std::invalid_argument("simulate_imu: path needs at least 2 waypoints");
  }
  std::vector<ImuSample> samples =
      predict_imu(pose_series_from_path(path, duration), extr, spec.rate);

  std::normal_distribution<double> gauss(0.0, 1.0);
  const double accel_walk = spec.accel_drift / std::sqrt(spec.rate);
  const double gyro_walk = spec.gyro_drift / std::sqrt(spec.rate);
  Eigen::Vector3d accel_bias = Eigen::Vector3d::Zero();
  Eigen::Vector3d gyro_bias = Eigen::Vector3d::Zero();
  for (ImuSample& s : samples) {
    for (int k = 0; k < 3; ++k) accel_bias[k] += accel_walk * gauss(rng);
    for (int k = 0; k < 3; ++k) gyro_bias[k] += gyro_walk * gauss(rng);
    for (int k = 0; k < 3; ++k) {
      s.specific_force[k] += accel_bias[k] + spec.accel_noise * gauss(rng);
      s.angular_velocity[k] += gyro_bias[k] + spec.gyro_noise * gauss(rng);
    }
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Per-episode sensor sampling
// ---------------------------------------------------------------------------

// Gaussian draws for per-episode sensor configurations.
struct SensorDistribution {
  double fov_mean = 1.00, fov_std = 0.05;  // horizontal FOV [rad]
  Eigen::Vector3d trans_mean = Eigen::Vector3d(0.06, 0.00, -0.10);
  double trans_std = 0.01;
  Eigen::Vector3d rot_mean = Eigen::Vector3d(0.0, 0.0, 1.5708);
  double rot_std = 0.10;
  int width = 640, height = 480;
};

inline std::pair<CameraIntrinsics, RigExtrinsics> sample_sensor_config(
    std::mt19937_64& rng, const SensorDistribution& dist = {}) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double fov = dist.fov_mean + dist.fov_std * gauss(rng);
  CameraIntrinsics intr = intrinsics_from_fov(fov, dist.width, dist.height);
  RigExtrinsics extr;
  for (int k = 0; k < 3; ++k)
    extr.translation[k] = dist.trans_mean[k] + dist.trans_std * gauss(rng);
  for (int k = 0; k < 3; ++k)
    extr.rpy[k] = wrap_angle(dist.rot_mean[k] + dist.rot_std * gauss(rng));
  return {intr, extr};
}

// ---------------------------------------------------------------------------
// Coverage bookkeeping
// ---------------------------------------------------------------------------

// Per-frame geometry of the detected corner set.
struct ObservationFeatures {
  double center_u = 0.0, center_v = 0.0;  // bounding-box center [px]
  double u_min = 0.0, u_max = 0.0;
  double v_min = 0.0, v_max = 0.0;
  double area_fraction = 0.0;  // quadrilateral area / image area
  double skew = 0.0;           // perspective angle distortion, >= 0
  int corner_count = 0;
};

inline ObservationFeatures observation_features(const ImageObservation& obs,
                                                const CameraIntrinsics& intr) {
  ObservationFeatures f;
  f.corner_count = static_cast<int>(obs.corners.size());
  if (obs.corners.empty()) return f;
  double u_min = 1e30, u_max = -1e30, v_min = 1e30, v_max = -1e30;
  // Extreme points of the detected set, as corners of a convex quadrilateral.
  const CornerDetection* tl = &obs.corners[0];
  const CornerDetection* br = &obs.corners[0];
  const CornerDetection* tr = &obs.corners[0];
  const CornerDetection* bl = &obs.corners[0];
  for (const CornerDetection& c : obs.corners) {
    u_min = std::min(u_min, c.u);
    u_max = std::max(u_max, c.u);
    v_min = std::min(v_min, c.v);
    v_max = std::max(v_max, c.v);
    if (c.u + c.v < tl->u + tl->v) tl = &c;
    if (c.u + c.v > br->u + br->v) br = &c;
    if (c.u - c.v > tr->u - tr->v) tr = &c;
    if (c.u - c.v < bl->u - bl->v) bl = &c;
  }
  f.u_min = u_min;
  f.u_max = u_max;
  f.v_min = v_min;
  f.v_max = v_max;
  f.center_u = 0.5 * (u_min + u_max);
  f.center_v = 0.5 * (v_min + v_max);

  auto cross = [](double ax, double ay, double bx, double by) {
    return ax * by - ay * bx;
  };
  // Shoelace area of the tl-tr-br-bl quadrilateral.
  const double area =
      0.5 * std::abs(cross(tr->u - tl->u, tr->v - tl->v, br->u - tl->u,
                           br->v - tl->v) +
                     cross(br->u - tl->u, br->v - tl->v, bl->u - tl->u,
                           bl->v - tl->v));
  f.area_fraction = area / (static_cast<double>(intr.width) * intr.height);

  // Angle at the top-left corner between the edges toward tr and bl; a
  // fronto-parallel board gives ~pi/2 and zero skew.
  const Eigen::Vector2d e1(tr->u - tl->u, tr->v - tl->v);
  const Eigen::Vector2d e2(bl->u - tl->u, bl->v - tl->v);
  if (e1.norm() > 1e-9 && e2.norm() > 1e-9) {
    const double cosang =
        std::clamp(e1.dot(e2) / (e1.norm() * e2.norm()), -1.0, 1.0);
    f.skew = std::min(1.0, 2.0 * std::abs(kPi / 2.0 - std::acos(cosang)));
  }
  return f;
}

// Monotone coverage accumulator over kept frames. The x/y channels measure
// the union of observed bounding-box extents across the image span; size and
// skew measure the covered portion of the target apparent-area range
// [5%, 50%] of image area and of the skew range [0, 0.7].
class CoverageState {
 public:
  static constexpr double kSizeLo = 0.05;
  static constexpr double kSizeHi = 0.50;
  static constexpr double kSkewLo = 0.0;
  static constexpr double kSkewHi = 0.7;

  void add(const ImageObservation& obs, const CameraIntrinsics& intr) {
    const ObservationFeatures f = observation_features(obs, intr);
    if (f.corner_count == 0) return;
    add_interval(&x_cover_, f.u_min, f.u_max);
    add_interval(&y_cover_, f.v_min, f.v_max);
    size_min_ = std::min(size_min_, f.area_fraction);
    size_max_ = std::max(size_max_, f.area_fraction);
    skew_min_ = std::min(skew_min_, f.skew);
    skew_max_ = std::max(skew_max_, f.skew);
    width_ = intr.width;
    height_ = intr.height;
    ++frames_;
  }

  // (x, y, size, skew), each in [0, 1].
  Eigen::Vector4d progress() const {
    if (frames_ == 0) return Eigen::Vector4d::Zero();
    Eigen::Vector4d p;
    p[0] = std::min(1.0, measure(x_cover_) / width_);
    p[1] = std::min(1.0, measure(y_cover_) / height_);
    p[2] = range_cover(size_min_, size_max_, kSizeLo, kSizeHi);
    p[3] = range_cover(skew_min_, skew_max_, kSkewLo, kSkewHi);
    return p;
  }

 private:
  using Intervals = std::map<double, double>;  // start -> end, disjoint

  static void add_interval(Intervals* set, double lo, double hi) {
    if (hi < lo) return;
    auto it = set->lower_bound(lo);
    if (it != set->begin()) {
      auto prev = std::prev(it);
      if (prev->second >= lo) it = prev;
    }
    while (it != set->end() && it->first <= hi) {
      lo = std::min(lo, it->first);
      hi = std::max(hi, it->second);
      it = set->erase(it);
    }
    (*set)[lo] = hi;
  }

  static double measure(const Intervals& set) {
    double total = 0.0;
    for (const auto& [lo, hi] : set) total += hi - lo;
    return total;
  }

  static double range_cover(double lo, double hi, double range_lo,
                            double range_hi) {
    const double a = std::max(lo, range_lo);
    const double b = std::min(hi, range_hi);
    return std::max(0.0, b - a) / (range_hi - range_lo);
  }

  Intervals x_cover_, y_cover_;
  double size_min_ = 1e30, size_max_ = -1e30;
  double skew_min_ = 1e30, skew_max_ = -1e30;
  double width_ = 640, height_ = 480;
  int frames_ = 0;
};

// Coverage progress of an observation batch from scratch.
inline Eigen::Vector4d coverage_progress(
    const std::vector<ImageObservation>& observations,
    const CameraIntrinsics& intr) {
  CoverageState state;
  for (const ImageObservation& obs : observations) state.add(obs, intr);
  return state.progress();
}

// ---------------------------------------------------------------------------
// Keyframe selection
// ---------------------------------------------------------------------------

struct KeyframeThresholds {
  double speed_max = 0.75;           // [m/s + rad/s], path-length weighted
  double min_feature_distance = 0.05;
  int min_corners = 6;               // frames below this are unusable anyway
};

inline Eigen::Vector4d keyframe_features(const ObservationFeatures& f,
                                         const CameraIntrinsics& intr) {
  return {f.center_u / intr.width, f.center_v / intr.height,
          std::sqrt(std::max(0.0, f.area_fraction)), f.skew};
}

// Accepts a candidate frame iff the rig moves slowly enough and the frame's
// coverage features differ from every kept frame by more than the minimum
// distance.
inline bool keyframe_filter(const ImageObservation& candidate,
                            const std::vector<ImageObservation>& kept,
                            double speed, const CameraIntrinsics& intr,
                            const KeyframeThresholds& thresholds = {}) {
  if (speed >= thresholds.speed_max) return false;
  const ObservationFeatures f = observation_features(candidate, intr);
  if (f.corner_count < thresholds.min_corners) return false;
  const Eigen::Vector4d cand = keyframe_features(f, intr);
  for (const ImageObservation& k : kept) {
    const Eigen::Vector4d kv =
        keyframe_features(observation_features(k, intr), intr);
    if ((cand - kv).norm() <= thresholds.min_feature_distance) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Serialization (newline-delimited JSON records)
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const ImageObservation& obs) {
  nlohmann::json corners = nlohmann::json::array();
  for (const CornerDetection& c : obs.corners) {
    corners.push_back({{"id", c.id}, {"u", c.u}, {"v", c.v}});
  }
  return {{"t", obs.timestamp},
          {"corners", corners},
          {"camera_pose",
           {{"position", {obs.camera_pose.position.x(), obs.camera_pose.position.y(),
                          obs.camera_pose.position.z()}},
            {"rpy", {obs.camera_pose.rpy.x(), obs.camera_pose.rpy.y(),
                     obs.camera_pose.rpy.z()}}}}};
}

inline nlohmann::json to_json(const ImuSample& s) {
  return {{"t", s.timestamp},
          {"specific_force",
           {s.specific_force.x(), s.specific_force.y(), s.specific_force.z()}},
          {"angular_velocity",
           {s.angular_velocity.x(), s.angular_velocity.y(),
            s.angular_velocity.z()}}};
}

inline nlohmann::json to_json(const CameraIntrinsics& intr) {
  return {{"fx", intr.fx}, {"fy", intr.fy},         {"cx", intr.cx},
          {"cy", intr.cy}, {"width", intr.width},   {"height", intr.height}};
}

inline nlohmann::json to_json(const RigExtrinsics& extr) {
  return {{"translation",
           {extr.translation.x(), extr.translation.y(), extr.translation.z()}},
          {"rpy", {extr.rpy.x(), extr.rpy.y(), extr.rpy.z()}}};
}

template <typename T>
void write_jsonl(const std::vector<T>& records, std::ostream& os) {
  for (const T& r : records) os << to_json(r).dump() << "\n";
}

}  // namespace trajcal
