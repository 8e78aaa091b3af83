#pragma once

#include <optional>
#include <vector>

#include <json.hpp>

#include "trajcal/lm.hpp"
#include "trajcal/sensorsim.hpp"

namespace trajcal {

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

struct CalibrationResult {
  Eigen::VectorXd theta_star;            // intrinsics (4) or extrinsics (6)
  Eigen::MatrixXd covariance;            // symmetric PSD
  Eigen::MatrixXd covariance_normalized; // dimensionless
  double reprojection_rms = 0.0;         // [px]
  bool converged = false;
  std::vector<double> cost_trace;        // accepted LM costs
};

struct OptimalityMetrics {
  double a_opt = 0.0;  // trace
  double d_opt = 0.0;  // determinant
  double e_opt = 0.0;  // maximum eigenvalue
};

inline nlohmann::json to_json(const CalibrationResult& r) {
  auto mat = [](const Eigen::MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < m.rows(); ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
      rows.push_back(row);
    }
    return rows;
  };
  nlohmann::json theta = nlohmann::json::array();
  for (int i = 0; i < r.theta_star.size(); ++i) theta.push_back(r.theta_star[i]);
  return {{"theta_star", theta},
          {"covariance", mat(r.covariance)},
          {"covariance_normalized", mat(r.covariance_normalized)},
          {"reprojection_rms", r.reprojection_rms},
          {"converged", r.converged}};
}

// ---------------------------------------------------------------------------
// Covariance utilities
// ---------------------------------------------------------------------------

// Congruence scaling by reference magnitudes: D^-1 Sigma D^-1 with
// D = diag(max(|ref_i|, 1e-3)).
inline Eigen::MatrixXd normalize_covariance(const Eigen::MatrixXd& sigma,
                                            const Eigen::VectorXd& theta_ref) {
  if (sigma.rows() != sigma.cols() || sigma.rows() != theta_ref.size()) {
    throw std::invalid_argument("normalize_covariance: dimension mismatch");
  }
  Eigen::VectorXd inv_d(theta_ref.size());
  for (int i = 0; i < theta_ref.size(); ++i) {
    inv_d[i] = 1.0 / std::max(std::abs(theta_ref[i]), 1e-3);
  }
  return inv_d.asDiagonal() * sigma * inv_d.asDiagonal();
}

inline OptimalityMetrics optimality(const Eigen::MatrixXd& sigma_bar) {
  if (sigma_bar.rows() != sigma_bar.cols()) {
    throw std::invalid_argument("optimality: matrix must be square");
  }
  const double asym =
      (sigma_bar - sigma_bar.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-9) {
    throw std::invalid_argument("optimality: matrix not symmetric");
  }
  OptimalityMetrics m;
  m.a_opt = sigma_bar.trace();
  m.d_opt = sigma_bar.determinant();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
      0.5 * (sigma_bar + sigma_bar.transpose()));
  m.e_opt = es.eigenvalues().maxCoeff();
  return m;
}

// || theta* - theta || / || theta ||, with wrapped differences on the listed
// angle components.
inline double relative_error(const Eigen::VectorXd& theta_star,
                             const Eigen::VectorXd& theta_truth,
                             const std::vector<int>& angle_indices = {}) {
  if (theta_star.size() != theta_truth.size()) {
    throw std::invalid_argument("relative_error: dimension mismatch");
  }
  const double denom = theta_truth.norm();
  if (!(denom > 0.0)) {
    throw std::invalid_argument("relative_error: zero-norm ground truth");
  }
  Eigen::VectorXd diff = theta_star - theta_truth;
  for (int idx : angle_indices) diff[idx] = wrap_angle(diff[idx]);
  return diff.norm() / denom;
}

namespace detail {

// Pseudo-inverse of a symmetric PSD matrix with an eigenvalue floor; nearly
// unobservable directions map to large covariance instead of blowing up.
inline Eigen::MatrixXd spd_pseudo_inverse(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd& ev = es.eigenvalues();
  const double floor = std::max(ev.cwiseAbs().maxCoeff() * 1e-15, 1e-18);
  Eigen::VectorXd inv = ev;
  for (int i = 0; i < inv.size(); ++i) inv[i] = 1.0 / std::max(ev[i], floor);
  Eigen::MatrixXd out =
      es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
  return 0.5 * (out + out.transpose());
}

// d(Rx Ry Rz)/d(roll, pitch, yaw).
inline std::array<Eigen::Matrix3d, 3> rotation_derivatives(
    const Eigen::Vector3d& rpy) {
  const double ca = std::cos(rpy.x()), sa = std::sin(rpy.x());
  const double cb = std::cos(rpy.y()), sb = std::sin(rpy.y());
  const double cc = std::cos(rpy.z()), sc = std::sin(rpy.z());
  Eigen::Matrix3d rx, ry, rz, drx, dry, drz;
  rx << 1, 0, 0, 0, ca, -sa, 0, sa, ca;
  ry << cb, 0, sb, 0, 1, 0, -sb, 0, cb;
  rz << cc, -sc, 0, sc, cc, 0, 0, 0, 1;
  drx << 0, 0, 0, 0, -sa, -ca, 0, ca, -sa;
  dry << -sb, 0, cb, 0, 0, 0, -cb, 0, -sb;
  drz << -sc, -cc, 0, cc, -sc, 0, 0, 0, 0;
  return {drx * ry * rz, rx * dry * rz, rx * ry * drz};
}

struct CornerResidualBlocks {
  Eigen::Vector2d residual;
  Eigen::Matrix<double, 2, 4> d_intr;
  Eigen::Matrix<double, 2, 6> d_pose;  // [t(3), rpy(3)] of the board-in-camera pose
};

// Reprojection residual of one corner through pc = R(rpy) X_board + t.
inline bool corner_residual(const Eigen::Vector4d& intr,
                            const Eigen::Matrix3d& r,
                            const std::array<Eigen::Matrix3d, 3>& dr,
                            const Eigen::Vector3d& t,
                            const Eigen::Vector3d& x_board,
                            const Eigen::Vector2d& measured,
                            CornerResidualBlocks* out) {
  const Eigen::Vector3d pc = r * x_board + t;
  if (pc.z() <= 1e-6) return false;
  const double fx = intr[0], fy = intr[1], cx = intr[2], cy = intr[3];
  const double inv_z = 1.0 / pc.z();
  const double u = fx * pc.x() * inv_z + cx;
  const double v = fy * pc.y() * inv_z + cy;
  out->residual = Eigen::Vector2d(u - measured.x(), v - measured.y());

  out->d_intr.setZero();
  out->d_intr(0, 0) = pc.x() * inv_z;
  out->d_intr(0, 2) = 1.0;
  out->d_intr(1, 1) = pc.y() * inv_z;
  out->d_intr(1, 3) = 1.0;

  Eigen::Matrix<double, 2, 3> d_pc;
  d_pc << fx * inv_z, 0.0, -fx * pc.x() * inv_z * inv_z,
      0.0, fy * inv_z, -fy * pc.y() * inv_z * inv_z;
  out->d_pose.block<2, 3>(0, 0) = d_pc;  // d pc / d t = I
  for (int k = 0; k < 3; ++k) {
    out->d_pose.block<2, 1>(0, 3 + k) = d_pc * (dr[k] * x_board);
  }
  return true;
}

inline Eigen::Vector3d board_corner_local(const Checkerboard& board, int id) {
  const int r = id / board.cols;
  const int c = id % board.cols;
  return {(c - 0.5 * (board.cols - 1)) * board.square_size,
          (r - 0.5 * (board.rows - 1)) * board.square_size, 0.0};
}

// Plane-to-image homography by normalized DLT.
inline bool homography_dlt(const std::vector<Eigen::Vector2d>& plane,
                           const std::vector<Eigen::Vector2d>& pixels,
                           Eigen::Matrix3d* h_out) {
  const int n = static_cast<int>(plane.size());
  if (n < 4) return false;
  auto normalizer = [](const std::vector<Eigen::Vector2d>& pts) {
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    for (const auto& p : pts) mean += p;
    mean /= pts.size();
    double dist = 0.0;
    for (const auto& p : pts) dist += (p - mean).norm();
    dist /= pts.size();
    const double s = (dist > 1e-12) ? std::sqrt(2.0) / dist : 1.0;
    Eigen::Matrix3d t;
    t << s, 0, -s * mean.x(), 0, s, -s * mean.y(), 0, 0, 1;
    return t;
  };
  const Eigen::Matrix3d t_plane = normalizer(plane);
  const Eigen::Matrix3d t_px = normalizer(pixels);
  Eigen::MatrixXd a(2 * n, 9);
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d p = t_plane * plane[static_cast<size_t>(i)].homogeneous();
    const Eigen::Vector3d q = t_px * pixels[static_cast<size_t>(i)].homogeneous();
    a.row(2 * i) << p.x(), p.y(), 1, 0, 0, 0, -q.x() * p.x(), -q.x() * p.y(),
        -q.x();
    a.row(2 * i + 1) << 0, 0, 0, p.x(), p.y(), 1, -q.y() * p.x(),
        -q.y() * p.y(), -q.y();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8];
  Eigen::Matrix3d out = t_px.inverse() * hn * t_plane;
  if (std::abs(out(2, 2)) < 1e-15) return false;
  *h_out = out / out(2, 2);
  return h_out->allFinite();
}

// Closed-form intrinsics and frame poses from plane homographies; seeds the
// joint bundle refinement far from the fx-depth trade-off valley that traps
// a purely local start.
inline bool closed_form_init(const std::vector<ImageObservation>& frames,
                             const Checkerboard& board,
                             Eigen::Vector4d* intr_out,
                             std::vector<Vector6d>* poses_out) {
  const int n_frames = static_cast<int>(frames.size());
  std::vector<Eigen::Matrix3d> hs;
  for (const ImageObservation& f : frames) {
    std::vector<Eigen::Vector2d> plane, pixels;
    for (const CornerDetection& c : f.corners) {
      plane.push_back(board_corner_local(board, c.id).head<2>());
      pixels.push_back({c.u, c.v});
    }
    Eigen::Matrix3d h;
    if (!homography_dlt(plane, pixels, &h)) return false;
    hs.push_back(h);
  }

  auto v_row = [](const Eigen::Matrix3d& h, int i, int j) {
    Eigen::Matrix<double, 6, 1> v;
    v << h(0, i) * h(0, j), h(0, i) * h(1, j) + h(1, i) * h(0, j),
        h(1, i) * h(1, j), h(2, i) * h(0, j) + h(0, i) * h(2, j),
        h(2, i) * h(1, j) + h(1, i) * h(2, j), h(2, i) * h(2, j);
    return v;
  };
  Eigen::MatrixXd v(2 * n_frames, 6);
  for (int f = 0; f < n_frames; ++f) {
    const Eigen::Matrix3d& h = hs[static_cast<size_t>(f)];
    v.row(2 * f) = v_row(h, 0, 1).transpose();
    v.row(2 * f + 1) = (v_row(h, 0, 0) - v_row(h, 1, 1)).transpose();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(v, Eigen::ComputeFullV);
  Eigen::Matrix<double, 6, 1> b = svd.matrixV().col(5);
  if (b[0] < 0) b = -b;
  const double b11 = b[0], b12 = b[1], b22 = b[2], b13 = b[3], b23 = b[4],
               b33 = b[5];
  const double denom = b11 * b22 - b12 * b12;
  if (!(b11 > 0.0) || !(denom > 0.0)) return false;
  const double cy = (b12 * b13 - b11 * b23) / denom;
  const double lam = b33 - (b13 * b13 + cy * (b12 * b13 - b11 * b23)) / b11;
  if (!(lam / b11 > 0.0) || !(lam * b11 / denom > 0.0)) return false;
  const double fx = std::sqrt(lam / b11);
  const double fy = std::sqrt(lam * b11 / denom);
  const double cx = -b13 * fx * fx / lam;
  if (!std::isfinite(fx) || !std::isfinite(fy) || fx < 10 || fy < 10 ||
      fx > 1e5 || fy > 1e5) {
    return false;
  }
  *intr_out = Eigen::Vector4d(fx, fy, cx, cy);

  Eigen::Matrix3d k;
  k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
  const Eigen::Matrix3d k_inv = k.inverse();
  poses_out->clear();
  for (const Eigen::Matrix3d& h : hs) {
    const Eigen::Vector3d r1 = k_inv * h.col(0);
    const Eigen::Vector3d r2 = k_inv * h.col(1);
    const double scale = 1.0 / r1.norm();
    Eigen::Vector3d t = scale * (k_inv * h.col(2));
    Eigen::Matrix3d r;
    r.col(0) = scale * r1;
    r.col(1) = scale * r2;
    r.col(2) = r.col(0).cross(r.col(1));
    if (t.z() < 0) {  // board must sit in front of the camera
      r.col(0) = -r.col(0);
      r.col(1) = -r.col(1);
      t = -t;
    }
    Eigen::JacobiSVD<Eigen::Matrix3d> rsvd(
        r, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d ortho = rsvd.matrixU() * rsvd.matrixV().transpose();
    if (ortho.determinant() < 0) {
      Eigen::Matrix3d flip = Eigen::Matrix3d::Identity();
      flip(2, 2) = -1;
      ortho = rsvd.matrixU() * flip * rsvd.matrixV().transpose();
    }
    Vector6d pose;
    pose.head<3>() = t;
    pose.tail<3>() = rpy_from_rotation(ortho);
    poses_out->push_back(pose);
  }
  return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// PnP: board pose in the camera frame from one observation
// ---------------------------------------------------------------------------

struct PnpResult {
  Vector6d pose = Vector6d::Zero();  // [t(3), rpy(3)] board -> camera
  double rms = 0.0;
  bool converged = false;
};

inline PnpResult estimate_board_pose(const ImageObservation& frame,
                                     const CameraIntrinsics& intr,
                                     const Checkerboard& board,
                                     const Vector6d& init,
                                     int max_iterations = 30) {
  const Eigen::Vector4d k = intr.vec();
  auto residual_fn = [&](const Eigen::VectorXd& p) {
    Eigen::VectorXd r(2 * frame.corners.size());
    const Eigen::Matrix3d rot = rotation_from_rpy(p.tail<3>());
    const auto dr = detail::rotation_derivatives(p.tail<3>());
    detail::CornerResidualBlocks blocks;
    for (size_t i = 0; i < frame.corners.size(); ++i) {
      const CornerDetection& c = frame.corners[i];
      if (detail::corner_residual(k, rot, dr, p.head<3>(),
                                  detail::board_corner_local(board, c.id),
                                  {c.u, c.v}, &blocks)) {
        r.segment<2>(2 * i) = blocks.residual;
      } else {
        r.segment<2>(2 * i) = Eigen::Vector2d(1e3, 1e3);  // behind camera
      }
    }
    return r;
  };
  auto jacobian_fn = [&](const Eigen::VectorXd& p) {
    Eigen::MatrixXd jac =
        Eigen::MatrixXd::Zero(2 * static_cast<int>(frame.corners.size()), 6);
    const Eigen::Matrix3d rot = rotation_from_rpy(p.tail<3>());
    const auto dr = detail::rotation_derivatives(p.tail<3>());
    detail::CornerResidualBlocks blocks;
    for (size_t i = 0; i < frame.corners.size(); ++i) {
      const CornerDetection& c = frame.corners[i];
      if (detail::corner_residual(k, rot, dr, p.head<3>(),
                                  detail::board_corner_local(board, c.id),
                                  {c.u, c.v}, &blocks)) {
        jac.block<2, 6>(2 * static_cast<int>(i), 0) = blocks.d_pose;
      }
    }
    return jac;
  };

  LmOptions opts;
  opts.max_iterations = max_iterations;
  const LmResult lm = levenberg_marquardt(residual_fn, jacobian_fn, init, opts);
  PnpResult out;
  out.pose = lm.params;
  out.pose.tail<3>() = wrap_rpy(out.pose.tail<3>());
  out.rms = std::sqrt(lm.cost / std::max<size_t>(1, frame.corners.size()));
  out.converged = lm.converged;
  return out;
}

// ---------------------------------------------------------------------------
// Intrinsic calibration: joint LM over (fx, fy, cx, cy) and per-frame poses
// ---------------------------------------------------------------------------

struct IntrinsicCalibOptions {
  int max_iterations = 50;
  CameraIntrinsics prior = intrinsics_from_fov(1.0, 640, 480);
  // Magnitudes used to normalize the covariance; the estimate itself is the
  // fallback when no reference is supplied.
  Eigen::VectorXd normalization_reference;
};

inline CalibrationResult calibrate_intrinsics(
    const std::vector<ImageObservation>& kept_frames, const Checkerboard& board,
    const IntrinsicCalibOptions& opts = {}) {
  const int n_frames = static_cast<int>(kept_frames.size());
  if (n_frames < 3) {
    throw insufficient_data_error("calibrate_intrinsics: need >= 3 frames");
  }
  int total_corners = 0;
  for (const ImageObservation& f : kept_frames) {
    if (f.corners.size() < 6) {
      throw insufficient_data_error(
          "calibrate_intrinsics: every frame needs >= 6 corners");
    }
    total_corners += static_cast<int>(f.corners.size());
  }

  Eigen::Vector4d intr = opts.prior.vec();
  Vector6d frontal = Vector6d::Zero();
  frontal[2] = (board.pose.position - Eigen::Vector3d::Zero()).norm();
  std::vector<Vector6d> poses(static_cast<size_t>(n_frames));
  Eigen::Vector4d closed_intr;
  std::vector<Vector6d> closed_poses;
  if (detail::closed_form_init(kept_frames, board, &closed_intr,
                               &closed_poses)) {
    intr = closed_intr;
    CameraIntrinsics seed = opts.prior;
    seed.fx = intr[0];
    seed.fy = intr[1];
    seed.cx = intr[2];
    seed.cy = intr[3];
    for (int f = 0; f < n_frames; ++f) {
      poses[static_cast<size_t>(f)] =
          estimate_board_pose(kept_frames[static_cast<size_t>(f)], seed, board,
                              closed_poses[static_cast<size_t>(f)], 10)
              .pose;
    }
  } else {
    // Degenerate view geometry: fall back to the prior and warm-started PnP.
    for (int f = 0; f < n_frames; ++f) {
      const Vector6d init =
          (f == 0) ? frontal : poses[static_cast<size_t>(f - 1)];
      PnpResult pnp = estimate_board_pose(kept_frames[static_cast<size_t>(f)],
                                          opts.prior, board, init, 20);
      if (f > 0 && pnp.rms > 2.0) {
        const PnpResult retry = estimate_board_pose(
            kept_frames[static_cast<size_t>(f)], opts.prior, board, frontal,
            20);
        if (retry.rms < pnp.rms) pnp = retry;
      }
      poses[static_cast<size_t>(f)] = pnp.pose;
    }
  }

  struct Blocks {
    Eigen::Matrix4d a;                    // intrinsic-intrinsic
    std::vector<Eigen::Matrix<double, 4, 6>> b;  // intrinsic-pose
    std::vector<Eigen::Matrix<double, 6, 6>> c;  // pose-pose
    Eigen::Vector4d gi;
    std::vector<Vector6d> gf;
    double cost = 0.0;
  };

  auto evaluate = [&](const Eigen::Vector4d& k, const std::vector<Vector6d>& ps,
                      bool with_blocks, Blocks* out) {
    if (with_blocks) {
      out->a.setZero();
      out->gi.setZero();
      out->b.assign(static_cast<size_t>(n_frames),
                    Eigen::Matrix<double, 4, 6>::Zero());
      out->c.assign(static_cast<size_t>(n_frames),
                    Eigen::Matrix<double, 6, 6>::Zero());
      out->gf.assign(static_cast<size_t>(n_frames), Vector6d::Zero());
    }
    double cost = 0.0;
    detail::CornerResidualBlocks blk;
    for (int f = 0; f < n_frames; ++f) {
      const Vector6d& p = ps[static_cast<size_t>(f)];
      const Eigen::Matrix3d rot = rotation_from_rpy(p.tail<3>());
      const auto dr = detail::rotation_derivatives(p.tail<3>());
      for (const CornerDetection& c : kept_frames[static_cast<size_t>(f)].corners) {
        if (!detail::corner_residual(k, rot, dr, p.head<3>(),
                                     detail::board_corner_local(board, c.id),
                                     {c.u, c.v}, &blk)) {
          cost += 2e6;  // behind camera: heavily penalized
          continue;
        }
        cost += blk.residual.squaredNorm();
        if (with_blocks) {
          out->a += blk.d_intr.transpose() * blk.d_intr;
          out->b[static_cast<size_t>(f)] += blk.d_intr.transpose() * blk.d_pose;
          out->c[static_cast<size_t>(f)] += blk.d_pose.transpose() * blk.d_pose;
          out->gi += blk.d_intr.transpose() * blk.residual;
          out->gf[static_cast<size_t>(f)] += blk.d_pose.transpose() * blk.residual;
        }
      }
    }
    if (with_blocks) out->cost = cost;
    return cost;
  };

  CalibrationResult result;
  double cost = evaluate(intr, poses, false, nullptr);
  result.cost_trace.push_back(cost);
  double lambda = 1e-4;
  bool converged = false;

  for (int iter = 0; iter < opts.max_iterations && !converged; ++iter) {
    Blocks blocks;
    evaluate(intr, poses, true, &blocks);
    double grad_inf = blocks.gi.lpNorm<Eigen::Infinity>();
    for (const Vector6d& g : blocks.gf) {
      grad_inf = std::max(grad_inf, g.lpNorm<Eigen::Infinity>());
    }
    if (grad_inf < 1e-12) {
      converged = true;
      break;
    }

    bool accepted = false;
    for (int retry = 0; retry < 50; ++retry) {
      Eigen::Matrix4d a = blocks.a;
      for (int k = 0; k < 4; ++k) a(k, k) += lambda * std::max(a(k, k), 1e-12);
      Eigen::Matrix4d s = a;
      Eigen::Vector4d rhs = blocks.gi;
      std::vector<Eigen::Matrix<double, 6, 6>> c_inv(
          static_cast<size_t>(n_frames));
      for (int f = 0; f < n_frames; ++f) {
        Eigen::Matrix<double, 6, 6> c = blocks.c[static_cast<size_t>(f)];
        for (int k = 0; k < 6; ++k) c(k, k) += lambda * std::max(c(k, k), 1e-12);
        c_inv[static_cast<size_t>(f)] = c.inverse();
        s -= blocks.b[static_cast<size_t>(f)] * c_inv[static_cast<size_t>(f)] *
             blocks.b[static_cast<size_t>(f)].transpose();
        rhs -= blocks.b[static_cast<size_t>(f)] * c_inv[static_cast<size_t>(f)] *
               blocks.gf[static_cast<size_t>(f)];
      }
      const Eigen::Vector4d d_intr = s.ldlt().solve(-rhs);
      std::vector<Vector6d> cand_poses = poses;
      for (int f = 0; f < n_frames; ++f) {
        const Vector6d d_pose =
            -c_inv[static_cast<size_t>(f)] *
            (blocks.gf[static_cast<size_t>(f)] +
             blocks.b[static_cast<size_t>(f)].transpose() * d_intr);
        cand_poses[static_cast<size_t>(f)] += d_pose;
      }
      const Eigen::Vector4d cand_intr = intr + d_intr;
      const double cand_cost = evaluate(cand_intr, cand_poses, false, nullptr);
      if (std::isfinite(cand_cost) && cand_cost < cost) {
        const double decrease = (cost - cand_cost) / std::max(cost, 1e-300);
        intr = cand_intr;
        poses = cand_poses;
        cost = cand_cost;
        result.cost_trace.push_back(cost);
        lambda = std::max(lambda * 0.1, 1e-12);
        accepted = true;
        if (decrease < 1e-15) converged = true;
        break;
      }
      lambda *= 10.0;
    }
    if (!accepted) break;  // keep best-so-far
  }
  if (result.cost_trace.size() > 1) converged = true;

  // Marginal intrinsic covariance from the undamped normal equations.
  Blocks blocks;
  evaluate(intr, poses, true, &blocks);
  Eigen::Matrix4d s = blocks.a;
  for (int f = 0; f < n_frames; ++f) {
    s -= blocks.b[static_cast<size_t>(f)] *
         detail::spd_pseudo_inverse(blocks.c[static_cast<size_t>(f)]) *
         blocks.b[static_cast<size_t>(f)].transpose();
  }
  const int m = 2 * total_corners;
  const int n_params = 4 + 6 * n_frames;
  const double sigma2 = (m > n_params) ? cost / (m - n_params) : 0.0;
  Eigen::MatrixXd cov = sigma2 * detail::spd_pseudo_inverse(s);
  cov = 0.5 * (cov + cov.transpose());

  result.theta_star = intr;
  result.covariance = cov;
  const Eigen::VectorXd ref = opts.normalization_reference.size() == 4
                                  ? opts.normalization_reference
                                  : Eigen::VectorXd(intr);
  result.covariance_normalized = normalize_covariance(cov, ref);
  result.reprojection_rms = std::sqrt(cost / total_corners);
  result.converged = converged;
  return result;
}

// ---------------------------------------------------------------------------
// Extrinsic calibration: PnP camera trajectory + kinematic IMU residuals
// ---------------------------------------------------------------------------

struct ExtrinsicCalibOptions {
  int outer_iterations = 10;   // 1 during training, 10 at evaluation
  int frames_per_segment = 60; // camera frames per action
  int residual_subsample = 4;
  ImuSpec imu;                 // rate and noise scales for residual weighting
  RigExtrinsics prior = nominal_extrinsics();
  int min_corners = 6;
  double min_usable_fraction = 0.5;
  Eigen::VectorXd normalization_reference;
};

inline CalibrationResult calibrate_extrinsics(
    const std::vector<ImageObservation>& frames,
    const std::vector<ImuSample>& imu, const CameraIntrinsics& intr,
    const Checkerboard& board, const ExtrinsicCalibOptions& opts = {}) {
  const int n_frames = static_cast<int>(frames.size());
  const int per_seg = opts.frames_per_segment;
  if (n_frames < 2 * per_seg + 1 || (n_frames - 1) % per_seg != 0) {
    throw insufficient_data_error(
        "calibrate_extrinsics: need at least two whole actions of frames");
  }
  if (imu.empty()) {
    throw insufficient_data_error("calibrate_extrinsics: no IMU samples");
  }
  const int n_segments = (n_frames - 1) / per_seg;
  const double dt_cam = frames[1].timestamp - frames[0].timestamp;

  // Camera trajectory knots from PnP on the board observations.
  const Eigen::Matrix3d r_wb = rotation_from_rpy(board.pose.rpy);
  std::vector<bool> usable(static_cast<size_t>(n_frames), false);
  std::vector<Eigen::Vector3d> cam_pos(static_cast<size_t>(n_frames));
  std::vector<Eigen::Vector3d> cam_rpy(static_cast<size_t>(n_frames));
  Vector6d init = Vector6d::Zero();
  init[2] = board.pose.position.norm();
  int n_usable = 0;
  double pnp_sq_sum = 0.0;
  for (int f = 0; f < n_frames; ++f) {
    const ImageObservation& frame = frames[static_cast<size_t>(f)];
    if (static_cast<int>(frame.corners.size()) < opts.min_corners) continue;
    const PnpResult pnp = estimate_board_pose(frame, intr, board, init, 20);
    init = pnp.pose;
    const Eigen::Matrix3d r_cb = rotation_from_rpy(pnp.pose.tail<3>());
    const Eigen::Matrix3d r_wc = r_wb * r_cb.transpose();
    cam_pos[static_cast<size_t>(f)] =
        board.pose.position - r_wc * pnp.pose.head<3>();
    cam_rpy[static_cast<size_t>(f)] = rpy_from_rotation(r_wc);
    usable[static_cast<size_t>(f)] = true;
    pnp_sq_sum += pnp.rms * pnp.rms;
    ++n_usable;
  }
  if (n_usable < opts.min_usable_fraction * n_frames || n_usable < 2) {
    throw insufficient_data_error(
        "calibrate_extrinsics: board visible in too few frames");
  }

  // Continuous Euler knots: unwrap against the previous knot, then fill
  // missing knots by linear interpolation between usable neighbors.
  {
    int prev = -1;
    for (int f = 0; f < n_frames; ++f) {
      if (!usable[static_cast<size_t>(f)]) continue;
      if (prev >= 0) {
        for (int k = 0; k < 3; ++k) {
          double a = cam_rpy[static_cast<size_t>(f)][k];
          const double ref = cam_rpy[static_cast<size_t>(prev)][k];
          while (a - ref > kPi) a -= 2.0 * kPi;
          while (a - ref < -kPi) a += 2.0 * kPi;
          cam_rpy[static_cast<size_t>(f)][k] = a;
        }
      }
      prev = f;
    }
    int last = -1;
    for (int f = 0; f < n_frames; ++f) {
      if (usable[static_cast<size_t>(f)]) {
        if (last >= 0 && f - last > 1) {
          for (int g = last + 1; g < f; ++g) {
            const double w = static_cast<double>(g - last) / (f - last);
            cam_pos[static_cast<size_t>(g)] =
                (1 - w) * cam_pos[static_cast<size_t>(last)] +
                w * cam_pos[static_cast<size_t>(f)];
            cam_rpy[static_cast<size_t>(g)] =
                (1 - w) * cam_rpy[static_cast<size_t>(last)] +
                w * cam_rpy[static_cast<size_t>(f)];
          }
        } else if (last < 0 && f > 0) {
          for (int g = 0; g < f; ++g) {
            cam_pos[static_cast<size_t>(g)] = cam_pos[static_cast<size_t>(f)];
            cam_rpy[static_cast<size_t>(g)] = cam_rpy[static_cast<size_t>(f)];
          }
        }
        last = f;
      }
    }
    for (int g = last + 1; g < n_frames; ++g) {
      cam_pos[static_cast<size_t>(g)] = cam_pos[static_cast<size_t>(last)];
      cam_rpy[static_cast<size_t>(g)] = cam_rpy[static_cast<size_t>(last)];
    }
  }

  std::vector<PoseSeries> segments;
  for (int s = 0; s < n_segments; ++s) {
    PoseSeries series;
    series.t0 = frames[static_cast<size_t>(s * per_seg)].timestamp;
    series.dt = dt_cam;
    for (int j = 0; j <= per_seg; ++j) {
      series.positions.push_back(cam_pos[static_cast<size_t>(s * per_seg + j)]);
      series.rpys.push_back(cam_rpy[static_cast<size_t>(s * per_seg + j)]);
    }
    segments.push_back(std::move(series));
  }

  // Measured samples grouped by segment, subsampled.
  const double seg_span = per_seg * dt_cam;
  std::vector<std::vector<const ImuSample*>> measured(
      static_cast<size_t>(n_segments));
  {
    const double t_first = segments.front().t0;
    for (const ImuSample& s : imu) {
      const int seg = static_cast<int>((s.timestamp - t_first) / seg_span);
      if (seg < 0 || seg >= n_segments) continue;
      measured[static_cast<size_t>(seg)].push_back(&s);
    }
  }
  const double dt_imu = 1.0 / opts.imu.rate;
  const double w_gyro = 1.0 / std::max(opts.imu.gyro_noise, 1e-6);
  const double w_accel = 1.0 / std::max(opts.imu.accel_noise, 1e-5);

  auto residual_fn = [&](const Eigen::VectorXd& x) {
    RigExtrinsics e;
    e.translation = x.head<3>();
    e.rpy = x.tail<3>();
    std::vector<double> values;
    for (int s = 0; s < n_segments; ++s) {
      const std::vector<ImuSample> predicted =
          predict_imu(segments[static_cast<size_t>(s)], e, opts.imu.rate);
      const double t0 = segments[static_cast<size_t>(s)].t0;
      for (size_t m = 0; m < measured[static_cast<size_t>(s)].size();
           m += static_cast<size_t>(opts.residual_subsample)) {
        const ImuSample& meas = *measured[static_cast<size_t>(s)][m];
        const int k =
            static_cast<int>(std::llround((meas.timestamp - t0) / dt_imu)) - 1;
        if (k < 0 || k >= static_cast<int>(predicted.size())) continue;
        const ImuSample& pred = predicted[static_cast<size_t>(k)];
        for (int d = 0; d < 3; ++d) {
          values.push_back(w_gyro * (pred.angular_velocity[d] -
                                     meas.angular_velocity[d]));
        }
        for (int d = 0; d < 3; ++d) {
          values.push_back(w_accel *
                           (pred.specific_force[d] - meas.specific_force[d]));
        }
      }
    }
    return Eigen::Map<Eigen::VectorXd>(values.data(),
                                       static_cast<int>(values.size()))
        .eval();
  };
  auto jacobian_fn = [&](const Eigen::VectorXd& x) {
    return numeric_jacobian(residual_fn, x, 1e-7);
  };

  Eigen::VectorXd x0(6);
  x0 << opts.prior.translation, opts.prior.rpy;

  // Without angular excitation the lever arm never enters the dynamics and
  // the translation columns of the residual Jacobian vanish; flag the motion
  // as unobservable before wasting iterations on it.
  {
    double max_omega = 0.0;
    for (const PoseSeries& s : segments) {
      for (const ImuSample& p : predict_imu(s, opts.prior, opts.imu.rate)) {
        max_omega = std::max(max_omega, p.angular_velocity.norm());
      }
    }
    if (max_omega < 1e-4) {
      throw unobservable_motion_error(
          "calibrate_extrinsics: motion does not excite rotation between the "
          "sensors");
    }
  }

  LmOptions lm_opts;
  lm_opts.max_iterations = opts.outer_iterations;
  const LmResult lm = levenberg_marquardt(residual_fn, jacobian_fn, x0, lm_opts);

  const Eigen::VectorXd r = residual_fn(lm.params);
  const Eigen::MatrixXd jac = jacobian_fn(lm.params);
  const int m = static_cast<int>(r.size());
  const double sigma2 = (m > 6) ? r.squaredNorm() / (m - 6) : 0.0;
  Eigen::MatrixXd cov =
      sigma2 * detail::spd_pseudo_inverse(jac.transpose() * jac);
  cov = 0.5 * (cov + cov.transpose());

  CalibrationResult result;
  result.theta_star = lm.params;
  result.theta_star.tail<3>() = wrap_rpy(result.theta_star.tail<3>());
  result.covariance = cov;
  const Eigen::VectorXd ref = opts.normalization_reference.size() == 6
                                  ? opts.normalization_reference
                                  : result.theta_star;
  result.covariance_normalized = normalize_covariance(cov, ref);
  result.reprojection_rms = std::sqrt(pnp_sq_sum / n_usable);
  result.converged = lm.converged;
  result.cost_trace = lm.cost_trace;
  return result;
}

}  // namespace trajcal
