#pragma once

#include <functional>

#include <Eigen/Dense>

namespace longseg {

struct LbfgsConfig {
  int memory = 10;
  int max_iters = 100;
  double grad_tol = 1e-6;        // stop when max-abs gradient entry falls below
  double initial_step = 1.0;
  double armijo_c1 = 1e-4;
  double wolfe_c2 = 0.9;
  int max_line_search_steps = 40;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;          // gradient tolerance reached
  bool line_search_failed = false; // last line search found no acceptable step
};

/// Minimizes f via limited-memory BFGS with a weak-Wolfe bisection line
/// search: accepted steps satisfy the Armijo decrease condition, and the
/// search widens or bisects until the directional derivative also meets the
/// curvature condition (falling back to the best Armijo point when it never
/// does, so iterate values are monotone either way).
///
/// `objective` returns the function value at x and fills `grad`.
/// `feasible`, when given, rejects candidate iterates before they are
/// evaluated; the bisection treats them like Armijo failures. Curvature pairs
/// with s'y <= 1e-12 |s||y| are dropped rather than corrupting the Hessian
/// estimate.
LbfgsResult lbfgs_minimize(
    const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>& objective,
    const Eigen::VectorXd& x0, const LbfgsConfig& config,
    const std::function<bool(const Eigen::VectorXd&)>& feasible = nullptr);

}  // namespace longseg
