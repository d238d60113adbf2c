#include "longseg/lbfgs.hpp"

#include <cmath>
#include <deque>
#include <limits>

#include "longseg/error.hpp"

namespace longseg {

namespace {

struct Pair {
  Eigen::VectorXd s;
  Eigen::VectorXd y;
  double rho;
};

Eigen::VectorXd two_loop_direction(const std::deque<Pair>& pairs, const Eigen::VectorXd& grad) {
  Eigen::VectorXd q = grad;
  std::vector<double> alpha(pairs.size());
  for (std::size_t i = pairs.size(); i-- > 0;) {
    alpha[i] = pairs[i].rho * pairs[i].s.dot(q);
    q -= alpha[i] * pairs[i].y;
  }
  if (!pairs.empty()) {
    const Pair& last = pairs.back();
    q *= last.s.dot(last.y) / last.y.squaredNorm();
  }
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double beta = pairs[i].rho * pairs[i].y.dot(q);
    q += (alpha[i] - beta) * pairs[i].s;
  }
  return -q;
}

}  // namespace

LbfgsResult lbfgs_minimize(
    const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>& objective,
    const Eigen::VectorXd& x0, const LbfgsConfig& config,
    const std::function<bool(const Eigen::VectorXd&)>& feasible) {
  if (config.memory < 1 || config.max_iters < 0) {
    throw validation_error("lbfgs_minimize: bad configuration");
  }
  if (feasible && !feasible(x0)) {
    throw validation_error("lbfgs_minimize: starting point is infeasible");
  }

  LbfgsResult result;
  result.x = x0;
  Eigen::VectorXd grad(x0.size());
  result.value = objective(result.x, grad);
  if (!std::isfinite(result.value)) {
    throw numeric_error("lbfgs_minimize: objective is not finite at the starting point");
  }

  std::deque<Pair> pairs;
  for (int iter = 0; iter < config.max_iters; ++iter) {
    if (grad.lpNorm<Eigen::Infinity>() < config.grad_tol) {
      result.converged = true;
      break;
    }

    Eigen::VectorXd direction = two_loop_direction(pairs, grad);
    double slope = grad.dot(direction);
    if (!(slope < 0.0)) {
      direction = -grad;
      slope = grad.dot(direction);
      pairs.clear();
    }

    double lo = 0.0;
    double hi = std::numeric_limits<double>::infinity();
    double step = config.initial_step;
    bool accepted = false;
    Eigen::VectorXd x_new;
    Eigen::VectorXd grad_new(grad.size());
    double value_new = 0.0;
    bool have_armijo_point = false;
    double armijo_value = 0.0;
    Eigen::VectorXd armijo_x, armijo_grad;
    for (int ls = 0; ls < config.max_line_search_steps; ++ls) {
      x_new = result.x + step * direction;
      bool armijo = false;
      if (!feasible || feasible(x_new)) {
        value_new = objective(x_new, grad_new);
        armijo = std::isfinite(value_new) &&
                 value_new <= result.value + config.armijo_c1 * step * slope;
      }
      if (!armijo) {
        hi = step;
      } else if (grad_new.dot(direction) < config.wolfe_c2 * slope) {
        lo = step;
        have_armijo_point = true;
        armijo_value = value_new;
        armijo_x = x_new;
        armijo_grad = grad_new;
      } else {
        accepted = true;
        break;
      }
      step = std::isfinite(hi) ? 0.5 * (lo + hi) : 2.0 * step;
    }
    if (!accepted && have_armijo_point) {
      x_new = std::move(armijo_x);
      value_new = armijo_value;
      grad_new = std::move(armijo_grad);
      accepted = true;
    }
    if (!accepted) {
      result.line_search_failed = true;
      break;
    }

    Pair pair;
    pair.s = x_new - result.x;
    pair.y = grad_new - grad;
    const double sy = pair.s.dot(pair.y);
    if (sy > 1e-12 * pair.s.norm() * pair.y.norm()) {
      pair.rho = 1.0 / sy;
      pairs.push_back(std::move(pair));
      if (static_cast<int>(pairs.size()) > config.memory) pairs.pop_front();
    }

    result.x = std::move(x_new);
    result.value = value_new;
    grad = std::move(grad_new);
    result.iterations = iter + 1;
  }
  if (!result.converged && grad.lpNorm<Eigen::Infinity>() < config.grad_tol) {
    result.converged = true;
  }
  return result;
}

}  // namespace longseg
