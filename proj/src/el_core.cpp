#include "pel/el_core.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "pel/errors.hpp"

namespace pel {

LogStar log_star(double z, double eps) {
  if (z >= eps) return {std::log(z), 1.0 / z, -1.0 / (z * z)};
  const double d = z - eps;
  return {std::log(eps) + d / eps - d * d / (2.0 * eps * eps),
          1.0 / eps - d / (eps * eps), -1.0 / (eps * eps)};
}

double soft_threshold(double x, double t) {
  if (x > t) return x - t;
  if (x < -t) return x + t;
  return 0.0;
}

namespace {

struct InnerWork {
  const Eigen::MatrixXd& G;
  double eps;
  Eigen::VectorXd z;   // 1 + G lambda
  Eigen::VectorXd d1;  // ls'(z_i)
  Eigen::VectorXd d2;  // ls''(z_i)

  explicit InnerWork(const Eigen::MatrixXd& G_, double eps_)
      : G(G_), eps(eps_) {}

  double smooth_mean(const Eigen::VectorXd& zz) const {
    double acc = 0.0;
    for (int i = 0; i < zz.size(); ++i) acc += log_star(zz[i], eps).value;
    return acc / zz.size();
  }

  void refresh_derivatives() {
    const int n = static_cast<int>(z.size());
    d1.resize(n);
    d2.resize(n);
    for (int i = 0; i < n; ++i) {
      const LogStar ls = log_star(z[i], eps);
      d1[i] = ls.d1;
      d2[i] = ls.d2;
    }
  }
};

}  // namespace

InnerSolution inner_maximize(const Eigen::MatrixXd& G, int r1,
                             const PenaltySpec& pen2,
                             const Eigen::VectorXd* warm,
                             const InnerConfig& cfg) {
  const int n = static_cast<int>(G.rows());
  const int r = static_cast<int>(G.cols());
  if (n < 1 || r < 1) throw ConfigError("inner_maximize: empty moment matrix");
  if (r1 < 0 || r1 > r) throw ConfigError("inner_maximize: bad r1");
  validate_penalty(pen2);
  const double eps = 1.0 / n;
  const double thresh0 = penalty_deriv(pen2, 0.0);  // nu * rho'(0+)

  InnerSolution sol;
  sol.lambda = Eigen::VectorXd::Zero(r);
  if (warm && warm->size() == r && warm->allFinite()) sol.lambda = *warm;

  std::vector<bool> pinned(r, false);
  for (int j = 0; j < r; ++j) {
    if (G.col(j).cwiseAbs().maxCoeff() == 0.0) {
      pinned[j] = true;
      sol.zero_columns.push_back(j);
      sol.lambda[j] = 0.0;
    }
  }

  InnerWork work(G, eps);
  work.z = Eigen::VectorXd::Ones(n) + G * sol.lambda;

  auto penalty_total = [&](const Eigen::VectorXd& lam) {
    double acc = 0.0;
    for (int j = r1; j < r; ++j) acc += penalty_eval(pen2, std::fabs(lam[j]));
    return acc;
  };

  // Three-case stationarity residual; expects work.d1 to be current.
  auto kkt_residual = [&]() {
    const Eigen::VectorXd full_grad = G.transpose() * work.d1 / n;
    double res = 0.0;
    for (int j = 0; j < r; ++j) {
      if (pinned[j]) continue;
      if (j < r1) {
        res = std::max(res, std::fabs(full_grad[j]));
      } else if (sol.lambda[j] != 0.0) {
        const double sub = penalty_deriv(pen2, std::fabs(sol.lambda[j])) *
                           (sol.lambda[j] > 0.0 ? 1.0 : -1.0);
        res = std::max(res, std::fabs(full_grad[j] - sub));
      } else {
        res = std::max(res, std::max(0.0, std::fabs(full_grad[j]) - thresh0));
      }
    }
    return res;
  };

  double objective = work.smooth_mean(work.z) - penalty_total(sol.lambda);
  Eigen::VectorXd z_trial(n);

  // Newton refinement on the coordinates currently away from their kinks:
  // the whole unpenalized block plus the nonzero penalized ones.  There the
  // problem is smooth, so once coordinate steps stall inside objective
  // rounding noise this drives the stationarity residual to the tolerance.
  auto polish = [&]() {
    for (int it = 0; it < 25; ++it) {
      std::vector<int> coords;
      for (int j = 0; j < r; ++j) {
        if (pinned[j]) continue;
        if (j < r1 || sol.lambda[j] != 0.0) coords.push_back(j);
      }
      if (coords.empty()) break;
      const int m = static_cast<int>(coords.size());
      work.refresh_derivatives();
      Eigen::MatrixXd Gc(n, m);
      for (int c = 0; c < m; ++c) Gc.col(c) = G.col(coords[c]);
      Eigen::VectorXd residual = Gc.transpose() * work.d1 / n;
      Eigen::MatrixXd jac = Gc.transpose() * work.d2.asDiagonal() * Gc / n;
      for (int c = 0; c < m; ++c) {
        const int j = coords[c];
        if (j >= r1) {
          const double mag = std::fabs(sol.lambda[j]);
          residual[c] -=
              penalty_deriv(pen2, mag) * (sol.lambda[j] > 0.0 ? 1.0 : -1.0);
          jac(c, c) -= penalty_curvature(pen2, mag);
        }
      }
      if (residual.cwiseAbs().maxCoeff() <= 0.05 * cfg.tol) break;
      Eigen::MatrixXd neg = -jac;
      neg.diagonal().array() += 1e-13 * (1.0 + neg.trace() / m);
      const Eigen::VectorXd delta = neg.ldlt().solve(residual);
      if (!delta.allFinite()) break;
      bool moved = false;
      double t = 1.0;
      for (int half = 0; half < 30 && !moved; ++half, t *= 0.5) {
        bool sign_ok = true;
        for (int c = 0; c < m; ++c) {
          const int j = coords[c];
          if (j >= r1 &&
              sol.lambda[j] * (sol.lambda[j] + t * delta[c]) <= 0.0) {
            sign_ok = false;  // active coordinates may not cross zero here
            break;
          }
        }
        if (!sign_ok) continue;
        Eigen::VectorXd lam_try = sol.lambda;
        for (int c = 0; c < m; ++c) lam_try[coords[c]] += t * delta[c];
        z_trial = Eigen::VectorXd::Ones(n) + G * lam_try;
        const double obj_try =
            work.smooth_mean(z_trial) - penalty_total(lam_try);
        if (std::isfinite(obj_try) &&
            obj_try >= objective - 1e-13 * (1.0 + std::fabs(objective))) {
          sol.lambda = lam_try;
          work.z = z_trial;
          objective = obj_try;
          moved = true;
        }
      }
      if (!moved) break;
    }
    work.refresh_derivatives();
    return kkt_residual();
  };

  const int newton_dim = r1;
  Eigen::VectorXd grad_i(newton_dim);
  int sweep = 0;
  for (; sweep < cfg.max_sweeps; ++sweep) {
    work.refresh_derivatives();

    // Joint damped Newton on the unpenalized block.
    if (newton_dim > 0) {
      grad_i = G.leftCols(newton_dim).transpose() * work.d1 / n;
      Eigen::MatrixXd hess = G.leftCols(newton_dim).transpose() *
                             work.d2.asDiagonal() * G.leftCols(newton_dim) /
                             n;
      Eigen::MatrixXd neg = -hess;
      const double ridge = 1e-12 * (1.0 + neg.trace() / newton_dim);
      neg.diagonal().array() += ridge;
      Eigen::VectorXd dir = neg.ldlt().solve(grad_i);
      if (dir.allFinite() && grad_i.dot(dir) > 0.0) {
        double step = 1.0;
        const double current = work.smooth_mean(work.z);
        for (int half = 0; half < 50; ++half) {
          z_trial = work.z + G.leftCols(newton_dim) * (step * dir);
          const double trial = work.smooth_mean(z_trial);
          if (trial >= current + 1e-4 * step * grad_i.dot(dir) -
                           1e-15 * std::fabs(current)) {
            sol.lambda.head(newton_dim) += step * dir;
            work.z = z_trial;
            work.refresh_derivatives();
            objective = trial - penalty_total(sol.lambda);
            break;
          }
          step *= 0.5;
        }
      }
    }

    // Cyclic thresholded coordinate ascent on the penalized block.
    double smooth_cur = work.smooth_mean(work.z);
    for (int j = r1; j < r; ++j) {
      if (pinned[j]) continue;
      const auto col = G.col(j);
      const double q = col.dot(work.d1) / n;
      // Thresholding keeps an inactive coordinate at zero regardless of the
      // step size, so skip the quadratic and line-search work outright.
      if (sol.lambda[j] == 0.0 && std::fabs(q) <= thresh0) continue;
      const double h = (col.array().square() * work.d2.array()).sum() / n;
      const double curvature = std::max(-h, 1e-12);
      const double weight = sol.lambda[j] == 0.0
                                ? thresh0
                                : penalty_deriv(pen2, std::fabs(sol.lambda[j]));
      double step = 1.0 / curvature;
      const double lam_j = sol.lambda[j];
      const double pen_here = penalty_eval(pen2, std::fabs(lam_j));
      for (int half = 0; half < 40; ++half) {
        const double u = soft_threshold(lam_j + step * q, step * weight);
        if (u == lam_j) break;
        z_trial = work.z + (u - lam_j) * col;
        const double smooth_try = work.smooth_mean(z_trial);
        const double gain = (smooth_try - smooth_cur) -
                            (penalty_eval(pen2, std::fabs(u)) - pen_here);
        if (gain >= -1e-15 * (1.0 + std::fabs(smooth_cur))) {
          sol.lambda[j] = u;
          work.z = z_trial;
          work.refresh_derivatives();
          smooth_cur = smooth_try;
          break;
        }
        step *= 0.5;
      }
    }

    if (sol.lambda.cwiseAbs().maxCoeff() > cfg.lambda_cap)
      throw NumericalError(
          "inner_maximize: iterates diverged; origin outside convex hull of "
          "the moment rows");

    objective = smooth_cur - penalty_total(sol.lambda);
    sol.objective_path.push_back(objective);

    // Monotone ascent: crossing the cap now means the final value would too.
    if (objective > cfg.objective_cap) {
      sol.capped = true;
      ++sweep;
      break;
    }

    work.refresh_derivatives();
    double res = kkt_residual();

    // At an interior optimum the probabilities sum to one, which pins the
    // mean of 1/z near 1.  A large multiplier with that mean collapsing
    // towards zero means the iterates are escaping along a direction where
    // every row is nonnegative: the dual is unbounded.
    if (res > cfg.tol && work.d1.mean() < 0.05 &&
        sol.lambda.cwiseAbs().maxCoeff() > 1e4)
      throw NumericalError(
          "inner_maximize: dual unbounded; origin outside convex hull of "
          "the moment rows");

    // Coordinate ascent alone re-equilibrates correlated multipliers at a
    // slow linear rate; the active-set Newton finishes the smooth part in a
    // step or two, leaving the sweeps to handle support changes only.
    if (res > cfg.tol) res = polish();
    sol.kkt_residual = res;
    if (res <= cfg.tol) {
      sol.converged = true;
      ++sweep;
      break;
    }
  }

  sol.iterations = sweep;
  work.refresh_derivatives();
  sol.smooth_value = work.smooth_mean(work.z);
  sol.objective = sol.smooth_value - penalty_total(sol.lambda);
  sol.smooth_grad = G.transpose() * work.d1 / n;
  sol.score_weights = work.d1 / n;
  sol.hess_weights = -work.d2 / n;
  sol.mean_d1 = work.d1.mean();
  if (!sol.converged && !sol.capped && sol.mean_d1 < 0.05)
    throw NumericalError(
        "inner_maximize: dual unbounded; origin outside convex hull of the "
        "moment rows");
  for (int j = r1; j < r; ++j)
    if (sol.lambda[j] != 0.0) sol.active_set.push_back(j);
  return sol;
}

Eigen::VectorXd implied_probabilities(const Eigen::MatrixXd& G,
                                      const Eigen::VectorXd& lambda) {
  const int n = static_cast<int>(G.rows());
  if (lambda.size() != G.cols())
    throw ConfigError("implied_probabilities: lambda length mismatch");
  Eigen::VectorXd z = Eigen::VectorXd::Ones(n) + G * lambda;
  if ((z.array() <= 0.0).any())
    throw NumericalError(
        "implied_probabilities: 1 + lambda'g must be positive");
  Eigen::VectorXd pi = (n * z.array()).inverse();
  return pi / pi.sum();
}

double el_loglik_ratio(const Eigen::MatrixXd& G, double tol) {
  if (G.cols() < 1) throw ConfigError("el_loglik_ratio: k >= 1 required");
  InnerConfig cfg;
  cfg.tol = tol;
  const InnerSolution sol = inner_maximize(
      G, static_cast<int>(G.cols()), make_penalty(PenaltyFamily::L1, 0.0),
      nullptr, cfg);
  return 2.0 * G.rows() * sol.smooth_value;
}

}  // namespace pel
