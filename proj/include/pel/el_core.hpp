#pragma once

#include <Eigen/Dense>
#include <limits>
#include <vector>

#include "pel/penalties.hpp"

namespace pel {

struct LogStar {
  double value;
  double d1;
  double d2;
};

// Safeguarded logarithm: log(z) with exact derivatives for z >= eps, the
// quadratic extension log(eps) + (z-eps)/eps - (z-eps)^2/(2 eps^2) below.
// Value and both derivatives are continuous at the knot, making the inner
// objective smooth and total.
LogStar log_star(double z, double eps);

// sign(x) * max(|x| - t, 0)
double soft_threshold(double x, double t);

struct InnerConfig {
  double tol = 1e-8;        // KKT sup-norm residual
  int max_sweeps = 500;
  double lambda_cap = 1e10;  // divergence guard
  // Ascent is monotone, so once the objective exceeds this bound the final
  // value will too; the solver returns immediately with capped = true.
  // Callers comparing saddle values against an incumbent use this to reject
  // doomed trial points after a sweep or two instead of polishing them.
  double objective_cap = std::numeric_limits<double>::infinity();
};

// Stationary point of f(lambda) = n^-1 sum_i log_star(1 + lambda' g_i)
//                                 - sum_{j in D} P2(|lambda_j|).
struct InnerSolution {
  Eigen::VectorXd lambda;
  double objective = 0.0;     // f at lambda
  double smooth_value = 0.0;  // the log part alone
  // n^-1 G' ls'(z): the moment-balance vector; equals the penalty
  // subgradient on active penalized coordinates at stationarity.
  Eigen::VectorXd smooth_grad;
  Eigen::VectorXd score_weights;  // ls'(z_i)/n per observation
  Eigen::VectorXd hess_weights;   // -ls''(z_i)/n per observation, nonnegative
  double mean_d1 = 0.0;           // n^-1 sum_i ls'(z_i)
  std::vector<int> active_set;    // j in D with lambda_j != 0 (global index)
  std::vector<int> zero_columns;  // all-zero moment columns pinned at 0
  std::vector<double> objective_path;  // per sweep, nondecreasing
  double kkt_residual = 0.0;
  int iterations = 0;
  bool converged = false;
  bool capped = false;  // stopped early after crossing objective_cap
};

// Penalized dual ascent: joint damped Newton on the unpenalized block
// (columns < r1), cyclic coordinate thresholding on the penalized block with
// the local-linear-approximation weight P2'(|lambda_j|). eps = 1/n. Throws
// NumericalError when iterates diverge (origin outside the convex hull).
InnerSolution inner_maximize(const Eigen::MatrixXd& G, int r1,
                             const PenaltySpec& pen2,
                             const Eigen::VectorXd* warm = nullptr,
                             const InnerConfig& cfg = InnerConfig());

// pi_i proportional to 1/(n (1 + lambda' g_i)), normalized to sum to one.
// Throws NumericalError if some 1 + lambda' g_i <= 0.
Eigen::VectorXd implied_probabilities(const Eigen::MatrixXd& G,
                                      const Eigen::VectorXd& lambda);

// Plain (unpenalized) EL log-likelihood ratio 2 sum_i log(1 + lambda' g_i)
// at the dual optimum over all columns.
double el_loglik_ratio(const Eigen::MatrixXd& G, double tol = 1e-8);

}  // namespace pel
