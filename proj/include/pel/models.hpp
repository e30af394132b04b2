#pragma once

#include <vector>

#include "pel/moment_model.hpp"

namespace pel {

// Column roles for a linear IV structural equation
//   outcome = theta' * (endogenous, [1], exogenous) + error,
// instrumented by known_iv (set I, with the intercept and exogenous columns
// self-instrumented) plus doubt_iv columns of unknown validity (set D).
struct LinearIVRoles {
  int outcome = -1;
  int endogenous = -1;
  std::vector<int> exogenous;
  std::vector<int> known_iv;
  std::vector<int> doubt_iv;
  bool intercept = true;
};

// Moment model for a role assignment: g = instrument * residual, with
// I-block instrument order (known_iv..., 1, exogenous...).
MomentModel make_linear_iv_roles_model(const LinearIVRoles& roles);

// Two-stage least squares using only the known-valid instruments; the
// default starting value for the IV models.
Eigen::VectorXd two_stage_least_squares(const Dataset& data,
                                        const LinearIVRoles& roles);

// The simulated linear-IV design: canonical column order
// (y, x, z1, z2, w1, w2 block, w3 block) with d_w2 valid and s invalid
// doubt instruments. dims: p = 4, r1 = 4, r2 = d_w2 + s.
MomentModel make_linear_iv_model(int d_w2, int s);
LinearIVRoles linear_iv_canonical_roles(int d_w2, int s);

// The dynamic-panel design: wide rows (y_0, ..., y_{h+s}),
// g_{i,j}(theta) = y_{i,j} + (lambda_j(b1) - 1) b2 - lambda_j(b1) y_{i,0}
// for j = 1..h+s with lambda_j(b1) = 2 / (1 + exp(b1 * j)); the first five
// moments form I. dims: p = 2, r1 = 5, r2 = h + s - 5.
MomentModel make_dynamic_panel_model(int h, int s);

// lambda_j and d lambda_j / d b1, overflow-safe.
double panel_lambda(double b1, int j);
double panel_lambda_deriv(double b1, int j);

}  // namespace pel
