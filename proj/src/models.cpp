#include "pel/models.hpp"

#include <cmath>
#include <string>

#include "pel/errors.hpp"

namespace pel {

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void check_column(int idx, int width, const char* role) {
  if (idx < 0 || idx >= width)
    throw ConfigError(std::string("linear-IV roles: ") + role +
                      " column index out of range");
}

// Regressor matrix (endogenous, [1], exogenous...), n x p.
Eigen::MatrixXd regressors(const Dataset& data, const LinearIVRoles& roles) {
  const int n = data.n();
  const int p =
      1 + (roles.intercept ? 1 : 0) + static_cast<int>(roles.exogenous.size());
  Eigen::MatrixXd x(n, p);
  int c = 0;
  x.col(c++) = data.observations.col(roles.endogenous);
  if (roles.intercept) x.col(c++).setOnes();
  for (int idx : roles.exogenous) x.col(c++) = data.observations.col(idx);
  return x;
}

Eigen::MatrixXd instrument_block(const Dataset& data,
                                 const std::vector<int>& iv,
                                 const LinearIVRoles& roles,
                                 bool with_self_instruments) {
  const int n = data.n();
  int cols = static_cast<int>(iv.size());
  if (with_self_instruments)
    cols += (roles.intercept ? 1 : 0) + static_cast<int>(roles.exogenous.size());
  Eigen::MatrixXd w(n, cols);
  int c = 0;
  for (int idx : iv) w.col(c++) = data.observations.col(idx);
  if (with_self_instruments) {
    if (roles.intercept) w.col(c++).setOnes();
    for (int idx : roles.exogenous) w.col(c++) = data.observations.col(idx);
  }
  return w;
}

}  // namespace

MomentModel make_linear_iv_roles_model(const LinearIVRoles& roles) {
  if (roles.known_iv.empty())
    throw ConfigError("linear-IV roles: need at least one known-valid IV");
  const int p =
      1 + (roles.intercept ? 1 : 0) + static_cast<int>(roles.exogenous.size());
  const int r1 = static_cast<int>(roles.known_iv.size()) + (p - 1);
  const int r2 = static_cast<int>(roles.doubt_iv.size());

  auto residual = [roles](const Dataset& data,
                          const Eigen::VectorXd& theta) -> Eigen::VectorXd {
    return data.observations.col(roles.outcome) -
           regressors(data, roles) * theta;
  };

  MomentModel model;
  model.name = "linear_iv";
  model.dims = MomentDims{p, r1, r2};
  model.eval_initial = [roles, residual](const Dataset& data,
                                         const Eigen::VectorXd& theta) {
    check_column(roles.outcome, data.d(), "outcome");
    check_column(roles.endogenous, data.d(), "endogenous");
    const Eigen::VectorXd e = residual(data, theta);
    return Eigen::MatrixXd(instrument_block(data, roles.known_iv, roles, true)
                               .array()
                               .colwise() *
                           e.array());
  };
  model.eval_doubt = [roles, residual](const Dataset& data,
                                       const Eigen::VectorXd& theta) {
    const Eigen::VectorXd e = residual(data, theta);
    return Eigen::MatrixXd(instrument_block(data, roles.doubt_iv, roles, false)
                               .array()
                               .colwise() *
                           e.array());
  };
  model.jac_theta = [roles](const Dataset& data, const Eigen::VectorXd&,
                            const Eigen::VectorXd& w) {
    const Eigen::MatrixXd x = regressors(data, roles);
    const int r1 = static_cast<int>(roles.known_iv.size()) +
                   (roles.intercept ? 1 : 0) +
                   static_cast<int>(roles.exogenous.size());
    const int r2 = static_cast<int>(roles.doubt_iv.size());
    Eigen::MatrixXd jac(r1 + r2, x.cols());
    const Eigen::MatrixXd xw = x.array().colwise() * w.array();
    jac.topRows(r1) =
        -instrument_block(data, roles.known_iv, roles, true).transpose() * xw;
    if (r2 > 0)
      jac.bottomRows(r2) =
          -instrument_block(data, roles.doubt_iv, roles, false).transpose() *
          xw;
    return jac;
  };
  model.default_init = [roles](const Dataset& data) {
    return two_stage_least_squares(data, roles);
  };
  return model;
}

Eigen::VectorXd two_stage_least_squares(const Dataset& data,
                                        const LinearIVRoles& roles) {
  const Eigen::MatrixXd x = regressors(data, roles);
  const Eigen::MatrixXd z = instrument_block(data, roles.known_iv, roles, true);
  const Eigen::MatrixXd zx = z.transpose() * x;
  const Eigen::VectorXd zy =
      z.transpose() * data.observations.col(roles.outcome);
  if (z.cols() == x.cols())
    return zx.fullPivLu().solve(zy);  // just identified
  const Eigen::MatrixXd ztz = z.transpose() * z;
  const Eigen::LDLT<Eigen::MatrixXd> ztz_fact(ztz);
  const Eigen::MatrixXd xhat_x = zx.transpose() * ztz_fact.solve(zx);
  const Eigen::VectorXd xhat_y = zx.transpose() * ztz_fact.solve(zy);
  return xhat_x.ldlt().solve(xhat_y);
}

LinearIVRoles linear_iv_canonical_roles(int d_w2, int s) {
  if (d_w2 < 1 || s < 0)
    throw ConfigError("linear-IV scenario: need d_w2 >= 1, s >= 0");
  LinearIVRoles roles;
  roles.outcome = 0;
  roles.endogenous = 1;
  roles.exogenous = {2, 3};
  roles.known_iv = {4};
  roles.doubt_iv.resize(d_w2 + s);
  for (int j = 0; j < d_w2 + s; ++j) roles.doubt_iv[j] = 5 + j;
  return roles;
}

MomentModel make_linear_iv_model(int d_w2, int s) {
  MomentModel model =
      make_linear_iv_roles_model(linear_iv_canonical_roles(d_w2, s));
  model.name = "linear_iv";
  return model;
}

double panel_lambda(double b1, int j) { return 2.0 * sigmoid(-b1 * j); }

double panel_lambda_deriv(double b1, int j) {
  const double x = b1 * j;
  return -2.0 * j * sigmoid(x) * sigmoid(-x);
}

MomentModel make_dynamic_panel_model(int h, int s) {
  if (h < 5 || s < 0)
    throw ConfigError("panel scenario: need h >= 5 pre-break periods");
  const int r = h + s;
  constexpr int kInitial = 5;

  auto eval_range = [](const Dataset& data, const Eigen::VectorXd& theta,
                       int first, int last) {
    const int n = data.n();
    Eigen::MatrixXd g(n, last - first + 1);
    for (int j = first; j <= last; ++j) {
      const double lam = panel_lambda(theta[0], j);
      g.col(j - first) = data.observations.col(j).array() +
                         (lam - 1.0) * theta[1] -
                         lam * data.observations.col(0).array();
    }
    return g;
  };

  MomentModel model;
  model.name = "dynamic_panel";
  model.dims = MomentDims{2, kInitial, r - kInitial};
  model.eval_initial = [eval_range](const Dataset& data,
                                    const Eigen::VectorXd& theta) {
    return eval_range(data, theta, 1, kInitial);
  };
  model.eval_doubt = [eval_range, r](const Dataset& data,
                                     const Eigen::VectorXd& theta) {
    return eval_range(data, theta, kInitial + 1, r);
  };
  model.jac_theta = [r](const Dataset& data, const Eigen::VectorXd& theta,
                        const Eigen::VectorXd& w) {
    const double wsum = w.sum();
    const double wy0 = w.dot(data.observations.col(0));
    Eigen::MatrixXd jac(r, 2);
    for (int j = 1; j <= r; ++j) {
      jac(j - 1, 0) =
          panel_lambda_deriv(theta[0], j) * (theta[1] * wsum - wy0);
      jac(j - 1, 1) = (panel_lambda(theta[0], j) - 1.0) * wsum;
    }
    return jac;
  };
  return model;
}

}  // namespace pel
