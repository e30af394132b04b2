#include "pel/moment_model.hpp"

#include <cmath>
#include <string>

#include "pel/errors.hpp"

namespace pel {

int Dataset::column(const std::string& name) const {
  for (std::size_t j = 0; j < column_names.size(); ++j)
    if (column_names[j] == name) return static_cast<int>(j);
  throw DataError("dataset: no column named \"" + name + "\"");
}

void validate_dataset(const Dataset& data) {
  if (data.n() < 2) throw DataError("dataset: needs at least 2 rows");
  if (!data.column_names.empty() &&
      static_cast<int>(data.column_names.size()) != data.d())
    throw DataError("dataset: column_names length does not match width");
  for (int j = 0; j < data.d(); ++j)
    for (int i = 0; i < data.n(); ++i)
      if (!std::isfinite(data.observations(i, j)))
        throw DataError("dataset: non-finite value at row " +
                        std::to_string(i) + ", column " + std::to_string(j));
}

void validate_dims(const MomentDims& dims) {
  if (dims.p < 1 || dims.r1 < 1 || dims.r2 < 0)
    throw ConfigError("moment dims: need p >= 1, r1 >= 1, r2 >= 0");
}

namespace {

void check_block(const Eigen::MatrixXd& block, int n, int cols,
                 const char* which) {
  if (block.rows() != n || block.cols() != cols)
    throw DataError(std::string("moment eval: ") + which +
                    " block has wrong shape");
}

void check_finite(const Eigen::MatrixXd& g, int col_offset) {
  for (int j = 0; j < g.cols(); ++j)
    for (int i = 0; i < g.rows(); ++i)
      if (!std::isfinite(g(i, j)))
        throw NumericalError("moment eval: non-finite value at row " +
                             std::to_string(i) + ", moment " +
                             std::to_string(col_offset + j));
}

}  // namespace

Eigen::MatrixXd eval_augmented(const MomentModel& model, const Dataset& data,
                               const AugmentedParam& psi) {
  validate_dims(model.dims);
  const int n = data.n();
  const int r1 = model.dims.r1, r2 = model.dims.r2;
  if (psi.theta.size() != model.dims.p)
    throw ConfigError("eval_augmented: theta has wrong length");
  if (psi.xi.size() != r2)
    throw ConfigError("eval_augmented: xi has wrong length");

  Eigen::MatrixXd g(n, r1 + r2);
  {
    const Eigen::MatrixXd gi = model.eval_initial(data, psi.theta);
    check_block(gi, n, r1, "initial");
    g.leftCols(r1) = gi;
  }
  if (r2 > 0) {
    const Eigen::MatrixXd gd = model.eval_doubt(data, psi.theta);
    check_block(gd, n, r2, "doubt");
    g.rightCols(r2) = gd.rowwise() - psi.xi.transpose();
  }
  check_finite(g, 0);
  return g;
}

Eigen::MatrixXd mean_jacobian(const MomentModel& model, const Dataset& data,
                              const AugmentedParam& psi) {
  const int p = model.dims.p, r1 = model.dims.r1, r2 = model.dims.r2;
  const int r = r1 + r2;
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(r, p + r2);
  const Eigen::VectorXd w =
      Eigen::VectorXd::Constant(data.n(), 1.0 / data.n());
  jac.leftCols(p) = weighted_theta_jacobian(model, data, psi.theta, w);
  jac.block(r1, p, r2, r2) = -Eigen::MatrixXd::Identity(r2, r2);
  if (!jac.allFinite())
    throw NumericalError("mean_jacobian: non-finite derivative");
  return jac;
}

Eigen::MatrixXd finite_diff_jacobian(const MomentModel& model,
                                     const Dataset& data,
                                     const AugmentedParam& psi, double h) {
  const int p = model.dims.p, r2 = model.dims.r2;
  const int r = model.dims.r();
  if (h <= 0.0) {
    double sup = psi.theta.size() ? psi.theta.cwiseAbs().maxCoeff() : 0.0;
    if (psi.xi.size()) sup = std::max(sup, psi.xi.cwiseAbs().maxCoeff());
    h = std::max(1e-6, 1e-7 * sup);
  }
  Eigen::MatrixXd jac(r, p + r2);
  AugmentedParam lo = psi, hi = psi;
  auto mean_at = [&](const AugmentedParam& point) -> Eigen::VectorXd {
    return eval_augmented(model, data, point).colwise().mean();
  };
  for (int l = 0; l < p + r2; ++l) {
    double& lo_coord = l < p ? lo.theta[l] : lo.xi[l - p];
    double& hi_coord = l < p ? hi.theta[l] : hi.xi[l - p];
    const double saved = hi_coord;
    lo_coord = saved - h;
    hi_coord = saved + h;
    jac.col(l) = (mean_at(hi) - mean_at(lo)) / (2.0 * h);
    lo_coord = saved;
    hi_coord = saved;
  }
  return jac;
}

Eigen::MatrixXd weighted_theta_jacobian(const MomentModel& model,
                                        const Dataset& data,
                                        const Eigen::VectorXd& theta,
                                        const Eigen::VectorXd& w) {
  const int p = model.dims.p, r1 = model.dims.r1, r2 = model.dims.r2;
  if (model.jac_theta) {
    Eigen::MatrixXd jac = model.jac_theta(data, theta, w);
    if (jac.rows() != r1 + r2 || jac.cols() != p)
      throw ConfigError("jac_theta callback returned wrong shape");
    return jac;
  }
  // Central differences of theta -> sum_i w_i g_i(theta).
  const double h = std::max(
      1e-6, 1e-7 * (theta.size() ? theta.cwiseAbs().maxCoeff() : 0.0));
  Eigen::MatrixXd jac(r1 + r2, p);
  Eigen::VectorXd point = theta;
  auto weighted_at = [&]() -> Eigen::VectorXd {
    Eigen::VectorXd out(r1 + r2);
    out.head(r1) = model.eval_initial(data, point).transpose() * w;
    if (r2 > 0) out.tail(r2) = model.eval_doubt(data, point).transpose() * w;
    return out;
  };
  for (int l = 0; l < p; ++l) {
    const double saved = point[l];
    point[l] = saved + h;
    const Eigen::VectorXd up = weighted_at();
    point[l] = saved - h;
    const Eigen::VectorXd down = weighted_at();
    point[l] = saved;
    jac.col(l) = (up - down) / (2.0 * h);
  }
  return jac;
}

}  // namespace pel
