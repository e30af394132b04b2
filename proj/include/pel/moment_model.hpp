#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

namespace pel {

struct Dataset {
  Eigen::MatrixXd observations;           // n x d, rows i.i.d.
  std::vector<std::string> column_names;  // size d, may be empty

  int n() const { return static_cast<int>(observations.rows()); }
  int d() const { return static_cast<int>(observations.cols()); }
  // Index of a named column; throws DataError when absent.
  int column(const std::string& name) const;
};

// Checks n >= 2, finite entries, and name/width agreement.
void validate_dataset(const Dataset& data);

struct MomentDims {
  int p = 0;   // structural parameters
  int r1 = 0;  // known-valid moments (set I)
  int r2 = 0;  // validity-unknown moments (set D)
  int r() const { return r1 + r2; }
};

void validate_dims(const MomentDims& dims);

// psi = (theta, xi): structural parameters plus one offset per doubt moment.
struct AugmentedParam {
  Eigen::VectorXd theta;
  Eigen::VectorXd xi;

  int size() const {
    return static_cast<int>(theta.size() + xi.size());
  }
};

using MomentEval =
    std::function<Eigen::MatrixXd(const Dataset&, const Eigen::VectorXd&)>;

// Weighted theta-Jacobian sum_i w_i * dg_i/dtheta, rows = stacked moments
// (I block above D block), columns = theta. The mean Jacobian is w = 1/n.
using WeightedThetaJacobian = std::function<Eigen::MatrixXd(
    const Dataset&, const Eigen::VectorXd&, const Eigen::VectorXd&)>;

struct MomentModel {
  std::string name;
  MomentDims dims;
  MomentEval eval_initial;  // (data, theta) -> n x r1
  MomentEval eval_doubt;    // (data, theta) -> n x r2, before the xi shift
  WeightedThetaJacobian jac_theta;  // optional; empty -> finite differences
  // optional starting value for theta; empty -> zeros
  std::function<Eigen::VectorXd(const Dataset&)> default_init;
};

// Stacked per-observation moments g(X_i; psi): the I block unchanged, the
// doubt block shifted by -xi per column. Throws on dimension mismatches and
// non-finite values (naming the offending cell).
Eigen::MatrixXd eval_augmented(const MomentModel& model, const Dataset& data,
                               const AugmentedParam& psi);

// d/dpsi of the sample mean moment vector, r x (p + r2). The xi block is
// exact: top-right zero, bottom-right -Identity.
Eigen::MatrixXd mean_jacobian(const MomentModel& model, const Dataset& data,
                              const AugmentedParam& psi);

// Central-difference oracle for mean_jacobian. h <= 0 picks the default
// max(1e-6, 1e-7 * |psi|_inf).
Eigen::MatrixXd finite_diff_jacobian(const MomentModel& model,
                                     const Dataset& data,
                                     const AugmentedParam& psi,
                                     double h = 0.0);

// sum_i w_i * dg_i/dtheta (r x p); analytic callback when the model has one,
// otherwise central differences of the w-weighted moment sum.
Eigen::MatrixXd weighted_theta_jacobian(const MomentModel& model,
                                        const Dataset& data,
                                        const Eigen::VectorXd& theta,
                                        const Eigen::VectorXd& w);

}  // namespace pel
