#pragma once

#include <Eigen/Dense>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "pel/el_core.hpp"
#include "pel/moment_model.hpp"
#include "pel/penalties.hpp"

namespace pel {

// Tuning and control knobs for the penalized fit.  pen_param drives the
// sparsity of the moment shifts (and of theta when penalize_theta is set);
// pen_multiplier drives the soft selection of doubtful moments through
// their dual coordinates.
struct PELConfig {
  PenaltySpec pen_param = make_penalty(PenaltyFamily::Scad, 0.0);
  PenaltySpec pen_multiplier = make_penalty(PenaltyFamily::Scad, 0.0);
  bool penalize_theta = false;
  double outer_tol = 1e-6;   // envelope-gradient stationarity target
  int outer_max_iter = 200;  // outer sweeps over all coordinates
  // Cap on inner problems solved across the whole fit; 0 means no cap.
  // Inner solves dominate the cost, so this is the deterministic budget
  // for grid tuning, where a few hard grid corners would otherwise eat
  // the entire runtime.
  int outer_max_evals = 0;
  double zero_tol = 1e-8;    // |xi| at or below this counts as zero
  // Complexity price per selected moment in the tuning criterion, as a
  // multiple of log(n).  1.0 is the textbook form, but when the invalid
  // moments are near-collinear their joint violation carries only a rank
  // or two of fit signal, which log(n)-per-coordinate overprices: the
  // criterion then prefers claiming them all valid.  The default is
  // calibrated on the replication designs.
  double bic_weight = 0.25;
  std::optional<Eigen::VectorXd> init_theta;   // default: model initializer
  std::optional<Eigen::VectorXd> init_xi;      // default: doubt means at start
  std::optional<Eigen::VectorXd> warm_lambda;  // dual warm start
  InnerConfig inner;
};

void validate_pel_config(const PELConfig& cfg);

struct PELFit {
  AugmentedParam psi;
  Eigen::VectorXd lambda;
  std::vector<int> selected_valid;  // doubt indices with zero shift
  std::vector<int> binding_set;     // initial rows plus active-multiplier rows
  Eigen::VectorXd eta;              // multiplier subgradients, zero on initial rows
  Eigen::VectorXd theta_se;
  Eigen::VectorXd bias;  // plug-in first-order correction; subtract to de-bias
  double objective = 0.0;        // outer value at the solution
  double inner_objective = 0.0;  // penalized dual value at the solution
  // Smooth-envelope stationarity residual.  The profile value is kinked
  // where inner multipliers change support; at such points this residual
  // stays positive even though no step improves the value.
  double outer_kkt = std::numeric_limits<double>::infinity();
  std::vector<double> objective_path;  // one entry per outer sweep
  int iterations = 0;
  // True when the envelope residual met outer_tol, or when no block or
  // single-coordinate proposal at any step scale improved the value (a
  // nonsmooth stationary point; a warning records this case).
  bool converged = false;
  // True when the final inner solution looks like a hull-escape corner
  // (implied probabilities collapsed or multipliers at the guard scale).
  // Such fits carry no usable selection information.
  bool dual_degenerate = false;
  std::vector<std::string> warnings;
  PELConfig config;  // echo of the knobs that produced the fit
};

PELFit fit_pel(const MomentModel& model, const Dataset& data,
               const PELConfig& cfg);

// Doubt moments judged valid: |xi_k| <= zero_tol, indices local to the
// doubt block.
std::vector<int> select_moments(const PELFit& fit);

// First-order bias of theta estimated from the binding rows; subtract from
// theta for the de-biased estimate.
Eigen::VectorXd estimate_bias(const PELFit& fit, const MomentModel& model,
                              const Dataset& data,
                              std::vector<std::string>* warnings = nullptr);

// Plug-in standard errors from the initial rows plus the selected valid
// rows whose multipliers are active.
Eigen::VectorXd pel_stderr(const PELFit& fit, const MomentModel& model,
                           const Dataset& data,
                           std::vector<std::string>* warnings = nullptr);

struct BicEntry {
  double nu = 0.0;
  double pi = 0.0;
  double bic = std::numeric_limits<double>::infinity();
  double fit_term = 0.0;  // quadratic-form fit over the enforced moments
  double inner_objective = 0.0;
  int df = 0;
  bool converged = false;
  bool degenerate = false;  // hull-escape corner; never an eligible winner
};

struct BicSelection {
  double nu = 0.0;
  double pi = 0.0;
  std::vector<BicEntry> table;
  PELFit fit;  // the winning fit
};

// Grid search minimizing n * gbar' V^{-1} gbar over the moments the fit
// claims hold exactly (initial block plus zero-shift doubt moments) plus
// df * bic_weight * log(n), df counting nonzero shifts (plus nonzero theta
// when penalize_theta).  The quadratic form matches the EL ratio to first
// order, stays defined when the claimed system is large relative to n,
// and keeps the criterion honest: a grid corner that zeroes every shift
// claims every moment and pays for the invalid ones through the fit term.
// Every non-degenerate fit competes, converged or stopped on budget: the
// criterion judges the state reached, and a budget-truncated state wins
// only if no completed fit beats it.  Each multiplier-penalty row walks
// the shift penalty upward from a cold dense start, chaining warm starts
// through non-degenerate fits; exact zeros are absorbing under the
// proximal step, so support must be grown from the dense side and only
// pruned as the penalty rises.
BicSelection tune_bic(const MomentModel& model, const Dataset& data,
                      const std::vector<double>& grid_nu,
                      const std::vector<double>& grid_pi, PELConfig cfg);

// Log-spaced grid of `count` values spanning [lo, hi] * sqrt(log(r)/n).
std::vector<double> default_tuning_grid(int n, int r, double lo = 0.1,
                                        double hi = 3.0, int count = 8);

struct PlainELFit {
  Eigen::VectorXd theta;
  Eigen::VectorXd se;
  double loglik_ratio = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Unpenalized EL on a subset of the stacked moment rows, shifts pinned at
// zero.  The subset must contain every initial-block row and have at least
// as many rows as parameters.
PlainELFit fit_plain_el(const MomentModel& model, const Dataset& data,
                        const std::vector<int>& subset, double tol = 1e-6,
                        int max_iter = 200);

}  // namespace pel
