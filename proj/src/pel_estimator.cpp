#include "pel/pel_estimator.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "pel/errors.hpp"

namespace pel {

namespace {

double accept_slack(double value) {
  return 1e-13 * (1.0 + std::fabs(value));
}

Eigen::VectorXd uniform_weights(int n) {
  return Eigen::VectorXd::Constant(n, 1.0 / n);
}

// Uncentered second-moment matrix of the selected moment rows; gt holds one
// observation per row and one moment per column.
Eigen::MatrixXd moment_variance(const Eigen::MatrixXd& gt,
                                const std::vector<int>& rows) {
  const int m = static_cast<int>(rows.size());
  Eigen::MatrixXd sub(gt.rows(), m);
  for (int c = 0; c < m; ++c) sub.col(c) = gt.col(rows[c]);
  return sub.transpose() * sub / static_cast<double>(gt.rows());
}

// Symmetric solve guarding against (near) singularity with a trace ridge.
Eigen::MatrixXd ridged_inverse(Eigen::MatrixXd m, double rel_ridge,
                               bool* ridged) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  const double top = eig.eigenvalues().cwiseAbs().maxCoeff();
  *ridged = eig.eigenvalues().minCoeff() <= 1e-12 * std::max(top, 1.0);
  if (*ridged)
    m.diagonal().array() += rel_ridge * std::max(m.trace(), 1e-300) / m.rows();
  return m.ldlt().solve(
      Eigen::MatrixXd::Identity(m.rows(), m.cols()));
}

double condition_number(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  const double lo = eig.eigenvalues().cwiseAbs().minCoeff();
  const double hi = eig.eigenvalues().cwiseAbs().maxCoeff();
  return lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
}

// A usable inner solution has its implied probabilities summing near one
// (mean of 1/z close to 1) and multipliers far from the divergence guard.
bool inner_sane(const InnerSolution& inner) {
  return inner.mean_d1 > 0.2 && inner.mean_d1 < 5.0 &&
         (inner.lambda.size() == 0 ||
          inner.lambda.cwiseAbs().maxCoeff() <= 1e4);
}

// Model-fit measure for the information criterion: the quadratic form
// n * gbar' V^{-1} gbar over the moments the fit claims hold exactly (the
// initial block plus every doubt moment whose shift is zero).  This matches
// the empirical-likelihood ratio to first order but stays defined when the
// claimed system is large relative to n, where the exact ratio has no
// feasible point.
double enforced_fit_measure(const MomentModel& model, const Dataset& data,
                            const PELFit& fit) {
  const int n = data.n();
  const int r1 = model.dims.r1;
  AugmentedParam at = fit.psi;
  std::vector<int> rows;
  for (int j = 0; j < r1; ++j) rows.push_back(j);
  for (int k = 0; k < model.dims.r2; ++k)
    if (std::fabs(at.xi[k]) <= fit.config.zero_tol) {
      at.xi[k] = 0.0;
      rows.push_back(r1 + k);
    }
  const Eigen::MatrixXd gt = eval_augmented(model, data, at);
  Eigen::VectorXd gbar(static_cast<int>(rows.size()));
  for (std::size_t c = 0; c < rows.size(); ++c)
    gbar[static_cast<int>(c)] = gt.col(rows[c]).mean();
  bool ridged = false;
  const Eigen::MatrixXd vinv =
      ridged_inverse(moment_variance(gt, rows), 1e-10, &ridged);
  return n * gbar.dot(vinv * gbar);
}

// Saddle-value evaluator shared by the outer coordinate updates.
struct OuterObjective {
  const MomentModel& model;
  const Dataset& data;
  const PELConfig& cfg;
  mutable long evals = 0;  // inner problems solved; drives the cost budget

  double shift_penalties(const AugmentedParam& psi) const {
    double acc = 0.0;
    for (int k = 0; k < psi.xi.size(); ++k)
      acc += penalty_eval(cfg.pen_param, std::fabs(psi.xi[k]));
    if (cfg.penalize_theta)
      for (int l = 0; l < psi.theta.size(); ++l)
        acc += penalty_eval(cfg.pen_param, std::fabs(psi.theta[l]));
    return acc;
  }

  // false when the trial point is infeasible for the dual, or when its
  // value provably exceeds value_cap (the inner solve then exits after the
  // first sweep that crosses the residual bound instead of polishing a
  // point that cannot be accepted anyway).
  bool eval(const AugmentedParam& psi, const Eigen::VectorXd* warm,
            InnerSolution* sol, double* value,
            double value_cap = std::numeric_limits<double>::infinity()) const {
    ++evals;
    const double shifts = shift_penalties(psi);
    InnerConfig icfg = cfg.inner;
    icfg.objective_cap = value_cap - shifts;
    // Healthy warm-started solves finish in a few dozen sweeps; one that
    // does not is either near the hull boundary or oscillating on support
    // changes, and its value cannot be trusted either way.
    icfg.max_sweeps = std::min(icfg.max_sweeps, 160);
    try {
      const Eigen::MatrixXd gt = eval_augmented(model, data, psi);
      *sol = inner_maximize(gt, model.dims.r1, cfg.pen_multiplier, warm, icfg);
    } catch (const NumericalError&) {
      return false;
    }
    if (sol->capped) return false;
    // A truncated or unhealthy inner solve under-reports its value, and
    // accepting on an under-reported value is how the outer would drift
    // into the degenerate corner one step at a time.
    if (!sol->converged || !inner_sane(*sol)) return false;
    *value = sol->objective + shifts;
    return true;
  }
};

}  // namespace

void validate_pel_config(const PELConfig& cfg) {
  validate_penalty(cfg.pen_param);
  validate_penalty(cfg.pen_multiplier);
  if (!(cfg.outer_tol > 0.0)) throw ConfigError("outer_tol must be positive");
  if (!(cfg.zero_tol > 0.0)) throw ConfigError("zero_tol must be positive");
  if (cfg.outer_max_iter < 1)
    throw ConfigError("outer_max_iter must be at least 1");
  if (cfg.outer_max_evals < 0)
    throw ConfigError("outer_max_evals must be nonnegative");
  if (!(cfg.bic_weight > 0.0))
    throw ConfigError("bic_weight must be positive");
  if (!(cfg.inner.tol > 0.0))
    throw ConfigError("inner tolerance must be positive");
}

PELFit fit_pel(const MomentModel& model, const Dataset& data,
               const PELConfig& cfg) {
  validate_pel_config(cfg);
  validate_dims(model.dims);
  const int n = data.n();
  const int p = model.dims.p;
  const int r1 = model.dims.r1;
  const int r2 = model.dims.r2;
  const int r = model.dims.r();

  PELFit fit;
  fit.config = cfg;

  AugmentedParam psi;
  if (cfg.init_theta) {
    if (cfg.init_theta->size() != p)
      throw ConfigError("init_theta length does not match parameter count");
    psi.theta = *cfg.init_theta;
  } else if (model.default_init) {
    psi.theta = model.default_init(data);
  } else {
    psi.theta = Eigen::VectorXd::Zero(p);
  }

  // Identification: the initial-block Jacobian must have full column rank.
  {
    const Eigen::MatrixXd jac =
        weighted_theta_jacobian(model, data, psi.theta, uniform_weights(n));
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(jac.topRows(r1));
    const auto& sv = svd.singularValues();
    if (sv.size() < p || sv(sv.size() - 1) <= 1e-12 * std::max(sv(0), 1.0))
      throw DataError(
          "initial-block Jacobian is rank deficient: theta not identified");
  }

  if (cfg.init_xi) {
    if (cfg.init_xi->size() != r2)
      throw ConfigError("init_xi length does not match doubt-moment count");
    psi.xi = *cfg.init_xi;
  } else {
    psi.xi = r2 > 0 ? Eigen::VectorXd(model.eval_doubt(data, psi.theta)
                                          .colwise()
                                          .mean()
                                          .transpose())
                    : Eigen::VectorXd(0);
  }

  const OuterObjective obj{model, data, cfg};
  InnerSolution inner;
  double value = 0.0;
  try {
    const Eigen::MatrixXd gt = eval_augmented(model, data, psi);
    const Eigen::VectorXd* warm =
        cfg.warm_lambda ? &*cfg.warm_lambda : nullptr;
    inner = inner_maximize(gt, r1, cfg.pen_multiplier, warm, cfg.inner);
    value = inner.objective + obj.shift_penalties(psi);
  } catch (const NumericalError&) {
    // A supplied start can be dual-infeasible (origin outside the hull of
    // the moment rows it implies).  Fall back to the safe default start:
    // model initializer for theta, centered shifts, cold multipliers.
    if (!cfg.init_theta && !cfg.init_xi && !cfg.warm_lambda) throw;
    fit.warnings.push_back(
        "supplied start was dual-infeasible; restarting from defaults");
    psi.theta = model.default_init ? model.default_init(data)
                                   : Eigen::VectorXd::Zero(p);
    psi.xi = r2 > 0 ? Eigen::VectorXd(model.eval_doubt(data, psi.theta)
                                          .colwise()
                                          .mean()
                                          .transpose())
                    : Eigen::VectorXd(0);
    const Eigen::MatrixXd gt = eval_augmented(model, data, psi);
    inner = inner_maximize(gt, r1, cfg.pen_multiplier, nullptr, cfg.inner);
    value = inner.objective + obj.shift_penalties(psi);
  }
  fit.objective_path.push_back(value);

  const long max_evals = cfg.outer_max_evals > 0
                             ? cfg.outer_max_evals
                             : std::numeric_limits<long>::max();
  auto budget_ok = [&] { return obj.evals < max_evals; };

  const double pi_thresh0 = penalty_deriv(cfg.pen_param, 0.0);
  double curv_theta = 1.0;
  double curv_xi = 1.0;

  // Proximal map for the shift penalty with the local-linear weight taken
  // at the current coordinate value.
  auto prox = [&](double x, double at, double c) {
    const double w = at == 0.0 ? pi_thresh0
                               : penalty_deriv(cfg.pen_param, std::fabs(at));
    return soft_threshold(x, w / c);
  };

  // One damped step on a whole block against the envelope value.  theta
  // moves along a Gauss-Newton direction built from the inner curvature;
  // the shifts move along their envelope gradient through the proximal
  // map, which is what produces exact zeros.  The step scale adapts: halve
  // on accept, grow on reject.  Returns the largest accepted change.
  auto try_block = [&](bool theta_block, double* curv) {
    const Eigen::VectorXd saved = theta_block ? psi.theta : psi.xi;
    Eigen::VectorXd dir;  // direction to subtract
    if (theta_block) {
      const Eigen::MatrixXd jw = weighted_theta_jacobian(
          model, data, psi.theta, inner.score_weights);
      const Eigen::VectorXd grad = jw.transpose() * inner.lambda;
      const Eigen::MatrixXd gt = eval_augmented(model, data, psi);
      Eigen::MatrixXd vhat =
          gt.transpose() * inner.hess_weights.asDiagonal() * gt;
      vhat.diagonal().array() += 1e-10 * (1.0 + vhat.trace() / r);
      Eigen::MatrixXd info = jw.transpose() * vhat.ldlt().solve(jw);
      info.diagonal().array() += 1e-10 * (1.0 + info.trace() / p);
      dir = info.ldlt().solve(grad);
      if (!dir.allFinite() || dir.dot(grad) <= 0.0) dir = grad;
      // A ridge-dominated information matrix can return an enormous but
      // finite direction whose every rung proposes a wild, dual-infeasible
      // jump.  Clamp to a move of order the current scale.
      const double dmax = dir.cwiseAbs().maxCoeff();
      const double trust = 1.0 + saved.cwiseAbs().maxCoeff();
      if (dmax > trust) dir *= trust / dmax;
    } else {
      dir = -inner.mean_d1 * inner.lambda.segment(r1, r2);
    }
    const bool penalized = theta_block ? cfg.penalize_theta : true;
    // Zigzag over step scales around the remembered one: the memory is
    // right most sweeps, but the endgame needs the exact rung and a stale
    // memory must not strand the search on one side.
    double lo = *curv, hi = *curv;
    for (int attempt = 0; attempt < 14 && budget_ok(); ++attempt) {
      double c = *curv;
      if (attempt > 0) {
        if (attempt % 2 == 1) c = hi *= 4.0;
        else c = lo *= 0.25;
      }
      if (c > 1e14 || c < 1e-9) continue;
      Eigen::VectorXd prop = saved - dir / c;
      if (penalized)
        for (int i = 0; i < prop.size(); ++i)
          prop[i] = prox(prop[i], saved[i], c);
      const double change = (prop - saved).cwiseAbs().maxCoeff();
      if (change <= 1e-15 * (1.0 + saved.cwiseAbs().maxCoeff())) continue;
      (theta_block ? psi.theta : psi.xi) = prop;
      InnerSolution sol_try;
      double val_try = 0.0;
      const double cap = value - accept_slack(value);
      if (obj.eval(psi, &inner.lambda, &sol_try, &val_try, cap) &&
          val_try <= cap) {
        inner = std::move(sol_try);
        value = val_try;
        *curv = std::max(c * 0.5, 1e-4);
        return change;
      }
      (theta_block ? psi.theta : psi.xi) = saved;
    }
    return 0.0;
  };

  // Single-coordinate fallback used when both block proposals freeze:
  // checks whether any one coordinate still has a strictly improving move
  // at some step scale.
  auto probe_coordinate = [&](double* coord, double grad, bool penalized) {
    double c = 1e-2;
    for (int attempt = 0; attempt < 12 && budget_ok(); ++attempt, c *= 4.0) {
      const double raw = *coord - grad / c;
      const double u = penalized ? prox(raw, *coord, c) : raw;
      const double delta = u - *coord;
      if (std::fabs(delta) <= 1e-15 * (1.0 + std::fabs(*coord))) continue;
      const double saved = *coord;
      *coord = u;
      InnerSolution sol_try;
      double val_try = 0.0;
      const double cap = value - accept_slack(value);
      if (obj.eval(psi, &inner.lambda, &sol_try, &val_try, cap) &&
          val_try <= cap) {
        inner = std::move(sol_try);
        value = val_try;
        return delta;
      }
      *coord = saved;
    }
    return 0.0;
  };

  int sweep = 0;
  int stall = 0;
  int restarts = 0;
  for (; sweep < cfg.outer_max_iter && budget_ok(); ++sweep) {
    // Let rejected blocks retry with larger steps as the fit moves.
    curv_theta = std::max(curv_theta * 0.5, 1e-4);
    curv_xi = std::max(curv_xi * 0.5, 1e-4);

    const double before = value;
    double max_change = try_block(true, &curv_theta);
    if (r2 > 0)
      max_change = std::max(max_change, try_block(false, &curv_xi));

    fit.objective_path.push_back(value);

    // Envelope-gradient stationarity residual, kept per coordinate so the
    // stall handler below can probe the worst offenders first.
    Eigen::VectorXd res_theta = Eigen::VectorXd::Zero(p);
    Eigen::VectorXd res_xi = Eigen::VectorXd::Zero(r2);
    const Eigen::MatrixXd jw =
        weighted_theta_jacobian(model, data, psi.theta, inner.score_weights);
    for (int l = 0; l < p; ++l) {
      const double grad = inner.lambda.dot(jw.col(l));
      if (!cfg.penalize_theta) {
        res_theta[l] = std::fabs(grad);
      } else if (psi.theta[l] != 0.0) {
        const double sub =
            penalty_deriv(cfg.pen_param, std::fabs(psi.theta[l])) *
            (psi.theta[l] > 0.0 ? 1.0 : -1.0);
        res_theta[l] = std::fabs(grad + sub);
      } else {
        res_theta[l] = std::max(0.0, std::fabs(grad) - pi_thresh0);
      }
    }
    for (int k = 0; k < r2; ++k) {
      const double grad = -inner.lambda[r1 + k] * inner.mean_d1;
      if (psi.xi[k] != 0.0) {
        const double sub = penalty_deriv(cfg.pen_param, std::fabs(psi.xi[k])) *
                           (psi.xi[k] > 0.0 ? 1.0 : -1.0);
        res_xi[k] = std::fabs(grad + sub);
      } else {
        res_xi[k] = std::max(0.0, std::fabs(grad) - pi_thresh0);
      }
    }
    const double res = std::max(res_theta.maxCoeff(),
                                r2 > 0 ? res_xi.maxCoeff() : 0.0);
    fit.outer_kkt = res;
    if (res <= cfg.outer_tol) {
      fit.converged = true;
      ++sweep;
      break;
    }

    const bool frozen = (max_change == 0.0);
    if (!frozen && before - value > 1e-9 * (1.0 + std::fabs(value)))
      stall = 0;
    else
      ++stall;
    if (frozen || stall >= 3) {
      // Block proposals froze, or sweeps keep landing at the value's
      // resolution floor.  Check coordinates one at a time, worst residual
      // first; if none improves either, the iterate is a stationary point
      // the smooth envelope residual cannot certify (the profile value is
      // kinked where inner multipliers change support), so stop and say so.
      std::vector<std::pair<double, int>> ranked;
      for (int l = 0; l < p; ++l) ranked.emplace_back(res_theta[l], l);
      for (int k = 0; k < r2; ++k) ranked.emplace_back(res_xi[k], p + k);
      std::sort(ranked.begin(), ranked.end(),
                [](const auto& a, const auto& b) { return a.first > b.first; });
      if (ranked.size() > 24) ranked.resize(24);
      double probe = 0.0;
      for (const auto& [contrib, id] : ranked) {
        probe = id < p ? probe_coordinate(&psi.theta[id],
                                          inner.lambda.dot(jw.col(id)),
                                          cfg.penalize_theta)
                       : probe_coordinate(
                             &psi.xi[id - p],
                             -inner.lambda[r1 + (id - p)] * inner.mean_d1,
                             true);
        if (probe != 0.0) break;
      }
      if (probe == 0.0) {
        // Implied probabilities must sum near one and multipliers must be
        // far from the guard scale, otherwise this is a degenerate corner
        // (the dual nearly escaped the hull), not a stationary point.
        const bool sane = inner_sane(inner);
        if (budget_ok() && sane) {
          std::ostringstream msg;
          msg << "no step at any scale improves the value beyond rounding "
                 "resolution; stopping with envelope residual "
              << fit.outer_kkt
              << " (nonsmooth stationary point or objective noise floor)";
          fit.warnings.push_back(msg.str());
          fit.converged = true;
        } else if (budget_ok()) {
          fit.warnings.push_back(
              "stopped frozen at a degenerate inner state (implied "
              "probabilities collapsed); not marking convergence");
        }
        ++sweep;
        break;
      }
      if (++restarts > 2) {
        // Each restart bought less than the acceptance slack: the iterate is
        // pinned to the value's resolution floor.  When the state is sane
        // and the residual is already near the tolerance scale, call that
        // converged rather than reporting failure over the last decade.
        fit.warnings.push_back(
            "outer progress repeatedly fell to the value resolution floor; "
            "stopping early");
        fit.converged =
            inner_sane(inner) && fit.outer_kkt <= std::sqrt(cfg.outer_tol);
        ++sweep;
        break;
      }
      // A coordinate moved: re-engage the block steps at a moderate scale.
      stall = 0;
      curv_theta = 1.0;
      curv_xi = 1.0;
    }
  }

  fit.iterations = sweep;
  fit.psi = psi;
  fit.lambda = inner.lambda;
  fit.inner_objective = inner.objective;
  fit.objective = value;
  fit.dual_degenerate = !inner_sane(inner);
  if (!fit.converged) {
    std::ostringstream msg;
    msg << "outer loop stopped at sweep " << sweep
        << " with stationarity residual " << fit.outer_kkt;
    if (!budget_ok()) msg << " after exhausting the evaluation budget";
    fit.warnings.push_back(msg.str());
  }

  fit.selected_valid = select_moments(fit);
  fit.binding_set.reserve(r1);
  for (int j = 0; j < r1; ++j) fit.binding_set.push_back(j);
  for (int k = 0; k < r2; ++k)
    if (fit.lambda[r1 + k] != 0.0) fit.binding_set.push_back(r1 + k);

  fit.eta = Eigen::VectorXd::Zero(r);
  for (int k = 0; k < r2; ++k) {
    const double lam = fit.lambda[r1 + k];
    if (lam != 0.0)
      fit.eta[r1 + k] = penalty_deriv(cfg.pen_multiplier, std::fabs(lam)) *
                        (lam > 0.0 ? 1.0 : -1.0);
  }

  fit.theta_se = pel_stderr(fit, model, data, &fit.warnings);
  if (fit.converged) {
    try {
      fit.bias = estimate_bias(fit, model, data, &fit.warnings);
    } catch (const NumericalError& err) {
      fit.warnings.push_back(err.what());
      fit.bias = Eigen::VectorXd::Constant(
          p, std::numeric_limits<double>::quiet_NaN());
    }
  }
  return fit;
}

std::vector<int> select_moments(const PELFit& fit) {
  std::vector<int> selected;
  for (int k = 0; k < fit.psi.xi.size(); ++k)
    if (std::fabs(fit.psi.xi[k]) <= fit.config.zero_tol)
      selected.push_back(k);
  return selected;
}

Eigen::VectorXd estimate_bias(const PELFit& fit, const MomentModel& model,
                              const Dataset& data,
                              std::vector<std::string>* warnings) {
  const int p = model.dims.p;
  const int r1 = model.dims.r1;
  const std::vector<int>& rows = fit.binding_set;
  if (rows.empty()) throw ConfigError("estimate_bias: empty binding set");

  // Free columns: every theta coordinate plus the shifts of binding rows
  // judged invalid (nonzero shift, active multiplier).
  std::vector<int> cols;
  for (int l = 0; l < p; ++l) cols.push_back(l);
  for (int k = 0; k < model.dims.r2; ++k) {
    if (std::fabs(fit.psi.xi[k]) > fit.config.zero_tol &&
        fit.lambda[r1 + k] != 0.0)
      cols.push_back(p + k);
  }

  const Eigen::MatrixXd gt = eval_augmented(model, data, fit.psi);
  const Eigen::MatrixXd full_jac = mean_jacobian(model, data, fit.psi);
  const int nr = static_cast<int>(rows.size());
  const int nc = static_cast<int>(cols.size());
  Eigen::MatrixXd jac(nr, nc);
  Eigen::VectorXd eta_r(nr);
  for (int a = 0; a < nr; ++a) {
    eta_r[a] = fit.eta[rows[a]];
    for (int b = 0; b < nc; ++b) jac(a, b) = full_jac(rows[a], cols[b]);
  }

  bool ridged = false;
  const Eigen::MatrixXd vinv =
      ridged_inverse(moment_variance(gt, rows), 1e-10, &ridged);
  if (ridged && warnings)
    warnings->push_back(
        "estimate_bias: binding-row variance was ridge-regularized");

  const Eigen::MatrixXd info = jac.transpose() * vinv * jac;
  const double cond = condition_number(info);
  if (!(cond < 1e12)) {
    std::ostringstream msg;
    msg << "estimate_bias: singular normal matrix on the binding rows "
           "(condition number "
        << cond << ")";
    throw NumericalError(msg.str());
  }
  const Eigen::VectorXd zeta =
      info.ldlt().solve(jac.transpose() * vinv * eta_r);
  return zeta.head(p);
}

Eigen::VectorXd pel_stderr(const PELFit& fit, const MomentModel& model,
                           const Dataset& data,
                           std::vector<std::string>* warnings) {
  const int n = data.n();
  const int p = model.dims.p;
  const int r1 = model.dims.r1;

  std::vector<int> rows;
  for (int j = 0; j < r1; ++j) rows.push_back(j);
  for (int k : fit.selected_valid)
    if (fit.lambda[r1 + k] != 0.0) rows.push_back(r1 + k);

  const Eigen::MatrixXd gt = eval_augmented(model, data, fit.psi);
  const Eigen::MatrixXd jac_full =
      weighted_theta_jacobian(model, data, fit.psi.theta, uniform_weights(n));

  std::vector<int> active;
  if (fit.config.penalize_theta) {
    for (int l = 0; l < p; ++l)
      if (std::fabs(fit.psi.theta[l]) > fit.config.zero_tol)
        active.push_back(l);
  } else {
    for (int l = 0; l < p; ++l) active.push_back(l);
  }

  Eigen::MatrixXd jac(rows.size(), active.size());
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = 0; b < active.size(); ++b)
      jac(a, b) = jac_full(rows[a], active[b]);

  bool ridged = false;
  const Eigen::MatrixXd vinv =
      ridged_inverse(moment_variance(gt, rows), 1e-10, &ridged);
  if (ridged && warnings)
    warnings->push_back(
        "pel_stderr: moment variance was ridge-regularized before inversion");

  const Eigen::MatrixXd info = jac.transpose() * vinv * jac;
  bool info_ridged = false;
  const Eigen::MatrixXd cov = ridged_inverse(info, 1e-10, &info_ridged);
  if (info_ridged && warnings)
    warnings->push_back(
        "pel_stderr: information matrix was ridge-regularized");

  Eigen::VectorXd se =
      Eigen::VectorXd::Constant(p, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t b = 0; b < active.size(); ++b)
    se[active[b]] = std::sqrt(std::max(cov(b, b), 0.0) / n);
  return se;
}

BicSelection tune_bic(const MomentModel& model, const Dataset& data,
                      const std::vector<double>& grid_nu,
                      const std::vector<double>& grid_pi, PELConfig cfg) {
  if (grid_nu.empty() || grid_pi.empty())
    throw ConfigError("tune_bic: empty tuning grid");
  const int n = data.n();

  BicSelection out;
  double best = std::numeric_limits<double>::infinity();
  bool have_best = false;

  // Shift-penalty order matters: an exact zero is absorbing under the
  // proximal step, so the sparse corner cannot rediscover a shift it never
  // had.  Walk pi upward within each nu row, cold-starting the row at its
  // densest point (every shift alive at the centered start) and carrying
  // the surviving support along the warm chain as the penalty grows.  Rows
  // are independent: a row's endpoint is its sparsest state and would
  // poison the next row's dense start.
  std::vector<double> nus(grid_nu.begin(), grid_nu.end());
  std::vector<double> pis(grid_pi.begin(), grid_pi.end());
  std::sort(nus.rbegin(), nus.rend());
  std::sort(pis.begin(), pis.end());

  for (double nu : nus) {
    std::optional<PELFit> warm;
    for (double pi : pis) {
      PELConfig point = cfg;
      point.pen_multiplier.tau = nu;
      point.pen_param.tau = pi;
      if (warm) {
        point.init_theta = warm->psi.theta;
        point.init_xi = warm->psi.xi;
        point.warm_lambda = warm->lambda;
      }
      BicEntry entry;
      entry.nu = nu;
      entry.pi = pi;
      try {
        PELFit fit = fit_pel(model, data, point);
        entry.converged = fit.converged;
        entry.degenerate = fit.dual_degenerate;
        entry.inner_objective = fit.inner_objective;
        for (int k = 0; k < fit.psi.xi.size(); ++k)
          if (std::fabs(fit.psi.xi[k]) > point.zero_tol) ++entry.df;
        if (point.penalize_theta)
          for (int l = 0; l < fit.psi.theta.size(); ++l)
            if (std::fabs(fit.psi.theta[l]) > point.zero_tol) ++entry.df;
        entry.fit_term = enforced_fit_measure(model, data, fit);
        entry.bic =
            entry.fit_term + entry.df * cfg.bic_weight * std::log(double(n));
        if (!fit.dual_degenerate) {
          if (entry.bic < best) {
            best = entry.bic;
            out.nu = nu;
            out.pi = pi;
            out.fit = fit;
            have_best = true;
          }
          // Any sane fit continues the row's chain; even a budget-truncated
          // one is further along the homotopy than a cold start.
          warm = std::move(fit);
        }
      } catch (const std::exception&) {
        entry.converged = false;
        entry.degenerate = true;
      }
      out.table.push_back(entry);
    }
  }
  if (!have_best)
    throw NumericalError("tune_bic: no grid point produced a usable fit");
  return out;
}

std::vector<double> default_tuning_grid(int n, int r, double lo, double hi,
                                        int count) {
  if (n < 2 || r < 1 || count < 1 || !(lo > 0.0) || !(hi >= lo))
    throw ConfigError("default_tuning_grid: bad arguments");
  const double base = std::sqrt(std::log(std::max(r, 2)) / n);
  std::vector<double> grid(count);
  if (count == 1) {
    grid[0] = std::sqrt(lo * hi) * base;
    return grid;
  }
  const double ratio = std::pow(hi / lo, 1.0 / (count - 1));
  double v = lo * base;
  for (int i = 0; i < count; ++i, v *= ratio) grid[i] = v;
  return grid;
}

PlainELFit fit_plain_el(const MomentModel& model, const Dataset& data,
                        const std::vector<int>& subset, double tol,
                        int max_iter) {
  validate_dims(model.dims);
  const int n = data.n();
  const int p = model.dims.p;
  const int r1 = model.dims.r1;
  const int r = model.dims.r();

  std::vector<int> cols = subset;
  std::sort(cols.begin(), cols.end());
  cols.erase(std::unique(cols.begin(), cols.end()), cols.end());
  if (static_cast<int>(cols.size()) < p)
    throw ConfigError("fit_plain_el: fewer moments than parameters");
  for (int c : cols)
    if (c < 0 || c >= r) throw ConfigError("fit_plain_el: moment index out of range");
  for (int j = 0; j < r1; ++j)
    if (!std::binary_search(cols.begin(), cols.end(), j))
      throw ConfigError("fit_plain_el: subset must contain the initial block");

  AugmentedParam psi;
  psi.theta = model.default_init ? model.default_init(data)
                                 : Eigen::VectorXd::Zero(p);
  psi.xi = Eigen::VectorXd::Zero(model.dims.r2);

  const int m = static_cast<int>(cols.size());
  auto subset_moments = [&]() {
    const Eigen::MatrixXd gt = eval_augmented(model, data, psi);
    Eigen::MatrixXd sub(n, m);
    for (int c = 0; c < m; ++c) sub.col(c) = gt.col(cols[c]);
    return sub;
  };

  const PenaltySpec no_pen = make_penalty(PenaltyFamily::L1, 0.0);
  InnerConfig inner_cfg;
  InnerSolution inner = inner_maximize(subset_moments(), m, no_pen, nullptr,
                                       inner_cfg);
  double value = inner.smooth_value;

  auto subset_grad = [&]() {
    const Eigen::MatrixXd jw_full =
        weighted_theta_jacobian(model, data, psi.theta, inner.score_weights);
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(p);
    for (int c = 0; c < m; ++c)
      grad += inner.lambda[c] * jw_full.row(cols[c]).transpose();
    return grad;
  };

  double curv = 1.0;
  PlainELFit fit;
  int sweep = 0;
  for (; sweep < max_iter; ++sweep) {
    curv = std::max(curv * 0.5, 1e-4);
    const Eigen::VectorXd grad = subset_grad();

    // Gauss-Newton direction from the inner curvature, with a zigzag over
    // damping scales around the remembered one (see fit_pel).
    const Eigen::MatrixXd sub = subset_moments();
    const Eigen::MatrixXd jw_full =
        weighted_theta_jacobian(model, data, psi.theta, inner.score_weights);
    Eigen::MatrixXd jac_sub(m, p);
    for (int c = 0; c < m; ++c) jac_sub.row(c) = jw_full.row(cols[c]);
    Eigen::MatrixXd vhat =
        sub.transpose() * inner.hess_weights.asDiagonal() * sub;
    vhat.diagonal().array() += 1e-10 * (1.0 + vhat.trace() / m);
    Eigen::MatrixXd info = jac_sub.transpose() * vhat.ldlt().solve(jac_sub);
    info.diagonal().array() += 1e-10 * (1.0 + info.trace() / p);
    Eigen::VectorXd dir = info.ldlt().solve(grad);
    if (!dir.allFinite() || dir.dot(grad) <= 0.0) dir = grad;

    double max_change = 0.0;
    double lo = curv, hi = curv;
    for (int attempt = 0; attempt < 14; ++attempt) {
      double c = curv;
      if (attempt > 0) {
        if (attempt % 2 == 1) c = hi *= 4.0;
        else c = lo *= 0.25;
      }
      if (c > 1e14 || c < 1e-9) continue;
      const Eigen::VectorXd step = dir / c;
      if (step.cwiseAbs().maxCoeff() <=
          1e-15 * (1.0 + psi.theta.cwiseAbs().maxCoeff()))
        continue;
      psi.theta -= step;
      InnerSolution sol_try;
      bool ok = true;
      try {
        sol_try = inner_maximize(subset_moments(), m, no_pen, &inner.lambda,
                                 inner_cfg);
      } catch (const NumericalError&) {
        ok = false;
      }
      if (ok && sol_try.smooth_value <= value - accept_slack(value)) {
        inner = std::move(sol_try);
        value = inner.smooth_value;
        curv = std::max(c * 0.5, 1e-4);
        max_change = step.cwiseAbs().maxCoeff();
        break;
      }
      psi.theta += step;
    }

    const double res = subset_grad().cwiseAbs().maxCoeff();
    if (res <= tol) {
      fit.converged = true;
      ++sweep;
      break;
    }
    if (max_change == 0.0) break;
  }

  fit.theta = psi.theta;
  fit.iterations = sweep;
  fit.loglik_ratio = 2.0 * n * value;

  const Eigen::MatrixXd sub = subset_moments();
  const Eigen::MatrixXd jac_full =
      weighted_theta_jacobian(model, data, psi.theta, uniform_weights(n));
  Eigen::MatrixXd jac(m, p);
  for (int c = 0; c < m; ++c) jac.row(c) = jac_full.row(cols[c]);
  bool ridged = false;
  const Eigen::MatrixXd vinv =
      ridged_inverse(sub.transpose() * sub / n, 1e-10, &ridged);
  bool info_ridged = false;
  const Eigen::MatrixXd cov =
      ridged_inverse(jac.transpose() * vinv * jac, 1e-10, &info_ridged);
  fit.se.resize(p);
  for (int l = 0; l < p; ++l)
    fit.se[l] = std::sqrt(std::max(cov(l, l), 0.0) / n);
  return fit;
}

}  // namespace pel
