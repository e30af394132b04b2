#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "pel/el_core.hpp"
#include "pel/errors.hpp"
#include "pel/models.hpp"
#include "pel/pel_estimator.hpp"
#include "pel/rng.hpp"

using namespace pel;

namespace {

Dataset make_dataset(const Eigen::MatrixXd& obs) {
  Dataset data;
  data.observations = obs;
  data.column_names.resize(obs.cols());
  for (int c = 0; c < obs.cols(); ++c)
    data.column_names[c] = "c" + std::to_string(c);
  return data;
}

// One-parameter location model: initial moment X - theta, optional doubt
// columns W_k - xi_k that do not involve theta.
MomentModel location_model(int r2) {
  MomentModel mdl;
  mdl.name = "location";
  mdl.dims = MomentDims{1, 1, r2};
  mdl.eval_initial = [](const Dataset& d, const Eigen::VectorXd& th) {
    return Eigen::MatrixXd(d.observations.col(0).array() - th[0]);
  };
  mdl.eval_doubt = [r2](const Dataset& d, const Eigen::VectorXd&) {
    return Eigen::MatrixXd(d.observations.middleCols(1, r2));
  };
  mdl.jac_theta = [r2](const Dataset&, const Eigen::VectorXd&,
                       const Eigen::VectorXd& w) {
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(1 + r2, 1);
    jac(0, 0) = -w.sum();
    return jac;
  };
  return mdl;
}

// Small linear-IV draw in the canonical column layout. The first n_invalid
// doubt instruments violate exogeneity with loading delta.
Dataset draw_iv_data(int n, int d_w2, int n_invalid, double delta,
                     const Eigen::VectorXd& theta, Rng& rng) {
  const int d = 5 + d_w2 + n_invalid;
  Eigen::MatrixXd obs(n, d);
  for (int i = 0; i < n; ++i) {
    const double z1 = rng.normal(), z2 = rng.normal(), w1 = rng.normal();
    const double eps = rng.normal();
    const double u = 0.5 * eps + std::sqrt(0.75) * rng.normal();
    double x = 0.8 * w1 + 0.8 * (z1 + z2) + u;
    for (int j = 0; j < d_w2; ++j) {
      const double gamma =
          d_w2 > 1 ? 0.4 - 0.3 * j / (d_w2 - 1.0) : 0.4;
      const double w2 = rng.normal();
      obs(i, 5 + j) = w2;
      x += gamma * w2;
    }
    const double v = rng.normal();
    for (int j = 0; j < n_invalid; ++j)
      obs(i, 5 + d_w2 + j) = delta * eps + v;
    const double y = theta[0] * x + theta[1] + theta[2] * z1 + theta[3] * z2 +
                     eps;
    obs(i, 0) = y;
    obs(i, 1) = x;
    obs(i, 2) = z1;
    obs(i, 3) = z2;
    obs(i, 4) = w1;
  }
  return make_dataset(obs);
}

PELConfig basic_config(double nu, double pi) {
  PELConfig cfg;
  cfg.pen_multiplier = make_penalty(PenaltyFamily::Scad, nu);
  cfg.pen_param = make_penalty(PenaltyFamily::Scad, pi);
  return cfg;
}

}  // namespace

TEST_CASE("location model without doubt moments recovers the sample mean") {
  Rng rng(31);
  Eigen::MatrixXd obs(50, 1);
  for (int i = 0; i < 50; ++i) obs(i, 0) = 0.4 + rng.normal();
  const Dataset data = make_dataset(obs);
  const MomentModel mdl = location_model(0);

  const PELFit fit = fit_pel(mdl, data, basic_config(0.1, 0.1));
  CHECK(fit.converged);
  const double mean = obs.col(0).mean();
  CHECK(std::fabs(fit.psi.theta[0] - mean) <= 1e-6);

  // Just-identified: se equals (population-style) sample std over sqrt(n).
  const double sd =
      std::sqrt((obs.col(0).array() - mean).square().sum() / 50.0);
  CHECK(std::fabs(fit.theta_se[0] - sd / std::sqrt(50.0)) <= 1e-6);
  CHECK(fit.binding_set == std::vector<int>{0});
  CHECK(fit.bias.size() == 1);
  CHECK(fit.bias[0] == 0.0);  // no penalized multiplier active

  const PlainELFit plain = fit_plain_el(mdl, data, {0});
  CHECK(plain.converged);
  CHECK(std::fabs(plain.theta[0] - mean) <= 1e-6);
  CHECK(std::fabs(plain.loglik_ratio) <= 1e-10);
}

TEST_CASE("brute-force grid equivalence on the tiny augmented problem") {
  Rng rng(207);
  Eigen::MatrixXd obs(8, 2);
  for (int i = 0; i < 8; ++i) {
    obs(i, 0) = 0.3 + rng.normal();
    obs(i, 1) = 0.25 + 0.8 * rng.normal();
  }
  const Dataset data = make_dataset(obs);
  const MomentModel mdl = location_model(1);
  PELConfig cfg = basic_config(0.15, 0.2);

  const PELFit fit = fit_pel(mdl, data, cfg);
  CHECK(fit.converged);

  // Exhaustive search over (theta, xi), coarse then refined.
  auto objective = [&](double th, double xi) {
    AugmentedParam psi;
    psi.theta = Eigen::VectorXd::Constant(1, th);
    psi.xi = Eigen::VectorXd::Constant(1, xi);
    const Eigen::MatrixXd gt = eval_augmented(mdl, data, psi);
    try {
      const InnerSolution sol = inner_maximize(gt, 1, cfg.pen_multiplier);
      return sol.objective + penalty_eval(cfg.pen_param, std::fabs(xi));
    } catch (const NumericalError&) {
      // Origin outside the hull: the inner sup is genuinely infinite.
      return std::numeric_limits<double>::infinity();
    }
  };
  const double mx = obs.col(0).mean(), mw = obs.col(1).mean();
  double best_th = mx, best_xi = 0.0, best = 1e300;
  double span_th = 0.4, span_w = std::fabs(mw) + 0.3, step = 1e-3;
  double c_th = mx, c_xi = 0.0;
  for (int stage = 0; stage < 2; ++stage) {
    const double lo_th = c_th - span_th, hi_th = c_th + span_th;
    const double lo_xi = stage == 0 ? -0.05 : c_xi - span_w;
    const double hi_xi = stage == 0 ? span_w : c_xi + span_w;
    for (double th = lo_th; th <= hi_th + step / 2; th += step) {
      for (double xi = lo_xi; xi <= hi_xi + step / 2; xi += step) {
        const double val = objective(th, xi);
        if (val < best) {
          best = val;
          best_th = th;
          best_xi = xi;
        }
      }
    }
    c_th = best_th;
    c_xi = best_xi;
    span_th = 2 * step;
    span_w = 2 * step;
    step = 1e-5;
  }
  CHECK(std::fabs(fit.psi.theta[0] - best_th) <= 2e-3);
  CHECK(std::fabs(fit.psi.xi[0] - best_xi) <= 2e-3);
  CHECK(fit.objective <= best + 1e-6);
}

TEST_CASE("free-shift fit matches plain EL on the initial block") {
  Rng rng(411);
  Eigen::VectorXd truth(4);
  truth << 1.0, 0.5, -0.5, 0.8;
  const Dataset data = draw_iv_data(80, 3, 0, 0.0, truth, rng);
  const MomentModel mdl = make_linear_iv_model(3, 0);

  PELConfig cfg = basic_config(0.0, 0.0);
  const PELFit fit = fit_pel(mdl, data, cfg);
  CHECK(fit.converged);

  std::vector<int> initial{0, 1, 2, 3};
  const PlainELFit plain = fit_plain_el(mdl, data, initial);
  CHECK(plain.converged);
  CHECK((fit.psi.theta - plain.theta).cwiseAbs().maxCoeff() <= 1e-5);
}

TEST_CASE("invalid doubt instruments earn nonzero shifts, valid ones do not") {
  Rng rng(97);
  Eigen::VectorXd truth(4);
  truth << 1.0, 0.5, -0.5, 0.8;
  const Dataset data = draw_iv_data(300, 4, 2, 0.8, truth, rng);
  const MomentModel mdl = make_linear_iv_model(4, 2);

  const PELFit fit = fit_pel(mdl, data, basic_config(0.12, 0.15));
  CHECK(fit.converged);
  REQUIRE(fit.psi.xi.size() == 6);
  for (int k = 0; k < 4; ++k) CHECK(fit.psi.xi[k] == 0.0);
  for (int k = 4; k < 6; ++k) CHECK(std::fabs(fit.psi.xi[k]) > 0.2);
  const std::vector<int> expect{0, 1, 2, 3};
  CHECK(fit.selected_valid == expect);

  // Outer descent and bookkeeping invariants.
  for (std::size_t t = 1; t < fit.objective_path.size(); ++t)
    CHECK(fit.objective_path[t] <= fit.objective_path[t - 1] + 1e-10);
  CHECK(fit.outer_kkt <= fit.config.outer_tol);
  for (int j = 0; j < 4; ++j) {
    CHECK(fit.binding_set[j] == j);
    CHECK(fit.eta[j] == 0.0);
  }
  for (int row : fit.binding_set)
    if (row >= 4) CHECK(fit.lambda[row] != 0.0);

  // The estimated shifts track the actual contamination size E[w3 * eps].
  CHECK(fit.psi.xi[4] == doctest::Approx(0.8).epsilon(0.35));
}

TEST_CASE("select_moments threshold semantics") {
  PELFit fit;
  fit.psi.xi = Eigen::VectorXd(3);
  fit.psi.xi << 1e-12, -1e-9, 0.2;
  fit.config.zero_tol = 1e-8;
  CHECK(select_moments(fit) == std::vector<int>{0, 1});
}

TEST_CASE("selection grows with the shift penalty under L1") {
  Rng rng(555);
  Eigen::VectorXd truth(4);
  truth << 1.0, 0.5, -0.5, 0.8;
  const Dataset data = draw_iv_data(120, 4, 2, 0.6, truth, rng);
  const MomentModel mdl = make_linear_iv_model(4, 2);

  std::vector<std::vector<int>> sel;
  for (double pi : {0.02, 0.05, 0.1, 0.2, 0.4}) {
    PELConfig cfg = basic_config(0.1, pi);
    cfg.pen_param = make_penalty(PenaltyFamily::L1, pi);
    const PELFit fit = fit_pel(mdl, data, cfg);
    sel.push_back(fit.selected_valid);
  }
  for (std::size_t t = 1; t < sel.size(); ++t)
    for (int k : sel[t - 1])
      CHECK(std::count(sel[t].begin(), sel[t].end(), k) == 1);
}

TEST_CASE("bias matches direct restricted GLS algebra") {
  Rng rng(808);
  Eigen::MatrixXd obs(60, 2);
  for (int i = 0; i < 60; ++i) {
    obs(i, 0) = 0.3 + rng.normal();
    obs(i, 1) = 0.9 + 0.7 * rng.normal();  // clearly invalid doubt moment
  }
  const Dataset data = make_dataset(obs);
  const MomentModel mdl = location_model(1);
  PELConfig cfg = basic_config(0.1, 0.25);
  const PELFit fit = fit_pel(mdl, data, cfg);
  CHECK(fit.converged);
  REQUIRE(std::fabs(fit.psi.xi[0]) > 0.2);  // shift freed
  REQUIRE(fit.lambda[1] != 0.0);            // multiplier active

  const Eigen::MatrixXd gt = eval_augmented(mdl, data, fit.psi);
  const Eigen::MatrixXd vhat = gt.transpose() * gt / 60.0;
  Eigen::MatrixXd jac(2, 2);  // rows: both moments; cols: theta, xi_1
  jac << -1.0, 0.0, 0.0, -1.0;
  Eigen::VectorXd eta(2);
  eta << 0.0, fit.eta[1];
  const Eigen::MatrixXd vinv = vhat.inverse();
  const Eigen::MatrixXd info = jac.transpose() * vinv * jac;
  const Eigen::VectorXd zeta = info.inverse() * jac.transpose() * vinv * eta;

  const Eigen::VectorXd bias = estimate_bias(fit, mdl, data);
  REQUIRE(bias.size() == 1);
  CHECK(bias[0] == doctest::Approx(zeta[0]).epsilon(1e-10));
  CHECK(std::fabs(fit.eta[1] -
                  penalty_deriv(cfg.pen_multiplier, std::fabs(fit.lambda[1])) *
                      (fit.lambda[1] > 0 ? 1.0 : -1.0)) <= 1e-15);
}

TEST_CASE("extra valid moment never hurts the plug-in standard error") {
  Rng rng(66);
  Eigen::MatrixXd obs(200, 2);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.normal();
    obs(i, 0) = 0.5 + x;
    obs(i, 1) = 0.0;  // placeholder, filled below
  }
  // Correlated auxiliary moment: z * (x - mean), built from the same draw.
  MomentModel mdl;
  mdl.name = "location_aux";
  mdl.dims = MomentDims{1, 1, 1};
  mdl.eval_initial = [](const Dataset& d, const Eigen::VectorXd& th) {
    return Eigen::MatrixXd(d.observations.col(0).array() - th[0]);
  };
  mdl.eval_doubt = [](const Dataset& d, const Eigen::VectorXd& th) {
    return Eigen::MatrixXd(d.observations.col(1).array() *
                           (d.observations.col(0).array() - th[0]));
  };
  for (int i = 0; i < 200; ++i) obs(i, 1) = 0.6 + rng.normal();
  const Dataset data = make_dataset(obs);

  const PlainELFit narrow = fit_plain_el(mdl, data, {0});
  const PlainELFit wide = fit_plain_el(mdl, data, {0, 1});
  CHECK(narrow.converged);
  CHECK(wide.converged);
  CHECK(wide.se[0] <= narrow.se[0] + 1e-12);
}

TEST_CASE("tuning grid shape and BIC selection") {
  const std::vector<double> grid = default_tuning_grid(100, 50, 0.1, 3.0, 8);
  REQUIRE(grid.size() == 8);
  const double base = std::sqrt(std::log(50.0) / 100.0);
  CHECK(grid.front() == doctest::Approx(0.1 * base).epsilon(1e-12));
  CHECK(grid.back() == doctest::Approx(3.0 * base).epsilon(1e-12));
  for (std::size_t i = 2; i < grid.size(); ++i)
    CHECK(grid[i] / grid[i - 1] ==
          doctest::Approx(grid[1] / grid[0]).epsilon(1e-10));

  Rng rng(2024);
  Eigen::VectorXd truth(4);
  truth << 1.0, 0.5, -0.5, 0.8;
  const Dataset data = draw_iv_data(120, 3, 2, 0.8, truth, rng);
  const MomentModel mdl = make_linear_iv_model(3, 2);

  PELConfig cfg = basic_config(0.0, 0.0);
  const BicSelection one =
      tune_bic(mdl, data, {0.1}, {0.15}, cfg);
  CHECK(one.nu == 0.1);
  CHECK(one.pi == 0.15);
  REQUIRE(one.table.size() == 1);

  const std::vector<double> nus{0.05, 0.15};
  const std::vector<double> pis{0.05, 0.12, 0.3};
  const BicSelection pick = tune_bic(mdl, data, nus, pis, cfg);
  REQUIRE(pick.table.size() == 6);
  double best = std::numeric_limits<double>::infinity();
  double bn = 0, bp = 0;
  for (const BicEntry& e : pick.table) {
    if (std::isfinite(e.bic))
      CHECK(e.bic ==
            doctest::Approx(e.fit_term +
                            e.df * cfg.bic_weight * std::log(120.0))
                .epsilon(1e-12));
    if (!e.degenerate && e.bic < best) {
      best = e.bic;
      bn = e.nu;
      bp = e.pi;
    }
  }
  CHECK(pick.nu == bn);
  CHECK(pick.pi == bp);
  CHECK(pick.fit.converged);
}

TEST_CASE("identification failure is reported") {
  Rng rng(3);
  Eigen::MatrixXd obs(40, 2);
  for (int i = 0; i < 40; ++i) {
    obs(i, 0) = rng.normal();
    obs(i, 1) = rng.normal();
  }
  // Two parameters, one informative moment: rank-deficient initial block.
  MomentModel mdl;
  mdl.name = "underidentified";
  mdl.dims = MomentDims{2, 2, 0};
  mdl.eval_initial = [](const Dataset& d, const Eigen::VectorXd& th) {
    Eigen::MatrixXd g(d.n(), 2);
    g.col(0) = d.observations.col(0).array() - th[0] - th[1];
    g.col(1) = d.observations.col(0).array() - th[0] - th[1];
    return g;
  };
  CHECK_THROWS_AS(fit_pel(mdl, make_dataset(obs), basic_config(0.1, 0.1)),
                  DataError);
}

TEST_CASE("config validation") {
  PELConfig cfg = basic_config(0.1, 0.1);
  cfg.outer_tol = 0.0;
  CHECK_THROWS_AS(validate_pel_config(cfg), ConfigError);
  cfg = basic_config(0.1, 0.1);
  cfg.zero_tol = -1.0;
  CHECK_THROWS_AS(validate_pel_config(cfg), ConfigError);
  cfg = basic_config(0.1, 0.1);
  cfg.outer_max_iter = 0;
  CHECK_THROWS_AS(validate_pel_config(cfg), ConfigError);
  cfg = basic_config(0.1, 0.1);
  cfg.outer_max_evals = -1;
  CHECK_THROWS_AS(validate_pel_config(cfg), ConfigError);
  cfg = basic_config(0.1, 0.1);
  cfg.bic_weight = 0.0;
  CHECK_THROWS_AS(validate_pel_config(cfg), ConfigError);
  CHECK_THROWS_AS(
      fit_plain_el(location_model(1), make_dataset(Eigen::MatrixXd::Ones(5, 2)),
                   {1}),
      ConfigError);
}
