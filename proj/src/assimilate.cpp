#include "vfp/assimilate.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "vfp/rng.hpp"

namespace vfp {

// --- geometry and taper --------------------------------------------------

double GridGeometry::distance(int i, int j) const {
  const int diff = std::abs(i - j);
  if (kind == Kind::Ring) return spacing * std::min(diff, n - diff);
  return spacing * diff;
}

GridGeometry GridGeometry::line(int n, double spacing) {
  return {Kind::Line, n, spacing};
}

GridGeometry GridGeometry::ring(int n, double spacing) {
  return {Kind::Ring, n, spacing};
}

GridGeometry GridGeometry::lorenz96_ring(int n) {
  // Spacing fixed so radii 2/4/5 reach 7/14/17 neighbors a side.
  return ring(n, 9.0 / 16.0);
}

double gaspari_cohn(double d, double r) {
  if (d < 0.0 || r <= 0.0)
    throw std::invalid_argument("gaspari_cohn: needs d >= 0, r > 0");
  const double z = d / r;
  if (z >= 2.0) return 0.0;
  const double z2 = z * z, z3 = z2 * z, z4 = z3 * z, z5 = z4 * z;
  if (z <= 1.0)
    return -0.25 * z5 + 0.5 * z4 + (5.0 / 8.0) * z3 - (5.0 / 3.0) * z2 + 1.0;
  return (1.0 / 12.0) * z5 - 0.5 * z4 + (5.0 / 8.0) * z3 + (5.0 / 3.0) * z2 -
         5.0 * z + 4.0 - (2.0 / 3.0) / z;
}

std::vector<int> local_influence_set(int i, double r,
                                     const GridGeometry& geometry) {
  std::vector<int> set;
  for (int j = 0; j < geometry.n; ++j)
    if (gaspari_cohn(geometry.distance(i, j), r) > 0.0) set.push_back(j);
  return set;
}

namespace {

Matrix taper_matrix(const std::vector<int>& set, double r,
                    const GridGeometry& geometry) {
  const int k = static_cast<int>(set.size());
  Matrix c(k, k);
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < k; ++b)
      c(a, b) = gaspari_cohn(geometry.distance(set[a], set[b]), r);
  return c;
}

Matrix full_taper(double r, const GridGeometry& geometry) {
  Matrix c(geometry.n, geometry.n);
  for (int a = 0; a < geometry.n; ++a)
    for (int b = 0; b < geometry.n; ++b)
      c(a, b) = gaspari_cohn(geometry.distance(a, b), r);
  return c;
}

Matrix rows_of(const Matrix& x, const std::vector<int>& set) {
  Matrix sub(static_cast<int>(set.size()), x.cols());
  for (int a = 0; a < static_cast<int>(set.size()); ++a)
    sub.row(a) = x.row(set[a]);
  return sub;
}

FitOptions fit_options_for(const MethodSpec& spec) {
  FitOptions opt;
  opt.policy = spec.covariance == CovarianceTreatment::Shrinkage
                   ? CovariancePolicy::Shrinkage
                   : CovariancePolicy::Plain;
  opt.huber_delta1 = spec.huber_delta1;
  opt.huber_delta2 = spec.huber_delta2;
  return opt;
}

}  // namespace

// --- global analysis -----------------------------------------------------

CycleResult vfp_analysis(const Ensemble& background,
                         const ObservationModel& obs, const MethodSpec& spec,
                         const FlowConfig& cfg, std::uint64_t cycle_key) {
  FitOptions opt = fit_options_for(spec);
  if (spec.covariance == CovarianceTreatment::Localized)
    opt.schur_taper =
        full_taper(spec.localization.radius, spec.localization.geometry);

  FlowProblem problem;
  problem.prior = fit(spec.prior_family, background, opt);
  problem.obs = &obs;
  problem.current_family = spec.current_family;
  problem.current_fit = opt;
  problem.background_anomalies = background.anomalies();

  FlowConfig flow_cfg = cfg;
  flow_cfg.metric = spec.metric;
  FlowResult res =
      flow_to_steady_state(background, problem, flow_cfg, cycle_key);
  return {std::move(res.analysis), res.steps, res.converged};
}

// --- localized analysis ----------------------------------------------------

double localized_grad_log_q(const Ensemble& ens, int i, const StateVector& x,
                            double r, const GridGeometry& geometry) {
  const std::vector<int> set = local_influence_set(i, r, geometry);
  FitOptions opt;
  opt.schur_taper = taper_matrix(set, r, geometry);
  const DensityModel local = fit(
      DensityFamily::Gaussian, Ensemble(rows_of(ens.states(), set)), opt);
  StateVector x_loc(set.size());
  for (size_t a = 0; a < set.size(); ++a) x_loc[a] = x[set[a]];
  const StateVector g = grad_log_density(local, x_loc);
  const auto pos = std::find(set.begin(), set.end(), i) - set.begin();
  return g[pos];
}

namespace {

// Symmetric square root through the eigendecomposition; tiny negative
// eigenvalues from roundoff are clipped.
Matrix symmetric_sqrt(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(m);
  const StateVector vals = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * vals.asDiagonal() *
         eig.eigenvectors().transpose();
}

struct LocalState {
  std::vector<int> set;
  int pos = 0;  // index of the owned state within set
  Matrix taper;
  DensityModel prior;
  ObservationModel obs;
  bool has_obs = false;
  Matrix diffusion_factor;  // fixed factor (empty unless applicable)
  // identity-metric Rosenbrock pieces, fixed during a cycle
  Matrix h_post;
  double cached_dtau = -1.0;
  Eigen::PartialPivLU<Matrix> lu;
};

}  // namespace

CycleResult local_vfp_analysis(const Ensemble& background,
                               const ObservationModel& obs,
                               const MethodSpec& spec, const FlowConfig& cfg0,
                               std::uint64_t cycle_key) {
  if (spec.prior_family != DensityFamily::Gaussian ||
      spec.current_family != DensityFamily::Gaussian)
    throw std::invalid_argument(
        "local_vfp_analysis: local updates require Gaussian families");
  if (!obs.observed_indices())
    throw std::invalid_argument(
        "local_vfp_analysis: pointwise observation operator required");
  if (!obs.gaussian())
    throw std::invalid_argument(
        "local_vfp_analysis: Gaussian observation error required");
  if ((obs.R() - Matrix(obs.R().diagonal().asDiagonal())).norm() != 0.0)
    throw std::invalid_argument(
        "local_vfp_analysis: diagonal R required");

  FlowConfig cfg = cfg0;
  cfg.metric = spec.metric;
  const double r = spec.localization.radius;
  const GridGeometry& geom = spec.localization.geometry;
  const int n = background.n_state();
  const int m = background.n_ens();
  const std::vector<int>& obs_of = *obs.observed_indices();

  const Matrix bg_anomalies = background.anomalies();
  Matrix clim_b;
  if (cfg.diffusion.kind == DiffusionSpec::Kind::Climatological)
    clim_b = cfg.diffusion.factor * cfg.diffusion.factor.transpose();

  // Per-state local problems (fixed during the flow).
  std::vector<LocalState> locals(n);
  for (int i = 0; i < n; ++i) {
    LocalState& loc = locals[i];
    loc.set = local_influence_set(i, r, geom);
    loc.pos = static_cast<int>(
        std::find(loc.set.begin(), loc.set.end(), i) - loc.set.begin());
    loc.taper = taper_matrix(loc.set, r, geom);
    FitOptions opt;
    opt.schur_taper = loc.taper;
    loc.prior = fit(DensityFamily::Gaussian,
                    Ensemble(rows_of(background.states(), loc.set)), opt);

    // observations of states inside the influence set
    std::vector<int> rows;
    for (int o = 0; o < static_cast<int>(obs_of.size()); ++o)
      if (std::find(loc.set.begin(), loc.set.end(), obs_of[o]) !=
          loc.set.end())
        rows.push_back(o);
    if (!rows.empty()) {
      const int k = static_cast<int>(rows.size());
      Matrix h = Matrix::Zero(k, static_cast<int>(loc.set.size()));
      Matrix r_loc = Matrix::Zero(k, k);
      ObsVector y_loc(k);
      for (int a = 0; a < k; ++a) {
        const auto col = std::find(loc.set.begin(), loc.set.end(),
                                   obs_of[rows[a]]) -
                         loc.set.begin();
        h(a, col) = 1.0;
        r_loc(a, a) = obs.R()(rows[a], rows[a]);
        y_loc[a] = obs.value()[rows[a]];
      }
      loc.obs = make_linear_observation(std::move(h),
                                        GaussianObsError{std::move(r_loc)},
                                        std::move(y_loc));
      loc.has_obs = true;
    }

    switch (cfg.diffusion.kind) {
      case DiffusionSpec::Kind::None:
      case DiffusionSpec::Kind::CurrentAnomalies:
        break;  // empty / refreshed per step
      case DiffusionSpec::Kind::BackgroundAnomalies:
        if (cfg.diffusion.alpha != 0.0)
          loc.diffusion_factor =
              cfg.diffusion.alpha * rows_of(bg_anomalies, loc.set);
        break;
      case DiffusionSpec::Kind::Climatological:
        if (cfg.diffusion.alpha != 0.0) {
          Matrix b_loc(loc.set.size(), loc.set.size());
          for (size_t a = 0; a < loc.set.size(); ++a)
            for (size_t b = 0; b < loc.set.size(); ++b)
              b_loc(a, b) = clim_b(loc.set[a], loc.set[b]) * loc.taper(a, b);
          loc.diffusion_factor = cfg.diffusion.alpha * symmetric_sqrt(b_loc);
        }
        break;
    }

    // posterior curvature is fixed for the cycle
    loc.h_post = hessian_log_density(loc.prior, StateVector::Zero(loc.set.size()));
    if (loc.has_obs)
      loc.h_post +=
          obs_hessian_log_likelihood(loc.obs, StateVector::Zero(loc.set.size()));
  }

  CycleResult result;
  result.analysis = background;
  Ensemble& ens = result.analysis;
  StateVector mean_prev = ens.mean();
  double spread_prev = (ens.states().colwise() - mean_prev).norm();
  double dtau = cfg.step.dtau0;

  for (int step = 1; step <= cfg.step.max_steps; ++step) {
    result.flow_steps = step;
    Matrix next(n, m);
    bool all_ok = true;

    // per-state local problems for this step
    struct StepLocal {
      DensityModel current;
      DiffusionOperator diffusion;
      Ensemble particles;
    };
    std::vector<StepLocal> step_locals(n);
    for (int i = 0; i < n; ++i) {
      const LocalState& loc = locals[i];
      StepLocal& sl = step_locals[i];
      sl.particles = Ensemble(rows_of(ens.states(), loc.set));
      FitOptions opt;
      opt.schur_taper = loc.taper;
      sl.current = fit(DensityFamily::Gaussian, sl.particles, opt);
      if (cfg.diffusion.kind == DiffusionSpec::Kind::CurrentAnomalies) {
        if (cfg.diffusion.alpha != 0.0)
          sl.diffusion = DiffusionOperator::from_spec(
              DiffusionSpec::climatological(cfg.diffusion.alpha,
                                            sl.particles.anomalies()),
              Matrix(), Matrix());
      } else if (loc.diffusion_factor.size() > 0) {
        sl.diffusion = DiffusionOperator::from_spec(
            DiffusionSpec::climatological(1.0, loc.diffusion_factor), Matrix(),
            Matrix());
      }
    }
    const double dtau_eff = dtau;
    const double sqrt_dtau = std::sqrt(dtau_eff);

    for (int i = 0; i < n && all_ok; ++i) {
      LocalState& loc = locals[i];
      const StepLocal& sl = step_locals[i];
      DriftContext ctx;
      ctx.prior = &loc.prior;
      ctx.obs = loc.has_obs ? &loc.obs : nullptr;
      ctx.current = sl.current;
      ctx.particles = &sl.particles;
      ctx.diffusion = &sl.diffusion;

      if (cfg.metric == MetricKind::Identity) {
        if (dtau_eff != loc.cached_dtau) {
          loc.lu.compute(
              Matrix::Identity(loc.h_post.rows(), loc.h_post.cols()) -
              dtau_eff * loc.h_post);
          loc.cached_dtau = dtau_eff;
        }
      } else {
        const Matrix jac =
            drift_jacobian(ctx, cfg, sl.particles.states().col(0));
        loc.lu.compute(Matrix::Identity(jac.rows(), jac.cols()) -
                       dtau_eff * jac);
        loc.cached_dtau = dtau_eff;
      }
      const Eigen::PartialPivLU<Matrix>& lu = loc.lu;

      for (int e = 0; e < m; ++e) {
        const StateVector x_loc = sl.particles.states().col(e);
        const StateVector f = regularized_drift(ctx, cfg, e, x_loc);
        StateVector x_new = x_loc + dtau_eff * lu.solve(f);
        if (!sl.diffusion.is_zero()) {
          auto gen = engine_for(
              cfg.rng_seed, cycle_key, static_cast<std::uint64_t>(step),
              (static_cast<std::uint64_t>(e) << 32) |
                  static_cast<std::uint64_t>(i));
          x_new += sqrt_dtau * sl.diffusion.sample(standard_normal(
                                   sl.diffusion.noise_dim(), gen));
        }
        if (!std::isfinite(x_new[loc.pos])) {
          all_ok = false;
          break;
        }
        next(i, e) = x_new[loc.pos];
      }
    }

    if (all_ok) {
      // same variance-overshoot guard as the global flow
      Matrix centered = next.colwise() - next.rowwise().mean().eval();
      const double spread_new = centered.norm();
      all_ok = spread_prev < 1e-12 ||
               (spread_new < 3.0 * spread_prev &&
                spread_new > spread_prev / 3.0);
      if (all_ok) spread_prev = spread_new;
    }
    if (!all_ok) {
      dtau = std::max(dtau_eff * cfg.step.shrink, 1e-12);
      continue;
    }
    ens.states() = next;
    const StateVector mean_new = ens.mean();
    const double mean_change = (mean_new - mean_prev).norm();
    mean_prev = mean_new;
    if (mean_change < cfg.termination_eps * dtau_eff) {
      result.converged = true;
      return result;
    }
    dtau = std::min(dtau_eff * cfg.step.grow, cfg.step.dtau_max);
  }
  result.converged = false;
  return result;
}

// --- shrinkage -------------------------------------------------------------

RblwShrinkage rblw_shrinkage(const Ensemble& ens) {
  if (ens.n_ens() < 3)
    throw std::invalid_argument("rblw_shrinkage: needs N_ens >= 3");
  RblwShrinkage out;
  out.op = CovarianceOperator::shrinkage(ens.anomalies());
  out.gamma = out.op.shrinkage_gamma();
  out.mu = out.op.shrinkage_mu();
  return out;
}

// --- smoother ----------------------------------------------------------------

StateVector smoother_misfit_grad(const SmootherWindow& window,
                                 const StateVector& x0) {
  const int k = static_cast<int>(window.observations.size());
  if (k == 0) return StateVector::Zero(x0.size());

  std::vector<RkCheckpoint> checkpoints;
  checkpoints.reserve(k - 1);
  std::vector<StateVector> states(k);
  states[0] = x0;
  for (int i = 1; i < k; ++i) {
    const double ta = window.t0 + (i - 1) * window.dt;
    checkpoints.push_back(integrate_checkpoint(*window.model, states[i - 1],
                                               ta, ta + window.dt,
                                               window.substeps));
    states[i] = checkpoints.back().final_state();
  }

  StateVector g =
      obs_grad_log_likelihood(*window.observations[k - 1], states[k - 1]);
  for (int i = k - 2; i >= 0; --i) {
    g = apply_adjoint(*window.model, checkpoints[i], g);
    g += obs_grad_log_likelihood(*window.observations[i], states[i]);
  }
  return g;
}

StateVector vfps_drift(const StateVector& x0, const SmootherWindow& window,
                       const DriftContext& ctx, const FlowConfig& cfg) {
  DriftContext smoother_ctx = ctx;
  const DensityModel* prior = ctx.prior;
  smoother_ctx.posterior_grad = [prior, &window](const StateVector& z) {
    return StateVector(grad_log_density(*prior, z) +
                       smoother_misfit_grad(window, z));
  };
  return optimal_drift(smoother_ctx, x0, cfg);
}

CycleResult vfps_analysis(const Ensemble& background,
                          const SmootherWindow& window, const MethodSpec& spec,
                          const FlowConfig& cfg0, std::uint64_t cycle_key) {
  FitOptions opt = fit_options_for(spec);
  if (spec.covariance == CovarianceTreatment::Localized)
    opt.schur_taper =
        full_taper(spec.localization.radius, spec.localization.geometry);

  auto prior = std::make_shared<DensityModel>(
      fit(spec.prior_family, background, opt));

  bool hessian_constant = spec.prior_family == DensityFamily::Gaussian;
  for (const ObservationModel* o : window.observations)
    hessian_constant = hessian_constant && o->gaussian() && o->linear();

  FlowProblem problem;
  problem.prior = *prior;
  problem.posterior_grad = [prior, window](const StateVector& z) {
    return StateVector(grad_log_density(*prior, z) +
                       smoother_misfit_grad(window, z));
  };
  // Misfit curvature approximated with identity model propagators: the
  // observation blocks enter at the initial time. Only step quality is
  // affected.
  problem.posterior_hessian = [prior, window](const StateVector& z) {
    Matrix h = hessian_log_density(*prior, z);
    for (const ObservationModel* o : window.observations)
      h += obs_hessian_log_likelihood(*o, z);
    return h;
  };
  problem.posterior_hessian_constant = hessian_constant;
  problem.current_family = spec.current_family;
  problem.current_fit = opt;
  problem.background_anomalies = background.anomalies();

  FlowConfig cfg = cfg0;
  cfg.metric = spec.metric;
  FlowResult res =
      flow_to_steady_state(background, problem, cfg, cycle_key);
  return {std::move(res.analysis), res.steps, res.converged};
}

// --- sequential drivers --------------------------------------------------

namespace {

void record_cycle(MetricSeries& series, const Ensemble& ens,
                  const StateVector& truth, int component, int flow_steps,
                  bool converged) {
  const StateVector mean = ens.mean();
  series.analysis_means.push_back(mean);
  series.instant_rmse.push_back((truth - mean).norm() /
                                std::sqrt(static_cast<double>(truth.size())));
  series.flow_steps.push_back(flow_steps);
  series.converged.push_back(converged ? 1 : 0);
  std::vector<double> samples(ens.n_ens());
  for (int e = 0; e < ens.n_ens(); ++e)
    samples[e] = ens.states()(component, e);
  series.component_samples.push_back(std::move(samples));
  series.component_truth.push_back(truth[component]);
}

}  // namespace

MetricSeries vfp_filter_run(const TwinSetup& setup, const MethodSpec& spec,
                            const FlowConfig& cfg) {
  const int cycles = static_cast<int>(setup.truth.size());
  MetricSeries series;
  series.spinup = setup.spinup;
  series.n_ens = setup.init.n_ens();

  Ensemble ens = setup.init;
  for (int k = 0; k < cycles; ++k) {
    const double t0 = setup.t_start + k * setup.dt;
    forecast_ensemble(ens, setup.model, t0, t0 + setup.dt, setup.substeps, k);
    CycleResult res =
        spec.covariance == CovarianceTreatment::Localized
            ? local_vfp_analysis(ens, setup.observations[k], spec, cfg,
                                 static_cast<std::uint64_t>(k))
            : vfp_analysis(ens, setup.observations[k], spec, cfg,
                           static_cast<std::uint64_t>(k));
    ens = std::move(res.analysis);
    record_cycle(series, ens, setup.truth[k], setup.tracked_component,
                 res.flow_steps, res.converged);
  }
  return series;
}

MetricSeries vfps_run(const TwinSetup& setup, const MethodSpec& spec,
                      const FlowConfig& cfg) {
  const int cycles = static_cast<int>(setup.truth.size());
  const int window = std::max(1, spec.smoother.window);
  MetricSeries series;
  series.spinup = setup.spinup;
  series.n_ens = setup.init.n_ens();

  Ensemble ens = setup.init;
  // move the initial ensemble to the first observation time
  forecast_ensemble(ens, setup.model, setup.t_start,
                    setup.t_start + setup.dt, setup.substeps, 0);

  for (int start = 0; start < cycles; start += window) {
    const int len = std::min(window, cycles - start);
    const double t0 = setup.t_start + (start + 1) * setup.dt;

    SmootherWindow win;
    win.model = &setup.model;
    win.t0 = t0;
    win.dt = setup.dt;
    win.substeps = setup.substeps;
    for (int j = 0; j < len; ++j)
      win.observations.push_back(&setup.observations[start + j]);

    CycleResult res = vfps_analysis(ens, win, spec, cfg,
                                    static_cast<std::uint64_t>(start));
    Ensemble prop = std::move(res.analysis);
    record_cycle(series, prop, setup.truth[start], setup.tracked_component,
                 res.flow_steps, res.converged);
    for (int j = 1; j <= len; ++j) {
      const double ta = t0 + (j - 1) * setup.dt;
      forecast_ensemble(prop, setup.model, ta, ta + setup.dt, setup.substeps,
                        start + j);
      if (j < len)
        record_cycle(series, prop, setup.truth[start + j],
                     setup.tracked_component, 0, true);
    }
    ens = std::move(prop);  // background at the next window start
  }
  return series;
}

}  // namespace vfp
