#include "vfp/flow.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "vfp/rng.hpp"

namespace vfp {

// --- DiffusionOperator -------------------------------------------------

DiffusionOperator DiffusionOperator::from_spec(
    const DiffusionSpec& spec, const Matrix& background_anomalies,
    const Matrix& current_anomalies) {
  DiffusionOperator op;
  switch (spec.kind) {
    case DiffusionSpec::Kind::None:
      break;
    case DiffusionSpec::Kind::BackgroundAnomalies:
      if (spec.alpha != 0.0) op.factor_ = spec.alpha * background_anomalies;
      break;
    case DiffusionSpec::Kind::CurrentAnomalies:
      if (spec.alpha != 0.0) op.factor_ = spec.alpha * current_anomalies;
      break;
    case DiffusionSpec::Kind::Climatological:
      if (spec.alpha != 0.0) op.factor_ = spec.alpha * spec.factor;
      break;
  }
  return op;
}

StateVector DiffusionOperator::sample(const StateVector& xi) const {
  if (is_zero()) throw std::logic_error("DiffusionOperator: zero diffusion");
  return factor_ * xi;
}

StateVector DiffusionOperator::apply_D(const StateVector& v) const {
  if (is_zero()) return StateVector::Zero(v.size());
  return 0.5 * (factor_ * (factor_.transpose() * v));
}

Matrix DiffusionOperator::dense_D(int n_state) const {
  if (is_zero()) return Matrix::Zero(n_state, n_state);
  return 0.5 * (factor_ * factor_.transpose());
}

// --- drift assembly ----------------------------------------------------

StateVector posterior_grad_log(const DriftContext& ctx, const StateVector& x) {
  if (ctx.posterior_grad) return ctx.posterior_grad(x);
  StateVector g = grad_log_density(*ctx.prior, x);
  if (ctx.obs) g += obs_grad_log_likelihood(*ctx.obs, x);
  return g;
}

StateVector optimal_drift(const DriftContext& ctx, const StateVector& x,
                          const FlowConfig& cfg) {
  const StateVector g_post = posterior_grad_log(ctx, x);
  if (cfg.metric == MetricKind::Langevin) {
    if (!ctx.diffusion || ctx.diffusion->is_zero())
      return StateVector::Zero(x.size());
    return ctx.diffusion->apply_D(g_post);
  }
  const StateVector g_q = grad_log_density(ctx.current, x);
  StateVector drift = g_post - g_q;
  if (ctx.diffusion && !ctx.diffusion->is_zero())
    drift += ctx.diffusion->apply_D(g_q);
  return drift;
}

StateVector coulomb_force_at(const StateVector& x_e, int e,
                             const Ensemble& ens, double beta) {
  StateVector f = StateVector::Zero(x_e.size());
  if (beta == 0.0) return f;
  const double floor_dist = 1e-8 * (1.0 + x_e.norm());
  for (int i = 0; i < ens.n_ens(); ++i) {
    if (i == e) continue;  // no self-repulsion
    const StateVector diff = x_e - ens.states().col(i);
    const double dist = std::max(diff.norm(), floor_dist);
    f += diff / (dist * dist * dist);
  }
  return (beta / ens.n_ens()) * f;
}

StateVector coulomb_force(
    int e, const Ensemble& ens, double beta,
    const std::function<StateVector(const StateVector&)>& metric_apply) {
  StateVector f = coulomb_force_at(ens.states().col(e), e, ens, beta);
  if (metric_apply) return metric_apply(f);
  return f;
}

namespace {

// Metric application for the regularization term: identity, or D under the
// Langevin choice.
StateVector apply_metric(const DriftContext& ctx, const FlowConfig& cfg,
                         const StateVector& v) {
  if (cfg.metric == MetricKind::Langevin) {
    if (!ctx.diffusion || ctx.diffusion->is_zero())
      return StateVector::Zero(v.size());
    return ctx.diffusion->apply_D(v);
  }
  return v;
}

Matrix posterior_hessian_of(const DriftContext& ctx, const StateVector& x) {
  if (ctx.posterior_hessian) return ctx.posterior_hessian(x);
  Matrix h = hessian_log_density(*ctx.prior, x);
  if (ctx.obs) h += obs_hessian_log_likelihood(*ctx.obs, x);
  return h;
}

}  // namespace

StateVector regularized_drift(const DriftContext& ctx, const FlowConfig& cfg,
                              int e, const StateVector& x) {
  StateVector f = optimal_drift(ctx, x, cfg);
  if (cfg.reg_beta != 0.0 && ctx.particles)
    f += apply_metric(ctx, cfg,
                      coulomb_force_at(x, e, *ctx.particles, cfg.reg_beta));
  return f;
}

Matrix drift_jacobian(const DriftContext& ctx, const FlowConfig& cfg,
                      const StateVector& x) {
  // Only the analysis-density curvature enters: the current-density and
  // regularization Hessians are omitted. The current-density term has no
  // ensemble-mean contribution, so an implicit treatment of the posterior
  // curvature keeps the mean iteration stable in stiff directions at any
  // step size; the anomaly modes then relax explicitly.
  const Matrix h_post = posterior_hessian_of(ctx, x);
  if (cfg.metric == MetricKind::Langevin) {
    const int n = static_cast<int>(x.size());
    if (!ctx.diffusion || ctx.diffusion->is_zero()) return Matrix::Zero(n, n);
    return ctx.diffusion->dense_D(n) * h_post;
  }
  return h_post;
}

StateVector rem_update_single(const StateVector& x,
                              const StateVector& drift_value,
                              const Matrix& jacobian, double dtau,
                              const StateVector& noise_term, bool* ok) {
  const int n = static_cast<int>(x.size());
  const Matrix lhs = Matrix::Identity(n, n) - dtau * jacobian;
  Eigen::PartialPivLU<Matrix> lu(lhs);
  const StateVector y = lu.solve(drift_value);
  StateVector out = x + dtau * y;
  if (noise_term.size() > 0) out += noise_term;
  if (ok) *ok = out.allFinite();
  return out;
}

StateVector rem_update_gmres(
    const StateVector& x,
    const std::function<StateVector(const StateVector&)>& drift,
    const StateVector& drift_value, double dtau, const StateVector& noise_term,
    double tol, int max_iter, bool* ok) {
  const int n = static_cast<int>(x.size());
  // Matrix-vector product with (I - dtau J) using one-sided finite
  // differences of the drift.
  const double base = std::sqrt(std::numeric_limits<double>::epsilon());
  auto apply = [&](const StateVector& v) -> StateVector {
    const double vn = v.norm();
    if (vn == 0.0) return v;
    const double h = base * (1.0 + x.norm()) / vn;
    const StateVector jv = (drift(x + h * v) - drift_value) / h;
    return v - dtau * jv;
  };

  const int m = std::min(max_iter, n);
  StateVector y = StateVector::Zero(n);
  const double bnorm = drift_value.norm();
  bool converged = (bnorm == 0.0);
  if (!converged) {
    // Arnoldi process on (I - dtau J), initial guess 0.
    Matrix v_basis(n, m + 1);
    Matrix hess = Matrix::Zero(m + 1, m);
    v_basis.col(0) = drift_value / bnorm;
    for (int k = 0; k < m; ++k) {
      StateVector w = apply(v_basis.col(k));
      for (int j = 0; j <= k; ++j) {
        hess(j, k) = w.dot(v_basis.col(j));
        w -= hess(j, k) * v_basis.col(j);
      }
      hess(k + 1, k) = w.norm();
      const bool breakdown = hess(k + 1, k) <= 1e-14;
      if (!breakdown) v_basis.col(k + 1) = w / hess(k + 1, k);
      // Least-squares solve of the small system; residual check.
      const Matrix hk = hess.topLeftCorner(k + 2, k + 1);
      StateVector rhs = StateVector::Zero(k + 2);
      rhs[0] = bnorm;
      const StateVector yk = hk.colPivHouseholderQr().solve(rhs);
      const double resid = (hk * yk - rhs).norm() / bnorm;
      y = v_basis.leftCols(k + 1) * yk;
      converged = resid < tol;
      if (converged || breakdown) {
        converged = converged || breakdown;
        break;
      }
    }
  }
  StateVector out = x + dtau * y;
  if (noise_term.size() > 0) out += noise_term;
  if (ok) *ok = converged && out.allFinite();
  return out;
}

RemStepOutcome rem_step(const Ensemble& ens, const DriftContext& ctx,
                        const FlowConfig& cfg, double dtau,
                        std::uint64_t cycle_key, int step_index) {
  const int n = ens.n_state();
  const int m = ens.n_ens();
  RemStepOutcome result;
  result.ensemble = Ensemble(n, m);
  result.ok = true;

  const bool stochastic = ctx.diffusion && !ctx.diffusion->is_zero();
  const double sqrt_dtau = std::sqrt(dtau);

  Matrix shared_jacobian;
  Eigen::PartialPivLU<Matrix> shared_lu;
  const bool analytic = cfg.solver.kind == SolverSpec::Kind::BlockAnalytic;
  if (analytic && ctx.jacobian_constant) {
    shared_jacobian = drift_jacobian(ctx, cfg, ens.states().col(0));
    shared_lu.compute(Matrix::Identity(n, n) - dtau * shared_jacobian);
  }

  for (int e = 0; e < m; ++e) {
    const StateVector x = ens.states().col(e);
    const StateVector f = regularized_drift(ctx, cfg, e, x);
    StateVector noise;
    if (stochastic) {
      auto gen = engine_for(cfg.rng_seed, cycle_key,
                            static_cast<std::uint64_t>(step_index),
                            static_cast<std::uint64_t>(e));
      noise = sqrt_dtau *
              ctx.diffusion->sample(
                  standard_normal(ctx.diffusion->noise_dim(), gen));
    }
    bool ok = true;
    StateVector x_new;
    if (analytic) {
      if (ctx.jacobian_constant) {
        StateVector out = x + dtau * shared_lu.solve(f);
        if (noise.size() > 0) out += noise;
        x_new = out;
        ok = out.allFinite();
      } else {
        x_new = rem_update_single(x, f, drift_jacobian(ctx, cfg, x), dtau,
                                  noise, &ok);
      }
    } else {
      auto drift_fn = [&](const StateVector& z) {
        return regularized_drift(ctx, cfg, e, z);
      };
      x_new = rem_update_gmres(x, drift_fn, f, dtau, noise, cfg.solver.tol,
                               cfg.solver.max_iter, &ok);
    }
    if (!ok) {
      result.ok = false;
      return result;
    }
    result.ensemble.states().col(e) = x_new;
  }
  return result;
}

FlowResult flow_to_steady_state(const Ensemble& ens0,
                                const FlowProblem& problem,
                                const FlowConfig& cfg,
                                std::uint64_t cycle_key) {
  FlowResult result;
  result.analysis = ens0;
  Ensemble& ens = result.analysis;

  const bool prior_gaussian = problem.prior.family == DensityFamily::Gaussian;
  const bool obs_const =
      problem.obs == nullptr ||
      (problem.obs->linear().has_value() && problem.obs->gaussian());
  const bool posterior_const =
      problem.posterior_grad ? problem.posterior_hessian_constant
                             : (prior_gaussian && obs_const);

  double dtau = cfg.step.dtau0;
  StateVector mean_prev = ens.mean();

  DriftContext ctx;
  ctx.prior = &problem.prior;
  ctx.obs = problem.obs;
  ctx.posterior_grad = problem.posterior_grad;
  ctx.posterior_hessian = problem.posterior_hessian;
  ctx.posterior_hessian_constant = problem.posterior_hessian_constant;

  bool refit_needed = true;
  DiffusionOperator diffusion;
  double spread_prev = (ens.states().colwise() - mean_prev).norm();
  for (int step = 1; step <= cfg.step.max_steps; ++step) {
    if (refit_needed) {
      ctx.current = fit(problem.current_family, ens, problem.current_fit);
      diffusion = DiffusionOperator::from_spec(
          cfg.diffusion, problem.background_anomalies, ens.anomalies());
      refit_needed = false;
    }
    ctx.particles = &ens;
    ctx.diffusion = &diffusion;
    ctx.jacobian_constant = posterior_const;

    RemStepOutcome out = rem_step(ens, ctx, cfg, dtau, cycle_key, step);
    result.steps = step;
    if (out.ok) {
      // guard against variance overshoot: one step may not change the
      // ensemble spread by more than the stability factor, otherwise the
      // anomaly map can lock into a collapse/re-expansion cycle
      const double spread_new =
          (out.ensemble.states().colwise() - out.ensemble.mean()).norm();
      out.ok = spread_prev < 1e-12 ||
               (spread_new < 3.0 * spread_prev &&
                spread_new > spread_prev / 3.0);
      if (out.ok) spread_prev = spread_new;
    }
    if (!out.ok) {
      dtau = std::max(dtau * cfg.step.shrink, 1e-12);
      continue;
    }
    const StateVector mean_new = out.ensemble.mean();
    const double mean_change = (mean_new - mean_prev).norm();
    ens = std::move(out.ensemble);
    mean_prev = mean_new;
    refit_needed = true;
    if (mean_change < cfg.termination_eps * dtau) {
      result.converged = true;
      return result;
    }
    dtau = std::min(dtau * cfg.step.grow, cfg.step.dtau_max);
  }
  result.converged = false;
  return result;
}

}  // namespace vfp
