// End-to-end acceptance suite: every criterion runs at its stated
// tolerance and reports one pass/fail line.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "vfp/assimilate.hpp"
#include "vfp/baselines.hpp"
#include "vfp/harness.hpp"
#include "vfp/rng.hpp"

using namespace vfp;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
};

std::string strf(const char* fmt, ...) {
  char buf[512];
  va_list args;
  va_start(args, fmt);
  std::vsnprintf(buf, sizeof buf, fmt, args);
  va_end(args);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Ensemble random_ensemble(int n, int m, std::uint64_t seed, double spread) {
  auto gen = engine_for(seed, 0);
  Matrix x(n, m);
  std::normal_distribution<double> d(0.0, spread);
  for (int i = 0; i < n; ++i)
    for (int e = 0; e < m; ++e) x(i, e) = d(gen);
  return Ensemble(x);
}

// --- criterion 1: gradient fidelity ---------------------------------------

Outcome criterion1() {
  Outcome out{1, "gradient fidelity (5 families + 2 obs error families)"};
  std::mt19937_64 gen(20260810);
  const int n = 4;
  Ensemble ens = random_ensemble(n, 32, 814, 1.5);

  double worst = 0.0;
  bool ok = true;

  auto check_family =
      [&](DensityFamily family,
          const std::function<double(const DensityModel&,
                                     const StateVector&)>& logp) {
        DensityModel model = fit(family, ens);
        int done = 0;
        for (int trial = 0; done < 50 && trial < 400; ++trial) {
          StateVector x = model.center + oracle::random_vector(n, gen, 2.0);
          const bool laplace_like = family == DensityFamily::Laplace ||
                                    family == DensityFamily::Huber;
          if (laplace_like && oracle::laplace_theta(model, x) < 1e-3)
            continue;  // excluded singular neighborhood
          if (family == DensityFamily::Huber) {
            bool clean = true;
            StateVector xp = x, xm = x;
            const bool b0 = oracle::huber_branch(model, x);
            for (int i = 0; i < n && clean; ++i) {
              const double h = 1e-5 * (1.0 + std::abs(x[i]));
              xp[i] = x[i] + h;
              xm[i] = x[i] - h;
              clean = oracle::huber_branch(model, xp) == b0 &&
                      oracle::huber_branch(model, xm) == b0;
              xp[i] = x[i];
              xm[i] = x[i];
            }
            if (!clean) continue;
          }
          const StateVector fd = oracle::fd_gradient(
              [&](const StateVector& z) { return logp(model, z); }, x);
          const StateVector g = grad_log_density(model, x);
          const double rel = (g - fd).norm() / std::max(g.norm(), 1e-3);
          worst = std::max(worst, rel);
          ok = ok && rel < 1e-6;
          ++done;
        }
        ok = ok && done == 50;
      };

  check_family(DensityFamily::Gaussian, oracle::gaussian_logp);
  check_family(DensityFamily::Laplace, oracle::laplace_logp);
  check_family(DensityFamily::Huber, oracle::huber_logp);
  check_family(DensityFamily::Cauchy, oracle::cauchy_logp);
  check_family(DensityFamily::Kernel, oracle::kernel_logp);

  // observation-error families through a random linear operator
  Matrix h(3, n);
  for (int i = 0; i < h.size(); ++i)
    h(i / n, i % n) = std::normal_distribution<double>(0, 1)(gen);
  const Matrix r = oracle::random_spd(3, gen);
  const ObsVector y = oracle::random_vector(3, gen);
  const auto gauss = make_linear_observation(h, GaussianObsError{r}, y);
  const auto cauchy = make_linear_observation(
      h, CauchyObsError{ObsVector::Constant(3, 0.8)}, y);
  auto gauss_logp = [&](const StateVector& x) {
    const ObsVector res = h * x - y;
    return -0.5 * res.dot(r.ldlt().solve(res));
  };
  auto cauchy_logp = [&](const StateVector& x) {
    const ObsVector res = h * x - y;
    double lp = 0.0;
    for (int i = 0; i < res.size(); ++i)
      lp -= std::log(0.64 + res[i] * res[i]);
    return lp;
  };
  for (int trial = 0; trial < 50; ++trial) {
    const StateVector x = oracle::random_vector(n, gen, 2.0);
    const StateVector gg = obs_grad_log_likelihood(gauss, x);
    const StateVector gc = obs_grad_log_likelihood(cauchy, x);
    const double rg = (gg - oracle::fd_gradient(gauss_logp, x)).norm() /
                      std::max(gg.norm(), 1e-3);
    const double rc = (gc - oracle::fd_gradient(cauchy_logp, x)).norm() /
                      std::max(gc.norm(), 1e-3);
    worst = std::max({worst, rg, rc});
    ok = ok && rg < 1e-6 && rc < 1e-6;
  }

  out.pass = ok;
  out.detail = strf("worst FD relative error %.2e (tolerance 1e-6)", worst);
  return out;
}

// --- criterion 2: conjugate-oracle convergence -----------------------------

Outcome criterion2() {
  Outcome out{2, "conjugate-oracle convergence + zero-drift fixed point"};
  bool ok = true;
  std::ostringstream detail;

  FlowConfig cfg;  // sigma = 0, beta = 0
  cfg.termination_eps = 1e-5;
  cfg.step.max_steps = 2000;
  MethodSpec spec;

  {  // scalar problem
    const double m0 = 1.0, p0 = 2.0, y = 3.0, r = 0.5;
    auto gen = engine_for(2201, 0);
    Matrix states(1, 1000);
    std::normal_distribution<double> d(0.0, std::sqrt(p0));
    for (int e = 0; e < 1000; ++e) states(0, e) = m0 + d(gen);
    Ensemble background(states);
    auto obs = make_linear_observation(
        Matrix::Identity(1, 1), GaussianObsError{Matrix::Constant(1, 1, r)},
        StateVector::Constant(1, y));
    const CycleResult res = vfp_analysis(background, obs, spec, cfg);
    const auto kal = oracle::kalman_scalar(m0, p0, y, r);
    const double mean_err = std::abs(res.analysis.mean()[0] - kal.mean);
    const double var_err =
        std::abs(res.analysis.covariance()(0, 0) - kal.var);
    ok = ok && res.converged && mean_err < 3.0 * std::sqrt(kal.var / 1000.0) &&
         var_err < 0.15 * kal.var;
    detail << strf("scalar mean err %.1e, var err %.1f%%; ", mean_err,
                   100.0 * var_err / kal.var);
  }

  {  // 3-variable problem
    auto gen = engine_for(2202, 0);
    const Matrix pb = oracle::random_spd(3, gen);
    const StateVector m0 = oracle::random_vector(3, gen);
    Matrix r = Matrix::Zero(3, 3);
    r.diagonal() << 0.5, 1.0, 2.0;
    const ObsVector y = m0 + oracle::random_vector(3, gen);

    const Matrix pb_sqrt = pb.llt().matrixL();
    Matrix states(3, 1000);
    for (int e = 0; e < 1000; ++e)
      states.col(e) = m0 + pb_sqrt * oracle::random_vector(3, gen);
    Ensemble background(states);
    auto obs = make_linear_observation(Matrix::Identity(3, 3),
                                       GaussianObsError{r}, y);
    const CycleResult res = vfp_analysis(background, obs, spec, cfg);

    // oracle posterior on the fitted background moments
    StateVector ma;
    Matrix pa;
    oracle::kalman_nd(background.covariance(), background.mean(),
                      Matrix::Identity(3, 3), r, y, ma, pa);
    bool mean_ok = res.converged;
    for (int i = 0; i < 3; ++i)
      mean_ok = mean_ok && std::abs(res.analysis.mean()[i] - ma[i]) <
                               3.0 * std::sqrt(pa(i, i) / 1000.0);
    const double cov_rel =
        (res.analysis.covariance() - pa).norm() / pa.norm();
    ok = ok && mean_ok && cov_rel < 0.15;
    detail << strf("3-var cov err %.1f%%; ", 100.0 * cov_rel);
  }

  {  // zero drift at the exact posterior fit
    auto gen = engine_for(2203, 0);
    const Matrix pb = oracle::random_spd(3, gen);
    const StateVector m0 = oracle::random_vector(3, gen);
    Matrix r = Matrix::Zero(3, 3);
    r.diagonal() << 0.8, 1.2, 0.6;
    const ObsVector y = m0 + oracle::random_vector(3, gen);
    StateVector ma;
    Matrix pa;
    oracle::kalman_nd(pb, m0, Matrix::Identity(3, 3), r, y, ma, pa);

    DensityModel prior;
    prior.family = DensityFamily::Gaussian;
    prior.center = m0;
    prior.cov = CovarianceOperator::dense_spd(pb);
    DensityModel posterior;
    posterior.family = DensityFamily::Gaussian;
    posterior.center = ma;
    posterior.cov = CovarianceOperator::dense_spd(pa);
    auto obs = make_linear_observation(Matrix::Identity(3, 3),
                                       GaussianObsError{r}, y);
    DriftContext ctx;
    ctx.prior = &prior;
    ctx.obs = &obs;
    ctx.current = posterior;
    DiffusionOperator none;
    ctx.diffusion = &none;
    FlowConfig fp_cfg;

    double max_drift = 0.0;
    for (int t = 0; t < 200; ++t) {
      const StateVector x = ma + pa.llt().matrixL() *
                                     oracle::random_vector(3, gen);
      max_drift = std::max(
          max_drift, optimal_drift(ctx, x, fp_cfg).cwiseAbs().maxCoeff());
    }
    ok = ok && max_drift < 1e-8;
    detail << strf("fixed-point max drift %.1e", max_drift);
  }

  out.pass = ok;
  out.detail = detail.str();
  return out;
}

// --- criterion 3: REM strong order -----------------------------------------

Outcome criterion3() {
  Outcome out{3, "REM strong order on a mean-reverting multiplicative SDE"};
  // dX = -X dtau + 0.5 X dW, X0 = 1, T = 1; shared Wiener increments
  // against a fine-step reference path.
  const int paths = 3000;
  const int ref_pow = 12;
  const int ref_steps = 1 << ref_pow;
  const double t_end = 1.0;
  const double dt_ref = t_end / ref_steps;
  const Matrix jac = -Matrix::Identity(1, 1);
  const std::vector<int> coarse_pows = {4, 5, 6, 7, 8};

  std::vector<double> err_sum(coarse_pows.size(), 0.0);
  for (int p = 0; p < paths; ++p) {
    auto gen = engine_for(33, static_cast<std::uint64_t>(p));
    std::vector<double> dw(ref_steps);
    std::normal_distribution<double> d(0.0, std::sqrt(dt_ref));
    for (double& w : dw) w = d(gen);

    auto advance = [&](double x, double dtau, double wiener) {
      bool step_ok = false;
      const StateVector next = rem_update_single(
          StateVector::Constant(1, x), StateVector::Constant(1, -x), jac,
          dtau, StateVector::Constant(1, 0.5 * x * wiener), &step_ok);
      return next[0];
    };

    double x_ref = 1.0;
    for (int s = 0; s < ref_steps; ++s) x_ref = advance(x_ref, dt_ref, dw[s]);

    for (size_t level = 0; level < coarse_pows.size(); ++level) {
      const int steps = 1 << coarse_pows[level];
      const int block = ref_steps / steps;
      double x = 1.0;
      for (int s = 0; s < steps; ++s) {
        double wiener = 0.0;
        for (int b = 0; b < block; ++b) wiener += dw[s * block + b];
        x = advance(x, t_end / steps, wiener);
      }
      err_sum[level] += std::abs(x - x_ref);
    }
  }

  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (size_t level = 0; level < coarse_pows.size(); ++level) {
    const double lx = std::log2(t_end / (1 << coarse_pows[level]));
    const double ly = std::log2(err_sum[level] / paths);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double m = static_cast<double>(coarse_pows.size());
  const double slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
  out.pass = slope > 0.35 && slope < 0.75;
  out.detail =
      strf("fitted strong-error slope %.3f (window [0.35, 0.75])", slope);
  return out;
}

// --- criterion 4: adjoint correctness --------------------------------------

Outcome criterion4() {
  Outcome out{4, "discrete adjoint identity + smoother misfit gradient"};
  bool ok = true;

  const int n = 40;
  const ModelSystem model = lorenz96(n, 8.0);
  StateVector x0 = StateVector::Constant(n, 8.0);
  x0[0] += 0.01;
  x0 = integrate(model, x0, 0.0, 10.0, StepPolicy::max_step_of(0.01))
           .states.back();

  double worst_dot = 0.0;
  const RkCheckpoint chk = integrate_checkpoint(model, x0, 0.0, 0.5, 50);
  auto gen = engine_for(44, 0);
  for (int t = 0; t < 50; ++t) {
    const StateVector v = oracle::random_vector(n, gen);
    const StateVector w = oracle::random_vector(n, gen);
    const double lhs = apply_tangent(model, chk, v).dot(w);
    const double rhs = v.dot(apply_adjoint(model, chk, w));
    const double rel =
        std::abs(lhs - rhs) / std::max(std::abs(lhs), std::abs(rhs));
    worst_dot = std::max(worst_dot, rel);
  }
  ok = ok && worst_dot < 1e-12;

  // K = 3 window: adjoint-accumulated misfit gradient vs FD of the cost
  const double dt = 0.05;
  const int substeps = 5;
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  std::vector<ObservationModel> obs;
  {
    StateVector xt = x0;
    for (int k = 0; k < 3; ++k) {
      ObsVector y(n);
      for (int i = 0; i < n; ++i)
        y[i] = xt[i] + std::normal_distribution<double>(0, 1)(gen);
      obs.push_back(make_pointwise_observation(
          idx, n, GaussianObsError{Matrix::Identity(n, n)}, y));
      xt = integrate(model, xt, k * dt, (k + 1) * dt,
                     StepPolicy::fixed(substeps))
               .states.back();
    }
  }
  SmootherWindow window;
  window.model = &model;
  window.t0 = 0.0;
  window.dt = dt;
  window.substeps = substeps;
  for (const auto& o : obs) window.observations.push_back(&o);

  auto cost = [&](const StateVector& z) {
    double acc = 0.0;
    StateVector x = z;
    for (size_t k = 0; k < obs.size(); ++k) {
      if (k > 0)
        x = integrate(model, x, (k - 1) * dt, k * dt,
                      StepPolicy::fixed(substeps))
                .states.back();
      const ObsVector r = obs[k].apply(x) - obs[k].value();
      acc += 0.5 * r.dot(obs[k].solve_R(r));
    }
    return acc;
  };
  const StateVector misfit = smoother_misfit_grad(window, x0);
  const StateVector fd = oracle::fd_gradient(cost, x0, 1e-6);
  const double misfit_rel = (misfit + fd).norm() / fd.norm();
  ok = ok && misfit_rel < 1e-5;

  out.pass = ok;
  out.detail = strf("worst dot-product rel err %.1e; misfit-vs-FD rel %.1e",
                    worst_dot, misfit_rel);
  return out;
}

// --- desk-scale twin experiments -------------------------------------------

ExperimentConfig l63_base() {
  ExperimentConfig cfg;
  cfg.model_kind = "lorenz63";
  cfg.cycles = 2000;
  cfg.spinup = 200;
  cfg.dt = 0.12;
  cfg.obs_error = "gaussian";
  cfg.obs_variance = 8.0;
  cfg.method = "vfp";
  cfg.diffusion_kind = "background";
  cfg.flow.diffusion = DiffusionSpec::background_anomalies(0.1);
  cfg.flow.reg_beta = 0.01;
  cfg.n_ens = 50;
  cfg.repetitions = 4;
  cfg.seed_truth = 101;
  cfg.seed_obs = 202;
  cfg.seed_init = 303;
  cfg.seed_flow = 404;
  return cfg;
}

void criteria_5_and_12(const fs::path& dir, Outcome& c5, Outcome& c12) {
  c5 = {5, "L63 desk twin: VFP(GG) vs observation noise and tuned ETKF",
        false, ""};
  c12 = {12, "determinism: byte-identical summary on rerun", false, ""};

  const ExperimentConfig cfg = l63_base();
  const ExperimentResult vfp = run_experiment(cfg, (dir / "c5_vfp").string());
  const ExperimentResult rerun =
      run_experiment(cfg, (dir / "c5_vfp_rerun").string());

  ExperimentConfig etkf_cfg = cfg;
  etkf_cfg.method = "etkf";
  const ExperimentResult etkf =
      run_experiment(etkf_cfg, (dir / "c5_etkf").string());

  const double bound = std::sqrt(8.0);
  const double gap = std::abs(vfp.mean_rmse - etkf.mean_rmse);
  c5.pass = vfp.status == RunStatus::Ok && etkf.status == RunStatus::Ok &&
            vfp.mean_rmse < bound && gap < 0.3;
  c5.detail = strf(
      "VFP(GG) RMSE %.3f (< %.3f), ETKF RMSE %.3f (inflation %.2f), gap %.3f "
      "(< 0.3)",
      vfp.mean_rmse, bound, etkf.mean_rmse, etkf.etkf_inflation_used, gap);

  const std::string a = slurp(dir / "c5_vfp" / "summary.json");
  const std::string b = slurp(dir / "c5_vfp_rerun" / "summary.json");
  c12.pass = !a.empty() && a == b && rerun.status == RunStatus::Ok;
  c12.detail = strf("summary.json rerun: %zu bytes, %s", a.size(),
                    a == b ? "identical" : "DIFFERENT");
}

Outcome criterion6(const fs::path& dir) {
  Outcome out{6,
              "L63 Cauchy robustness: VFP(GG) bounded, surrogate-R ETKF "
              "diverges"};
  ExperimentConfig cfg = l63_base();
  cfg.obs_error = "cauchy";
  cfg.obs_gamma = 1.0;
  cfg.repetitions = 2;

  const ExperimentResult vfp = run_experiment(cfg, (dir / "c6_vfp").string());
  bool vfp_ok = vfp.status == RunStatus::Ok;
  double vfp_worst = 0.0;
  for (const auto& rep : vfp.repetitions) {
    vfp_ok = vfp_ok && !rep.failed && rep.rmse < 10.0;
    if (!rep.failed) vfp_worst = std::max(vfp_worst, rep.rmse);
  }

  ExperimentConfig etkf_cfg = cfg;
  etkf_cfg.method = "etkf";
  const ExperimentResult etkf =
      run_experiment(etkf_cfg, (dir / "c6_etkf").string());
  bool etkf_diverges = true;
  double etkf_worst = 0.0;
  int etkf_failed = 0;
  for (const auto& rep : etkf.repetitions) {
    if (rep.failed) {
      ++etkf_failed;
      continue;
    }
    etkf_diverges = etkf_diverges && rep.rmse > 10.0;
    etkf_worst = std::max(etkf_worst, rep.rmse);
  }

  out.pass = vfp_ok && etkf_diverges;
  out.detail = strf(
      "VFP worst RMSE %.2f (< 10); ETKF: %d/%zu non-finite, finite RMSE up "
      "to %.1f (> 10 required)",
      vfp_worst, etkf_failed, etkf.repetitions.size(), etkf_worst);
  return out;
}

Outcome criterion7(const fs::path& dir) {
  Outcome out{7, "rank-histogram tuning: (0.1, 0.01) flatter than (0, 0)"};
  ExperimentConfig tuned = l63_base();
  tuned.repetitions = 2;

  ExperimentConfig bare = tuned;
  bare.diffusion_kind = "none";
  bare.flow.diffusion = DiffusionSpec::none();
  bare.flow.reg_beta = 0.0;

  const ExperimentResult with_reg =
      run_experiment(tuned, (dir / "c7_alpha01_beta001").string());
  const ExperimentResult without =
      run_experiment(bare, (dir / "c7_alpha0_beta0").string());

  const double chi_tuned = chi_square_from_uniform(with_reg.rank_total);
  const double chi_bare = chi_square_from_uniform(without.rank_total);
  out.pass = with_reg.status == RunStatus::Ok &&
             without.status == RunStatus::Ok && chi_tuned < chi_bare;
  out.detail = strf(
      "chi-square distance %.0f (alpha=0.1, beta=0.01) vs %.0f (alpha=0, "
      "beta=0)",
      chi_tuned, chi_bare);
  return out;
}

ExperimentConfig l96_base() {
  ExperimentConfig cfg;
  cfg.model_kind = "lorenz96";
  cfg.l96_n = 40;
  cfg.l96_forcing = 8.0;
  cfg.cycles = 500;
  cfg.spinup = 100;
  cfg.dt = 0.05;
  cfg.obs_error = "gaussian";
  cfg.obs_variance = 1.0;
  cfg.method = "vfp";
  cfg.method_spec.covariance = CovarianceTreatment::Localized;
  cfg.method_spec.localization.radius = 5.0;
  cfg.method_spec.localization.geometry = GridGeometry::lorenz96_ring(40);
  cfg.diffusion_kind = "climatological";
  cfg.flow.diffusion = DiffusionSpec::climatological(0.1, Matrix());
  cfg.flow.reg_beta = 0.0;
  cfg.flow.step.max_steps = 50;
  cfg.n_ens = 20;
  cfg.repetitions = 1;
  cfg.seed_truth = 111;
  cfg.seed_obs = 222;
  cfg.seed_init = 333;
  cfg.seed_flow = 444;
  return cfg;
}

void criteria_8_and_9(const fs::path& dir, Outcome& c8, Outcome& c9) {
  c8 = {8, "L96 localized filter: RMSE < 1 and full-radius equivalence",
        false, ""};
  c9 = {9, "smoother gain: LVFPS(GG) K=5 RMSE <= filter RMSE", false, ""};

  const ExperimentConfig cfg = l96_base();
  const ExperimentResult filter =
      run_experiment(cfg, (dir / "c8_lvfp").string());

  // full-radius localization against the global analysis on a 10-variable
  // ring, deterministic flow
  bool equiv_ok = false;
  double equiv_diff = 0.0;
  {
    const int n = 10;
    const ModelSystem model = lorenz96(n, 8.0);
    StateVector x = StateVector::Constant(n, 8.0);
    x[0] += 0.01;
    x = integrate(model, x, 0.0, 10.0, StepPolicy::max_step_of(0.01))
            .states.back();
    auto gen = engine_for(89, 0);
    Matrix states(n, 20);
    std::normal_distribution<double> d(0.0, 0.5);
    for (int e = 0; e < 20; ++e) {
      StateVector xe = x;
      for (int i = 0; i < n; ++i) xe[i] += d(gen);
      states.col(e) =
          integrate(model, xe, 0.0, 0.5, StepPolicy::max_step_of(0.01))
              .states.back();
    }
    Ensemble background(states);
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    ObsVector y = background.mean();
    y.array() += 0.4;
    auto obs = make_pointwise_observation(
        idx, n, GaussianObsError{Matrix::Identity(n, n)}, y);
    MethodSpec local_spec;
    local_spec.covariance = CovarianceTreatment::Localized;
    local_spec.localization.radius = 1e6;
    local_spec.localization.geometry = GridGeometry::lorenz96_ring(n);
    FlowConfig flow;
    flow.termination_eps = 1e-3;
    flow.step.max_steps = 200;
    const CycleResult local =
        local_vfp_analysis(background, obs, local_spec, flow);
    MethodSpec plain;
    const CycleResult global = vfp_analysis(background, obs, plain, flow);
    equiv_diff = (local.analysis.states() - global.analysis.states())
                     .cwiseAbs()
                     .maxCoeff();
    equiv_ok = equiv_diff < 1e-6;
  }

  c8.pass =
      filter.status == RunStatus::Ok && filter.mean_rmse < 1.0 && equiv_ok;
  c8.detail = strf(
      "LVFP(GG) RMSE %.3f (< 1.0); full-radius vs global max diff %.1e "
      "(< 1e-6)",
      filter.mean_rmse, equiv_diff);

  ExperimentConfig smoother_cfg = cfg;
  smoother_cfg.method_spec.smoother.window = 5;
  const ExperimentResult smoother =
      run_experiment(smoother_cfg, (dir / "c9_lvfps").string());
  c9.pass = smoother.status == RunStatus::Ok &&
            smoother.mean_rmse <= filter.mean_rmse;
  c9.detail = strf("smoother RMSE %.3f vs filter RMSE %.3f",
                   smoother.mean_rmse, filter.mean_rmse);
}

// --- criterion 10: shrinkage correctness ------------------------------------

Outcome criterion10() {
  Outcome out{10, "RBLW shrinkage: clamp, SMW inverse, Monte-Carlo win rate"};
  bool ok = true;

  // gamma stays in [0, 1]; the isotropic scalar case clamps exactly
  ok = ok && rblw_shrinkage(random_ensemble(1, 12, 1001, 2.0)).gamma == 1.0;
  for (int t = 0; t < 50; ++t) {
    const double g =
        rblw_shrinkage(random_ensemble(6, 5 + t % 20, 1100 + t, 1.0)).gamma;
    ok = ok && g >= 0.0 && g <= 1.0;
  }

  // SMW application vs dense inversion on 8x8 instances
  double worst_smw = 0.0;
  for (int t = 0; t < 10; ++t) {
    Ensemble ens = random_ensemble(8, 6, 1200 + t, 1.0);
    const RblwShrinkage shr = rblw_shrinkage(ens);
    const Matrix dense = (1.0 - shr.gamma) * ens.covariance() +
                         shr.gamma * shr.mu * Matrix::Identity(8, 8);
    auto gen = engine_for(1300 + t, 0);
    for (int k = 0; k < 5; ++k) {
      const StateVector v = oracle::random_vector(8, gen);
      worst_smw = std::max(
          worst_smw,
          (shr.apply_inverse(v) - dense.ldlt().solve(v)).norm() / v.norm());
    }
  }
  ok = ok && worst_smw < 1e-8;

  // shrinkage beats the raw sample covariance on identity data
  int wins = 0;
  const Matrix eye = Matrix::Identity(5, 5);
  for (int rep = 0; rep < 100; ++rep) {
    Ensemble ens = random_ensemble(5, 200, 1400 + rep, 1.0);
    const Matrix p = ens.covariance();
    const RblwShrinkage shr = rblw_shrinkage(ens);
    const Matrix shrunk = (1.0 - shr.gamma) * p + shr.gamma * shr.mu * eye;
    if ((shrunk - eye).norm() < (p - eye).norm()) ++wins;
  }
  ok = ok && wins >= 60;

  out.pass = ok;
  out.detail =
      strf("SMW worst rel err %.1e; Monte-Carlo wins %d/100 (need >= 60)",
           worst_smw, wins);
  return out;
}

// --- criterion 11: baseline sanity ------------------------------------------

Outcome criterion11() {
  Outcome out{11, "baseline sanity: SIR near Kalman, ETKF matches Kalman"};
  bool ok = true;

  // SIR, 1e4 particles on the scalar conjugate problem: grand mean over
  // independent replicates within 3 empirical standard errors
  const double m0 = 0.5, p0 = 1.0, y = 1.5, r = 1.0;
  const auto kal = oracle::kalman_scalar(m0, p0, y, r);
  auto obs = make_linear_observation(
      Matrix::Identity(1, 1), GaussianObsError{Matrix::Constant(1, 1, r)},
      StateVector::Constant(1, y));
  const int runs = 16;
  std::vector<double> means(runs);
  for (int run = 0; run < runs; ++run) {
    Ensemble particles = random_ensemble(1, 10000, 5000 + run, 1.0);
    particles.states().array() += m0;
    std::vector<double> weights(10000, 1e-4);
    auto gen = engine_for(6000 + run, 0);
    sir_step(particles, weights, obs, gen);
    means[run] = particles.mean()[0];
  }
  double grand = 0.0;
  for (double v : means) grand += v;
  grand /= runs;
  double var = 0.0;
  for (double v : means) var += (v - grand) * (v - grand);
  var /= (runs - 1);
  const double se = std::sqrt(var / runs);
  const double sir_err = std::abs(grand - kal.mean);
  ok = ok && sir_err < 3.0 * se;

  // ETKF scalar conjugate vs the Kalman formulas on empirical moments
  Ensemble background = random_ensemble(1, 40, 7000, std::sqrt(2.0));
  background.states().array() += 1.0;
  auto obs2 = make_linear_observation(
      Matrix::Identity(1, 1), GaussianObsError{Matrix::Constant(1, 1, 0.5)},
      StateVector::Constant(1, 2.5));
  const Ensemble analysis = etkf_analysis(background, obs2, 1.0);
  const auto kal2 = oracle::kalman_scalar(
      background.mean()[0], background.covariance()(0, 0), 2.5, 0.5);
  const double etkf_mean_err = std::abs(analysis.mean()[0] - kal2.mean);
  const double etkf_var_err =
      std::abs(analysis.covariance()(0, 0) - kal2.var);
  ok = ok && etkf_mean_err < 1e-10 * std::max(1.0, std::abs(kal2.mean)) &&
       etkf_var_err < 1e-10 * kal2.var;

  out.pass = ok;
  out.detail =
      strf("SIR |mean err| %.2e (3se %.2e); ETKF err mean %.1e var %.1e",
           sir_err, 3.0 * se, etkf_mean_err, etkf_var_err);
  return out;
}

}  // namespace

int main() {
  const auto t_start = std::chrono::steady_clock::now();
  const fs::path dir = "acceptance_out";
  fs::create_directories(dir);

  std::vector<Outcome> outcomes;
  outcomes.push_back(criterion1());
  outcomes.push_back(criterion2());
  outcomes.push_back(criterion3());
  outcomes.push_back(criterion4());

  Outcome c5, c12;
  criteria_5_and_12(dir, c5, c12);
  outcomes.push_back(c5);
  outcomes.push_back(criterion6(dir));
  outcomes.push_back(criterion7(dir));

  Outcome c8, c9;
  criteria_8_and_9(dir, c8, c9);
  outcomes.push_back(c8);
  outcomes.push_back(c9);

  outcomes.push_back(criterion10());
  outcomes.push_back(criterion11());
  outcomes.push_back(c12);

  std::sort(outcomes.begin(), outcomes.end(),
            [](const Outcome& a, const Outcome& b) { return a.id < b.id; });
  int failures = 0;
  for (const Outcome& o : outcomes) {
    if (!o.pass) ++failures;
    std::printf("[%s] criterion %2d: %s -- %s\n", o.pass ? "PASS" : "FAIL",
                o.id, o.name.c_str(), o.detail.c_str());
  }
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  std::printf("%d/%zu criteria passed in %.0f s\n",
              static_cast<int>(outcomes.size()) - failures, outcomes.size(),
              elapsed);
  return failures == 0 ? 0 : 1;
}
