#include "vfp/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "vfp/rng.hpp"

namespace vfp {

// --- metrics -------------------------------------------------------------

double rmse(const std::vector<StateVector>& truth,
            const std::vector<StateVector>& analysis_means, int spinup) {
  if (truth.size() != analysis_means.size())
    throw std::invalid_argument("rmse: length mismatch");
  const int cycles = static_cast<int>(truth.size());
  if (spinup >= cycles) throw std::invalid_argument("rmse: spinup too large");
  double acc = 0.0;
  long count = 0;
  for (int k = spinup; k < cycles; ++k) {
    acc += (truth[k] - analysis_means[k]).squaredNorm();
    count += truth[k].size();
  }
  return std::sqrt(acc / count);
}

double MetricSeries::rmse(const std::vector<StateVector>& truth) const {
  return vfp::rmse(truth, analysis_means, spinup);
}

namespace {

int rank_of(double truth, const std::vector<double>& members,
            std::mt19937_64& gen) {
  int below = 0, equal = 0;
  for (double v : members) {
    if (v < truth) ++below;
    else if (v == truth) ++equal;
  }
  if (equal > 0)
    below += std::uniform_int_distribution<int>(0, equal)(gen);
  return below;
}

}  // namespace

std::vector<int> MetricSeries::rank_histogram(std::uint64_t tie_seed) const {
  std::vector<int> counts(n_ens + 1, 0);
  for (int k = spinup; k < static_cast<int>(component_samples.size()); ++k) {
    auto gen = engine_for(tie_seed, static_cast<std::uint64_t>(k));
    ++counts[rank_of(component_truth[k], component_samples[k], gen)];
  }
  return counts;
}

std::vector<int> rank_histogram(const std::vector<Ensemble>& ensembles,
                                const std::vector<StateVector>& truth,
                                int component, int spinup,
                                std::uint64_t tie_seed) {
  if (ensembles.empty()) return {};
  std::vector<int> counts(ensembles[0].n_ens() + 1, 0);
  std::vector<double> members;
  for (int k = spinup; k < static_cast<int>(ensembles.size()); ++k) {
    members.resize(ensembles[k].n_ens());
    for (int e = 0; e < ensembles[k].n_ens(); ++e)
      members[e] = ensembles[k].states()(component, e);
    auto gen = engine_for(tie_seed, static_cast<std::uint64_t>(k));
    ++counts[rank_of(truth[k][component], members, gen)];
  }
  return counts;
}

double chi_square_from_uniform(const std::vector<int>& counts) {
  long total = 0;
  for (int c : counts) total += c;
  const double expected = static_cast<double>(total) / counts.size();
  double chi2 = 0.0;
  for (int c : counts) {
    const double d = c - expected;
    chi2 += d * d / expected;
  }
  return chi2;
}

void forecast_ensemble(Ensemble& ens, const ModelSystem& model, double t0,
                       double t1, int substeps, int cycle) {
  for (int e = 0; e < ens.n_ens(); ++e) {
    Trajectory traj;
    try {
      traj = integrate(model, ens.states().col(e), t0, t1,
                       StepPolicy::fixed(substeps));
    } catch (const std::runtime_error& err) {
      throw std::runtime_error("forecast blow-up at cycle " +
                               std::to_string(cycle) + ": " + err.what());
    }
    ens.states().col(e) = traj.states.back();
  }
}

// --- ETKF ------------------------------------------------------------------

Ensemble etkf_analysis(const Ensemble& background, const ObservationModel& obs,
                       double inflation) {
  if (!obs.gaussian())
    throw std::invalid_argument("etkf_analysis: Gaussian errors required");
  const int n = background.n_state();
  const int m = background.n_ens();

  const StateVector xb = background.mean();
  Matrix x_pert = background.states().colwise() - xb;
  x_pert *= inflation;

  Matrix y_ens(obs.n_obs(), m);
  for (int e = 0; e < m; ++e)
    y_ens.col(e) = obs.apply(xb + x_pert.col(e));
  const ObsVector yb = y_ens.rowwise().mean();
  const Matrix y_pert = y_ens.colwise() - yb;

  Matrix rinv_y(obs.n_obs(), m);
  for (int e = 0; e < m; ++e) rinv_y.col(e) = obs.solve_R(y_pert.col(e));

  Matrix a = (m - 1.0) * Matrix::Identity(m, m) +
             y_pert.transpose() * rinv_y;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(a);
  if (eig.info() != Eigen::Success)
    throw std::runtime_error("etkf_analysis: eigen decomposition failed");
  StateVector vals = eig.eigenvalues();
  // numerical floor: a is SPD by construction up to roundoff
  const double floor_val = 1e-12 * vals.maxCoeff();
  vals = vals.cwiseMax(floor_val);

  const Matrix p_tilde = eig.eigenvectors() *
                         vals.cwiseInverse().asDiagonal() *
                         eig.eigenvectors().transpose();
  const Matrix w_sqrt = eig.eigenvectors() *
                        ((m - 1.0) * vals.cwiseInverse())
                            .cwiseSqrt()
                            .asDiagonal() *
                        eig.eigenvectors().transpose();
  const StateVector w_mean =
      p_tilde * (rinv_y.transpose() * (obs.value() - yb));

  Ensemble analysis(n, m);
  const Matrix shift = x_pert * (w_sqrt.colwise() + w_mean);
  analysis.states() = shift.colwise() + xb;
  return analysis;
}

// --- SIR ----------------------------------------------------------------

namespace {

double log_likelihood(const ObservationModel& obs, const StateVector& x) {
  const ObsVector r = obs.apply(x) - obs.value();
  if (obs.gaussian()) return -0.5 * r.dot(obs.solve_R(r));
  double lp = 0.0;
  for (int i = 0; i < r.size(); ++i) {
    const double g = obs.cauchy_gamma()[i];
    lp -= std::log(g * g + r[i] * r[i]);
  }
  return lp;
}

}  // namespace

void sir_step(Ensemble& particles, std::vector<double>& weights,
              const ObservationModel& obs, std::mt19937_64& gen,
              bool* degenerate) {
  const int m = particles.n_ens();
  if (static_cast<int>(weights.size()) != m)
    throw std::invalid_argument("sir_step: weight/particle mismatch");
  if (degenerate) *degenerate = false;

  std::vector<double> logw(m);
  double max_logw = -std::numeric_limits<double>::infinity();
  for (int e = 0; e < m; ++e) {
    logw[e] = std::log(std::max(weights[e], 1e-300)) +
              log_likelihood(obs, particles.states().col(e));
    max_logw = std::max(max_logw, logw[e]);
  }
  double total = 0.0;
  for (int e = 0; e < m; ++e) {
    weights[e] = std::isfinite(max_logw) ? std::exp(logw[e] - max_logw) : 0.0;
    total += weights[e];
  }
  if (!(total > 0.0) || !std::isfinite(total)) {
    if (degenerate) *degenerate = true;
    std::fill(weights.begin(), weights.end(), 1.0 / m);
    total = 1.0;
  } else {
    for (double& w : weights) w /= total;
  }

  // systematic resampling
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(gen);
  Matrix resampled(particles.n_state(), m);
  double cum = weights[0];
  int src = 0;
  for (int e = 0; e < m; ++e) {
    const double pos = (e + u) / m;
    while (pos > cum && src + 1 < m) cum += weights[++src];
    resampled.col(e) = particles.states().col(src);
  }
  particles.states() = resampled;
  std::fill(weights.begin(), weights.end(), 1.0 / m);
}

// --- run drivers -----------------------------------------------------------

namespace {

void record_cycle(MetricSeries& series, const Ensemble& ens,
                  const StateVector& truth, int component) {
  const StateVector mean = ens.mean();
  series.analysis_means.push_back(mean);
  series.instant_rmse.push_back((truth - mean).norm() /
                                std::sqrt(static_cast<double>(truth.size())));
  series.flow_steps.push_back(0);
  series.converged.push_back(1);
  std::vector<double> samples(ens.n_ens());
  for (int e = 0; e < ens.n_ens(); ++e)
    samples[e] = ens.states()(component, e);
  series.component_samples.push_back(std::move(samples));
  series.component_truth.push_back(truth[component]);
}

}  // namespace

MetricSeries etkf_run(const TwinSetup& setup, double inflation) {
  MetricSeries series;
  series.spinup = setup.spinup;
  series.n_ens = setup.init.n_ens();
  Ensemble ens = setup.init;
  for (int k = 0; k < static_cast<int>(setup.truth.size()); ++k) {
    const double t0 = setup.t_start + k * setup.dt;
    forecast_ensemble(ens, setup.model, t0, t0 + setup.dt, setup.substeps, k);
    ens = etkf_analysis(ens, setup.observations[k], inflation);
    if (!ens.states().allFinite())
      throw std::runtime_error("etkf_run: non-finite analysis at cycle " +
                               std::to_string(k));
    record_cycle(series, ens, setup.truth[k], setup.tracked_component);
  }
  return series;
}

MetricSeries sir_run(const TwinSetup& setup, std::uint64_t resample_seed) {
  MetricSeries series;
  series.spinup = setup.spinup;
  series.n_ens = setup.init.n_ens();
  Ensemble ens = setup.init;
  std::vector<double> weights(ens.n_ens(), 1.0 / ens.n_ens());
  auto gen = engine_for(resample_seed, 0x5152);
  for (int k = 0; k < static_cast<int>(setup.truth.size()); ++k) {
    const double t0 = setup.t_start + k * setup.dt;
    forecast_ensemble(ens, setup.model, t0, t0 + setup.dt, setup.substeps, k);
    sir_step(ens, weights, setup.observations[k], gen);
    record_cycle(series, ens, setup.truth[k], setup.tracked_component);
  }
  return series;
}

double tune_etkf_inflation(const TwinSetup& tuning_setup,
                           const std::vector<double>& grid) {
  double best = grid.front();
  double best_rmse = std::numeric_limits<double>::infinity();
  for (double inflation : grid) {
    double score = std::numeric_limits<double>::infinity();
    try {
      score = etkf_run(tuning_setup, inflation).rmse(tuning_setup.truth);
    } catch (const std::runtime_error&) {
      // diverged: keep infinity
    }
    if (score < best_rmse) {
      best_rmse = score;
      best = inflation;
    }
  }
  return best;
}

}  // namespace vfp
