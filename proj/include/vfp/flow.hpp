#pragma once

#include <cstdint>
#include <functional>

#include "vfp/densities.hpp"
#include "vfp/ensemble.hpp"
#include "vfp/types.hpp"

namespace vfp {

enum class MetricKind { Identity, Langevin };

struct DiffusionSpec {
  enum class Kind { None, BackgroundAnomalies, CurrentAnomalies, Climatological };
  Kind kind = Kind::None;
  double alpha = 0.0;
  Matrix factor;  // B^{1/2} for Climatological

  static DiffusionSpec none() { return {}; }
  static DiffusionSpec background_anomalies(double alpha) {
    DiffusionSpec d;
    d.kind = Kind::BackgroundAnomalies;
    d.alpha = alpha;
    return d;
  }
  static DiffusionSpec current_anomalies(double alpha) {
    DiffusionSpec d;
    d.kind = Kind::CurrentAnomalies;
    d.alpha = alpha;
    return d;
  }
  static DiffusionSpec climatological(double alpha, Matrix sqrt_b) {
    DiffusionSpec d;
    d.kind = Kind::Climatological;
    d.alpha = alpha;
    d.factor = std::move(sqrt_b);
    return d;
  }
};

struct SolverSpec {
  enum class Kind { BlockAnalytic, FdJvpGmres };
  Kind kind = Kind::BlockAnalytic;
  double tol = 1e-6;  // FdJvpGmres
  int max_iter = 50;
};

struct FlowStepPolicy {
  double dtau0 = 0.1;
  int max_steps = 100;
  double shrink = 0.5;   // on rejection
  double grow = 1.2;     // on acceptance
  double dtau_max = 1.0;
};

struct FlowConfig {
  MetricKind metric = MetricKind::Identity;
  DiffusionSpec diffusion;
  double reg_beta = 0.0;  // Coulomb strength, constant schedule
  FlowStepPolicy step;
  double termination_eps = 1e-2;
  SolverSpec solver;
  std::uint64_t rng_seed = 0;
};

/// Realized diffusion sigma for one flow: sample() draws sigma * xi and
/// apply_D computes D v with D = (1/2) sigma sigma^T. All provided specs
/// are state-independent, so div D = 0.
class DiffusionOperator {
 public:
  DiffusionOperator() = default;  // zero diffusion

  static DiffusionOperator from_spec(const DiffusionSpec& spec,
                                     const Matrix& background_anomalies,
                                     const Matrix& current_anomalies);

  bool is_zero() const { return factor_.size() == 0; }
  int noise_dim() const { return static_cast<int>(factor_.cols()); }
  int state_dim() const { return static_cast<int>(factor_.rows()); }
  const Matrix& factor() const { return factor_; }

  StateVector sample(const StateVector& xi) const;           // sigma xi
  StateVector apply_D(const StateVector& v) const;           // D v
  Matrix dense_D(int n_state) const;

 private:
  Matrix factor_;  // sigma; empty means zero
};

/// Everything one drift evaluation needs. The prior (and the posterior
/// gradient built from it) is fixed for the whole flow; the current fit is
/// refreshed after every accepted step.
struct DriftContext {
  const DensityModel* prior = nullptr;
  const ObservationModel* obs = nullptr;  // null: prior-only target
  /// Override for the posterior gradient-log-density (the smoother routes
  /// its adjoint-accumulated gradient through this).
  std::function<StateVector(const StateVector&)> posterior_grad;
  std::function<Matrix(const StateVector&)> posterior_hessian;
  bool posterior_hessian_constant = false;
  DensityModel current;
  const Ensemble* particles = nullptr;  // regularization partners
  const DiffusionOperator* diffusion = nullptr;
  /// Set when the per-particle drift Jacobian does not depend on the
  /// particle state (Gaussian fits, linear observation operator): the
  /// Rosenbrock system is then factorized once per step.
  bool jacobian_constant = false;
};

/// grad log P^a = grad log P^b + grad log P^obs (Bayes in gradient form).
StateVector posterior_grad_log(const DriftContext& ctx, const StateVector& x);

/// KL-optimal drift under the configured metric:
///   Identity:  grad log P^a + (D - I) grad log q_tau
///   Langevin:  D grad log P^a          (current-density term drops)
StateVector optimal_drift(const DriftContext& ctx, const StateVector& x,
                          const FlowConfig& cfg);

/// Coulomb repulsion on particle e: -(beta/N_ens) sum_{i != e} grad kappa,
/// grad kappa = -(x_e - x_i)/||x_e - x_i||^3, distances floored at
/// 1e-8 (1 + ||x_e||). metric_apply maps the raw sum through A_tau; the
/// default is the identity metric.
StateVector coulomb_force(
    int e, const Ensemble& ens, double beta,
    const std::function<StateVector(const StateVector&)>& metric_apply = {});

/// Variant evaluated at an arbitrary particle position (REM linearization
/// moves x_e while the partners stay fixed).
StateVector coulomb_force_at(const StateVector& x_e, int e,
                             const Ensemble& ens, double beta);

/// Optimal drift plus the metric-weighted Coulomb term for particle e.
StateVector regularized_drift(const DriftContext& ctx, const FlowConfig& cfg,
                              int e, const StateVector& x);

/// Block-diagonal per-particle Jacobian approximation for the Rosenbrock
/// solve: the analysis-density Hessian under the configured metric.
/// Current-density, regularization, and diffusion derivatives are left
/// out; Jacobian errors only affect step quality, not the steady state.
Matrix drift_jacobian(const DriftContext& ctx, const FlowConfig& cfg,
                      const StateVector& x);

/// One Rosenbrock-Euler-Maruyama update for a single state:
///   x+ = x + dtau (I - dtau J)^{-1} F(x) + noise_term.
/// Returns ok=false when the solve fails or the update is non-finite.
StateVector rem_update_single(const StateVector& x,
                              const StateVector& drift_value,
                              const Matrix& jacobian, double dtau,
                              const StateVector& noise_term, bool* ok);

/// Matrix-free variant: (I - dtau J) y = f solved by GMRES with
/// finite-difference Jacobian-vector products of the supplied drift.
StateVector rem_update_gmres(
    const StateVector& x,
    const std::function<StateVector(const StateVector&)>& drift,
    const StateVector& drift_value, double dtau, const StateVector& noise_term,
    double tol, int max_iter, bool* ok);

struct RemStepOutcome {
  Ensemble ensemble;
  bool ok = false;
};

/// Advance every particle by one REM step. Wiener increments are drawn
/// from a counter-based stream keyed by (cycle, step, particle).
RemStepOutcome rem_step(const Ensemble& ens, const DriftContext& ctx,
                        const FlowConfig& cfg, double dtau,
                        std::uint64_t cycle_key, int step_index);

/// Specification of one prior-to-posterior flow.
struct FlowProblem {
  DensityModel prior;
  const ObservationModel* obs = nullptr;
  std::function<StateVector(const StateVector&)> posterior_grad;
  std::function<Matrix(const StateVector&)> posterior_hessian;
  bool posterior_hessian_constant = false;
  DensityFamily current_family = DensityFamily::Gaussian;
  FitOptions current_fit;
  Matrix background_anomalies;
};

struct FlowResult {
  Ensemble analysis;
  int steps = 0;
  bool converged = false;
};

/// Iterate REM steps, refitting the current density after each accepted
/// step, until the ensemble-mean increment satisfies
/// ||mean_{tau+dtau} - mean_tau|| < eps dtau, or max_steps is exhausted
/// (reported via converged=false; the partial analysis is still returned).
FlowResult flow_to_steady_state(const Ensemble& ens0,
                                const FlowProblem& problem,
                                const FlowConfig& cfg,
                                std::uint64_t cycle_key);

}  // namespace vfp
