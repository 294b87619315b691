#pragma once

#include <cstdint>
#include <vector>

#include "vfp/densities.hpp"
#include "vfp/dynamics.hpp"
#include "vfp/ensemble.hpp"
#include "vfp/flow.hpp"
#include "vfp/twin.hpp"

namespace vfp {

/// Physical layout of the state indices, giving the distance used by the
/// localization taper. The Lorenz '96 ring uses a spacing calibrated so
/// the Gaspari-Cohn support spans 7/14/17 neighbors a side at radii
/// r = 2/4/5.
struct GridGeometry {
  enum class Kind { Line, Ring };
  Kind kind = Kind::Line;
  int n = 0;
  double spacing = 1.0;

  double distance(int i, int j) const;

  static GridGeometry line(int n, double spacing = 1.0);
  static GridGeometry ring(int n, double spacing = 1.0);
  static GridGeometry lorenz96_ring(int n = 40);
};

/// Fifth-order piecewise-rational Gaspari-Cohn taper with half-width r;
/// compactly supported on d < 2r.
double gaspari_cohn(double d, double r);

/// Indices with nonzero taper weight around state i (always contains i).
std::vector<int> local_influence_set(int i, double r,
                                     const GridGeometry& geometry);

enum class CovarianceTreatment { Plain, Shrinkage, Localized };

struct LocalizationSpec {
  double radius = 0.0;
  GridGeometry geometry;
};

struct SmootherSpec {
  int window = 0;  // observations per window; 0 or 1 behaves as the filter
};

/// Method selection: VFP(prior, current) families, metric, covariance
/// treatment, optional localization and smoother window.
struct MethodSpec {
  DensityFamily prior_family = DensityFamily::Gaussian;
  DensityFamily current_family = DensityFamily::Gaussian;
  MetricKind metric = MetricKind::Identity;
  CovarianceTreatment covariance = CovarianceTreatment::Plain;
  LocalizationSpec localization;
  SmootherSpec smoother;
  double huber_delta1 = 1.0;
  double huber_delta2 = 1.0;
};

struct CycleResult {
  Ensemble analysis;
  int flow_steps = 0;
  bool converged = false;
};

/// One global VFP analysis: fit the prior on the background, flow the
/// particles to steady state under the optimal drift.
CycleResult vfp_analysis(const Ensemble& background,
                         const ObservationModel& obs, const MethodSpec& spec,
                         const FlowConfig& cfg, std::uint64_t cycle_key = 0);

/// Component i of the Schur-localized Gaussian gradient-log-density of the
/// ensemble fit, built from local anomalies and local taper weights.
double localized_grad_log_q(const Ensemble& ens, int i, const StateVector& x,
                            double r, const GridGeometry& geometry);

/// Localized analysis: every state index is updated by its own drift and
/// diffusion assembled from influence-set-restricted quantities. Requires
/// a pointwise observation operator with diagonal error covariance.
CycleResult local_vfp_analysis(const Ensemble& background,
                               const ObservationModel& obs,
                               const MethodSpec& spec, const FlowConfig& cfg,
                               std::uint64_t cycle_key = 0);

/// Rao-Blackwell Ledoit-Wolf shrinkage toward the trace-normalized
/// identity, with the inverse applied through anomalies only.
struct RblwShrinkage {
  double gamma = 0.0;
  double mu = 0.0;
  CovarianceOperator op;
  StateVector apply_inverse(const StateVector& v) const { return op.solve(v); }
};
RblwShrinkage rblw_shrinkage(const Ensemble& ens);

/// One smoother window: the model, its time grid, and the observations at
/// t0, t0+dt, ..., t0+(K-1)dt (the first observation sits at the initial
/// condition time).
struct SmootherWindow {
  const ModelSystem* model = nullptr;
  double t0 = 0.0;
  double dt = 0.0;
  int substeps = 1;
  std::vector<const ObservationModel*> observations;
};

/// Sum over window observations of M*_{0,i} grad log P^obs_i evaluated
/// along the trajectory from x0: a forward run with stage checkpoints,
/// then one backward adjoint sweep.
StateVector smoother_misfit_grad(const SmootherWindow& window,
                                 const StateVector& x0);

/// Optimal drift on the initial condition for the strong-constraint
/// smoother (prior + adjoint-accumulated misfit, metric-weighted current
/// term; no regularization term).
StateVector vfps_drift(const StateVector& x0, const SmootherWindow& window,
                       const DriftContext& ctx, const FlowConfig& cfg);

/// Flow the initial-condition ensemble to steady state under vfps_drift.
CycleResult vfps_analysis(const Ensemble& background,
                          const SmootherWindow& window, const MethodSpec& spec,
                          const FlowConfig& cfg, std::uint64_t cycle_key = 0);

/// Sequential filter: forecast + vfp_analysis (or local_vfp_analysis) per
/// cycle.
MetricSeries vfp_filter_run(const TwinSetup& setup, const MethodSpec& spec,
                            const FlowConfig& cfg);

/// Strong-constraint smoother over consecutive windows of K observations;
/// the analysis trajectory within each window is recorded per cycle.
MetricSeries vfps_run(const TwinSetup& setup, const MethodSpec& spec,
                      const FlowConfig& cfg);

}  // namespace vfp
