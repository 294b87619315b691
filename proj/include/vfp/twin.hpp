#pragma once

#include <cstdint>
#include <vector>

#include "vfp/densities.hpp"
#include "vfp/dynamics.hpp"
#include "vfp/ensemble.hpp"

namespace vfp {

/// One twin experiment: a truth trajectory sampled at assimilation times,
/// the per-cycle observations generated from it, and the initial ensemble.
/// Cycle k runs a forecast over dt and then assimilates observations[k],
/// which is valid at the same time as truth[k].
struct TwinSetup {
  ModelSystem model;
  double t_start = 0.0;
  double dt = 0.0;
  int substeps = 1;
  std::vector<StateVector> truth;
  std::vector<ObservationModel> observations;
  Ensemble init;
  int spinup = 0;
  int tracked_component = 0;
  std::uint64_t rank_tie_seed = 0;
};

/// Per-cycle filter diagnostics plus the samples needed for rank
/// histograms of the tracked component.
struct MetricSeries {
  std::vector<StateVector> analysis_means;
  std::vector<double> instant_rmse;            // per cycle, all components
  std::vector<int> flow_steps;                 // per cycle (0 for baselines)
  std::vector<int> converged;                  // per cycle flag
  std::vector<std::vector<double>> component_samples;  // per cycle, N_ens
  std::vector<double> component_truth;         // per cycle
  int spinup = 0;
  int n_ens = 0;

  /// Spatio-temporal RMSE over post-spinup cycles.
  double rmse(const std::vector<StateVector>& truth) const;
  /// Rank counts (N_ens + 1 bins) of the tracked component after spinup;
  /// ties broken uniformly at random with the given seed.
  std::vector<int> rank_histogram(std::uint64_t tie_seed) const;
};

double rmse(const std::vector<StateVector>& truth,
            const std::vector<StateVector>& analysis_means, int spinup);

/// Rank of the truth within per-cycle ensembles for one state component:
/// the count of members strictly below the truth, with ties broken
/// uniformly at random among equal values.
std::vector<int> rank_histogram(const std::vector<Ensemble>& ensembles,
                                const std::vector<StateVector>& truth,
                                int component, int spinup,
                                std::uint64_t tie_seed);

double chi_square_from_uniform(const std::vector<int>& counts);

/// Advance every particle over one assimilation interval. Throws on model
/// blow-up with the failing cycle in the message.
void forecast_ensemble(Ensemble& ens, const ModelSystem& model, double t0,
                       double t1, int substeps, int cycle);

}  // namespace vfp
