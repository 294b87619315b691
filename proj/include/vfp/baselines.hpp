#pragma once

#include <random>
#include <vector>

#include "vfp/twin.hpp"

namespace vfp {

/// Ensemble transform Kalman analysis with multiplicative anomaly
/// inflation and the symmetric square-root transform.
Ensemble etkf_analysis(const Ensemble& background, const ObservationModel& obs,
                       double inflation);

/// Sequential importance resampling: reweight by the observation
/// likelihood, then systematic resampling back to uniform weights.
/// All-zero likelihoods resample uniformly and set *degenerate.
void sir_step(Ensemble& particles, std::vector<double>& weights,
              const ObservationModel& obs, std::mt19937_64& gen,
              bool* degenerate = nullptr);

MetricSeries etkf_run(const TwinSetup& setup, double inflation);
MetricSeries sir_run(const TwinSetup& setup, std::uint64_t resample_seed);

/// Grid search for the ETKF inflation on a short tuning run; returns the
/// factor with the smallest post-spinup RMSE.
double tune_etkf_inflation(const TwinSetup& tuning_setup,
                           const std::vector<double>& grid);

}  // namespace vfp
