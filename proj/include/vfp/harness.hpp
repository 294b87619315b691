#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "vfp/assimilate.hpp"
#include "vfp/baselines.hpp"
#include "vfp/twin.hpp"

namespace vfp {

/// Flat key-value tree parsed from a TOML-style config file: sections in
/// brackets, `key = value` pairs, values are numbers, quoted strings,
/// booleans, or arrays of numbers. Keys are stored as "section.key".
struct ConfigValue {
  std::variant<double, std::string, bool, std::vector<double>> value;

  double as_number(const std::string& path) const;
  const std::string& as_string(const std::string& path) const;
  bool as_bool(const std::string& path) const;
  const std::vector<double>& as_array(const std::string& path) const;
};

using ConfigTree = std::map<std::string, ConfigValue>;

/// Throws std::invalid_argument with the offending line on parse errors.
ConfigTree parse_config_tree(const std::string& text);

struct ExperimentConfig {
  // model
  std::string model_kind = "lorenz63";
  double l63_sigma = 10.0, l63_rho = 28.0, l63_beta = 8.0 / 3.0;
  int l96_n = 40;
  double l96_forcing = 8.0;

  // time grid
  int cycles = 2000;
  int spinup = 200;
  double dt = 0.12;
  double max_step = 0.01;  // forecast substep cap

  // observation
  std::string obs_error = "gaussian";  // gaussian | cauchy
  double obs_variance = 8.0;
  double obs_gamma = 1.0;
  std::vector<int> obs_indices;  // empty: observe everything

  // method
  std::string method = "vfp";  // vfp | etkf | sir
  MethodSpec method_spec;
  double etkf_inflation = 0.0;  // 0: grid-search on a tuning run

  // flow
  FlowConfig flow;
  std::string diffusion_kind = "background";

  // ensemble
  int n_ens = 50;
  double init_spread = 1.0;
  double burn_in = 1.0;

  // seeds
  std::uint64_t seed_truth = 1, seed_obs = 2, seed_init = 3, seed_flow = 4;

  int repetitions = 4;
  std::string output_dir = "results";
};

/// Field-validating translation of a parsed tree; error messages carry the
/// config path of the offending field.
ExperimentConfig config_from_tree(const ConfigTree& tree);
ExperimentConfig parse_config(const std::string& text);

/// TOML-style serialization of every resolved field; parsing it back
/// yields a semantically identical configuration.
std::string serialize_config(const ExperimentConfig& cfg);

ModelSystem make_model(const ExperimentConfig& cfg);

/// One truth trajectory per experiment, sampled at assimilation times.
std::vector<StateVector> generate_truth(const ExperimentConfig& cfg);

/// Fresh observation-noise realization for one repetition.
std::vector<ObservationModel> generate_observations(
    const ExperimentConfig& cfg, const std::vector<StateVector>& truth,
    int repetition);

/// Truth + observations + initialized ensemble for one repetition.
TwinSetup make_twin_setup(const ExperimentConfig& cfg,
                          const std::vector<StateVector>& truth,
                          int repetition);

/// Long-run sample covariance of the model, used as the climatological
/// covariance default.
Matrix climatological_covariance(const ModelSystem& model, double dt,
                                 int samples, double burn_in);

enum class RunStatus { Ok = 0, ConfigError = 1, RuntimeFailure = 2 };

struct RepetitionResult {
  MetricSeries series;
  double rmse = 0.0;
  bool failed = false;
  std::string failure;
};

struct ExperimentResult {
  RunStatus status = RunStatus::Ok;
  std::vector<RepetitionResult> repetitions;
  double mean_rmse = 0.0;
  double etkf_inflation_used = 0.0;
  std::vector<int> rank_total;  // summed over repetitions
  std::string summary_path;
};

/// Run all repetitions, average RMSE, and write summary.json plus
/// per-repetition series and rank-histogram CSV files under out_dir.
ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                const std::string& out_dir);

/// Cartesian sweep over the [grid] section of a grid file; each point runs
/// into its own subdirectory.
RunStatus run_sweep(const std::string& config_text,
                    const std::string& grid_text, const std::string& out_dir);

/// Summarize every summary.json found under dir onto out (a table).
RunStatus report_results(const std::string& dir, std::string& out);

}  // namespace vfp
