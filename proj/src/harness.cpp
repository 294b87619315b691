#include "vfp/harness.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "vfp/rng.hpp"

namespace vfp {

namespace fs = std::filesystem;
using nlohmann::json;

// --- config tree -----------------------------------------------------------

double ConfigValue::as_number(const std::string& path) const {
  if (const double* d = std::get_if<double>(&value)) return *d;
  throw std::invalid_argument("config field '" + path + "': expected number");
}

const std::string& ConfigValue::as_string(const std::string& path) const {
  if (const std::string* s = std::get_if<std::string>(&value)) return *s;
  throw std::invalid_argument("config field '" + path + "': expected string");
}

bool ConfigValue::as_bool(const std::string& path) const {
  if (const bool* b = std::get_if<bool>(&value)) return *b;
  throw std::invalid_argument("config field '" + path + "': expected bool");
}

const std::vector<double>& ConfigValue::as_array(
    const std::string& path) const {
  if (const auto* a = std::get_if<std::vector<double>>(&value)) return *a;
  throw std::invalid_argument("config field '" + path + "': expected array");
}

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

ConfigValue parse_value(const std::string& raw, const std::string& where) {
  const std::string v = trim(raw);
  if (v.empty())
    throw std::invalid_argument("config: empty value at " + where);
  if (v.front() == '"') {
    if (v.size() < 2 || v.back() != '"')
      throw std::invalid_argument("config: unterminated string at " + where);
    return {v.substr(1, v.size() - 2)};
  }
  if (v == "true") return {true};
  if (v == "false") return {false};
  if (v.front() == '[') {
    if (v.back() != ']')
      throw std::invalid_argument("config: unterminated array at " + where);
    std::vector<double> items;
    std::string body = v.substr(1, v.size() - 2);
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      items.push_back(std::stod(item));
    }
    return {items};
  }
  try {
    size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size())
      throw std::invalid_argument("trailing characters");
    return {d};
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad value '" + v + "' at " + where);
  }
}

}  // namespace

ConfigTree parse_config_tree(const std::string& text) {
  ConfigTree tree;
  std::stringstream ss(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config: bad section at line " +
                                    std::to_string(line_no));
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: expected key = value at line " +
                                  std::to_string(line_no));
    const std::string key = trim(line.substr(0, eq));
    const std::string path = section.empty() ? key : section + "." + key;
    tree[path] = parse_value(line.substr(eq + 1),
                             "line " + std::to_string(line_no));
  }
  return tree;
}

// --- config translation ------------------------------------------------

namespace {

double number_or(const ConfigTree& t, const std::string& path, double dflt) {
  const auto it = t.find(path);
  return it == t.end() ? dflt : it->second.as_number(path);
}

std::string string_or(const ConfigTree& t, const std::string& path,
                      const std::string& dflt) {
  const auto it = t.find(path);
  return it == t.end() ? dflt : it->second.as_string(path);
}

int int_field(const ConfigTree& t, const std::string& path, int dflt) {
  const double d = number_or(t, path, dflt);
  if (d != std::floor(d))
    throw std::invalid_argument("config field '" + path + "': expected integer");
  return static_cast<int>(d);
}

DensityFamily family_from(const std::string& name, const std::string& path) {
  if (name == "gaussian") return DensityFamily::Gaussian;
  if (name == "laplace") return DensityFamily::Laplace;
  if (name == "huber") return DensityFamily::Huber;
  if (name == "cauchy") return DensityFamily::Cauchy;
  if (name == "kernel") return DensityFamily::Kernel;
  throw std::invalid_argument("config field '" + path +
                              "': unknown family '" + name + "'");
}

std::string family_name(DensityFamily f) {
  switch (f) {
    case DensityFamily::Gaussian: return "gaussian";
    case DensityFamily::Laplace: return "laplace";
    case DensityFamily::Huber: return "huber";
    case DensityFamily::Cauchy: return "cauchy";
    case DensityFamily::Kernel: return "kernel";
  }
  return "?";
}

}  // namespace

ExperimentConfig config_from_tree(const ConfigTree& tree) {
  ExperimentConfig cfg;

  cfg.model_kind = string_or(tree, "model.kind", "lorenz63");
  if (cfg.model_kind != "lorenz63" && cfg.model_kind != "lorenz96")
    throw std::invalid_argument("config field 'model.kind': unknown model '" +
                                cfg.model_kind + "'");
  cfg.l63_sigma = number_or(tree, "model.sigma", 10.0);
  cfg.l63_rho = number_or(tree, "model.rho", 28.0);
  cfg.l63_beta = number_or(tree, "model.beta", 8.0 / 3.0);
  cfg.l96_n = int_field(tree, "model.n", 40);
  cfg.l96_forcing = number_or(tree, "model.forcing", 8.0);

  cfg.cycles = int_field(tree, "time.cycles", 2000);
  cfg.spinup = int_field(tree, "time.spinup", 200);
  cfg.dt = number_or(tree, "time.dt", cfg.model_kind == "lorenz63" ? 0.12 : 0.05);
  cfg.max_step = number_or(tree, "time.max_step", 0.01);
  if (cfg.cycles <= 0)
    throw std::invalid_argument("config field 'time.cycles': must be > 0");
  if (cfg.spinup < 0 || cfg.spinup >= cfg.cycles)
    throw std::invalid_argument(
        "config field 'time.spinup': must satisfy 0 <= spinup < cycles");
  if (!(cfg.dt > 0.0))
    throw std::invalid_argument("config field 'time.dt': must be > 0");

  cfg.obs_error = string_or(tree, "observation.error", "gaussian");
  if (cfg.obs_error != "gaussian" && cfg.obs_error != "cauchy")
    throw std::invalid_argument(
        "config field 'observation.error': expected gaussian or cauchy");
  cfg.obs_variance = number_or(tree, "observation.variance", 8.0);
  cfg.obs_gamma = number_or(tree, "observation.gamma", 1.0);
  const int n_state = cfg.model_kind == "lorenz63" ? 3 : cfg.l96_n;
  if (const auto it = tree.find("observation.indices"); it != tree.end()) {
    for (double d : it->second.as_array("observation.indices")) {
      const int idx = static_cast<int>(d);
      if (idx < 0 || idx >= n_state)
        throw std::invalid_argument(
            "config field 'observation.indices': index out of range");
      cfg.obs_indices.push_back(idx);
    }
  }

  cfg.method = string_or(tree, "method.name", "vfp");
  if (cfg.method != "vfp" && cfg.method != "etkf" && cfg.method != "sir")
    throw std::invalid_argument("config field 'method.name': unknown method '" +
                                cfg.method + "'");
  MethodSpec& ms = cfg.method_spec;
  ms.prior_family =
      family_from(string_or(tree, "method.prior", "gaussian"), "method.prior");
  ms.current_family = family_from(string_or(tree, "method.current", "gaussian"),
                                  "method.current");
  const std::string metric = string_or(tree, "method.metric", "identity");
  if (metric == "identity") ms.metric = MetricKind::Identity;
  else if (metric == "langevin") ms.metric = MetricKind::Langevin;
  else
    throw std::invalid_argument("config field 'method.metric': unknown");
  const std::string cov = string_or(tree, "method.covariance", "plain");
  if (cov == "plain") ms.covariance = CovarianceTreatment::Plain;
  else if (cov == "shrinkage") ms.covariance = CovarianceTreatment::Shrinkage;
  else if (cov == "localized") ms.covariance = CovarianceTreatment::Localized;
  else
    throw std::invalid_argument("config field 'method.covariance': unknown");
  ms.localization.radius = number_or(tree, "method.radius", 5.0);
  ms.localization.geometry = cfg.model_kind == "lorenz96"
                                 ? GridGeometry::lorenz96_ring(cfg.l96_n)
                                 : GridGeometry::line(n_state);
  ms.smoother.window = int_field(tree, "method.smoother_window", 0);
  ms.huber_delta1 = number_or(tree, "method.huber_delta1", 1.0);
  ms.huber_delta2 = number_or(tree, "method.huber_delta2", 1.0);
  cfg.etkf_inflation = number_or(tree, "method.etkf_inflation", 0.0);

  cfg.diffusion_kind = string_or(tree, "flow.diffusion", "background");
  const double alpha = number_or(tree, "flow.alpha", 0.0);
  if (cfg.diffusion_kind == "none" || alpha == 0.0)
    cfg.flow.diffusion = DiffusionSpec::none();
  else if (cfg.diffusion_kind == "background")
    cfg.flow.diffusion = DiffusionSpec::background_anomalies(alpha);
  else if (cfg.diffusion_kind == "current")
    cfg.flow.diffusion = DiffusionSpec::current_anomalies(alpha);
  else if (cfg.diffusion_kind == "climatological")
    cfg.flow.diffusion = DiffusionSpec::climatological(alpha, Matrix());
  else
    throw std::invalid_argument("config field 'flow.diffusion': unknown");
  cfg.flow.reg_beta = number_or(tree, "flow.beta", 0.0);
  cfg.flow.step.dtau0 = number_or(tree, "flow.dtau0", 0.1);
  cfg.flow.step.max_steps = int_field(tree, "flow.max_steps", 100);
  cfg.flow.step.shrink = number_or(tree, "flow.shrink", 0.5);
  cfg.flow.step.grow = number_or(tree, "flow.grow", 1.2);
  cfg.flow.step.dtau_max = number_or(tree, "flow.dtau_max", 1.0);
  cfg.flow.termination_eps = number_or(tree, "flow.epsilon", 1e-2);
  const std::string solver = string_or(tree, "flow.solver", "block");
  if (solver == "block")
    cfg.flow.solver.kind = SolverSpec::Kind::BlockAnalytic;
  else if (solver == "gmres")
    cfg.flow.solver.kind = SolverSpec::Kind::FdJvpGmres;
  else
    throw std::invalid_argument("config field 'flow.solver': unknown");
  cfg.flow.solver.tol = number_or(tree, "flow.gmres_tol", 1e-6);
  cfg.flow.solver.max_iter = int_field(tree, "flow.gmres_max_iter", 50);

  cfg.n_ens = int_field(tree, "ensemble.size", 50);
  if (cfg.n_ens < 2)
    throw std::invalid_argument("config field 'ensemble.size': must be >= 2");
  cfg.init_spread = number_or(tree, "ensemble.init_spread", 1.0);
  cfg.burn_in = number_or(tree, "ensemble.burn_in", 1.0);

  cfg.seed_truth =
      static_cast<std::uint64_t>(number_or(tree, "seeds.truth", 1));
  cfg.seed_obs =
      static_cast<std::uint64_t>(number_or(tree, "seeds.obs_noise", 2));
  cfg.seed_init =
      static_cast<std::uint64_t>(number_or(tree, "seeds.init", 3));
  cfg.seed_flow =
      static_cast<std::uint64_t>(number_or(tree, "seeds.flow", 4));

  cfg.repetitions = int_field(tree, "run.repetitions", 4);
  if (cfg.repetitions < 1)
    throw std::invalid_argument("config field 'run.repetitions': must be >= 1");
  cfg.output_dir = string_or(tree, "run.output", "results");
  return cfg;
}

ExperimentConfig parse_config(const std::string& text) {
  return config_from_tree(parse_config_tree(text));
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream out;
  out.precision(17);
  out << "[model]\n"
      << "kind = \"" << cfg.model_kind << "\"\n"
      << "sigma = " << cfg.l63_sigma << "\n"
      << "rho = " << cfg.l63_rho << "\n"
      << "beta = " << cfg.l63_beta << "\n"
      << "n = " << cfg.l96_n << "\n"
      << "forcing = " << cfg.l96_forcing << "\n\n";
  out << "[time]\n"
      << "cycles = " << cfg.cycles << "\n"
      << "spinup = " << cfg.spinup << "\n"
      << "dt = " << cfg.dt << "\n"
      << "max_step = " << cfg.max_step << "\n\n";
  out << "[observation]\n"
      << "error = \"" << cfg.obs_error << "\"\n"
      << "variance = " << cfg.obs_variance << "\n"
      << "gamma = " << cfg.obs_gamma << "\n";
  if (!cfg.obs_indices.empty()) {
    out << "indices = [";
    for (size_t i = 0; i < cfg.obs_indices.size(); ++i)
      out << (i ? ", " : "") << cfg.obs_indices[i];
    out << "]\n";
  }
  out << "\n[method]\n"
      << "name = \"" << cfg.method << "\"\n"
      << "prior = \"" << family_name(cfg.method_spec.prior_family) << "\"\n"
      << "current = \"" << family_name(cfg.method_spec.current_family)
      << "\"\n"
      << "metric = \""
      << (cfg.method_spec.metric == MetricKind::Identity ? "identity"
                                                         : "langevin")
      << "\"\n"
      << "covariance = \""
      << (cfg.method_spec.covariance == CovarianceTreatment::Plain
              ? "plain"
              : cfg.method_spec.covariance == CovarianceTreatment::Shrinkage
                    ? "shrinkage"
                    : "localized")
      << "\"\n"
      << "radius = " << cfg.method_spec.localization.radius << "\n"
      << "smoother_window = " << cfg.method_spec.smoother.window << "\n"
      << "huber_delta1 = " << cfg.method_spec.huber_delta1 << "\n"
      << "huber_delta2 = " << cfg.method_spec.huber_delta2 << "\n"
      << "etkf_inflation = " << cfg.etkf_inflation << "\n\n";
  out << "[flow]\n"
      << "diffusion = \"" << cfg.diffusion_kind << "\"\n"
      << "alpha = " << cfg.flow.diffusion.alpha << "\n"
      << "beta = " << cfg.flow.reg_beta << "\n"
      << "dtau0 = " << cfg.flow.step.dtau0 << "\n"
      << "max_steps = " << cfg.flow.step.max_steps << "\n"
      << "shrink = " << cfg.flow.step.shrink << "\n"
      << "grow = " << cfg.flow.step.grow << "\n"
      << "dtau_max = " << cfg.flow.step.dtau_max << "\n"
      << "epsilon = " << cfg.flow.termination_eps << "\n"
      << "solver = \""
      << (cfg.flow.solver.kind == SolverSpec::Kind::BlockAnalytic ? "block"
                                                                  : "gmres")
      << "\"\n"
      << "gmres_tol = " << cfg.flow.solver.tol << "\n"
      << "gmres_max_iter = " << cfg.flow.solver.max_iter << "\n\n";
  out << "[ensemble]\n"
      << "size = " << cfg.n_ens << "\n"
      << "init_spread = " << cfg.init_spread << "\n"
      << "burn_in = " << cfg.burn_in << "\n\n";
  out << "[seeds]\n"
      << "truth = " << cfg.seed_truth << "\n"
      << "obs_noise = " << cfg.seed_obs << "\n"
      << "init = " << cfg.seed_init << "\n"
      << "flow = " << cfg.seed_flow << "\n\n";
  out << "[run]\n"
      << "repetitions = " << cfg.repetitions << "\n"
      << "output = \"" << cfg.output_dir << "\"\n";
  return out.str();
}

// --- twin construction ---------------------------------------------------

ModelSystem make_model(const ExperimentConfig& cfg) {
  if (cfg.model_kind == "lorenz63")
    return lorenz63(cfg.l63_sigma, cfg.l63_rho, cfg.l63_beta);
  return lorenz96(cfg.l96_n, cfg.l96_forcing);
}

namespace {

StateVector model_base_state(const ExperimentConfig& cfg) {
  if (cfg.model_kind == "lorenz63") {
    StateVector x(3);
    x << 1.0, 1.0, 1.0;
    return x;
  }
  StateVector x = StateVector::Constant(cfg.l96_n, cfg.l96_forcing);
  x[0] += 0.01;
  return x;
}

int forecast_substeps(const ExperimentConfig& cfg) {
  return std::max(1, static_cast<int>(std::ceil(cfg.dt / cfg.max_step - 1e-12)));
}

std::vector<int> observed_indices(const ExperimentConfig& cfg, int n_state) {
  if (!cfg.obs_indices.empty()) return cfg.obs_indices;
  std::vector<int> all(n_state);
  for (int i = 0; i < n_state; ++i) all[i] = i;
  return all;
}

}  // namespace

std::vector<StateVector> generate_truth(const ExperimentConfig& cfg) {
  const ModelSystem model = make_model(cfg);
  auto gen = engine_for(cfg.seed_truth, 0x7275);
  StateVector x = model_base_state(cfg) +
                  0.1 * standard_normal(model.dimension, gen);
  // transient onto the attractor
  x = integrate(model, x, 0.0, 20.0, StepPolicy::max_step_of(cfg.max_step))
          .states.back();
  std::vector<StateVector> truth(cfg.cycles + 1);
  truth[0] = x;
  const int substeps = forecast_substeps(cfg);
  for (int k = 0; k < cfg.cycles; ++k) {
    x = integrate(model, x, k * cfg.dt, (k + 1) * cfg.dt,
                  StepPolicy::fixed(substeps))
            .states.back();
    truth[k + 1] = x;
  }
  return truth;
}

std::vector<ObservationModel> generate_observations(
    const ExperimentConfig& cfg, const std::vector<StateVector>& truth,
    int repetition) {
  const int n_state = cfg.model_kind == "lorenz63" ? 3 : cfg.l96_n;
  const std::vector<int> indices = observed_indices(cfg, n_state);
  const int n_obs = static_cast<int>(indices.size());

  std::vector<ObservationModel> obs;
  obs.reserve(truth.size());
  auto gen = engine_for(cfg.seed_obs, static_cast<std::uint64_t>(repetition),
                        0x6f62);
  for (const StateVector& xt : truth) {
    ObsVector y(n_obs);
    if (cfg.obs_error == "gaussian") {
      if (cfg.obs_variance > 0.0) {
        std::normal_distribution<double> noise(0.0,
                                               std::sqrt(cfg.obs_variance));
        for (int i = 0; i < n_obs; ++i) y[i] = xt[indices[i]] + noise(gen);
      } else {
        for (int i = 0; i < n_obs; ++i) y[i] = xt[indices[i]];
      }
      // keep R SPD even in the exact-observation limit
      const double r = std::max(cfg.obs_variance, 1e-12);
      obs.push_back(make_pointwise_observation(
          indices, n_state,
          GaussianObsError{r * Matrix::Identity(n_obs, n_obs)},
          std::move(y)));
    } else {
      std::uniform_real_distribution<double> unif(0.0, 1.0);
      for (int i = 0; i < n_obs; ++i)
        y[i] = xt[indices[i]] +
               cfg.obs_gamma * std::tan(M_PI * (unif(gen) - 0.5));
      obs.push_back(make_pointwise_observation(
          indices, n_state,
          CauchyObsError{ObsVector::Constant(n_obs, cfg.obs_gamma)},
          std::move(y)));
    }
  }
  return obs;
}

Matrix climatological_covariance(const ModelSystem& model, double dt,
                                 int samples, double burn_in) {
  StateVector x = StateVector::Constant(model.dimension, 1.0);
  x[0] += 0.01;
  x = integrate(model, x, 0.0, burn_in, StepPolicy::max_step_of(0.01))
          .states.back();
  Matrix draws(model.dimension, samples);
  for (int s = 0; s < samples; ++s) {
    x = integrate(model, x, 0.0, dt, StepPolicy::max_step_of(0.01))
            .states.back();
    draws.col(s) = x;
  }
  return Ensemble(std::move(draws)).covariance();
}

TwinSetup make_twin_setup(const ExperimentConfig& cfg,
                          const std::vector<StateVector>& truth,
                          int repetition) {
  TwinSetup setup;
  setup.model = make_model(cfg);
  setup.t_start = 0.0;
  setup.dt = cfg.dt;
  setup.substeps = forecast_substeps(cfg);
  setup.truth.assign(truth.begin() + 1, truth.end());
  setup.observations = generate_observations(
      cfg, std::vector<StateVector>(truth.begin() + 1, truth.end()),
      repetition);
  setup.spinup = cfg.spinup;
  setup.tracked_component = 0;
  setup.rank_tie_seed = seed_key(cfg.seed_obs, 0x7469, repetition);

  auto gen = engine_for(cfg.seed_init, 0x696e);
  Matrix init(setup.model.dimension, cfg.n_ens);
  for (int e = 0; e < cfg.n_ens; ++e)
    init.col(e) = truth[0] + cfg.init_spread *
                                 standard_normal(setup.model.dimension, gen);
  setup.init = Ensemble(std::move(init));
  if (cfg.burn_in > 0.0)
    forecast_ensemble(setup.init, setup.model, -cfg.burn_in, 0.0,
                      std::max(1, static_cast<int>(std::ceil(
                                      cfg.burn_in / cfg.max_step))),
                      -1);
  return setup;
}

// --- experiment driver ---------------------------------------------------

namespace {

FlowConfig flow_config_for(const ExperimentConfig& cfg, int repetition,
                           const Matrix& clim_factor) {
  FlowConfig flow = cfg.flow;
  flow.metric = cfg.method_spec.metric;
  flow.rng_seed = seed_key(cfg.seed_flow, repetition);
  if (flow.diffusion.kind == DiffusionSpec::Kind::Climatological &&
      flow.diffusion.factor.size() == 0)
    flow.diffusion.factor = clim_factor;
  return flow;
}

// The ETKF requires Gaussian errors: under Cauchy observations it runs
// with a surrogate covariance R = gamma^2 I on the same values.
void etkf_surrogate_observations(TwinSetup& setup, const ExperimentConfig& cfg) {
  const int n_state = setup.model.dimension;
  const double variance = cfg.obs_gamma * cfg.obs_gamma;
  for (ObservationModel& o : setup.observations) {
    if (o.gaussian()) continue;
    const std::vector<int> idx = *o.observed_indices();
    o = make_pointwise_observation(
        idx, n_state,
        GaussianObsError{variance *
                         Matrix::Identity(o.n_obs(), o.n_obs())},
        o.value());
  }
}

RepetitionResult run_one_repetition(const ExperimentConfig& cfg,
                                    const std::vector<StateVector>& truth,
                                    int repetition, double etkf_inflation,
                                    const Matrix& clim_factor) {
  RepetitionResult rep;
  try {
    TwinSetup setup = make_twin_setup(cfg, truth, repetition);
    if (cfg.method == "etkf") {
      if (cfg.obs_error == "cauchy") etkf_surrogate_observations(setup, cfg);
      rep.series = etkf_run(setup, etkf_inflation);
    } else if (cfg.method == "sir") {
      rep.series = sir_run(setup, seed_key(cfg.seed_flow, repetition, 0x736972));
    } else {
      const FlowConfig flow = flow_config_for(cfg, repetition, clim_factor);
      rep.series = cfg.method_spec.smoother.window > 1
                       ? vfps_run(setup, cfg.method_spec, flow)
                       : vfp_filter_run(setup, cfg.method_spec, flow);
    }
    rep.rmse = rep.series.rmse(setup.truth);
  } catch (const std::exception& err) {
    rep.failed = true;
    rep.failure = err.what();
    rep.rmse = std::numeric_limits<double>::quiet_NaN();
  }
  return rep;
}

json config_json(const ExperimentConfig& cfg) {
  json j;
  j["toml"] = serialize_config(cfg);
  j["seeds"] = {{"truth", cfg.seed_truth},
                {"obs_noise", cfg.seed_obs},
                {"init", cfg.seed_init},
                {"flow", cfg.seed_flow}};
  return j;
}

void write_series_csv(const fs::path& path, const ExperimentConfig& cfg,
                      const MetricSeries& series) {
  std::ofstream out(path);
  out << "# vfpda series; seeds truth=" << cfg.seed_truth
      << " obs_noise=" << cfg.seed_obs << " init=" << cfg.seed_init
      << " flow=" << cfg.seed_flow << "\n";
  out << "cycle,rmse_instant,flow_steps\n";
  char buf[128];
  for (size_t k = 0; k < series.instant_rmse.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%d\n", k,
                  series.instant_rmse[k], series.flow_steps[k]);
    out << buf;
  }
}

void write_rank_csv(const fs::path& path, const ExperimentConfig& cfg,
                    const std::vector<int>& counts) {
  std::ofstream out(path);
  out << "# vfpda rank histogram; seeds truth=" << cfg.seed_truth
      << " obs_noise=" << cfg.seed_obs << " init=" << cfg.seed_init
      << " flow=" << cfg.seed_flow << "\n";
  out << "bin,count\n";
  for (size_t b = 0; b < counts.size(); ++b)
    out << b << "," << counts[b] << "\n";
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                const std::string& out_dir) {
  ExperimentResult result;
  fs::create_directories(out_dir);

  const std::vector<StateVector> truth = generate_truth(cfg);

  Matrix clim_factor;
  if (cfg.flow.diffusion.kind == DiffusionSpec::Kind::Climatological &&
      cfg.flow.diffusion.factor.size() == 0) {
    const Matrix b =
        climatological_covariance(make_model(cfg), 0.1, 2000, 20.0);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(b);
    clim_factor = eig.eigenvectors() *
                  eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                  eig.eigenvectors().transpose();
  }

  double etkf_inflation = cfg.etkf_inflation;
  if (cfg.method == "etkf" && etkf_inflation <= 0.0) {
    ExperimentConfig tuning = cfg;
    tuning.cycles = std::min(cfg.cycles, 300);
    tuning.spinup = std::min(cfg.spinup, 100);
    if (tuning.spinup >= tuning.cycles) tuning.spinup = tuning.cycles / 4;
    const std::vector<StateVector> tuning_truth = generate_truth(tuning);
    TwinSetup tuning_setup = make_twin_setup(tuning, tuning_truth, 0);
    if (cfg.obs_error == "cauchy")
      etkf_surrogate_observations(tuning_setup, cfg);
    etkf_inflation = tune_etkf_inflation(tuning_setup,
                                         {1.0, 1.02, 1.04, 1.06, 1.08, 1.1});
  }
  result.etkf_inflation_used = etkf_inflation;

  std::vector<std::future<RepetitionResult>> futures;
  futures.reserve(cfg.repetitions);
  for (int r = 0; r < cfg.repetitions; ++r)
    futures.push_back(std::async(std::launch::async, run_one_repetition, cfg,
                                 std::cref(truth), r, etkf_inflation,
                                 clim_factor));
  for (auto& f : futures) result.repetitions.push_back(f.get());

  int failed = 0;
  double rmse_sum = 0.0;
  int rmse_count = 0;
  std::vector<int> rank_total;
  for (int r = 0; r < cfg.repetitions; ++r) {
    const RepetitionResult& rep = result.repetitions[r];
    if (rep.failed) {
      ++failed;
      continue;
    }
    rmse_sum += rep.rmse;
    ++rmse_count;
    const std::vector<int> counts =
        rep.series.rank_histogram(seed_key(cfg.seed_obs, 0x7469, r));
    if (rank_total.empty()) rank_total.assign(counts.size(), 0);
    for (size_t b = 0; b < counts.size(); ++b) rank_total[b] += counts[b];
    write_series_csv(fs::path(out_dir) /
                         ("series_rep" + std::to_string(r) + ".csv"),
                     cfg, rep.series);
    write_rank_csv(fs::path(out_dir) /
                       ("rank_rep" + std::to_string(r) + ".csv"),
                   cfg, counts);
  }
  result.mean_rmse =
      rmse_count > 0 ? rmse_sum / rmse_count
                     : std::numeric_limits<double>::quiet_NaN();
  result.rank_total = rank_total;
  if (!rank_total.empty())
    write_rank_csv(fs::path(out_dir) / "rank_total.csv", cfg, rank_total);

  json summary;
  summary["config"] = config_json(cfg);
  summary["method"] = cfg.method;
  summary["n_ens"] = cfg.n_ens;
  summary["repetitions"] = cfg.repetitions;
  summary["failed_repetitions"] = failed;
  summary["mean_rmse"] = result.mean_rmse;
  if (cfg.method == "etkf") summary["etkf_inflation"] = etkf_inflation;
  {
    json reps = json::array();
    for (const RepetitionResult& rep : result.repetitions) {
      json jr;
      jr["failed"] = rep.failed;
      if (rep.failed) jr["failure"] = rep.failure;
      else jr["rmse"] = rep.rmse;
      if (!rep.failed) {
        long steps = 0;
        long conv = 0;
        for (int s : rep.series.flow_steps) steps += s;
        for (int c : rep.series.converged) conv += c;
        jr["mean_flow_steps"] =
            static_cast<double>(steps) / rep.series.flow_steps.size();
        jr["convergence_rate"] =
            static_cast<double>(conv) / rep.series.converged.size();
      }
      reps.push_back(jr);
    }
    summary["per_repetition"] = reps;
  }
  if (!rank_total.empty()) {
    summary["rank_chi_square"] = chi_square_from_uniform(rank_total);
    summary["rank_total"] = rank_total;
  }

  const fs::path summary_path = fs::path(out_dir) / "summary.json";
  std::ofstream out(summary_path);
  out << summary.dump(2) << "\n";
  result.summary_path = summary_path.string();

  result.status = failed == cfg.repetitions ? RunStatus::RuntimeFailure
                  : failed > 0              ? RunStatus::RuntimeFailure
                                            : RunStatus::Ok;
  return result;
}

RunStatus run_sweep(const std::string& config_text,
                    const std::string& grid_text, const std::string& out_dir) {
  const ConfigTree base = parse_config_tree(config_text);
  const ConfigTree grid_tree = parse_config_tree(grid_text);

  std::vector<std::pair<std::string, std::vector<double>>> axes;
  for (const auto& [key, value] : grid_tree) {
    if (key.rfind("grid.", 0) != 0) continue;
    const std::string target = key.substr(5);
    if (const auto* arr = std::get_if<std::vector<double>>(&value.value))
      axes.emplace_back(target, *arr);
    else
      axes.emplace_back(target,
                        std::vector<double>{value.as_number(key)});
  }
  if (axes.empty())
    throw std::invalid_argument("sweep: no [grid] entries found");

  std::vector<size_t> index(axes.size(), 0);
  int point = 0;
  bool any_failed = false;
  json manifest = json::array();
  while (true) {
    ConfigTree tree = base;
    json overrides;
    for (size_t a = 0; a < axes.size(); ++a) {
      tree[axes[a].first] = ConfigValue{axes[a].second[index[a]]};
      overrides[axes[a].first] = axes[a].second[index[a]];
    }
    const ExperimentConfig cfg = config_from_tree(tree);
    char name[32];
    std::snprintf(name, sizeof name, "point_%03d", point);
    const std::string dir = (fs::path(out_dir) / name).string();
    const ExperimentResult res = run_experiment(cfg, dir);
    any_failed = any_failed || res.status != RunStatus::Ok;
    json entry;
    entry["point"] = name;
    entry["overrides"] = overrides;
    entry["mean_rmse"] = res.mean_rmse;
    entry["summary"] = res.summary_path;
    manifest.push_back(entry);
    ++point;

    size_t a = 0;
    while (a < axes.size() && ++index[a] == axes[a].second.size()) {
      index[a] = 0;
      ++a;
    }
    if (a == axes.size()) break;
  }
  fs::create_directories(out_dir);
  std::ofstream out(fs::path(out_dir) / "sweep_summary.json");
  out << manifest.dump(2) << "\n";
  return any_failed ? RunStatus::RuntimeFailure : RunStatus::Ok;
}

RunStatus report_results(const std::string& dir, std::string& out) {
  std::ostringstream table;
  table << "directory\tmethod\tn_ens\tmean_rmse\tfailed_reps\n";
  bool found = false;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().filename() != "summary.json")
      continue;
    std::ifstream in(entry.path());
    json j;
    try {
      in >> j;
    } catch (const std::exception&) {
      continue;
    }
    found = true;
    table << entry.path().parent_path().string() << "\t"
          << j.value("method", "?") << "\t" << j.value("n_ens", 0) << "\t"
          << j.value("mean_rmse", std::numeric_limits<double>::quiet_NaN())
          << "\t" << j.value("failed_repetitions", 0) << "\n";
  }
  out = table.str();
  return found ? RunStatus::Ok : RunStatus::ConfigError;
}

}  // namespace vfp
