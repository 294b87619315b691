#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vfp/types.hpp"

namespace vfp {

/// A continuous-time model dx/dt = rhs(t, x) with an analytic Jacobian,
/// used both for forecasting and for tangent-linear/adjoint propagation.
struct ModelSystem {
  int dimension = 0;
  std::function<StateVector(double, const StateVector&)> rhs;
  std::function<Matrix(double, const StateVector&)> jacobian;
  std::vector<std::pair<std::string, double>> parameters;
};

ModelSystem lorenz63(double sigma = 10.0, double rho = 28.0,
                     double beta = 8.0 / 3.0);
ModelSystem lorenz96(int n = 40, double forcing = 8.0);

StateVector lorenz63_rhs(const StateVector& x, double sigma = 10.0,
                         double rho = 28.0, double beta = 8.0 / 3.0);
StateVector lorenz96_rhs(const StateVector& x, double forcing = 8.0);

struct Trajectory {
  std::vector<double> times;
  std::vector<StateVector> states;
};

/// Step selection for the Dormand-Prince 5(4) integrator. Fixed substeps
/// give bit-reproducible trajectories; the embedded-error mode is kept for
/// convergence checks and stiffness detection.
struct StepPolicy {
  enum class Mode { FixedSubsteps, FixedMaxStep, Adaptive };
  Mode mode = Mode::FixedMaxStep;
  int substeps = 1;         // FixedSubsteps
  double max_step = 0.01;   // FixedMaxStep: substeps = ceil((t1-t0)/max_step)
  double abs_tol = 1e-8;    // Adaptive
  double rel_tol = 1e-8;
  double min_step = 1e-12;

  static StepPolicy fixed(int n) {
    StepPolicy p;
    p.mode = Mode::FixedSubsteps;
    p.substeps = n;
    return p;
  }
  static StepPolicy max_step_of(double h) {
    StepPolicy p;
    p.mode = Mode::FixedMaxStep;
    p.max_step = h;
    return p;
  }
  static StepPolicy adaptive(double atol, double rtol) {
    StepPolicy p;
    p.mode = Mode::Adaptive;
    p.abs_tol = atol;
    p.rel_tol = rtol;
    return p;
  }
};

/// Integrate over [t0, t1]. Records the state at every internal step.
/// Throws std::runtime_error on step-size underflow (adaptive mode) or a
/// non-finite state, both of which indicate blow-up.
Trajectory integrate(const ModelSystem& model, const StateVector& x0,
                     double t0, double t1, const StepPolicy& control);

/// Stage states of a fixed-step Dormand-Prince run, retained so the exact
/// discrete flow map can be linearized and transposed step by step.
struct RkCheckpoint {
  double t0 = 0.0;
  double h = 0.0;
  int n_steps = 0;
  std::vector<StateVector> step_states;          // x_0 .. x_n
  std::vector<std::vector<StateVector>> stages;  // per step, 6 stage states
  const StateVector& final_state() const { return step_states.back(); }
};

RkCheckpoint integrate_checkpoint(const ModelSystem& model,
                                  const StateVector& x0, double t0, double t1,
                                  int substeps);

/// Directional derivative of the discrete flow map: (dM/dx0) v.
StateVector apply_tangent(const ModelSystem& model, const RkCheckpoint& chk,
                          const StateVector& v);

/// Transpose of the tangent-linear map: M* w, accumulated by a backward
/// sweep over the stored stages.
StateVector apply_adjoint(const ModelSystem& model, const RkCheckpoint& chk,
                          const StateVector& w);

StateVector tangent_linear(const ModelSystem& model, const StateVector& x0,
                           double t0, double t1, const StateVector& v,
                           int substeps);

StateVector discrete_adjoint(const ModelSystem& model, const StateVector& x0,
                             double t0, double t1, const StateVector& w,
                             int substeps);

}  // namespace vfp
