#include "vfp/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace vfp {

namespace {

// Dormand-Prince 5(4) tableau.
constexpr double kC[7] = {0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0,
                          1.0, 1.0};
constexpr double kA[7][6] = {
    {0, 0, 0, 0, 0, 0},
    {1.0 / 5.0, 0, 0, 0, 0, 0},
    {3.0 / 40.0, 9.0 / 40.0, 0, 0, 0, 0},
    {44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0, 0, 0},
    {19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0,
     0},
    {9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0,
     -5103.0 / 18656.0, 0},
    {35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0,
     11.0 / 84.0}};
constexpr double kB[6] = {35.0 / 384.0,     0.0,          500.0 / 1113.0,
                          125.0 / 192.0,    -2187.0 / 6784.0,
                          11.0 / 84.0};
constexpr double kBHat[7] = {5179.0 / 57600.0,    0.0,
                             7571.0 / 16695.0,    393.0 / 640.0,
                             -92097.0 / 339200.0, 187.0 / 2100.0,
                             1.0 / 40.0};

// One fixed step from (t, x); optionally records the 6 stage states.
StateVector dp5_step(const ModelSystem& model, double t, double h,
                     const StateVector& x, std::vector<StateVector>* stages) {
  const int n = static_cast<int>(x.size());
  StateVector k[6];
  if (stages) stages->clear();
  for (int i = 0; i < 6; ++i) {
    StateVector xi = x;
    for (int j = 0; j < i; ++j) xi += (h * kA[i][j]) * k[j];
    if (stages) stages->push_back(xi);
    k[i] = model.rhs(t + kC[i] * h, xi);
  }
  StateVector out = x;
  for (int i = 0; i < 6; ++i) out += (h * kB[i]) * k[i];
  (void)n;
  return out;
}

void check_finite(const StateVector& x, double t) {
  if (!x.allFinite())
    throw std::runtime_error("integrate: non-finite state at t = " +
                             std::to_string(t));
}

Trajectory integrate_fixed(const ModelSystem& model, const StateVector& x0,
                           double t0, double t1, int substeps) {
  Trajectory traj;
  traj.times.reserve(substeps + 1);
  traj.states.reserve(substeps + 1);
  const double h = (t1 - t0) / substeps;
  StateVector x = x0;
  traj.times.push_back(t0);
  traj.states.push_back(x);
  for (int s = 0; s < substeps; ++s) {
    const double t = t0 + s * h;
    x = dp5_step(model, t, h, x, nullptr);
    check_finite(x, t + h);
    traj.times.push_back(s + 1 == substeps ? t1 : t + h);
    traj.states.push_back(x);
  }
  return traj;
}

Trajectory integrate_adaptive(const ModelSystem& model, const StateVector& x0,
                              double t0, double t1, const StepPolicy& ctl) {
  Trajectory traj;
  StateVector x = x0;
  double t = t0;
  double h = (t1 - t0) / 100.0;
  traj.times.push_back(t);
  traj.states.push_back(x);
  while (t < t1) {
    if (h < ctl.min_step)
      throw std::runtime_error(
          "integrate: step-size underflow (stiffness or blow-up) at t = " +
          std::to_string(t));
    h = std::min(h, t1 - t);
    // full 7-stage evaluation for the embedded error estimate
    StateVector k[7];
    for (int i = 0; i < 7; ++i) {
      StateVector xi = x;
      for (int j = 0; j < std::min(i, 6); ++j) xi += (h * kA[i][j]) * k[j];
      k[i] = model.rhs(t + kC[i] * h, xi);
    }
    StateVector x5 = x;
    for (int i = 0; i < 6; ++i) x5 += (h * kB[i]) * k[i];
    StateVector x4 = x;
    for (int i = 0; i < 7; ++i) x4 += (h * kBHat[i]) * k[i];
    double err = 0.0;
    for (int i = 0; i < x.size(); ++i) {
      const double sc =
          ctl.abs_tol +
          ctl.rel_tol * std::max(std::abs(x[i]), std::abs(x5[i]));
      const double e = (x5[i] - x4[i]) / sc;
      err += e * e;
    }
    err = std::sqrt(err / x.size());
    if (err <= 1.0 && x5.allFinite()) {
      t += h;
      x = x5;
      traj.times.push_back(t);
      traj.states.push_back(x);
    }
    const double fac =
        std::clamp(0.9 * std::pow(std::max(err, 1e-16), -0.2), 0.2, 5.0);
    h *= fac;
  }
  return traj;
}

}  // namespace

StateVector lorenz63_rhs(const StateVector& x, double sigma, double rho,
                         double beta) {
  StateVector d(3);
  d[0] = sigma * (x[1] - x[0]);
  d[1] = x[0] * (rho - x[2]) - x[1];
  d[2] = x[0] * x[1] - beta * x[2];
  return d;
}

ModelSystem lorenz63(double sigma, double rho, double beta) {
  ModelSystem m;
  m.dimension = 3;
  m.parameters = {{"sigma", sigma}, {"rho", rho}, {"beta", beta}};
  m.rhs = [=](double, const StateVector& x) {
    return lorenz63_rhs(x, sigma, rho, beta);
  };
  m.jacobian = [=](double, const StateVector& x) {
    Matrix j(3, 3);
    j << -sigma, sigma, 0.0,
         rho - x[2], -1.0, -x[0],
         x[1], x[0], -beta;
    return j;
  };
  return m;
}

StateVector lorenz96_rhs(const StateVector& x, double forcing) {
  const int n = static_cast<int>(x.size());
  StateVector d(n);
  for (int i = 0; i < n; ++i) {
    const int ip1 = (i + 1) % n;
    const int im1 = (i - 1 + n) % n;
    const int im2 = (i - 2 + n) % n;
    d[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + forcing;
  }
  return d;
}

ModelSystem lorenz96(int n, double forcing) {
  ModelSystem m;
  m.dimension = n;
  m.parameters = {{"F", forcing}};
  m.rhs = [forcing](double, const StateVector& x) {
    return lorenz96_rhs(x, forcing);
  };
  m.jacobian = [n](double, const StateVector& x) {
    Matrix j = Matrix::Zero(n, n);
    for (int i = 0; i < n; ++i) {
      const int ip1 = (i + 1) % n;
      const int im1 = (i - 1 + n) % n;
      const int im2 = (i - 2 + n) % n;
      j(i, ip1) += x[im1];
      j(i, im2) -= x[im1];
      j(i, im1) += x[ip1] - x[im2];
      j(i, i) -= 1.0;
    }
    return j;
  };
  return m;
}

Trajectory integrate(const ModelSystem& model, const StateVector& x0,
                     double t0, double t1, const StepPolicy& control) {
  if (!(t1 > t0)) throw std::invalid_argument("integrate: requires t1 > t0");
  switch (control.mode) {
    case StepPolicy::Mode::FixedSubsteps:
      return integrate_fixed(model, x0, t0, t1, std::max(1, control.substeps));
    case StepPolicy::Mode::FixedMaxStep: {
      const int n =
          std::max(1, static_cast<int>(std::ceil((t1 - t0) / control.max_step -
                                                 1e-12)));
      return integrate_fixed(model, x0, t0, t1, n);
    }
    case StepPolicy::Mode::Adaptive:
      return integrate_adaptive(model, x0, t0, t1, control);
  }
  throw std::logic_error("integrate: unreachable");
}

RkCheckpoint integrate_checkpoint(const ModelSystem& model,
                                  const StateVector& x0, double t0, double t1,
                                  int substeps) {
  RkCheckpoint chk;
  chk.t0 = t0;
  chk.n_steps = std::max(1, substeps);
  chk.h = (t1 - t0) / chk.n_steps;
  chk.step_states.reserve(chk.n_steps + 1);
  chk.stages.resize(chk.n_steps);
  StateVector x = x0;
  chk.step_states.push_back(x);
  for (int s = 0; s < chk.n_steps; ++s) {
    const double t = t0 + s * chk.h;
    x = dp5_step(model, t, chk.h, x, &chk.stages[s]);
    check_finite(x, t + chk.h);
    chk.step_states.push_back(x);
  }
  return chk;
}

StateVector apply_tangent(const ModelSystem& model, const RkCheckpoint& chk,
                          const StateVector& v) {
  StateVector dx = v;
  for (int s = 0; s < chk.n_steps; ++s) {
    const double t = chk.t0 + s * chk.h;
    StateVector dk[6];
    for (int i = 0; i < 6; ++i) {
      StateVector di = dx;
      for (int j = 0; j < i; ++j) di += (chk.h * kA[i][j]) * dk[j];
      dk[i] = model.jacobian(t + kC[i] * chk.h, chk.stages[s][i]) * di;
    }
    for (int i = 0; i < 6; ++i) dx += (chk.h * kB[i]) * dk[i];
  }
  return dx;
}

StateVector apply_adjoint(const ModelSystem& model, const RkCheckpoint& chk,
                          const StateVector& w) {
  // Transpose of the per-step stage recursion: for each step, working from
  // the last stage back, u_i = h J_i^T (b_i lam + sum_{j>i} a_{ji} u_j).
  StateVector lam = w;
  for (int s = chk.n_steps - 1; s >= 0; --s) {
    const double t = chk.t0 + s * chk.h;
    StateVector u[6];
    for (int i = 5; i >= 0; --i) {
      StateVector rhs = kB[i] * lam;
      for (int j = i + 1; j < 6; ++j) rhs += kA[j][i] * u[j];
      u[i] = chk.h * (model.jacobian(t + kC[i] * chk.h, chk.stages[s][i])
                          .transpose() *
                      rhs);
    }
    for (int i = 0; i < 6; ++i) lam += u[i];
  }
  return lam;
}

StateVector tangent_linear(const ModelSystem& model, const StateVector& x0,
                           double t0, double t1, const StateVector& v,
                           int substeps) {
  return apply_tangent(model, integrate_checkpoint(model, x0, t0, t1, substeps),
                       v);
}

StateVector discrete_adjoint(const ModelSystem& model, const StateVector& x0,
                             double t0, double t1, const StateVector& w,
                             int substeps) {
  return apply_adjoint(model, integrate_checkpoint(model, x0, t0, t1, substeps),
                       w);
}

}  // namespace vfp
