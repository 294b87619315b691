#pragma once

#include "vfp/types.hpp"

namespace vfp {

/// Particle ensemble stored column-major: column e is particle x^[e].
class Ensemble {
 public:
  Ensemble() = default;
  Ensemble(int n_state, int n_ens) : states_(Matrix::Zero(n_state, n_ens)) {}
  explicit Ensemble(Matrix states) : states_(std::move(states)) {}

  int n_state() const { return static_cast<int>(states_.rows()); }
  int n_ens() const { return static_cast<int>(states_.cols()); }

  Matrix& states() { return states_; }
  const Matrix& states() const { return states_; }
  StateVector particle(int e) const { return states_.col(e); }

  StateVector mean() const;
  /// (X - mean 1^T) / sqrt(N_ens - 1); requires N_ens >= 2.
  Matrix anomalies() const;
  /// A A^T, symmetric positive semidefinite.
  Matrix covariance() const;

 private:
  Matrix states_;
};

inline StateVector mean(const Ensemble& ens) { return ens.mean(); }
inline Matrix anomalies(const Ensemble& ens) { return ens.anomalies(); }
inline Matrix covariance(const Ensemble& ens) { return ens.covariance(); }

/// Jitter used at inversion sites only: lambda = 1e-8 * trace / n.
double jitter_level(const Matrix& cov);

}  // namespace vfp
