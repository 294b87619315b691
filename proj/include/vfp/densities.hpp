#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "vfp/ensemble.hpp"
#include "vfp/types.hpp"

namespace vfp {

/// Covariance with a pluggable inverse. Either a dense SPD matrix
/// (factorized once, with jitter applied at the factorization site) or the
/// RBLW-shrunk form (1-gamma) A A^T + gamma mu I applied through the
/// Sherman-Morrison-Woodbury identity so no n_state x n_state matrix is
/// ever formed from the anomalies.
class CovarianceOperator {
 public:
  CovarianceOperator() = default;

  static CovarianceOperator dense_spd(Matrix p);
  static CovarianceOperator shrinkage(const Matrix& anomalies);

  bool valid() const { return kind_ != Kind::Empty; }
  int dim() const;

  StateVector solve(const StateVector& v) const;  // P^{-1} v
  double quad_form(const StateVector& u) const;   // u^T P^{-1} u
  Matrix dense() const;                           // the represented covariance
  Matrix dense_precision() const;                 // P^{-1} (column by column)

  double shrinkage_gamma() const { return gamma_; }
  double shrinkage_mu() const { return mu_; }

 private:
  enum class Kind { Empty, Dense, Smw };
  Kind kind_ = Kind::Empty;
  // Dense
  Matrix cov_;
  Eigen::LDLT<Matrix> ldlt_;
  // Smw
  Matrix anom_;
  double gamma_ = 0.0;
  double mu_ = 0.0;
  Eigen::LDLT<Matrix> inner_;  // I + (1-gamma)/(gamma mu) A^T A
};

enum class DensityFamily { Gaussian, Laplace, Huber, Cauchy, Kernel };

enum class CovariancePolicy { Plain, Shrinkage };

struct FitOptions {
  CovariancePolicy policy = CovariancePolicy::Plain;
  /// Optional Schur taper applied entrywise to the empirical covariance
  /// before factorization (localized fits).
  std::optional<Matrix> schur_taper;
  bool allow_jitter = true;
  double huber_delta1 = 1.0;
  double huber_delta2 = 1.0;
};

/// Parametrized distribution family exposing gradient- and Hessian-
/// log-density. Immutable after fit.
struct DensityModel {
  DensityFamily family = DensityFamily::Gaussian;
  StateVector center;
  CovarianceOperator cov;          // Gaussian / Laplace / Huber
  double huber_delta1 = 1.0;
  double huber_delta2 = 1.0;
  double laplace_nu = 0.0;         // 1 - n_state/2
  StateVector cauchy_scales;       // Cauchy, per component
  Matrix kernel_anchors;           // Kernel
  StateVector kernel_bandwidth;    // Kernel, per component
};

DensityModel fit(DensityFamily family, const Ensemble& ens,
                 const FitOptions& options = {});

/// Gradient of the log-density at x. Laplace/Huber within theta < 1e-6 of
/// the center return zero and set *singular when provided.
StateVector grad_log_density(const DensityModel& model, const StateVector& x,
                             bool* singular = nullptr);

/// Gaussian: analytic -P^{-1}. Other families: symmetrized central finite
/// differences of the gradient.
Matrix hessian_log_density(const DensityModel& model, const StateVector& x);

/// K_{nu-1}(theta) / K_nu(theta), computed through the order symmetry
/// K_{-nu} = K_nu and a stable upward recurrence on the order, so it stays
/// finite for the large-negative nu = 1 - n_state/2 of high-dimensional
/// Laplace evaluations and for theta far in the exponential tail.
/// Throws std::domain_error for theta < 1e-12 (the singular regime).
double bessel_k_ratio(double nu, double theta);

// ---------------------------------------------------------------------------

struct GaussianObsError {
  Matrix R;
};
struct CauchyObsError {
  ObsVector gamma;  // per-component scale
};

/// Observation y = H(x) + eta at one assimilation time: the operator, its
/// adjoint at a linearization point, and the error family.
class ObservationModel {
 public:
  ObservationModel() = default;
  ObservationModel(std::function<ObsVector(const StateVector&)> op,
                   std::function<StateVector(const StateVector&,
                                             const ObsVector&)> adjoint,
                   GaussianObsError error, ObsVector value);
  ObservationModel(std::function<ObsVector(const StateVector&)> op,
                   std::function<StateVector(const StateVector&,
                                             const ObsVector&)> adjoint,
                   CauchyObsError error, ObsVector value);

  int n_obs() const { return static_cast<int>(value_.size()); }
  bool gaussian() const { return gaussian_; }
  const ObsVector& value() const { return value_; }
  ObsVector& value() { return value_; }
  const Matrix& R() const { return R_; }
  const ObsVector& cauchy_gamma() const { return gamma_; }

  ObsVector apply(const StateVector& x) const { return op_(x); }
  StateVector apply_adjoint(const StateVector& x, const ObsVector& w) const {
    return adjoint_(x, w);
  }
  ObsVector solve_R(const ObsVector& v) const;  // R^{-1} v

  /// H as a matrix, when the operator is linear (enables the analytic
  /// Gauss-Newton Hessian term in the flow Jacobian).
  const std::optional<Matrix>& linear() const { return linear_; }
  void set_linear(Matrix h) { linear_ = std::move(h); }

  /// State indices observed by a pointwise operator; required by the
  /// localized analysis to restrict observations per influence set.
  const std::optional<std::vector<int>>& observed_indices() const {
    return observed_indices_;
  }
  void set_observed_indices(std::vector<int> idx) {
    observed_indices_ = std::move(idx);
  }

 private:
  std::function<ObsVector(const StateVector&)> op_;
  std::function<StateVector(const StateVector&, const ObsVector&)> adjoint_;
  bool gaussian_ = true;
  Matrix R_;
  Eigen::LLT<Matrix> R_llt_;
  ObsVector gamma_;
  ObsVector value_;
  std::optional<Matrix> linear_;
  std::optional<std::vector<int>> observed_indices_;
};

/// Observation of selected state components (rows of the identity) with
/// the given error family.
ObservationModel make_pointwise_observation(const std::vector<int>& indices,
                                            int n_state, GaussianObsError err,
                                            ObsVector value);
ObservationModel make_pointwise_observation(const std::vector<int>& indices,
                                            int n_state, CauchyObsError err,
                                            ObsVector value);
ObservationModel make_linear_observation(Matrix h, GaussianObsError err,
                                         ObsVector value);
ObservationModel make_linear_observation(Matrix h, CauchyObsError err,
                                         ObsVector value);

/// Gradient of the observation log-likelihood at x:
///   Gaussian: -H^T(x) R^{-1} (H(x) - y)
///   Cauchy:   -H^T(x) [2 r ./ (gamma.^2 + r.^2)], r = H(x) - y
StateVector obs_grad_log_likelihood(const ObservationModel& obs,
                                    const StateVector& x);

/// Hessian of the observation log-likelihood. Analytic when the operator
/// is linear; otherwise finite differences of the gradient.
Matrix obs_hessian_log_likelihood(const ObservationModel& obs,
                                  const StateVector& x);

}  // namespace vfp
