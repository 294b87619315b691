#include "vfp/densities.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace vfp {

namespace {

double quantile_sorted(const std::vector<double>& sorted, double p) {
  const int m = static_cast<int>(sorted.size());
  if (m == 1) return sorted[0];
  const double pos = p * (m - 1);
  const int lo = static_cast<int>(std::floor(pos));
  const int hi = std::min(lo + 1, m - 1);
  const double w = pos - lo;
  return (1.0 - w) * sorted[lo] + w * sorted[hi];
}

// Scaled tail series S_nu(theta) with K_nu(theta) ~ sqrt(pi/2theta) e^-theta
// S_nu(theta); used to seed the ratio recurrence when direct evaluation
// would underflow.
double bessel_k_tail_series(double nu, double theta) {
  const double mu = 4.0 * nu * nu;
  double term = 1.0, sum = 1.0;
  for (int k = 1; k <= 4; ++k) {
    term *= (mu - (2.0 * k - 1.0) * (2.0 * k - 1.0)) / (k * 8.0 * theta);
    sum += term;
  }
  return sum;
}

// K_p(theta)/K_q(theta) for small orders p, q in [0, 2].
double small_order_ratio(double p, double q, double theta) {
  if (p == q) return 1.0;
  if (theta < 600.0) return std::cyl_bessel_k(p, theta) / std::cyl_bessel_k(q, theta);
  return bessel_k_tail_series(p, theta) / bessel_k_tail_series(q, theta);
}

}  // namespace

namespace {

// K_{q+1}(theta)/K_q(theta) for q >= 0, by upward recurrence on the order
// from a fractional base seed (stable: K grows with order).
double bessel_ratio_up(double q, double theta) {
  if (q < 1.0) return small_order_ratio(q + 1.0, q, theta);
  const double mu0 = q - std::floor(q);
  double r = small_order_ratio(mu0 + 1.0, mu0, theta);
  const int steps = static_cast<int>(std::llround(q - mu0));
  for (int m = 1; m <= steps; ++m) {
    const double order = mu0 + m;
    r = 2.0 * order / theta + 1.0 / r;  // K_{o+1}/K_o from K_o/K_{o-1}
  }
  return r;
}

}  // namespace

double bessel_k_ratio(double nu, double theta) {
  if (theta < 1e-12)
    throw std::domain_error("bessel_k_ratio: theta in singular regime");
  // K_{-nu} = K_nu, so the ratio only involves |nu - 1| and |nu|.
  if (nu > 0.0 && nu < 1.0)
    return small_order_ratio(1.0 - nu, nu, theta);
  if (nu <= 0.0) return bessel_ratio_up(-nu, theta);
  return 1.0 / bessel_ratio_up(nu - 1.0, theta);
}

// --- CovarianceOperator ----------------------------------------------------

CovarianceOperator CovarianceOperator::dense_spd(Matrix p) {
  CovarianceOperator op;
  op.kind_ = Kind::Dense;
  op.ldlt_.compute(p);
  const bool well_posed = op.ldlt_.info() == Eigen::Success &&
                          op.ldlt_.isPositive() &&
                          op.ldlt_.rcond() > 1e-12;
  if (!well_posed) {
    // rank-deficient or ill-conditioned fit: jitter at the inversion site
    double lam = jitter_level(p);
    if (!(lam > 0.0) || !std::isfinite(lam)) lam = 1e-12;
    Matrix jittered = p;
    jittered.diagonal().array() += lam;
    op.ldlt_.compute(jittered);
    if (op.ldlt_.info() != Eigen::Success)
      throw std::runtime_error("CovarianceOperator: factorization failed");
  }
  op.cov_ = std::move(p);
  return op;
}

CovarianceOperator CovarianceOperator::shrinkage(const Matrix& anomalies) {
  const int n = static_cast<int>(anomalies.rows());
  const int m = static_cast<int>(anomalies.cols());
  if (m < 3) throw std::invalid_argument("shrinkage: needs N_ens >= 3");
  const double tr_p = anomalies.squaredNorm();
  if (!(tr_p > 0.0))
    throw std::invalid_argument("shrinkage: zero sample covariance");
  const Matrix gram = anomalies.transpose() * anomalies;  // A^T A, m x m
  const double tr_p2 = gram.squaredNorm();
  const int n_ens = m;
  const double num =
      ((n_ens - 2.0) / n_ens) * tr_p2 + tr_p * tr_p;
  const double den = (n_ens + 2.0) * (tr_p2 - tr_p * tr_p / n);
  double gamma = (den > 0.0) ? num / den : 1.0;
  gamma = std::clamp(gamma, 0.0, 1.0);

  CovarianceOperator op;
  op.kind_ = Kind::Smw;
  op.anom_ = anomalies;
  op.gamma_ = gamma;
  op.mu_ = tr_p / n;
  const double c = (1.0 - gamma) / (gamma * op.mu_);
  Matrix inner = Matrix::Identity(m, m) + c * gram;
  op.inner_.compute(inner);
  return op;
}

int CovarianceOperator::dim() const {
  switch (kind_) {
    case Kind::Dense: return static_cast<int>(cov_.rows());
    case Kind::Smw: return static_cast<int>(anom_.rows());
    default: return 0;
  }
}

StateVector CovarianceOperator::solve(const StateVector& v) const {
  switch (kind_) {
    case Kind::Dense:
      return ldlt_.solve(v);
    case Kind::Smw: {
      const double gm = gamma_ * mu_;
      StateVector out = v / gm;
      if (gamma_ < 1.0) {
        const StateVector w = inner_.solve(anom_.transpose() * v);
        out -= ((1.0 - gamma_) / (gm * gm)) * (anom_ * w);
      }
      return out;
    }
    default:
      throw std::logic_error("CovarianceOperator: empty");
  }
}

double CovarianceOperator::quad_form(const StateVector& u) const {
  return u.dot(solve(u));
}

Matrix CovarianceOperator::dense() const {
  switch (kind_) {
    case Kind::Dense:
      return cov_;
    case Kind::Smw:
      return (1.0 - gamma_) * (anom_ * anom_.transpose()) +
             gamma_ * mu_ * Matrix::Identity(dim(), dim());
    default:
      throw std::logic_error("CovarianceOperator: empty");
  }
}

Matrix CovarianceOperator::dense_precision() const {
  const int n = dim();
  Matrix p(n, n);
  StateVector e = StateVector::Zero(n);
  for (int i = 0; i < n; ++i) {
    e[i] = 1.0;
    p.col(i) = solve(e);
    e[i] = 0.0;
  }
  return 0.5 * (p + p.transpose());
}

// --- fit ---------------------------------------------------------------

DensityModel fit(DensityFamily family, const Ensemble& ens,
                 const FitOptions& options) {
  DensityModel model;
  model.family = family;
  const int n = ens.n_state();

  switch (family) {
    case DensityFamily::Gaussian:
    case DensityFamily::Laplace:
    case DensityFamily::Huber: {
      model.center = ens.mean();
      if (options.policy == CovariancePolicy::Shrinkage) {
        model.cov = CovarianceOperator::shrinkage(ens.anomalies());
      } else {
        if (!options.allow_jitter && !options.schur_taper &&
            ens.n_ens() <= ens.n_state())
          throw std::invalid_argument(
              "fit: rank-deficient covariance with no regularization policy");
        Matrix p = ens.covariance();
        if (options.schur_taper) p = p.cwiseProduct(*options.schur_taper);
        model.cov = CovarianceOperator::dense_spd(std::move(p));
      }
      model.laplace_nu = 1.0 - n / 2.0;
      model.huber_delta1 = options.huber_delta1;
      model.huber_delta2 = options.huber_delta2;
      break;
    }
    case DensityFamily::Cauchy: {
      // Cauchy has no moments; center on the median, scale from the IQR
      // (the Cauchy interquartile range is exactly 2 gamma).
      model.center.resize(n);
      model.cauchy_scales.resize(n);
      std::vector<double> row(ens.n_ens());
      for (int i = 0; i < n; ++i) {
        for (int e = 0; e < ens.n_ens(); ++e) row[e] = ens.states()(i, e);
        std::sort(row.begin(), row.end());
        const double med = quantile_sorted(row, 0.5);
        const double iqr =
            quantile_sorted(row, 0.75) - quantile_sorted(row, 0.25);
        model.center[i] = med;
        model.cauchy_scales[i] =
            std::max(0.5 * iqr, 1e-8 * (1.0 + std::abs(med)));
      }
      break;
    }
    case DensityFamily::Kernel: {
      model.kernel_anchors = ens.states();
      model.center = ens.mean();
      // Per-component Silverman bandwidth on the anchor ensemble.
      const int m = ens.n_ens();
      const double factor =
          std::pow(4.0 / ((n + 2.0) * m), 1.0 / (n + 4.0));
      const Matrix a = ens.anomalies();
      model.kernel_bandwidth.resize(n);
      for (int i = 0; i < n; ++i) {
        const double sd = a.row(i).norm();
        model.kernel_bandwidth[i] =
            std::max(sd * factor, 1e-8 * (1.0 + std::abs(model.center[i])));
      }
      break;
    }
  }
  return model;
}

// --- gradient / Hessian ------------------------------------------------

namespace {

constexpr double kLaplaceSingularTheta = 1e-6;

StateVector laplace_like_grad(const DensityModel& model, const StateVector& x,
                              bool* singular) {
  const StateVector u = x - model.center;
  const StateVector pinv_u = model.cov.solve(u);
  const double theta2 = 2.0 * u.dot(pinv_u);
  const double theta = std::sqrt(std::max(theta2, 0.0));
  if (theta < kLaplaceSingularTheta) {
    if (singular) *singular = true;
    return StateVector::Zero(x.size());
  }
  const double ratio = bessel_k_ratio(model.laplace_nu, theta);
  const double laplace_scale = (2.0 / theta) * ratio;
  if (model.family == DensityFamily::Laplace)
    return -laplace_scale * pinv_u;
  // Huber: Laplace branch (scaled by delta1) while below the delta2
  // threshold, Gaussian branch otherwise; Laplace branch on equality.
  const double scaled = model.huber_delta1 * laplace_scale;
  if (scaled <= model.huber_delta2) return -scaled * pinv_u;
  return -model.huber_delta2 * pinv_u;
}

StateVector kernel_grad(const DensityModel& model, const StateVector& x) {
  const int m = static_cast<int>(model.kernel_anchors.cols());
  const int n = static_cast<int>(x.size());
  const StateVector inv_h2 =
      model.kernel_bandwidth.array().square().inverse();
  Eigen::VectorXd expo(m);
  Matrix scaled_diff(n, m);
  for (int i = 0; i < m; ++i) {
    const StateVector d = x - model.kernel_anchors.col(i);
    scaled_diff.col(i) = d.cwiseProduct(inv_h2);
    expo[i] = -0.5 * d.dot(scaled_diff.col(i));
  }
  const double emax = expo.maxCoeff();
  StateVector num = StateVector::Zero(n);
  double den = 0.0;
  for (int i = 0; i < m; ++i) {
    const double w = std::exp(expo[i] - emax);
    den += w;
    num -= w * scaled_diff.col(i);
  }
  return num / den;
}

}  // namespace

StateVector grad_log_density(const DensityModel& model, const StateVector& x,
                             bool* singular) {
  if (singular) *singular = false;
  switch (model.family) {
    case DensityFamily::Gaussian:
      return -model.cov.solve(x - model.center);
    case DensityFamily::Laplace:
    case DensityFamily::Huber:
      return laplace_like_grad(model, x, singular);
    case DensityFamily::Cauchy: {
      const StateVector u = x - model.center;
      const StateVector g2 = model.cauchy_scales.array().square();
      return (-2.0 * u.array() / (g2.array() + u.array().square())).matrix();
    }
    case DensityFamily::Kernel:
      return kernel_grad(model, x);
  }
  throw std::logic_error("grad_log_density: unreachable");
}

Matrix hessian_log_density(const DensityModel& model, const StateVector& x) {
  if (model.family == DensityFamily::Gaussian)
    return -model.cov.dense_precision();
  const int n = static_cast<int>(x.size());
  Matrix h(n, n);
  StateVector xp = x, xm = x;
  for (int j = 0; j < n; ++j) {
    const double step = 1e-5 * (1.0 + std::abs(x[j]));
    xp[j] = x[j] + step;
    xm[j] = x[j] - step;
    h.col(j) =
        (grad_log_density(model, xp) - grad_log_density(model, xm)) /
        (2.0 * step);
    xp[j] = x[j];
    xm[j] = x[j];
  }
  return 0.5 * (h + h.transpose());
}

// --- ObservationModel --------------------------------------------------

ObservationModel::ObservationModel(
    std::function<ObsVector(const StateVector&)> op,
    std::function<StateVector(const StateVector&, const ObsVector&)> adjoint,
    GaussianObsError error, ObsVector value)
    : op_(std::move(op)),
      adjoint_(std::move(adjoint)),
      gaussian_(true),
      R_(std::move(error.R)),
      value_(std::move(value)) {
  R_llt_.compute(R_);
  if (R_llt_.info() != Eigen::Success)
    throw std::invalid_argument("ObservationModel: R not SPD");
}

ObservationModel::ObservationModel(
    std::function<ObsVector(const StateVector&)> op,
    std::function<StateVector(const StateVector&, const ObsVector&)> adjoint,
    CauchyObsError error, ObsVector value)
    : op_(std::move(op)),
      adjoint_(std::move(adjoint)),
      gaussian_(false),
      gamma_(std::move(error.gamma)),
      value_(std::move(value)) {
  if ((gamma_.array() <= 0.0).any())
    throw std::invalid_argument("ObservationModel: Cauchy scales must be > 0");
}

ObsVector ObservationModel::solve_R(const ObsVector& v) const {
  return R_llt_.solve(v);
}

namespace {

ObservationModel make_from_matrix(Matrix h, auto err, ObsVector value) {
  auto op = [h](const StateVector& x) -> ObsVector { return h * x; };
  auto adj = [h](const StateVector&, const ObsVector& w) -> StateVector {
    return h.transpose() * w;
  };
  ObservationModel obs(std::move(op), std::move(adj), std::move(err),
                       std::move(value));
  obs.set_linear(std::move(h));
  return obs;
}

Matrix selection_matrix(const std::vector<int>& indices, int n_state) {
  Matrix h = Matrix::Zero(static_cast<int>(indices.size()), n_state);
  for (int k = 0; k < static_cast<int>(indices.size()); ++k) {
    if (indices[k] < 0 || indices[k] >= n_state)
      throw std::invalid_argument("observation index out of range");
    h(k, indices[k]) = 1.0;
  }
  return h;
}

}  // namespace

ObservationModel make_linear_observation(Matrix h, GaussianObsError err,
                                         ObsVector value) {
  return make_from_matrix(std::move(h), std::move(err), std::move(value));
}

ObservationModel make_linear_observation(Matrix h, CauchyObsError err,
                                         ObsVector value) {
  return make_from_matrix(std::move(h), std::move(err), std::move(value));
}

ObservationModel make_pointwise_observation(const std::vector<int>& indices,
                                            int n_state, GaussianObsError err,
                                            ObsVector value) {
  auto obs = make_from_matrix(selection_matrix(indices, n_state),
                              std::move(err), std::move(value));
  obs.set_observed_indices(indices);
  return obs;
}

ObservationModel make_pointwise_observation(const std::vector<int>& indices,
                                            int n_state, CauchyObsError err,
                                            ObsVector value) {
  auto obs = make_from_matrix(selection_matrix(indices, n_state),
                              std::move(err), std::move(value));
  obs.set_observed_indices(indices);
  return obs;
}

StateVector obs_grad_log_likelihood(const ObservationModel& obs,
                                    const StateVector& x) {
  const ObsVector r = obs.apply(x) - obs.value();
  if (obs.gaussian()) return -obs.apply_adjoint(x, obs.solve_R(r));
  const ObsVector g2 = obs.cauchy_gamma().array().square();
  const ObsVector w =
      (2.0 * r.array() / (g2.array() + r.array().square())).matrix();
  return -obs.apply_adjoint(x, w);
}

Matrix obs_hessian_log_likelihood(const ObservationModel& obs,
                                  const StateVector& x) {
  if (obs.linear()) {
    const Matrix& h = *obs.linear();
    if (obs.gaussian()) {
      // Gauss-Newton term; exact for a linear operator.
      Matrix rinv_h(h.rows(), h.cols());
      for (int j = 0; j < h.cols(); ++j) rinv_h.col(j) = obs.solve_R(h.col(j));
      return -h.transpose() * rinv_h;
    }
    const ObsVector r = obs.apply(x) - obs.value();
    const ObsVector g2 = obs.cauchy_gamma().array().square();
    const ObsVector d =
        (2.0 * (g2.array() - r.array().square()) /
         (g2.array() + r.array().square()).square())
            .matrix();
    return -h.transpose() * d.asDiagonal() * h;
  }
  const int n = static_cast<int>(x.size());
  Matrix hess(n, n);
  StateVector xp = x, xm = x;
  for (int j = 0; j < n; ++j) {
    const double step = 1e-5 * (1.0 + std::abs(x[j]));
    xp[j] = x[j] + step;
    xm[j] = x[j] - step;
    hess.col(j) = (obs_grad_log_likelihood(obs, xp) -
                   obs_grad_log_likelihood(obs, xm)) /
                  (2.0 * step);
    xp[j] = x[j];
    xm[j] = x[j];
  }
  return 0.5 * (hess + hess.transpose());
}

}  // namespace vfp
