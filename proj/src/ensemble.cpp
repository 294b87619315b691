#include "vfp/ensemble.hpp"

#include <cmath>
#include <stdexcept>

namespace vfp {

StateVector Ensemble::mean() const {
  if (n_ens() < 1) throw std::invalid_argument("Ensemble::mean: empty");
  return states_.rowwise().mean();
}

Matrix Ensemble::anomalies() const {
  if (n_ens() < 2)
    throw std::invalid_argument("Ensemble::anomalies: needs N_ens >= 2");
  Matrix a = states_.colwise() - mean();
  a /= std::sqrt(static_cast<double>(n_ens() - 1));
  return a;
}

Matrix Ensemble::covariance() const {
  const Matrix a = anomalies();
  return a * a.transpose();
}

double jitter_level(const Matrix& cov) {
  return 1e-8 * cov.trace() / static_cast<double>(cov.rows());
}

}  // namespace vfp
