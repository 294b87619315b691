#pragma once

#include <Eigen/Dense>

namespace vfp {

using StateVector = Eigen::VectorXd;
using ObsVector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

}  // namespace vfp
