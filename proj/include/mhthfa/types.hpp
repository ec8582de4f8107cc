#pragma once

#include <Eigen/Dense>

namespace mhthfa {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using IntVector = Eigen::VectorXi;
using Index = Eigen::Index;

}  // namespace mhthfa
