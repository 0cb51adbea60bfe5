#pragma once

#include <Eigen/Dense>
#include <cstdint>

namespace dgseg {

using Scalar = double;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Index = Eigen::Index;
using MatI = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>;

inline constexpr int kIgnoreLabel = 255;

}  // namespace dgseg
