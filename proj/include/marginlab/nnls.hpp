#pragma once

#include <Eigen/Dense>

namespace marginlab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct NnlsResult {
    Vec x;                   // argmin ||A x - b||, x >= 0
    double residual = 0.0;   // ||A x - b||
    int iterations = 0;
    bool converged = false;
    // max_i of (A^T (b - A x))_i over the zero set; <= tol at optimality
    double dual_violation = 0.0;
};

// Lawson-Hanson active-set non-negative least squares.
NnlsResult nnls(const Mat& A, const Vec& b, double tol = 1e-12, int max_iter = 0);

}  // namespace marginlab
