#include "marginlab/nnls.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace marginlab {

// Lawson-Hanson active set method for min ||A x - b|| s.t. x >= 0.
NnlsResult nnls(const Mat& A, const Vec& b, double tol, int max_iter) {
    const int n = static_cast<int>(A.cols());
    NnlsResult res;
    res.x = Vec::Zero(n);
    if (max_iter <= 0) max_iter = 3 * n + 30;

    std::vector<bool> passive(static_cast<size_t>(n), false);
    Vec x = Vec::Zero(n);

    auto solve_passive = [&](Vec& z) {
        std::vector<int> idx;
        for (int j = 0; j < n; ++j)
            if (passive[static_cast<size_t>(j)]) idx.push_back(j);
        z = Vec::Zero(n);
        if (idx.empty()) return;
        Mat Ap(A.rows(), static_cast<Eigen::Index>(idx.size()));
        for (size_t k = 0; k < idx.size(); ++k) Ap.col(static_cast<Eigen::Index>(k)) = A.col(idx[k]);
        const Vec zp = Ap.colPivHouseholderQr().solve(b);
        for (size_t k = 0; k < idx.size(); ++k) z[idx[k]] = zp[static_cast<Eigen::Index>(k)];
    };

    for (int it = 0; it < max_iter; ++it) {
        ++res.iterations;
        const Vec w = A.transpose() * (b - A * x);
        int best = -1;
        double wbest = tol;
        for (int j = 0; j < n; ++j) {
            if (passive[static_cast<size_t>(j)]) continue;
            if (w[j] > wbest) {
                wbest = w[j];
                best = j;
            }
        }
        if (best < 0) {
            res.converged = true;
            break;
        }
        passive[static_cast<size_t>(best)] = true;

        Vec z;
        solve_passive(z);
        int inner = 0;
        while (true) {
            double zmin = std::numeric_limits<double>::infinity();
            for (int j = 0; j < n; ++j)
                if (passive[static_cast<size_t>(j)]) zmin = std::min(zmin, z[j]);
            if (zmin > 0.0) break;
            double alpha = std::numeric_limits<double>::infinity();
            for (int j = 0; j < n; ++j) {
                if (!passive[static_cast<size_t>(j)] || z[j] > 0.0) continue;
                const double denom = x[j] - z[j];
                if (denom > 0.0) alpha = std::min(alpha, x[j] / denom);
            }
            if (!std::isfinite(alpha)) alpha = 0.0;
            x += alpha * (z - x);
            for (int j = 0; j < n; ++j)
                if (passive[static_cast<size_t>(j)] && x[j] <= tol) {
                    passive[static_cast<size_t>(j)] = false;
                    x[j] = 0.0;
                }
            solve_passive(z);
            if (++inner > 2 * n + 10) break;
        }
        x = z;
        for (int j = 0; j < n; ++j)
            if (x[j] < 0.0) x[j] = 0.0;
    }

    res.x = x;
    res.residual = (A * x - b).norm();
    const Vec w = A.transpose() * (b - A * x);
    double viol = 0.0;
    for (int j = 0; j < n; ++j) {
        if (passive[static_cast<size_t>(j)] || x[j] > 0.0)
            viol = std::max(viol, std::abs(w[j]));  // stationarity on the support
        else
            viol = std::max(viol, std::max(0.0, w[j]));  // sign condition off it
    }
    res.dual_violation = viol;
    return res;
}

}  // namespace marginlab
