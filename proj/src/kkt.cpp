#include "marginlab/kkt.hpp"

#include "marginlab/nnls.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace marginlab {

const char* to_string(KktVerdict v) {
    switch (v) {
        case KktVerdict::KKT: return "KKT";
        case KktVerdict::NOT_KKT: return "NOT_KKT";
        case KktVerdict::INFEASIBLE: return "INFEASIBLE";
    }
    return "?";
}

// Scale a separating direction so its smallest margin is exactly 1. For an
// L-homogeneous net, margins scale as s^L, so s = min_margin^(-1/L).
RescaleResult rescale_to_unit_margin(const ArchSpec& arch, const Vec& direction,
                                     const Dataset& data) {
    RescaleResult res;
    const Vec m = margins(arch, direction, data);
    res.min_margin_direction = m.minCoeff();
    if (!(res.min_margin_direction > 0.0)) {
        res.ok = false;
        res.error = "NotSeparatingDirection";
        return res;
    }
    const double L = static_cast<double>(homogeneity_degree(arch));
    res.scale = std::pow(res.min_margin_direction, -1.0 / L);
    res.theta_tilde = res.scale * direction;
    res.ok = true;
    return res;
}

// Certify first-order optimality of theta against
//   min 1/2 ||theta||^2  s.t.  y_i Phi(theta; x_i) >= 1:
// theta must lie in the nonnegative cone of the active constraints' Clarke
// gradients. The multiplier fit is a nonnegative least squares problem.
KktCertificate kkt_certificate(const ArchSpec& arch, const Vec& theta_tilde,
                               const Dataset& data, const KktConfig& cfg) {
    KktCertificate cert;
    cert.tolerances = cfg;
    cert.theta_tilde = theta_tilde;
    cert.scale = 1.0;
    cert.margins = margins(arch, theta_tilde, data);
    const int n = static_cast<int>(data.size());
    cert.lambda = Vec::Zero(n);

    if (cert.margins.minCoeff() < 1.0 - cfg.tau_feas) {
        cert.verdict = KktVerdict::INFEASIBLE;
        return cert;
    }

    std::vector<int> act;
    for (int i = 0; i < n; ++i)
        if (cert.margins[i] <= 1.0 + cfg.tau_act) act.push_back(i);
    cert.active = act;

    cert.kink_contact = false;
    if (arch.activation == Activation::ReLU) {
        const ActivationPattern pat = activation_pattern(arch, theta_tilde, data);
        for (int i : act)
            for (const auto& layer : pat.sign[static_cast<size_t>(i)])
                for (int sgn : layer)
                    if (sgn == 0) cert.kink_contact = true;
    }

    const double tnorm = theta_tilde.norm();
    if (act.empty()) {
        cert.stationarity_abs = tnorm;
        cert.stationarity_rel = tnorm > 0.0 ? 1.0 : 0.0;
        cert.complementarity = 0.0;
        cert.verdict = KktVerdict::NOT_KKT;
        return cert;
    }

    Mat G(theta_tilde.size(), static_cast<Eigen::Index>(act.size()));
    for (size_t k = 0; k < act.size(); ++k) {
        const Sample& s = data[static_cast<size_t>(act[k])];
        G.col(static_cast<Eigen::Index>(k)) = s.y * grad(arch, theta_tilde, s.x);
    }

    const NnlsResult fit = nnls(G, theta_tilde);
    for (size_t k = 0; k < act.size(); ++k)
        cert.lambda[act[k]] = fit.x[static_cast<Eigen::Index>(k)];

    cert.stationarity_abs = fit.residual;
    cert.stationarity_rel = tnorm > 0.0 ? fit.residual / tnorm : fit.residual;
    cert.complementarity = 0.0;
    for (int i : act)
        cert.complementarity = std::max(
            cert.complementarity, cert.lambda[i] * std::abs(cert.margins[i] - 1.0));

    const bool stat_ok = cert.stationarity_rel <= cfg.tau_stat;
    const bool comp_ok = cert.complementarity <= cfg.tau_comp;
    cert.verdict = (stat_ok && comp_ok) ? KktVerdict::KKT : KktVerdict::NOT_KKT;
    return cert;
}

}  // namespace marginlab
