#pragma once

#include "marginlab/net.hpp"

#include <string>
#include <vector>

namespace marginlab {

// Scale the given direction so that the minimum margin is exactly 1:
// s = min_margin(direction)^(-1/L). Fails when the direction does not
// separate the data (min margin <= 0).
struct RescaleResult {
    bool ok = false;
    std::string error;  // "NotSeparatingDirection" when min margin <= 0
    Vec theta_tilde;
    double scale = 0.0;
    double min_margin_direction = 0.0;
};
RescaleResult rescale_to_unit_margin(const ArchSpec& arch, const Vec& direction,
                                     const Dataset& data);

struct KktConfig {
    double tau_act = 1e-4;    // |margin - 1| below this marks a constraint active
    double tau_feas = 1e-8;   // margins may undershoot 1 by at most this
    double tau_stat = 1e-3;   // stationarity residual / ||theta||
    double tau_comp = 1e-6;   // max lambda_i |margin_i - 1|
};

enum class KktVerdict { KKT, NOT_KKT, INFEASIBLE };
const char* to_string(KktVerdict v);

// First-order certificate for min 1/2 ||theta||^2 s.t. y_i Phi(theta; x_i) >= 1:
// multipliers are fit by non-negative least squares over the active-constraint
// gradients (Clarke selection), so the certificate is selection-based; the
// kink_contact flag records whether any active example touches a ReLU kink,
// in which case the stationarity residual is relative to that selection.
struct KktCertificate {
    Vec theta_tilde;
    double scale = 1.0;  // scale used to reach unit margin (1 if given directly)
    Vec margins;
    std::vector<int> active;  // indices with |margin - 1| <= tau_act
    Vec lambda;               // size n, zero off the active set
    double stationarity_abs = 0.0;  // || theta - sum lambda_i y_i dPhi_i ||
    double stationarity_rel = 0.0;  // stationarity_abs / ||theta||
    double complementarity = 0.0;   // max_i lambda_i |margin_i - 1|
    bool kink_contact = false;
    KktVerdict verdict = KktVerdict::NOT_KKT;
    KktConfig tolerances;
};

KktCertificate kkt_certificate(const ArchSpec& arch, const Vec& theta_tilde,
                               const Dataset& data, const KktConfig& cfg = {});

}  // namespace marginlab
