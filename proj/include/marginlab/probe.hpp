#pragma once

#include "marginlab/net.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace marginlab {

// Thrown by global_gap when the explicit reference point is itself infeasible.
struct InfeasibleReferenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class ProbeVerdict { NOT_LOCAL, NO_WITNESS_FOUND, INVALID_WITNESS };
const char* to_string(ProbeVerdict v);

struct ProbeConfig {
    double tau_imp_rel = 1e-9;  // improvement threshold: 1e-9 * ||theta||^2
    double tau_feas = 1e-9;     // margins may undershoot 1 by at most this
};

struct WitnessReport {
    double eps = 0.0;
    Vec theta_prime;
    double distance = 0.0;     // ||theta' - theta_tilde||
    Vec margins;
    double delta_sq_norm = 0.0;  // ||theta'||^2 - ||theta_tilde||^2
    ProbeVerdict verdict = ProbeVerdict::INVALID_WITNESS;
};

// Check one explicit candidate against theta_tilde: NOT_LOCAL when feasible
// and delta_sq_norm < -tau_imp_rel * ||theta_tilde||^2, INVALID_WITNESS when
// infeasible.
WitnessReport verify_witness(const ArchSpec& arch, const Dataset& data,
                             const Vec& theta_tilde, const Vec& theta_prime,
                             double eps_label, const ProbeConfig& cfg = {});

struct ProbeReport {
    ProbeVerdict verdict = ProbeVerdict::NO_WITNESS_FOUND;
    WitnessReport best;     // meaningful when verdict == NOT_LOCAL
    long samples = 0;
    std::uint64_t seed = 0;
    double eps = 0.0;
};

// Randomised local-optimality probe: first tries the registered witnesses,
// then `budget` uniform perturbations of radius eps, each rescaled onto the
// unit-margin surface and refined by coordinate descent. Deterministic for a
// fixed seed: sample k draws from a stream split off (seed, k).
ProbeReport local_probe(const ArchSpec& arch, const Dataset& data,
                        const Vec& theta_tilde, const std::vector<Vec>& witnesses,
                        double eps, long budget, std::uint64_t seed,
                        const ProbeConfig& cfg = {});

enum class GapVerdict { NOT_GLOBAL, NO_GAP_DETECTED };
const char* to_string(GapVerdict v);

struct GapReport {
    double theta_sq_norm = 0.0;
    double ref_sq_norm = 0.0;
    double ratio = 0.0;  // theta_sq_norm / ref_sq_norm
    GapVerdict verdict = GapVerdict::NO_GAP_DETECTED;
};

// Against a known reference value for ||theta*||^2 (e.g. from a convex solve).
GapReport global_gap(double theta_sq_norm, double ref_sq_norm, double tau_gap = 1e-2);

// Against an explicit candidate point, whose feasibility is verified first.
GapReport global_gap_candidate(const ArchSpec& arch, const Dataset& data,
                               const Vec& theta_tilde, const Vec& candidate,
                               double tau_gap = 1e-2, double tau_feas = 1e-9);

}  // namespace marginlab
