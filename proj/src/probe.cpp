#include "marginlab/probe.hpp"

#include "marginlab/ioutil.hpp"
#include "marginlab/kkt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace marginlab {

const char* to_string(ProbeVerdict v) {
    switch (v) {
        case ProbeVerdict::NOT_LOCAL: return "NOT_LOCAL";
        case ProbeVerdict::NO_WITNESS_FOUND: return "NO_WITNESS_FOUND";
        case ProbeVerdict::INVALID_WITNESS: return "INVALID_WITNESS";
    }
    return "?";
}

const char* to_string(GapVerdict v) {
    switch (v) {
        case GapVerdict::NOT_GLOBAL: return "NOT_GLOBAL";
        case GapVerdict::NO_GAP_DETECTED: return "NO_GAP_DETECTED";
    }
    return "?";
}

WitnessReport verify_witness(const ArchSpec& arch, const Dataset& data,
                             const Vec& theta_tilde, const Vec& theta_prime,
                             double eps_label, const ProbeConfig& cfg) {
    WitnessReport rep;
    rep.eps = eps_label;
    rep.theta_prime = theta_prime;
    rep.distance = (theta_prime - theta_tilde).norm();
    rep.margins = margins(arch, theta_prime, data);
    rep.delta_sq_norm = theta_prime.squaredNorm() - theta_tilde.squaredNorm();
    const double tsq = theta_tilde.squaredNorm();
    const bool feasible = rep.margins.minCoeff() >= 1.0 - cfg.tau_feas;
    const bool improves = rep.delta_sq_norm < -cfg.tau_imp_rel * tsq;
    rep.verdict = !feasible ? ProbeVerdict::INVALID_WITNESS
                 : improves ? ProbeVerdict::NOT_LOCAL
                            : ProbeVerdict::NO_WITNESS_FOUND;
    return rep;
}

namespace {

// Uniform point on the unit sphere in P dims from a dedicated splitmix stream.
Vec sphere_point(std::uint64_t seed, long k, int dim) {
    std::uint64_t state = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(k)));
    Vec v(dim);
    int have = 0;
    double cached = 0.0;
    bool has_cached = false;
    auto next_unit = [&]() {
        state += 0x9e3779b97f4a7c15ull;
        const std::uint64_t bits = splitmix64(state);
        return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
    };
    while (have < dim) {
        if (has_cached) {
            v[have++] = cached;
            has_cached = false;
            continue;
        }
        // Box-Muller
        const double u1 = next_unit(), u2 = next_unit();
        const double r = std::sqrt(-2.0 * std::log(u1));
        v[have++] = r * std::cos(2.0 * std::numbers::pi * u2);
        cached = r * std::sin(2.0 * std::numbers::pi * u2);
        has_cached = true;
    }
    const double n = v.norm();
    return n > 0.0 ? Vec(v / n) : Vec(Vec::Unit(dim, 0));
}

// Project a perturbed point back onto the unit-margin surface by homogeneous
// rescaling; returns false when it no longer separates.
bool renormalise(const ArchSpec& arch, const Dataset& data, Vec& theta) {
    const RescaleResult rs = rescale_to_unit_margin(arch, theta, data);
    if (!rs.ok) return false;
    theta = rs.theta_tilde;
    return true;
}

// Greedy coordinate descent on ||theta||^2 over the unit-margin surface:
// nudge one coordinate, renormalise, keep when the norm drops.
void refine(const ArchSpec& arch, const Dataset& data, Vec& theta, double step) {
    const int P = static_cast<int>(theta.size());
    double cur = theta.squaredNorm();
    for (int sweep = 0; sweep < 8; ++sweep) {
        bool improved = false;
        for (int j = 0; j < P; ++j) {
            for (const double dir : {+1.0, -1.0}) {
                Vec cand = theta;
                cand[j] += dir * step;
                if (!renormalise(arch, data, cand)) continue;
                const double sq = cand.squaredNorm();
                if (sq < cur - 1e-15) {
                    theta = cand;
                    cur = sq;
                    improved = true;
                }
            }
        }
        if (!improved) step *= 0.5;
        if (step < 1e-12) break;
    }
}

}  // namespace

ProbeReport local_probe(const ArchSpec& arch, const Dataset& data,
                        const Vec& theta_tilde, const std::vector<Vec>& witnesses,
                        double eps, long budget, std::uint64_t seed,
                        const ProbeConfig& cfg) {
    ProbeReport rep;
    rep.seed = seed;
    rep.eps = eps;
    rep.best.eps = eps;
    if (!(eps > 0.0)) return rep;  // empty ball, nothing to search
    const double tsq = theta_tilde.squaredNorm();

    // registered witnesses first, in order; the first improver wins
    for (const Vec& w : witnesses) {
        const WitnessReport wr = verify_witness(arch, data, theta_tilde, w, eps, cfg);
        if (wr.verdict == ProbeVerdict::NOT_LOCAL) {
            rep.verdict = ProbeVerdict::NOT_LOCAL;
            rep.best = wr;
            return rep;
        }
    }

    const int P = static_cast<int>(theta_tilde.size());
    for (long k = 0; k < budget; ++k) {
        ++rep.samples;
        const double radius = eps * 0.9;  // leave room for the rescale to move us
        Vec cand = theta_tilde + radius * sphere_point(seed, k, P);
        if (!renormalise(arch, data, cand)) continue;
        if ((cand - theta_tilde).norm() > eps) continue;
        if (cand.squaredNorm() < tsq - 0.5 * cfg.tau_imp_rel * tsq) {
            Vec refined = cand;
            refine(arch, data, refined, eps * 0.05);
            if ((refined - theta_tilde).norm() <= eps &&
                refined.squaredNorm() < cand.squaredNorm())
                cand = refined;
            const WitnessReport wr = verify_witness(arch, data, theta_tilde, cand, eps, cfg);
            if (wr.verdict == ProbeVerdict::NOT_LOCAL) {
                rep.verdict = ProbeVerdict::NOT_LOCAL;
                rep.best = wr;
                return rep;
            }
        }
    }
    return rep;
}

GapReport global_gap(double theta_sq_norm, double ref_sq_norm, double tau_gap) {
    GapReport rep;
    rep.theta_sq_norm = theta_sq_norm;
    rep.ref_sq_norm = ref_sq_norm;
    rep.ratio = ref_sq_norm > 0.0 ? theta_sq_norm / ref_sq_norm
                                  : std::numeric_limits<double>::infinity();
    rep.verdict = rep.ratio > 1.0 + tau_gap ? GapVerdict::NOT_GLOBAL
                                            : GapVerdict::NO_GAP_DETECTED;
    return rep;
}

GapReport global_gap_candidate(const ArchSpec& arch, const Dataset& data,
                               const Vec& theta_tilde, const Vec& candidate,
                               double tau_gap, double tau_feas) {
    const Vec m = margins(arch, candidate, data);
    if (m.minCoeff() < 1.0 - tau_feas)
        throw InfeasibleReferenceError("candidate misses margin 1 by more than tau_feas");
    return global_gap(theta_tilde.squaredNorm(), candidate.squaredNorm(), tau_gap);
}

}  // namespace marginlab
