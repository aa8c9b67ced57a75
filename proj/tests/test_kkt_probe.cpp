#include "marginlab/kkt.hpp"
#include "marginlab/probe.hpp"

#include "marginlab/scenario.hpp"

#include <doctest.h>

#include <cmath>

using namespace marginlab;

namespace {

Vec vec(std::initializer_list<double> v) {
    Vec out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

const Dataset kDiagData = {{vec({1.0, 2.0}), +1}};

Dataset axis_pair() {
    return {{vec({1.0, 0.0}), +1}, {vec({0.0, 1.0}), +1}};
}

}  // namespace

TEST_CASE("rescale puts the minimum margin exactly at one") {
    const ArchSpec arch = diagonal(2, 2, Activation::Linear);
    const RescaleResult r = rescale_to_unit_margin(arch, vec({0.5, 0.0, 0.5, 0.0}), kDiagData);
    REQUIRE(r.ok);
    CHECK(r.scale == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(margins(arch, r.theta_tilde, kDiagData).minCoeff() ==
          doctest::Approx(1.0).epsilon(1e-12));

    const RescaleResult bad =
        rescale_to_unit_margin(arch, vec({0.0, 1.0, 0.0, -1.0}), kDiagData);
    CHECK(!bad.ok);
    CHECK(bad.error == "NotSeparatingDirection");
}

TEST_CASE("certificate accepts the diagonal optimum with unit multiplier") {
    const ArchSpec arch = diagonal(2, 2, Activation::Linear);
    const KktCertificate c = kkt_certificate(arch, vec({1.0, 0.0, 1.0, 0.0}), kDiagData);
    CHECK(c.verdict == KktVerdict::KKT);
    REQUIRE(c.active.size() == 1);
    CHECK(c.active[0] == 0);
    CHECK(c.lambda[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(c.stationarity_abs <= 1e-10);
    CHECK(c.complementarity <= 1e-10);
    CHECK(!c.kink_contact);
}

TEST_CASE("certificate flags infeasible points") {
    const ArchSpec arch = diagonal(2, 2, Activation::Linear);
    const KktCertificate c = kkt_certificate(arch, vec({0.5, 0.0, 0.5, 0.0}), kDiagData);
    CHECK(c.verdict == KktVerdict::INFEASIBLE);
}

TEST_CASE("certificate rejects a feasible non-stationary point") {
    const ArchSpec arch = diagonal(2, 2, Activation::Linear);
    const RescaleResult r = rescale_to_unit_margin(arch, vec({1.0, 1.0, 1.0, 1.0}), kDiagData);
    REQUIRE(r.ok);
    const KktCertificate c = kkt_certificate(arch, r.theta_tilde, kDiagData);
    CHECK(c.verdict == KktVerdict::NOT_KKT);
    CHECK(c.stationarity_rel > 0.1);
}

TEST_CASE("certificate reports kink contact at a dead-unit optimum") {
    const ArchSpec arch = fully_connected({2, 2, 1}, Activation::ReLU);
    const Dataset data = {{vec({1.0, 0.25}), +1}, {vec({-1.0, 0.25}), +1}};
    const Vec theta = vec({0.0, 2.0, 0.0, 0.0, 2.0, 0.0});
    const KktCertificate c = kkt_certificate(arch, theta, data);
    CHECK(c.verdict == KktVerdict::KKT);
    CHECK(c.kink_contact);
    CHECK(c.active.size() == 2);
    CHECK(c.lambda[0] == doctest::Approx(2.0).epsilon(1e-8));
    CHECK(c.lambda[1] == doctest::Approx(2.0).epsilon(1e-8));
}

TEST_CASE("certificate does not depend on dataset order") {
    const ArchSpec arch = fully_connected({2, 2, 1}, Activation::ReLU);
    const Dataset fwd = {{vec({1.0, 0.25}), +1}, {vec({-1.0, 0.25}), +1}};
    const Dataset rev = {fwd[1], fwd[0]};
    const Vec theta = vec({0.0, 2.0, 0.0, 0.0, 2.0, 0.0});
    const KktCertificate a = kkt_certificate(arch, theta, fwd);
    const KktCertificate b = kkt_certificate(arch, theta, rev);
    CHECK(a.verdict == b.verdict);
    CHECK(std::abs(a.stationarity_abs - b.stationarity_abs) <= 1e-12);
    CHECK(std::abs(a.lambda[0] - b.lambda[1]) <= 1e-12);
    CHECK(std::abs(a.lambda[1] - b.lambda[0]) <= 1e-12);
}

TEST_CASE("witness verification distinguishes the three outcomes") {
    const ArchSpec arch = diagonal(2, 2, Activation::Linear);
    const Vec tilde = vec({1.0, 0.0, 1.0, 0.0});

    const WitnessReport same = verify_witness(arch, kDiagData, tilde, tilde, 0.0);
    CHECK(same.verdict == ProbeVerdict::NO_WITNESS_FOUND);
    CHECK(same.delta_sq_norm == doctest::Approx(0.0));

    const WitnessReport infeas =
        verify_witness(arch, kDiagData, tilde, vec({0.5, 0.0, 0.5, 0.0}), 0.0);
    CHECK(infeas.verdict == ProbeVerdict::INVALID_WITNESS);

    const double a = std::sqrt(0.9), b = std::sqrt(0.05);
    const WitnessReport better =
        verify_witness(arch, kDiagData, tilde, vec({a, b, a, b}), 0.1);
    CHECK(better.verdict == ProbeVerdict::NOT_LOCAL);
    CHECK(better.delta_sq_norm == doctest::Approx(-0.1).epsilon(1e-9));
    CHECK(better.margins.minCoeff() >= 1.0 - 1e-12);
    CHECK(better.distance > 0.0);
}

TEST_CASE("probe with zero radius returns immediately") {
    const ArchSpec arch = diagonal(2, 2, Activation::Linear);
    const ProbeReport r =
        local_probe(arch, kDiagData, vec({1.0, 0.0, 1.0, 0.0}), {}, 0.0, 100, 7);
    CHECK(r.verdict == ProbeVerdict::NO_WITNESS_FOUND);
    CHECK(r.samples == 0);
}

TEST_CASE("probe tries registered witnesses before sampling") {
    const ArchSpec arch = diagonal(2, 2, Activation::Linear);
    const double a = std::sqrt(0.9), b = std::sqrt(0.05);
    const ProbeReport r = local_probe(arch, kDiagData, vec({1.0, 0.0, 1.0, 0.0}),
                                      {vec({a, b, a, b})}, 0.1, 1000, 7);
    CHECK(r.verdict == ProbeVerdict::NOT_LOCAL);
    CHECK(r.samples == 0);
    CHECK(r.best.delta_sq_norm < 0.0);
}

TEST_CASE("probe is deterministic for a fixed seed") {
    const ArchSpec arch = diagonal(2, 2, Activation::Linear);
    const Vec tilde = vec({1.0, 0.0, 1.0, 0.0});
    const ProbeReport r1 = local_probe(arch, kDiagData, tilde, {}, 0.3, 400, 42);
    const ProbeReport r2 = local_probe(arch, kDiagData, tilde, {}, 0.3, 400, 42);
    CHECK(r1.verdict == r2.verdict);
    CHECK(r1.samples == r2.samples);
    CHECK(r1.best.delta_sq_norm == r2.best.delta_sq_norm);
    if (r1.best.theta_prime.size() == r2.best.theta_prime.size() &&
        r1.best.theta_prime.size() > 0)
        CHECK((r1.best.theta_prime - r2.best.theta_prime).norm() == 0.0);
}

TEST_CASE("probe does not invent improvements at a global optimum") {
    const ArchSpec arch = diagonal(2, 2, Activation::Linear);
    const ProbeReport r =
        local_probe(arch, axis_pair(), vec({1.0, 1.0, 1.0, 1.0}), {}, 0.1, 2000, 3);
    CHECK(r.verdict == ProbeVerdict::NO_WITNESS_FOUND);
    CHECK(r.samples == 2000);
}

TEST_CASE("norm-gap verdict switches at the threshold") {
    const GapReport wide = global_gap(1.02, 1.0);
    CHECK(wide.verdict == GapVerdict::NOT_GLOBAL);
    CHECK(wide.ratio == doctest::Approx(1.02));
    CHECK(global_gap(1.005, 1.0).verdict == GapVerdict::NO_GAP_DETECTED);
}

TEST_CASE("gap against an infeasible candidate throws") {
    const ArchSpec arch = diagonal(2, 2, Activation::Linear);
    CHECK_THROWS_AS(global_gap_candidate(arch, kDiagData, vec({1.0, 0.0, 1.0, 0.0}),
                                         vec({0.5, 0.0, 0.5, 0.0})),
                    InfeasibleReferenceError);
}
