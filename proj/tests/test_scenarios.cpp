#include "marginlab/scenario.hpp"

#include "marginlab/ioutil.hpp"
#include "marginlab/jsonio.hpp"
#include "marginlab/probe.hpp"

#include <doctest.h>

#include <cstdio>
#include <fstream>

using namespace marginlab;

TEST_CASE("catalog lists at least ten scenarios and all of them build") {
    const auto ids = catalog_ids();
    CHECK(ids.size() >= 10);
    for (const auto& id : ids) {
        const Scenario sc = build_scenario(id);
        CHECK(sc.id == id);
        CHECK(!sc.summary.empty());
        CHECK(sc.init.size() == sc.arch.param_count());
        CHECK(!sc.data.empty());
    }
}

TEST_CASE("every closed-form witness is feasible and cheaper than the limit") {
    for (const auto& id : catalog_ids()) {
        const Scenario sc = build_scenario(id);
        INFO("scenario ", id);
        if (sc.witness_form.empty()) {
            CHECK_THROWS_AS(scenario_witness(sc, 0.1), SpecError);
            continue;
        }
        REQUIRE(sc.eps_hi > sc.eps_lo);
        REQUIRE(sc.expected_theta.has_value());
        for (int k = 1; k <= 10; ++k) {
            const double eps = sc.eps_lo + k * (sc.eps_hi - sc.eps_lo) / 11.0;
            const Vec w = scenario_witness(sc, eps);
            const WitnessReport rep =
                verify_witness(sc.arch, sc.data, *sc.expected_theta, w, eps);
            INFO("eps ", eps);
            CHECK(rep.verdict == ProbeVerdict::NOT_LOCAL);
            CHECK(rep.margins.minCoeff() >= 1.0 - 1e-12);
            CHECK(rep.delta_sq_norm < 0.0);
        }
        CHECK_THROWS_AS(scenario_witness(sc, sc.eps_lo), EpsOutOfRangeError);
        CHECK_THROWS_AS(scenario_witness(sc, sc.eps_hi), EpsOutOfRangeError);
    }
}

TEST_CASE("pinned limit points sit exactly on the unit-margin surface") {
    for (const auto& id : catalog_ids()) {
        const Scenario sc = build_scenario(id);
        if (!sc.expected_theta.has_value()) continue;
        INFO("scenario ", id);
        const Vec m = margins(sc.arch, *sc.expected_theta, sc.data);
        CHECK(m.minCoeff() >= 1.0 - 1e-10);
        CHECK(m.minCoeff() <= 1.0 + 1e-10);
        if (sc.expected_sq_norm)
            CHECK(sc.expected_theta->squaredNorm() ==
                  doctest::Approx(*sc.expected_sq_norm).epsilon(1e-10));
    }
}

TEST_CASE("the two-point family at b = 1/4 is the catalog scenario") {
    const Scenario fam = two_point_relu_scenario(0.25);
    const Scenario cat = build_scenario("FC_RELU_D2");
    CHECK(scenario_to_json(fam) == scenario_to_json(cat));
}

TEST_CASE("qualifying start frequency is deterministic and nontrivial") {
    const Scenario sc = build_scenario("DIAG_D2");
    const double f1 = qualifying_init_frequency(sc, 2000, 99);
    const double f2 = qualifying_init_frequency(sc, 2000, 99);
    CHECK(f1 == f2);
    CHECK(f1 > 0.0);
    CHECK(f1 < 1.0);
    MESSAGE("DIAG_D2 qualifying frequency over 2000 draws: ", f1);

    const Scenario relu = build_scenario("FC_RELU_D2");
    const double g = qualifying_init_frequency(relu, 5000, 99);
    CHECK(g > 0.0);
    CHECK(g < 1.0);
    MESSAGE("FC_RELU_D2 qualifying frequency over 5000 draws: ", g);
}

TEST_CASE("build overrides reach the witness radius and the flow budget") {
    BuildOverrides ov;
    ov.eps = 0.2;
    ov.s_budget = 123.0;
    const Scenario sc = build_scenario("DIAG_D2", ov);
    CHECK(sc.eps_default == doctest::Approx(0.2));
    CHECK(sc.probe_eps == doctest::Approx(0.2));
    CHECK(sc.flow.s_budget == doctest::Approx(123.0));
}

TEST_CASE("architecture, dataset and parameter JSON round-trips") {
    for (const auto& id : catalog_ids()) {
        const Scenario sc = build_scenario(id);
        INFO("scenario ", id);
        const ArchSpec arch2 = arch_from_json(arch_to_json(sc.arch));
        CHECK(arch2.dims == sc.arch.dims);
        CHECK(arch2.activation == sc.arch.activation);
        CHECK(arch2.param_count() == sc.arch.param_count());

        const Dataset data2 = dataset_from_json(dataset_to_json(sc.data));
        REQUIRE(data2.size() == sc.data.size());
        for (size_t i = 0; i < sc.data.size(); ++i) {
            CHECK((data2[i].x - sc.data[i].x).norm() == 0.0);
            CHECK(data2[i].y == sc.data[i].y);
        }

        const Vec init2 = theta_from_json(sc.arch, theta_to_json(sc.arch, sc.init));
        CHECK((init2 - sc.init).norm() == 0.0);

        const Scenario sc2 = scenario_from_json(scenario_to_json(sc));
        CHECK(scenario_to_json(sc2) == scenario_to_json(sc));
    }
}

TEST_CASE("scenarios load from file and bad input is rejected") {
    const std::string path = "scenario_roundtrip_test.json";
    {
        std::ofstream out(path);
        out << scenario_to_json(build_scenario("DIAG_D2")).dump(2);
    }
    const Scenario sc = load_scenario(path);
    CHECK(sc.id == "DIAG_D2");
    std::remove(path.c_str());

    CHECK_THROWS_AS(load_scenario("NO_SUCH_SCENARIO"), SpecError);

    const std::string bad = "scenario_malformed_test.json";
    {
        std::ofstream out(bad);
        out << "{ not json";
    }
    CHECK_THROWS_AS(load_scenario(bad), SpecError);
    std::remove(bad.c_str());
}

TEST_CASE("a full run of the diagonal scenario passes and serializes stably") {
    const Scenario sc = build_scenario("DIAG_D2");
    const RunReport rep = run_scenario(sc, LossKind::Exponential);
    CHECK(rep.pass);
    CHECK(rep.flow_converged);
    CHECK(rep.verdicts_match);
    CHECK(rep.kkt.verdict == KktVerdict::KKT);

    const json j1 = run_report_to_json(rep);
    const json j2 = run_report_to_json(rep);
    CHECK(j1.dump(2) == j2.dump(2));
    CHECK(j1.dump().find("wall") == std::string::npos);
    CHECK(j1.contains("checks"));
    CHECK(j1["pass"].get<bool>());
}
