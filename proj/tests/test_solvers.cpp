#include "marginlab/convex.hpp"

#include "marginlab/ioutil.hpp"
#include "marginlab/nnls.hpp"
#include "oracles.hpp"

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

double unit_from(std::uint64_t& ctr, std::uint64_t seed) {
    const std::uint64_t bits = splitmix64(seed ^ splitmix64(++ctr));
    return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

void random_instance(std::uint64_t seed, int n, int d, std::vector<Vec>& xs,
                     std::vector<int>& ys) {
    xs.clear();
    ys.clear();
    std::uint64_t ctr = 0;
    for (int i = 0; i < n; ++i) {
        Vec x(d);
        for (int k = 0; k < d; ++k) x[k] = -2.0 + 4.0 * unit_from(ctr, seed);
        xs.push_back(x);
        ys.push_back(unit_from(ctr, seed) < 0.5 ? -1 : +1);
    }
}

}  // namespace

TEST_CASE("nnls matches exhaustive support enumeration") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        std::uint64_t ctr = 0;
        const int m = 4, n = 5;
        Mat A(m, n);
        Vec b(m);
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) A(i, j) = -1.0 + 2.0 * unit_from(ctr, seed);
            b[i] = -1.0 + 2.0 * unit_from(ctr, seed);
        }
        const NnlsResult r = nnls(A, b);
        CHECK(r.x.minCoeff() >= 0.0);
        CHECK(r.dual_violation <= 1e-8);

        // oracle: best nonnegative least squares over all supports
        double best = b.squaredNorm();
        for (unsigned mask = 1; mask < (1u << n); ++mask) {
            std::vector<int> idx;
            for (int j = 0; j < n; ++j)
                if (mask & (1u << j)) idx.push_back(j);
            Mat As(m, static_cast<Eigen::Index>(idx.size()));
            for (size_t c = 0; c < idx.size(); ++c) As.col(static_cast<Eigen::Index>(c)) =
                A.col(idx[c]);
            const Vec xs = As.colPivHouseholderQr().solve(b);
            if (xs.minCoeff() < -1e-12) continue;
            best = std::min(best, (As * xs - b).squaredNorm());
        }
        CHECK((A * r.x - b).squaredNorm() <= best + 1e-9);
    }
}

TEST_CASE("max-margin QP matches the enumeration oracle on seeded instances") {
    int checked = 0;
    for (std::uint64_t seed = 100; checked < 20; ++seed) {
        std::vector<Vec> xs;
        std::vector<int> ys;
        random_instance(seed, 1 + static_cast<int>(seed % 4), 1 + static_cast<int>(seed % 3),
                        xs, ys);
        const QpResult impl = solve_linear_maxmargin(xs, ys);
        const oracles::QpOracle ora = oracles::qp_by_enumeration(xs, ys);
        CHECK((impl.status == SolveStatus::Infeasible) == !ora.feasible);
        CHECK(oracles::feasible_by_fourier_motzkin(xs, ys) == ora.feasible);
        if (ora.feasible) {
            CHECK(std::abs(impl.objective - ora.objective) <= 1e-6);
            CHECK(ora.duality_gap <= 1e-9);
            CHECK(impl.kkt_residual <= 1e-8);
        }
        ++checked;
    }
}

TEST_CASE("QP on a single sample is the scaled data point") {
    const QpResult r = solve_linear_maxmargin({vec({1.0, 2.0})}, {+1});
    REQUIRE(r.status == SolveStatus::Optimal);
    CHECK(r.u[0] == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(r.u[1] == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(r.objective == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("l1 max margin matches dual vertex enumeration, zero gap") {
    int checked = 0;
    for (std::uint64_t seed = 300; checked < 20; ++seed) {
        std::vector<Vec> xs;
        std::vector<int> ys;
        random_instance(seed, 1 + static_cast<int>(seed % 4), 1 + static_cast<int>(seed % 3),
                        xs, ys);
        const L1Result impl = solve_l1_maxmargin(xs, ys);
        const oracles::L1Oracle ora = oracles::l1_by_vertex_enumeration(xs, ys);
        CHECK((impl.status == SolveStatus::Infeasible) == !ora.feasible);
        if (ora.feasible) {
            CHECK(std::abs(impl.objective - ora.objective) <= 1e-6);
            CHECK(std::abs(ora.objective - ora.dual_value) <= 1e-8);
        }
        ++checked;
    }
}

TEST_CASE("l1 on ((1,2),+1) picks the cheap coordinate") {
    const L1Result r = solve_l1_maxmargin({vec({1.0, 2.0})}, {+1});
    REQUIRE(r.status == SolveStatus::Optimal);
    CHECK(r.beta[0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r.beta[1] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(r.objective == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("group solver matches IRLS oracle on depth-2 instances") {
    int checked = 0;
    for (std::uint64_t seed = 500; checked < 20; ++seed) {
        std::vector<Vec> xs;
        std::vector<int> ys;
        const int d = 2 + static_cast<int>(seed % 2);
        random_instance(seed, 1 + static_cast<int>(seed % 4), d, xs, ys);
        Dataset data;
        for (size_t i = 0; i < xs.size(); ++i) data.push_back({xs[i], ys[i]});
        const ArchSpec arch = fully_connected({d, 2, 1}, Activation::Linear);
        const GroupProblem gp = group_problem_depth2(arch, data);
        const GroupResult impl = solve_group_maxmargin(gp);
        const oracles::GroupOracle ora = oracles::group_by_irls(gp);
        CHECK((impl.status == SolveStatus::Infeasible) == !ora.feasible);
        if (ora.feasible) {
            REQUIRE(impl.status == SolveStatus::Optimal);
            CHECK(impl.certified);
            CHECK(std::abs(impl.objective - ora.objective) <=
                  1e-6 * std::max(1.0, ora.objective));
        }
        ++checked;
    }
}

TEST_CASE("group problem of a diagonal net reduces to l1") {
    for (std::uint64_t seed = 700; seed < 706; ++seed) {
        std::vector<Vec> xs;
        std::vector<int> ys;
        random_instance(seed, 3, 2, xs, ys);
        Dataset data;
        for (size_t i = 0; i < xs.size(); ++i) data.push_back({xs[i], ys[i]});
        const ArchSpec arch = diagonal(2, 2, Activation::Linear);
        const GroupProblem gp = group_problem_depth2(arch, data);
        const GroupResult g = solve_group_maxmargin(gp);
        const L1Result l1 = solve_l1_maxmargin(xs, ys);
        CHECK((g.status == SolveStatus::Infeasible) ==
              (l1.status == SolveStatus::Infeasible));
        if (l1.status == SolveStatus::Optimal && g.status == SolveStatus::Optimal)
            CHECK(std::abs(g.objective - l1.objective) <= 1e-8 * std::max(1.0, l1.objective));
    }
}

TEST_CASE("realized group objective obeys the norm bound") {
    const ArchSpec arch = fully_connected({2, 2, 1}, Activation::Linear);
    std::uint64_t ctr = 0;
    for (std::uint64_t seed = 900; seed < 910; ++seed) {
        Vec th(arch.param_count());
        for (Eigen::Index i = 0; i < th.size(); ++i)
            th[i] = -1.0 + 2.0 * unit_from(ctr, seed);
        const double g = realized_group_objective(arch, th);
        CHECK(g <= 0.5 * th.squaredNorm() + 1e-12);
    }
    // equality exactly at balanced parameters:
    // rows w_1 = (0.6, 0.8) with v_1 = 1, w_2 = (0, 2) with v_2 = 2
    const Vec bal = vec({0.6, 0.8, 0.0, 2.0, 1.0, 2.0});
    const double g = realized_group_objective(arch, bal);
    CHECK(g == doctest::Approx(1.0 * 1.0 + 2.0 * 2.0).epsilon(1e-12));
    CHECK(0.5 * bal.squaredNorm() == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("infeasibility is detected exactly") {
    // same point with both labels: 0 is in the convex hull of {y_i x_i}
    const std::vector<Vec> xs = {vec({1.0, 0.0}), vec({1.0, 0.0})};
    const std::vector<int> ys = {+1, -1};
    CHECK(linear_constraints_infeasible(xs, ys));
    CHECK(!oracles::feasible_by_fourier_motzkin(xs, ys));
    CHECK(solve_linear_maxmargin(xs, ys).status == SolveStatus::Infeasible);
    CHECK(solve_l1_maxmargin(xs, ys).status == SolveStatus::Infeasible);

    // zero sample: the constraint 0 >= 1 can never hold
    CHECK(linear_constraints_infeasible({vec({0.0, 0.0})}, {+1}));
    CHECK(!oracles::feasible_by_fourier_motzkin({vec({0.0, 0.0})}, {+1}));

    CHECK(!linear_constraints_infeasible({vec({1.0, 0.0})}, {+1}));
}

TEST_CASE("per-layer QP freezes the others and respects kinks") {
    // diagonal depth-2 on x = (1,2): at theta = ((1,0),(1,0)) layer problems
    // see effective features (1,0), so the current layer is already optimal
    const ArchSpec dg = diagonal(2, 2, Activation::Linear);
    const Vec th = vec({1.0, 0.0, 1.0, 0.0});
    const Dataset data = {{vec({1.0, 2.0}), +1}};
    for (int l = 0; l < 2; ++l) {
        const PerLayerQpResult r = solve_per_layer_qp(dg, th, data, l);
        REQUIRE(r.status == SolveStatus::Optimal);
        CHECK((r.u - vec({1.0, 0.0})).lpNorm<Eigen::Infinity>() <= 1e-9);
    }

    // ReLU net whose hidden pre-activations vanish at theta: layer 1 cannot be
    // linearized, but the output layer sits after every kink and still solves
    const ArchSpec fc = fully_connected({4, 4, 1}, Activation::ReLU);
    Vec id(20);
    id.setZero();
    for (int j = 0; j < 4; ++j) id[j * 4 + j] = 1.0;
    for (int j = 0; j < 4; ++j) id[16 + j] = 1.0;
    Dataset axes;
    for (int j = 0; j < 4; ++j) {
        Vec x = Vec::Zero(4);
        x[j] = 1.0;
        axes.push_back({x, +1});
    }
    CHECK_THROWS_AS(solve_per_layer_qp(fc, id, axes, 0), ZeroPreactivationError);
    const PerLayerQpResult out = solve_per_layer_qp(fc, id, axes, 1);
    REQUIRE(out.status == SolveStatus::Optimal);
    CHECK((out.u - Vec::Ones(4)).lpNorm<Eigen::Infinity>() <= 1e-9);
}
