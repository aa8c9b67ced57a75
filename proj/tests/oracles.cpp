#include "oracles.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace oracles {

using marginlab::Mat;

Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& x, double h) {
    Vec g(x.size());
    Vec xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double hi = h * std::max(1.0, std::abs(x[i]));
        xp[i] = x[i] + hi;
        const double fp = f(xp);
        xp[i] = x[i] - hi;
        const double fm = f(xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * hi);
    }
    return g;
}

namespace {

// Signed rows z_i = y_i x_i.
std::vector<Vec> signed_rows(const std::vector<Vec>& xs, const std::vector<int>& ys) {
    std::vector<Vec> z;
    for (size_t i = 0; i < xs.size(); ++i) z.push_back(ys[i] > 0 ? xs[i] : Vec(-xs[i]));
    return z;
}

void for_each_subset(int n, const std::function<void(const std::vector<int>&)>& fn) {
    std::vector<int> s;
    for (unsigned mask = 1; mask < (1u << n); ++mask) {
        s.clear();
        for (int i = 0; i < n; ++i)
            if (mask & (1u << i)) s.push_back(i);
        fn(s);
    }
}

}  // namespace

QpOracle qp_by_enumeration(const std::vector<Vec>& xs, const std::vector<int>& ys) {
    QpOracle best;
    if (!feasible_by_fourier_motzkin(xs, ys)) return best;
    const std::vector<Vec> z = signed_rows(xs, ys);
    const int n = static_cast<int>(z.size());
    const Eigen::Index d = z[0].size();
    best.objective = std::numeric_limits<double>::infinity();

    for_each_subset(n, [&](const std::vector<int>& S) {
        Mat Z(static_cast<Eigen::Index>(S.size()), d);
        for (size_t r = 0; r < S.size(); ++r) Z.row(static_cast<Eigen::Index>(r)) =
            z[static_cast<size_t>(S[r])].transpose();
        // least-norm point with <u, z_i> = 1 on S: u = Z^T (Z Z^T)^+ 1
        const Mat G = Z * Z.transpose();
        const Vec ones = Vec::Ones(Z.rows());
        const Vec lam = G.completeOrthogonalDecomposition().solve(ones);
        if ((G * lam - ones).lpNorm<Eigen::Infinity>() > 1e-9) return;  // inconsistent
        if (lam.minCoeff() < -1e-9) return;                             // wrong multiplier sign
        const Vec u = Z.transpose() * lam;
        for (const Vec& zi : z)
            if (zi.dot(u) < 1.0 - 1e-9) return;  // primal infeasible
        const double obj = 0.5 * u.squaredNorm();
        if (obj < best.objective) {
            best.feasible = true;
            best.u = u;
            best.objective = obj;
            // strong duality: dual value sum(lam) - 1/2 lam^T G lam == obj
            best.duality_gap = std::abs(lam.sum() - 0.5 * lam.dot(G * lam) - obj);
        }
    });
    return best;
}

L1Oracle l1_by_vertex_enumeration(const std::vector<Vec>& xs, const std::vector<int>& ys) {
    L1Oracle best;
    if (!feasible_by_fourier_motzkin(xs, ys)) return best;
    const std::vector<Vec> z = signed_rows(xs, ys);
    const int n = static_cast<int>(z.size());
    const int d = static_cast<int>(z[0].size());
    const int nv = 2 * d;  // t = (beta+, beta-)
    best.objective = std::numeric_limits<double>::infinity();

    // Constraint rows over t: margin rows [z_i, -z_i] >= 1, then t_j >= 0.
    std::vector<Vec> rows;
    std::vector<double> rhs;
    for (int i = 0; i < n; ++i) {
        Vec r(nv);
        r.head(d) = z[static_cast<size_t>(i)];
        r.tail(d) = -z[static_cast<size_t>(i)];
        rows.push_back(r);
        rhs.push_back(1.0);
    }
    for (int j = 0; j < nv; ++j) {
        rows.push_back(Vec::Unit(nv, j));
        rhs.push_back(0.0);
    }
    const int m = static_cast<int>(rows.size());

    // Vertices: nv tight constraints with an invertible system.
    std::vector<int> pick(static_cast<size_t>(nv));
    const std::function<void(int, int)> rec = [&](int start, int k) {
        if (k == nv) {
            Mat A(nv, nv);
            Vec b(nv);
            for (int r = 0; r < nv; ++r) {
                A.row(r) = rows[static_cast<size_t>(pick[static_cast<size_t>(r)])];
                b[r] = rhs[static_cast<size_t>(pick[static_cast<size_t>(r)])];
            }
            const Eigen::FullPivLU<Mat> lu(A);
            if (!lu.isInvertible()) return;
            const Vec t = lu.solve(b);
            for (int i = 0; i < m; ++i)
                if (rows[static_cast<size_t>(i)].dot(t) < rhs[static_cast<size_t>(i)] - 1e-9)
                    return;
            const double obj = t.sum();
            if (obj < best.objective - 1e-15) {
                best.feasible = true;
                best.objective = obj;
                best.beta = t.head(d) - t.tail(d);
            }
            return;
        }
        for (int i = start; i < m; ++i) {
            pick[static_cast<size_t>(k)] = i;
            rec(i + 1, k + 1);
        }
    };
    rec(0, 0);

    // Dual: max sum(lambda), lambda >= 0, -1 <= (Z^T lambda)_j <= 1.
    // Vertices: n tight constraints among {lambda_i = 0} and the 2d bounds.
    std::vector<Vec> drows;
    std::vector<double> drhs;  // rows as <a, lambda> = c when tight
    for (int i = 0; i < n; ++i) {
        drows.push_back(Vec::Unit(n, i));
        drhs.push_back(0.0);
    }
    Mat Zt(n, d);
    for (int i = 0; i < n; ++i) Zt.row(i) = z[static_cast<size_t>(i)].transpose();
    for (int j = 0; j < d; ++j) {
        drows.push_back(Zt.col(j));
        drhs.push_back(1.0);
        drows.push_back(-Zt.col(j));
        drhs.push_back(1.0);
    }
    const int dm = static_cast<int>(drows.size());
    double dual_best = 0.0;  // lambda = 0 is feasible
    std::vector<int> dpick(static_cast<size_t>(n));
    const std::function<void(int, int)> drec = [&](int start, int k) {
        if (k == n) {
            Mat A(n, n);
            Vec b(n);
            for (int r = 0; r < n; ++r) {
                A.row(r) = drows[static_cast<size_t>(dpick[static_cast<size_t>(r)])];
                b[r] = drhs[static_cast<size_t>(dpick[static_cast<size_t>(r)])];
            }
            const Eigen::FullPivLU<Mat> lu(A);
            if (!lu.isInvertible()) return;
            const Vec lam = lu.solve(b);
            if (lam.minCoeff() < -1e-9) return;
            const Vec w = Zt.transpose() * lam;
            if (w.lpNorm<Eigen::Infinity>() > 1.0 + 1e-9) return;
            dual_best = std::max(dual_best, lam.sum());
            return;
        }
        for (int i = start; i < dm; ++i) {
            dpick[static_cast<size_t>(k)] = i;
            drec(i + 1, k + 1);
        }
    };
    drec(0, 0);
    best.dual_value = dual_best;
    return best;
}

GroupOracle group_by_irls(const GroupProblem& prob, int max_iters, double tol) {
    GroupOracle out;
    const int L = prob.groups();
    const int n = prob.samples();

    // Feasibility of the concatenated linear constraints.
    int total = 0;
    for (int sz : prob.group_sizes) total += sz;
    std::vector<Vec> cat(static_cast<size_t>(n), Vec::Zero(total));
    for (int i = 0; i < n; ++i) {
        int off = 0;
        for (int l = 0; l < L; ++l) {
            if (prob.gates[static_cast<size_t>(i)][static_cast<size_t>(l)])
                cat[static_cast<size_t>(i)].segment(off, prob.group_sizes[static_cast<size_t>(l)]) =
                    prob.data[static_cast<size_t>(i)][static_cast<size_t>(l)];
            off += prob.group_sizes[static_cast<size_t>(l)];
        }
    }
    if (!feasible_by_fourier_motzkin(cat, prob.ys)) return out;

    std::vector<double> w(static_cast<size_t>(L), 1.0);
    double prev = std::numeric_limits<double>::infinity();
    const double floor_w = 1e-10;
    for (int it = 0; it < max_iters; ++it) {
        // scaled features: a_il * sqrt(w_l); min-norm QP in the scaled space
        std::vector<Vec> feat(static_cast<size_t>(n), Vec::Zero(total));
        for (int i = 0; i < n; ++i) {
            int off = 0;
            for (int l = 0; l < L; ++l) {
                if (prob.gates[static_cast<size_t>(i)][static_cast<size_t>(l)])
                    feat[static_cast<size_t>(i)].segment(off,
                                                         prob.group_sizes[static_cast<size_t>(l)]) =
                        std::sqrt(w[static_cast<size_t>(l)]) *
                        prob.data[static_cast<size_t>(i)][static_cast<size_t>(l)];
                off += prob.group_sizes[static_cast<size_t>(l)];
            }
        }
        const QpOracle qp = qp_by_enumeration(feat, prob.ys);
        if (!qp.feasible) return out;  // gates can kill feasibility mid-iteration
        out.u.assign(static_cast<size_t>(L), Vec());
        double obj = 0.0;
        int off = 0;
        for (int l = 0; l < L; ++l) {
            const int sz = prob.group_sizes[static_cast<size_t>(l)];
            out.u[static_cast<size_t>(l)] =
                std::sqrt(w[static_cast<size_t>(l)]) * qp.u.segment(off, sz);
            obj += out.u[static_cast<size_t>(l)].norm();
            off += sz;
        }
        out.feasible = true;
        out.objective = obj;
        out.iterations = it + 1;
        if (std::abs(prev - obj) < tol * std::max(1.0, obj)) break;
        prev = obj;
        for (int l = 0; l < L; ++l)
            w[static_cast<size_t>(l)] =
                std::max(out.u[static_cast<size_t>(l)].norm(), floor_w);
    }
    return out;
}

bool feasible_by_fourier_motzkin(const std::vector<Vec>& xs, const std::vector<int>& ys) {
    // System in form <a, u> <= b: -z_i u <= -1.
    struct Row {
        Vec a;
        double b;
    };
    std::vector<Row> sys;
    for (size_t i = 0; i < xs.size(); ++i)
        sys.push_back({ys[i] > 0 ? Vec(-xs[i]) : xs[i], -1.0});
    const int d = static_cast<int>(xs[0].size());

    for (int k = 0; k < d; ++k) {
        std::vector<Row> pos, neg, zero;
        for (const Row& r : sys) {
            if (r.a[k] > 1e-12)
                pos.push_back(r);
            else if (r.a[k] < -1e-12)
                neg.push_back(r);
            else
                zero.push_back(r);
        }
        std::vector<Row> next = zero;
        for (const Row& p : pos)
            for (const Row& q : neg) {
                // eliminate u_k between p.a u <= p.b (a_k > 0) and q (a_k < 0)
                const double cp = p.a[k], cq = -q.a[k];
                Row r;
                r.a = cq * p.a + cp * q.a;
                r.b = cq * p.b + cp * q.b;
                r.a[k] = 0.0;
                const double scale = std::max(1.0, r.a.lpNorm<Eigen::Infinity>());
                r.a /= scale;
                r.b /= scale;
                next.push_back(std::move(r));
            }
        sys = std::move(next);
    }
    for (const Row& r : sys)
        if (r.b < -1e-9) return false;  // 0 <= b violated
    return true;
}

}  // namespace oracles
