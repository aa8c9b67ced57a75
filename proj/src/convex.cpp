#include "marginlab/convex.hpp"

#include "marginlab/nnls.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

namespace marginlab {

const char* to_string(SolveStatus s) {
    switch (s) {
        case SolveStatus::Optimal: return "Optimal";
        case SolveStatus::Infeasible: return "Infeasible";
        case SolveStatus::NotCertified: return "NotCertified";
    }
    return "?";
}

namespace {

std::vector<Vec> signed_points(const std::vector<Vec>& xs, const std::vector<int>& ys) {
    std::vector<Vec> zs(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) zs[i] = static_cast<double>(ys[i]) * xs[i];
    return zs;
}

// 0 in conv{z_S} for an affinely independent subset S has a unique affine
// combination; solve [z_1..z_k; 1..1] mu = [0; 1] and accept a nonnegative
// solution with near-zero residual.
bool subset_contains_origin(const std::vector<Vec>& zs, const std::vector<int>& subset) {
    const Eigen::Index d = zs[0].size();
    const Eigen::Index k = static_cast<Eigen::Index>(subset.size());
    Mat A(d + 1, k);
    for (Eigen::Index c = 0; c < k; ++c) {
        A.col(c).head(d) = zs[static_cast<size_t>(subset[static_cast<size_t>(c)])];
        A(d, c) = 1.0;
    }
    Vec b = Vec::Zero(d + 1);
    b[d] = 1.0;
    const Vec mu = A.colPivHouseholderQr().solve(b);
    if ((A * mu - b).norm() > 1e-9) return false;
    return mu.minCoeff() > -1e-9;
}

void enumerate_subsets(int n, int k, int start, std::vector<int>& cur,
                       const std::function<bool(const std::vector<int>&)>& visit, bool& done) {
    if (done) return;
    if (static_cast<int>(cur.size()) == k) {
        if (visit(cur)) done = true;
        return;
    }
    for (int i = start; i <= n - (k - static_cast<int>(cur.size())); ++i) {
        cur.push_back(i);
        enumerate_subsets(n, k, i + 1, cur, visit, done);
        cur.pop_back();
        if (done) return;
    }
}

}  // namespace

bool linear_constraints_infeasible(const std::vector<Vec>& xs, const std::vector<int>& ys) {
    if (xs.empty()) return false;
    const std::vector<Vec> zs = signed_points(xs, ys);
    const int n = static_cast<int>(zs.size());
    const int d = static_cast<int>(zs[0].size());
    for (const Vec& z : zs)
        if (z.norm() <= 1e-12) return true;  // a zero row can never reach margin 1
    for (int k = 2; k <= std::min(n, d + 1); ++k) {
        bool done = false;
        std::vector<int> cur;
        enumerate_subsets(n, k, 0, cur,
                          [&](const std::vector<int>& s) { return subset_contains_origin(zs, s); },
                          done);
        if (done) return true;
    }
    return false;
}

// ---------------------------------------------------------------------------
// hard margin QP

QpResult solve_linear_maxmargin(const std::vector<Vec>& xs, const std::vector<int>& ys) {
    QpResult res;
    const int n = static_cast<int>(xs.size());
    if (n == 0 || ys.size() != xs.size())
        throw SpecError("solve_linear_maxmargin: empty data or mismatched labels");
    const Eigen::Index d = xs[0].size();
    res.lambda = Vec::Zero(n);
    res.u = Vec::Zero(d);
    if (linear_constraints_infeasible(xs, ys)) {
        res.status = SolveStatus::Infeasible;
        return res;
    }

    const std::vector<Vec> zs = signed_points(xs, ys);

    // Wolfe's min-norm-point method on the hull of the signed samples: the
    // nearest point x to the origin gives the margin-1 solution u = x/|x|^2,
    // and the hull weights give the multipliers. The corral S always carries
    // the affine minimizer with strictly positive weights.
    std::vector<int> S;
    Vec mu;
    {
        int p = 0;
        for (int i = 1; i < n; ++i)
            if (zs[static_cast<size_t>(i)].squaredNorm() < zs[static_cast<size_t>(p)].squaredNorm())
                p = i;
        S.push_back(p);
        mu = Vec::Ones(1);
    }
    Vec x = zs[static_cast<size_t>(S[0])];

    auto affine_min = [&](Vec& alpha) {
        // minimize |Z_S a| over sum(a) = 1 via the bordered normal equations
        const Eigen::Index k = static_cast<Eigen::Index>(S.size());
        Mat B = Mat::Zero(k + 1, k + 1);
        for (Eigen::Index r = 0; r < k; ++r)
            for (Eigen::Index c = 0; c < k; ++c)
                B(r, c) = zs[static_cast<size_t>(S[static_cast<size_t>(r)])].dot(
                    zs[static_cast<size_t>(S[static_cast<size_t>(c)])]);
        B.block(0, k, k, 1).setOnes();
        B.block(k, 0, 1, k).setOnes();
        Vec rhs = Vec::Zero(k + 1);
        rhs[k] = 1.0;
        const Vec sol = B.colPivHouseholderQr().solve(rhs);
        alpha = sol.head(k);
    };

    const int max_major = 64 * (n + 2);
    for (int it = 0; it < max_major; ++it) {
        ++res.iterations;
        int j = -1;
        double mj = std::numeric_limits<double>::infinity();
        for (int i = 0; i < n; ++i) {
            const double m = zs[static_cast<size_t>(i)].dot(x);
            if (m < mj) {
                mj = m;
                j = i;
            }
        }
        const double xx = x.squaredNorm();
        if (mj >= xx - 1e-12 * std::max(xx, 1e-6)) break;
        if (std::find(S.begin(), S.end(), j) != S.end()) break;  // numerical stall
        S.push_back(j);
        {
            Vec grown(mu.size() + 1);
            grown.head(mu.size()) = mu;
            grown[mu.size()] = 0.0;
            mu.swap(grown);
        }
        for (size_t minor = 0; minor <= S.size() + 1; ++minor) {
            Vec alpha;
            affine_min(alpha);
            if (alpha.minCoeff() > 1e-12) {
                mu = alpha;
                break;
            }
            double theta = 1.0;
            for (Eigen::Index c = 0; c < alpha.size(); ++c)
                if (alpha[c] <= 1e-12 && mu[c] - alpha[c] > 0.0)
                    theta = std::min(theta, mu[c] / (mu[c] - alpha[c]));
            mu = (1.0 - theta) * mu + theta * alpha;
            for (Eigen::Index c = mu.size() - 1; c >= 0 && S.size() > 1; --c) {
                if (mu[c] <= 1e-12) {
                    S.erase(S.begin() + static_cast<long>(c));
                    Vec shrunk(mu.size() - 1);
                    shrunk.head(c) = mu.head(c);
                    shrunk.tail(mu.size() - 1 - c) = mu.tail(mu.size() - 1 - c);
                    mu.swap(shrunk);
                }
            }
        }
        x = Vec::Zero(d);
        for (size_t c = 0; c < S.size(); ++c)
            x += mu[static_cast<Eigen::Index>(c)] * zs[static_cast<size_t>(S[c])];
    }

    const double xx = x.squaredNorm();
    const Vec u = xx > 0.0 ? Vec(x / xx) : Vec(Vec::Zero(d));
    for (size_t c = 0; c < S.size(); ++c)
        res.lambda[S[c]] = std::max(0.0, mu[static_cast<Eigen::Index>(c)] / std::max(xx, 1e-300));
    res.u = u;
    res.objective = 0.5 * u.squaredNorm();

    double station = (u - [&] {
                         Vec s = Vec::Zero(d);
                         for (int i = 0; i < n; ++i) s += res.lambda[i] * zs[static_cast<size_t>(i)];
                         return s;
                     }()).norm();
    double viol = 0.0, comp = 0.0;
    for (int i = 0; i < n; ++i) {
        const double m = zs[static_cast<size_t>(i)].dot(u);
        viol = std::max(viol, 1.0 - m);
        comp = std::max(comp, res.lambda[i] * std::abs(m - 1.0));
    }
    res.kkt_residual = std::max({station, std::max(0.0, viol), comp});
    res.status = res.kkt_residual <= 1e-8 ? SolveStatus::Optimal : SolveStatus::NotCertified;
    return res;
}

// ---------------------------------------------------------------------------
// l1 max margin by basic-solution enumeration

L1Result solve_l1_maxmargin(const std::vector<Vec>& xs, const std::vector<int>& ys) {
    L1Result res;
    const int n = static_cast<int>(xs.size());
    if (n == 0 || ys.size() != xs.size())
        throw SpecError("solve_l1_maxmargin: empty data or mismatched labels");
    const int d = static_cast<int>(xs[0].size());
    if (d > 16) throw SpecError("solve_l1_maxmargin: dimension above the enumeration cap (16)");
    if (linear_constraints_infeasible(xs, ys)) {
        res.status = SolveStatus::Infeasible;
        return res;
    }
    const std::vector<Vec> zs = signed_points(xs, ys);

    // An optimal basic solution has k tight margins and d - k zero
    // coordinates whose rows form a nonsingular d x d system.
    bool found = false;
    Vec best;
    double best_obj = std::numeric_limits<double>::infinity();

    auto lex_less = [](const Vec& a, const Vec& b) {
        for (Eigen::Index j = 0; j < a.size(); ++j) {
            if (a[j] < b[j] - 1e-12) return true;
            if (a[j] > b[j] + 1e-12) return false;
        }
        return false;
    };

    auto consider = [&](const Vec& beta) {
        for (int i = 0; i < n; ++i)
            if (zs[static_cast<size_t>(i)].dot(beta) < 1.0 - 1e-9) return;
        const double obj = beta.lpNorm<1>();
        if (obj < best_obj - 1e-12 || (obj < best_obj + 1e-12 && (!found || lex_less(beta, best)))) {
            best_obj = std::min(best_obj, obj);
            best = beta;
            found = true;
        }
    };

    for (int k = 1; k <= std::min(n, d); ++k) {
        std::vector<int> rows;
        bool stop = false;
        enumerate_subsets(n, k, 0, rows,
            [&](const std::vector<int>& rsel) {
                std::vector<int> zcols;
                bool stop2 = false;
                enumerate_subsets(d, d - k, 0, zcols,
                    [&](const std::vector<int>& csel) {
                        Mat A = Mat::Zero(d, d);
                        Vec b = Vec::Zero(d);
                        for (int r = 0; r < k; ++r) {
                            A.row(r) = zs[static_cast<size_t>(rsel[static_cast<size_t>(r)])];
                            b[r] = 1.0;
                        }
                        for (int r = 0; r < d - k; ++r)
                            A(k + r, csel[static_cast<size_t>(r)]) = 1.0;
                        Eigen::ColPivHouseholderQR<Mat> qr(A);
                        if (qr.rank() < d) return false;
                        consider(qr.solve(b));
                        return false;  // keep enumerating
                    },
                    stop2);
                return false;
            },
            stop);
    }

    if (!found) {
        res.status = SolveStatus::NotCertified;
        return res;
    }
    res.status = SolveStatus::Optimal;
    res.beta = best;
    res.objective = best_obj;
    return res;
}

// ---------------------------------------------------------------------------
// group norm problem

void GroupProblem::validate() const {
    if (group_sizes.empty()) throw SpecError("group_sizes: must be nonempty");
    for (int g : group_sizes)
        if (g <= 0) throw SpecError("group_sizes: entries must be positive");
    if (ys.empty()) throw SpecError("ys: must be nonempty");
    if (data.size() != ys.size()) throw SpecError("data: one row per label required");
    for (size_t i = 0; i < data.size(); ++i) {
        if (static_cast<int>(data[i].size()) != groups())
            throw SpecError("data: row " + std::to_string(i) + " has wrong group count");
        for (int l = 0; l < groups(); ++l)
            if (data[i][static_cast<size_t>(l)].size() != group_sizes[static_cast<size_t>(l)])
                throw SpecError("data: row " + std::to_string(i) + ", group " +
                                std::to_string(l) + " has wrong size");
    }
    if (gates.size() != data.size()) throw SpecError("gates: one row per sample required");
    for (size_t i = 0; i < gates.size(); ++i) {
        if (static_cast<int>(gates[i].size()) != groups())
            throw SpecError("gates: row " + std::to_string(i) + " has wrong group count");
        for (int g : gates[i])
            if (g != 0 && g != 1)
                throw SpecError("gates: entries must be 0 or 1");
    }
    for (int y : ys)
        if (y != 1 && y != -1) throw SpecError("ys: labels must be +1 or -1");
}

namespace {

struct Stacked {
    std::vector<Vec> z;            // z_i = y_i * concat_l gate(i,l) a(i,l)
    std::vector<int> offset;       // group l occupies [offset[l], offset[l+1])
    int dim = 0;
};

Stacked stack_problem(const GroupProblem& prob) {
    Stacked st;
    st.offset.resize(static_cast<size_t>(prob.groups()) + 1, 0);
    for (int l = 0; l < prob.groups(); ++l)
        st.offset[static_cast<size_t>(l) + 1] =
            st.offset[static_cast<size_t>(l)] + prob.group_sizes[static_cast<size_t>(l)];
    st.dim = st.offset.back();
    st.z.resize(static_cast<size_t>(prob.samples()));
    for (int i = 0; i < prob.samples(); ++i) {
        Vec z = Vec::Zero(st.dim);
        for (int l = 0; l < prob.groups(); ++l)
            if (prob.gates[static_cast<size_t>(i)][static_cast<size_t>(l)] != 0)
                z.segment(st.offset[static_cast<size_t>(l)],
                          prob.group_sizes[static_cast<size_t>(l)]) =
                    prob.data[static_cast<size_t>(i)][static_cast<size_t>(l)];
        st.z[static_cast<size_t>(i)] = static_cast<double>(prob.ys[static_cast<size_t>(i)]) * z;
    }
    return st;
}

double group_objective(const Stacked& st, const Vec& u) {
    double f = 0.0;
    for (size_t l = 0; l + 1 < st.offset.size(); ++l)
        f += u.segment(st.offset[l], st.offset[l + 1] - st.offset[l]).norm();
    return f;
}

// Weak-duality bound: any lambda >= 0 scaled so every group of sum lambda_i z_i
// has norm <= 1 certifies sum lambda_i <= optimum.
double dual_bound(const Stacked& st, const Vec& lambda, Vec* scaled) {
    Vec nu = Vec::Zero(st.dim);
    for (size_t i = 0; i < st.z.size(); ++i) nu += lambda[static_cast<Eigen::Index>(i)] * st.z[i];
    double worst = 0.0;
    for (size_t l = 0; l + 1 < st.offset.size(); ++l)
        worst = std::max(worst, nu.segment(st.offset[l], st.offset[l + 1] - st.offset[l]).norm());
    const double scale = worst > 1.0 ? 1.0 / worst : 1.0;
    if (scaled) *scaled = scale * lambda;
    return scale * lambda.sum();
}

}  // namespace

GroupResult solve_group_maxmargin(const GroupProblem& prob, const GroupConfig& cfg) {
    prob.validate();
    GroupResult res;
    const Stacked st = stack_problem(prob);
    const int n = prob.samples();
    res.lambda = Vec::Zero(n);

    {
        std::vector<Vec> zraw(st.z.begin(), st.z.end());
        std::vector<int> ones(static_cast<size_t>(n), 1);
        if (linear_constraints_infeasible(zraw, ones)) {
            res.status = SolveStatus::Infeasible;
            return res;
        }
    }

    auto min_margin = [&](const Vec& u) {
        double m = std::numeric_limits<double>::infinity();
        for (const Vec& z : st.z) m = std::min(m, z.dot(u));
        return m;
    };

    // feasible start from the l2 problem on the stacked features
    Vec u;
    {
        std::vector<Vec> zraw(st.z.begin(), st.z.end());
        std::vector<int> ones(static_cast<size_t>(n), 1);
        const QpResult qp = solve_linear_maxmargin(zraw, ones);
        u = qp.u;
        const double m0 = min_margin(u);
        if (m0 < 1.0) u /= std::max(m0, 1e-300);
    }
    Vec best_u = u;
    double best_ub = group_objective(st, u);

    const double rho = 10.0 * (1.0 + best_ub);
    double best_lb = 0.0;

    auto refresh_dual = [&]() {
        // multipliers from the stationarity condition at the incumbent:
        // fit sum lambda_i z_i to the objective subgradient on the near-active set
        Vec s = Vec::Zero(st.dim);
        for (size_t l = 0; l + 1 < st.offset.size(); ++l) {
            const auto seg = best_u.segment(st.offset[l], st.offset[l + 1] - st.offset[l]);
            const double nl = seg.norm();
            if (nl > cfg.zero_group_rel * std::max(1.0, best_ub))
                s.segment(st.offset[l], st.offset[l + 1] - st.offset[l]) = seg / nl;
        }
        std::vector<int> act;
        for (int i = 0; i < n; ++i)
            if (st.z[static_cast<size_t>(i)].dot(best_u) <= 1.0 + 1e-6 * std::max(1.0, best_ub))
                act.push_back(i);
        if (act.empty()) return;
        Mat A(st.dim, static_cast<Eigen::Index>(act.size()));
        for (size_t k = 0; k < act.size(); ++k)
            A.col(static_cast<Eigen::Index>(k)) = st.z[static_cast<size_t>(act[k])];
        const NnlsResult fit = nnls(A, s);
        Vec lam = Vec::Zero(n);
        for (size_t k = 0; k < act.size(); ++k) lam[act[k]] = fit.x[static_cast<Eigen::Index>(k)];
        Vec scaled;
        const double lb = dual_bound(st, lam, &scaled);
        if (lb > best_lb) {
            best_lb = lb;
            res.lambda = scaled;
            res.kkt_residual = fit.residual;
        }
    };
    refresh_dual();

    for (long it = 0; it < cfg.budget; ++it) {
        ++res.iterations;
        if (best_ub - best_lb <= cfg.gap_tol * std::max(1.0, best_ub)) break;

        // penalized objective and one subgradient
        Vec g = Vec::Zero(st.dim);
        double F = 0.0;
        for (size_t l = 0; l + 1 < st.offset.size(); ++l) {
            const auto seg = u.segment(st.offset[l], st.offset[l + 1] - st.offset[l]);
            const double nl = seg.norm();
            F += nl;
            if (nl > 0.0) g.segment(st.offset[l], st.offset[l + 1] - st.offset[l]) = seg / nl;
        }
        for (const Vec& z : st.z) {
            const double m = z.dot(u);
            if (m < 1.0) {
                F += rho * (1.0 - m);
                g -= rho * z;
            }
        }
        const double gsq = g.squaredNorm();
        if (gsq == 0.0) break;
        const double target = best_lb > 0.0 ? best_lb : 0.5 * best_ub;
        double t = (F - target) / gsq;
        if (!(t > 0.0)) t = 1e-6 / std::sqrt(gsq);
        u -= t * g;

        const double m = min_margin(u);
        if (m > 0.0) {
            const Vec uf = u / m;
            const double ub = group_objective(st, uf);
            if (ub < best_ub) {
                best_ub = ub;
                best_u = uf;
                if ((it & 0xf) == 0) refresh_dual();
            }
        }
        if ((it & 0x3ff) == 0x3ff) refresh_dual();
    }
    refresh_dual();

    res.objective = best_ub;
    res.duality_gap = best_ub - best_lb;
    res.certified = res.duality_gap <= cfg.cert_tol * std::max(1.0, best_ub);
    res.status = res.certified ? SolveStatus::Optimal : SolveStatus::NotCertified;
    res.u.resize(static_cast<size_t>(prob.groups()));
    for (int l = 0; l < prob.groups(); ++l)
        res.u[static_cast<size_t>(l)] = best_u.segment(
            st.offset[static_cast<size_t>(l)], prob.group_sizes[static_cast<size_t>(l)]);
    return res;
}

GroupProblem group_problem_depth2(const ArchSpec& arch, const Dataset& data,
                                  const Vec* gate_theta) {
    if (arch.depth() != 2 || !arch.is_no_share())
        throw NotApplicableError("neuron-space group problem needs a depth-2 net without weight sharing");
    const int h = arch.dims[1];
    GroupProblem prob;

    // group l collects the layer-1 input coordinates feeding hidden unit l
    std::vector<std::vector<int>> in_cols(static_cast<size_t>(h));
    for (const auto& slot : arch.layers[0].slots)
        in_cols[static_cast<size_t>(slot.row)].push_back(slot.col);
    for (int l = 0; l < h; ++l) {
        if (in_cols[static_cast<size_t>(l)].empty())
            throw NotApplicableError("hidden unit with no incoming weight");
        prob.group_sizes.push_back(static_cast<int>(in_cols[static_cast<size_t>(l)].size()));
    }

    const bool relu = arch.activation == Activation::ReLU;
    if (relu && gate_theta == nullptr)
        throw SpecError("group_problem_depth2: a ReLU net needs gate_theta to freeze the pattern");

    for (const Sample& s : data) {
        std::vector<Vec> row(static_cast<size_t>(h));
        std::vector<int> grow(static_cast<size_t>(h), 1);
        for (int l = 0; l < h; ++l) {
            const auto& cols = in_cols[static_cast<size_t>(l)];
            Vec a(static_cast<Eigen::Index>(cols.size()));
            for (size_t k = 0; k < cols.size(); ++k) a[static_cast<Eigen::Index>(k)] = s.x[cols[k]];
            row[static_cast<size_t>(l)] = a;
            if (relu) {
                const ForwardTrace tr = forward_trace(arch, *gate_theta, s.x);
                grow[static_cast<size_t>(l)] = tr.pre[0][l] >= 0.0 ? 1 : 0;
            }
        }
        prob.data.push_back(std::move(row));
        prob.gates.push_back(std::move(grow));
        prob.ys.push_back(s.y);
    }
    return prob;
}

double realized_group_objective(const ArchSpec& arch, const Vec& theta) {
    if (arch.depth() != 2 || !arch.is_no_share())
        throw NotApplicableError("group objective needs a depth-2 net without weight sharing");
    const int h = arch.dims[1];
    const int off2 = arch.layer_offset(1);
    double f = 0.0;
    for (int l = 0; l < h; ++l) {
        double wsq = 0.0;
        for (const auto& slot : arch.layers[0].slots)
            if (slot.row == l) wsq += theta[slot.param] * theta[slot.param];
        double v = 0.0;
        for (const auto& slot : arch.layers[1].slots)
            if (slot.col == l) v = theta[off2 + slot.param];
        f += std::abs(v) * std::sqrt(wsq);
    }
    return f;
}

PerLayerQpResult solve_per_layer_qp(const ArchSpec& arch, const Vec& theta,
                                    const Dataset& data, int layer, double tau0) {
    if (layer < 0 || layer >= arch.depth())
        throw SpecError("solve_per_layer_qp: layer out of range");
    if (arch.activation == Activation::ReLU) {
        // Moving u^(layer) shifts the pre-activations of hidden layers >= layer;
        // only a kink contact there makes the frozen pattern ambiguous. Zeros in
        // layers below enter as fixed activation values and are harmless.
        const ActivationPattern pat = activation_pattern(arch, theta, data, tau0);
        for (const auto& per_sample : pat.sign)
            for (size_t hl = static_cast<size_t>(layer); hl < per_sample.size(); ++hl)
                for (int sgn : per_sample[hl])
                    if (sgn == 0)
                        throw ZeroPreactivationError(
                            "a hidden pre-activation vanishes at theta in a layer the "
                            "perturbed layer feeds; the frozen pattern is ambiguous");
    }

    PerLayerQpResult res;
    res.layer = layer;
    const int off = arch.layer_offset(layer);
    const int p = arch.layers[static_cast<size_t>(layer)].params;
    std::vector<Vec> cs;
    std::vector<int> ys;
    for (const Sample& s : data) {
        const Vec g = grad(arch, theta, s.x);
        cs.push_back(g.segment(off, p));
        ys.push_back(s.y);
    }
    const QpResult qp = solve_linear_maxmargin(cs, ys);
    res.status = qp.status;
    res.u = qp.u;
    res.objective = qp.objective;
    res.kkt_residual = qp.kkt_residual;
    for (size_t i = 0; i < cs.size(); ++i)
        res.constraint_grads.push_back(static_cast<double>(ys[i]) * cs[i]);
    return res;
}

}  // namespace marginlab
