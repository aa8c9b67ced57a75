#include "marginlab/flow.hpp"

#include "marginlab/ioutil.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <sstream>

namespace marginlab {

const char* to_string(FlowStatus s) {
    switch (s) {
        case FlowStatus::ReachedTarget: return "ReachedTarget";
        case FlowStatus::BudgetExhausted: return "BudgetExhausted";
        case FlowStatus::Stalled: return "StalledAtCriticalPoint";
        case FlowStatus::Diverged: return "DivergedNumerically";
    }
    return "?";
}

Vec Trajectory::final_direction() const {
    const Vec& th = points.back().theta;
    const double n = th.norm();
    return n > 0.0 ? Vec(th / n) : Vec(Vec::Zero(th.size()));
}

// ---------------------------------------------------------------------------
// conserved quantities

namespace {

// Per-neuron in/out squared norms are conserved for adjacent dense unshared
// layers, and for any depth-2 no-share net (row of layer 1 vs column of
// layer 2). Returns (hidden layer, unit) pairs in label order.
std::vector<std::pair<int, int>> per_neuron_sites(const ArchSpec& arch) {
    std::vector<std::pair<int, int>> sites;
    const int m = arch.depth();
    if (m == 2 && arch.is_no_share()) {
        for (int i = 0; i < arch.dims[1]; ++i) sites.push_back({0, i});
        return sites;
    }
    for (int l = 0; l + 1 < m; ++l) {
        if (!arch.layer_is_dense(l) || !arch.layer_is_dense(l + 1)) continue;
        for (int i = 0; i < arch.dims[l + 1]; ++i) sites.push_back({l, i});
    }
    return sites;
}

double row_sq(const ArchSpec& arch, const Vec& theta, int layer, int row) {
    const int off = arch.layer_offset(layer);
    double s = 0.0;
    for (const auto& slot : arch.layers[layer].slots)
        if (slot.row == row) s += theta[off + slot.param] * theta[off + slot.param];
    return s;
}

double col_sq(const ArchSpec& arch, const Vec& theta, int layer, int col) {
    const int off = arch.layer_offset(layer);
    double s = 0.0;
    for (const auto& slot : arch.layers[layer].slots)
        if (slot.col == col) s += theta[off + slot.param] * theta[off + slot.param];
    return s;
}

}  // namespace

Vec balance_values(const ArchSpec& arch, const Vec& theta) {
    const int m = arch.depth();
    const auto sites = per_neuron_sites(arch);
    Vec q(m - 1 + static_cast<int>(sites.size()));
    for (int l = 0; l + 1 < m; ++l) {
        const double a = layer_params(arch, theta, l).squaredNorm();
        const double b = layer_params(arch, theta, l + 1).squaredNorm();
        q[l] = a - b;
    }
    for (size_t k = 0; k < sites.size(); ++k) {
        const auto [l, i] = sites[k];
        q[m - 1 + static_cast<Eigen::Index>(k)] =
            row_sq(arch, theta, l, i) - col_sq(arch, theta, l + 1, i);
    }
    return q;
}

BalanceLabels balance_labels(const ArchSpec& arch) {
    BalanceLabels out;
    const int m = arch.depth();
    for (int l = 0; l + 1 < m; ++l)
        out.names.push_back("bal_l" + std::to_string(l + 1) + "_l" + std::to_string(l + 2));
    for (const auto& [l, i] : per_neuron_sites(arch))
        out.names.push_back("bal_n" + std::to_string(l + 1) + "_" + std::to_string(i + 1));
    return out;
}

// ---------------------------------------------------------------------------
// vector field

namespace {

// Roundoff scale of each conserved quantity at theta: the squared norms whose
// difference is taken.
Vec balance_scales(const ArchSpec& arch, const Vec& theta) {
    const int m = arch.depth();
    const auto sites = per_neuron_sites(arch);
    Vec sc(m - 1 + static_cast<int>(sites.size()));
    for (int l = 0; l + 1 < m; ++l)
        sc[l] = layer_params(arch, theta, l).squaredNorm() +
                layer_params(arch, theta, l + 1).squaredNorm();
    for (size_t k = 0; k < sites.size(); ++k) {
        const auto [l, i] = sites[k];
        sc[m - 1 + static_cast<Eigen::Index>(k)] =
            row_sq(arch, theta, l, i) + col_sq(arch, theta, l + 1, i);
    }
    return sc;
}

struct FieldEval {
    Vec f;                 // the integrated field
    double loss = 0.0;
    double log_grad_norm = -std::numeric_limits<double>::infinity();
    Vec margins;
    bool zero = false;
    bool finite = true;
};

// -grad L, evaluated through log-space per-sample weights so the direction
// survives margins far beyond exp underflow. In unit-speed mode the field is
// normalised to length 1.
FieldEval eval_field(const ArchSpec& arch, const Dataset& data, const FlowConfig& cfg,
                     const Vec& theta) {
    FieldEval ev;
    const int n = static_cast<int>(data.size());
    ev.margins.resize(n);
    std::vector<Vec> grads(static_cast<size_t>(n));
    Vec logw(n);
    for (int i = 0; i < n; ++i) {
        const double m = data[static_cast<size_t>(i)].y *
                         forward(arch, theta, data[static_cast<size_t>(i)].x);
        ev.margins[i] = m;
        ev.loss += loss_value(cfg.loss, m);
        logw[i] = loss_log_abs_slope(cfg.loss, m);
        grads[static_cast<size_t>(i)] =
            data[static_cast<size_t>(i)].y * grad(arch, theta, data[static_cast<size_t>(i)].x);
    }
    if (!ev.margins.allFinite()) {
        ev.finite = false;
        return ev;
    }
    const double wmax = logw.maxCoeff();
    Vec v = Vec::Zero(theta.size());
    for (int i = 0; i < n; ++i)
        v += std::exp(logw[i] - wmax) * grads[static_cast<size_t>(i)];
    if (!v.allFinite()) {
        ev.finite = false;
        return ev;
    }
    const double vn = v.norm();
    if (vn == 0.0) {
        ev.zero = true;
        ev.f = Vec::Zero(theta.size());
        return ev;
    }
    ev.log_grad_norm = wmax + std::log(vn);
    if (cfg.unit_speed) {
        ev.f = v / vn;
    } else {
        // raw -grad L; underflows once margins pass ~745, which is fine for
        // the short horizons raw mode is meant for
        ev.f = std::exp(wmax) * v;
    }
    return ev;
}

// Strict sign flips between activation patterns (a crossing of a kink); a
// transition into or out of the zero band does not count.
bool pattern_flipped(const ActivationPattern& a, const ActivationPattern& b) {
    for (size_t i = 0; i < a.sign.size(); ++i)
        for (size_t l = 0; l < a.sign[i].size(); ++l)
            for (size_t j = 0; j < a.sign[i][l].size(); ++j) {
                const int s0 = a.sign[i][l][j], s1 = b.sign[i][l][j];
                if (s0 * s1 < 0) return true;
            }
    return false;
}

struct StepOutcome {
    bool ok = false;
    bool zero_field = false;
    bool finite = true;
    Vec theta;
    double error_ratio = 0.0;
};

Vec rk4_step(const ArchSpec& arch, const Dataset& data, const FlowConfig& cfg,
             const Vec& theta, double h, bool& zero, bool& finite) {
    const FieldEval k1 = eval_field(arch, data, cfg, theta);
    if (k1.zero || !k1.finite) { zero = k1.zero; finite = k1.finite; return theta; }
    const FieldEval k2 = eval_field(arch, data, cfg, Vec(theta + 0.5 * h * k1.f));
    const FieldEval k3 = eval_field(arch, data, cfg, Vec(theta + 0.5 * h * k2.f));
    const FieldEval k4 = eval_field(arch, data, cfg, Vec(theta + h * k3.f));
    if (!k2.finite || !k3.finite || !k4.finite) { finite = false; return theta; }
    return theta + (h / 6.0) * (k1.f + 2.0 * k2.f + 2.0 * k3.f + k4.f);
}

// One trial step of size h with step-doubling error control. The error ratio
// combines the state error against (abs + rel ||theta||) with the drift of
// the conserved balance quantities against a per-step budget.
StepOutcome try_step(const ArchSpec& arch, const Dataset& data, const FlowConfig& cfg,
                     const Vec& theta, const Vec& q0, const Vec& qscale, double h) {
    StepOutcome out;
    bool zero = false, finite = true;
    const Vec full = rk4_step(arch, data, cfg, theta, h, zero, finite);
    if (zero || !finite) { out.zero_field = zero; out.finite = finite; return out; }
    Vec half = rk4_step(arch, data, cfg, theta, 0.5 * h, zero, finite);
    if (finite && !zero) half = rk4_step(arch, data, cfg, half, 0.5 * h, zero, finite);
    if (zero || !finite || !half.allFinite()) {
        out.zero_field = zero;
        out.finite = finite && half.allFinite();
        return out;
    }
    const double err = (half - full).norm() / 15.0;
    const double tol = cfg.abs_tol + cfg.rel_tol * theta.norm();
    double ratio = err / tol;
    double bal_ratio = 0.0;
    const Vec q1 = balance_values(arch, half);
    for (Eigen::Index c = 0; c < q0.size(); ++c) {
        const double budget =
            std::max(1e-10, 64.0 * std::numeric_limits<double>::epsilon() * qscale[c]);
        bal_ratio = std::max(bal_ratio, std::abs(q1[c] - q0[c]) / budget);
    }
    ratio = std::max(ratio, bal_ratio);
    out.ok = ratio <= 1.0;
    out.theta = std::move(half);
    out.error_ratio = ratio;
    return out;
}

}  // namespace

FlowResult integrate(const ArchSpec& arch, const Vec& theta0, const Dataset& data,
                     const FlowConfig& cfg) {
    FlowResult res;
    Vec theta = theta0;
    double s = 0.0;
    double h = cfg.h_init;

    auto checkpoint = [&](double at_s, const Vec& th) {
        Checkpoint cp;
        cp.s = at_s;
        cp.theta = th;
        cp.norm = th.norm();
        cp.margins = margins(arch, th, data);
        cp.loss = 0.0;
        for (Eigen::Index i = 0; i < cp.margins.size(); ++i)
            cp.loss += loss_value(cfg.loss, cp.margins[i]);
        cp.balance = balance_values(arch, th);
        res.traj.points.push_back(std::move(cp));
    };
    checkpoint(0.0, theta);

    {
        const FieldEval ev0 = eval_field(arch, data, cfg, theta);
        if (ev0.zero) {
            res.status = FlowStatus::Stalled;
            res.note = "gradient field identically zero at the start point";
            return res;
        }
        res.final_log_grad_norm = ev0.log_grad_norm;
    }

    const bool relu = arch.activation == Activation::ReLU;
    ActivationPattern pat;
    if (relu) pat = activation_pattern(arch, theta, data);

    std::deque<Vec> window;
    auto push_direction = [&](const Vec& th) {
        const double n = th.norm();
        window.push_back(n > 0.0 ? Vec(th / n) : Vec(Vec::Zero(th.size())));
        while (static_cast<int>(window.size()) > cfg.direction_window) window.pop_front();
    };
    push_direction(theta);

    auto window_spread = [&]() {
        double worst = 0.0;
        for (size_t a = 0; a < window.size(); ++a)
            for (size_t b = a + 1; b < window.size(); ++b)
                worst = std::max(worst, (window[a] - window[b]).norm());
        return worst;
    };

    // exp-loss flows get stiff at scale: the softmax gap between the two
    // closest-margin samples relaxes at a rate comparable to d(margin)/ds,
    // which grows like s^2 on an L=3 network, so the accepted step shrinks
    // like 1/s^2 and the step count to arc length S grows like S^3
    const long max_steps = 32000000;
    long accepted_since_checkpoint = 0;
    while (s < cfg.s_budget) {
        if (res.steps_accepted + res.steps_rejected > max_steps) {
            res.status = FlowStatus::BudgetExhausted;
            res.note = "step cap reached";
            return res;
        }
        h = std::min(h, cfg.s_budget - s);
        h = std::clamp(h, cfg.h_min, cfg.h_max);
        const Vec q0 = balance_values(arch, theta);
        const Vec qscale = balance_scales(arch, theta);
        StepOutcome step = try_step(arch, data, cfg, theta, q0, qscale, h);
        if (step.zero_field) {
            res.status = FlowStatus::Stalled;
            res.note = "gradient field identically zero";
            return res;
        }
        if (!step.finite) {
            if (h > 4.0 * cfg.h_min) {
                h *= 0.25;
                ++res.steps_rejected;
                continue;
            }
            res.status = FlowStatus::Diverged;
            res.note = "non-finite state at minimal step size";
            return res;
        }
        if (!step.ok && h > cfg.h_min) {
            const double fac =
                std::max(0.1, std::min(0.7, 0.9 * std::pow(step.error_ratio, -0.2)));
            h = std::max(cfg.h_min, h * fac);
            ++res.steps_rejected;
            continue;
        }
        if (relu) {
            const ActivationPattern next = activation_pattern(arch, step.theta, data);
            if (pattern_flipped(pat, next) && h > cfg.kink_min_step) {
                h = std::max(cfg.kink_min_step, 0.5 * h);
                ++res.steps_rejected;
                continue;
            }
            pat = next;
        }

        theta = step.theta;
        s += h;
        ++res.steps_accepted;
        // growth is capped well below the classical r^(-1/5) suggestion: once
        // the flow is stiff the local error grows exponentially in h, so a
        // bold increase after a comfortable accept lands far past the
        // stability boundary and is immediately rejected; creeping up keeps
        // the accept rate high at the same average step
        const double grow = step.error_ratio > 0.0
                                ? std::min(1.05, std::max(0.5, 0.9 * std::pow(step.error_ratio, -0.2)))
                                : 1.05;
        h = std::min(cfg.h_max, h * grow);

        if (++accepted_since_checkpoint >= cfg.checkpoint_stride) {
            accepted_since_checkpoint = 0;
            checkpoint(s, theta);
            push_direction(theta);
            const Checkpoint& last = res.traj.points.back();
            if (s >= cfg.s_min && last.loss <= cfg.loss_target &&
                static_cast<int>(window.size()) >= cfg.direction_window &&
                window_spread() <= cfg.direction_tolerance) {
                const FieldEval ev = eval_field(arch, data, cfg, theta);
                res.final_log_grad_norm = ev.log_grad_norm;
                res.status = FlowStatus::ReachedTarget;
                return res;
            }
        }
    }
    if (accepted_since_checkpoint > 0) {
        checkpoint(s, theta);
        push_direction(theta);
    }
    const FieldEval ev = eval_field(arch, data, cfg, theta);
    res.final_log_grad_norm = ev.log_grad_norm;
    const Checkpoint& last = res.traj.points.back();
    if (s >= cfg.s_min && last.loss <= cfg.loss_target &&
        static_cast<int>(window.size()) >= cfg.direction_window &&
        window_spread() <= cfg.direction_tolerance) {
        res.status = FlowStatus::ReachedTarget;
    } else {
        res.status = FlowStatus::BudgetExhausted;
        res.note = "arc-length budget exhausted before the stop rule held";
    }
    return res;
}

DirectionLimit direction_limit(const Trajectory& traj, int window, double tol) {
    DirectionLimit out;
    const int n = static_cast<int>(traj.points.size());
    if (n == 0) return out;
    std::vector<Vec> dirs;
    for (int i = std::max(0, n - window); i < n; ++i) {
        const Vec& th = traj.points[static_cast<size_t>(i)].theta;
        const double nn = th.norm();
        dirs.push_back(nn > 0.0 ? Vec(th / nn) : Vec(Vec::Zero(th.size())));
    }
    double worst = 0.0;
    for (size_t a = 0; a < dirs.size(); ++a)
        for (size_t b = a + 1; b < dirs.size(); ++b)
            worst = std::max(worst, (dirs[a] - dirs[b]).norm());
    out.direction = dirs.back();
    out.max_pairwise = worst;
    out.converged = static_cast<int>(dirs.size()) >= window && worst <= tol;
    return out;
}

double BalanceReport::max_drift() const {
    double worst = 0.0;
    for (double d : drift) worst = std::max(worst, d);
    return worst;
}

double BalanceReport::max_limit_gap() const {
    double worst = 0.0;
    for (double g : limit_gap) worst = std::max(worst, g);
    return worst;
}

BalanceReport balance_report(const ArchSpec& arch, const Trajectory& traj,
                             const Vec& theta_limit) {
    BalanceReport rep;
    rep.names = balance_labels(arch).names;
    const Vec q0 = traj.points.front().balance;
    rep.drift.assign(static_cast<size_t>(q0.size()), 0.0);
    for (const auto& cp : traj.points)
        for (Eigen::Index c = 0; c < q0.size(); ++c)
            rep.drift[static_cast<size_t>(c)] =
                std::max(rep.drift[static_cast<size_t>(c)], std::abs(cp.balance[c] - q0[c]));

    const int m = arch.depth();
    for (int l = 0; l + 1 < m; ++l) {
        const double a = layer_params(arch, theta_limit, l).norm();
        const double b = layer_params(arch, theta_limit, l + 1).norm();
        rep.limit_gap.push_back(std::abs(a - b));
        rep.gap_names.push_back("gap_l" + std::to_string(l + 1) + "_l" + std::to_string(l + 2));
    }
    if (m == 2 && arch.is_no_share()) {
        for (int i = 0; i < arch.dims[1]; ++i) {
            const double win = std::sqrt(row_sq(arch, theta_limit, 0, i));
            const double vout = std::sqrt(col_sq(arch, theta_limit, 1, i));
            rep.limit_gap.push_back(std::abs(win - vout));
            rep.gap_names.push_back("gap_n" + std::to_string(i + 1));
        }
    }
    return rep;
}

void write_trajectory_csv(const ArchSpec& arch, const Trajectory& traj,
                          const std::string& path) {
    std::ostringstream out;
    out << "s,loss,norm,min_margin";
    const int P = arch.param_count();
    for (int k = 0; k < P; ++k) out << ",dir_" << k;
    for (const auto& name : balance_labels(arch).names) out << "," << name;
    out << "\n";
    for (const auto& cp : traj.points) {
        out << format17(cp.s) << "," << format17(cp.loss) << "," << format17(cp.norm)
            << "," << format17(cp.margins.minCoeff());
        const double n = cp.norm;
        for (int k = 0; k < P; ++k)
            out << "," << format17(n > 0.0 ? cp.theta[k] / n : 0.0);
        for (Eigen::Index c = 0; c < cp.balance.size(); ++c)
            out << "," << format17(cp.balance[c]);
        out << "\n";
    }
    write_file_atomic(path, out.str());
}

}  // namespace marginlab
