#pragma once

#include "marginlab/net.hpp"

#include <optional>
#include <string>
#include <vector>

namespace marginlab {

struct FlowConfig {
    LossKind loss = LossKind::Exponential;
    bool unit_speed = true;  // integrate -grad L / ||grad L|| instead of -grad L
    double rel_tol = 1e-8;
    double abs_tol = 1e-12;
    double s_budget = 1e4;        // arc length (raw time when unit_speed=false)
    double s_min = 0.0;           // hold off convergence checks until this arc
                                  // length; parameter directions can drift like
                                  // 1/s long after the window test quiets down
    double loss_target = 1e-10;
    double direction_tolerance = 1e-6;
    int direction_window = 10;    // checkpoints inspected for direction stability
    int checkpoint_stride = 1;    // accepted steps per stored checkpoint
    double h_init = 1e-3;
    double h_min = 1e-12;
    double h_max = 0.5;
    double kink_min_step = 1e-9;  // below this a pattern crossing is accepted
};

struct Checkpoint {
    double s = 0.0;
    Vec theta;
    double loss = 0.0;
    double norm = 0.0;
    Vec margins;
    Vec balance;  // conserved quantities, see balance_values()
};

enum class FlowStatus {
    ReachedTarget,    // loss under target and direction stable
    BudgetExhausted,  // ran out of s_budget first
    Stalled,          // gradient field exactly zero (critical point)
    Diverged          // non-finite state; last good checkpoint preserved
};

const char* to_string(FlowStatus s);

struct Trajectory {
    std::vector<Checkpoint> points;

    const Checkpoint& back() const { return points.back(); }
    Vec final_direction() const;
};

struct FlowResult {
    FlowStatus status = FlowStatus::BudgetExhausted;
    Trajectory traj;
    long steps_accepted = 0;
    long steps_rejected = 0;
    double final_log_grad_norm = 0.0;  // log ||grad L|| at the last checkpoint
    std::string note;
};

// The conserved quantities of the flow for this architecture, evaluated at
// theta: adjacent-layer differences ||u^(j)||^2 - ||u^(j+1)||^2 for all j,
// followed by per-neuron differences where the architecture admits them
// (row/col norms for adjacent dense unshared layers; ||w_j||^2 - v_j^2 for
// depth-2 no-share nets is the special case).
struct BalanceLabels {
    std::vector<std::string> names;
};
Vec balance_values(const ArchSpec& arch, const Vec& theta);
BalanceLabels balance_labels(const ArchSpec& arch);

FlowResult integrate(const ArchSpec& arch, const Vec& theta0, const Dataset& data,
                     const FlowConfig& cfg);

struct DirectionLimit {
    bool converged = false;
    Vec direction;             // unit vector (last checkpoint's direction)
    double max_pairwise = 0.0; // max pairwise deviation over the window
};
DirectionLimit direction_limit(const Trajectory& traj, int window, double tol);

struct BalanceReport {
    std::vector<std::string> names;
    std::vector<double> drift;          // max_s |Q(s) - Q(0)| per conserved quantity
    std::vector<double> limit_gap;      // | ||u^(j)|| - ||u^(j+1)|| | etc. at theta_tilde
    std::vector<std::string> gap_names;
    double max_drift() const;
    double max_limit_gap() const;
};
// Drift over the trajectory; limit gaps evaluated at theta_limit (pass the
// rescaled unit-margin point).
BalanceReport balance_report(const ArchSpec& arch, const Trajectory& traj,
                             const Vec& theta_limit);

// Columns: s, loss, norm, min_margin, dir_0..dir_{P-1}, then one column per
// conserved quantity. 17 significant digits. Atomic (tmp + rename).
void write_trajectory_csv(const ArchSpec& arch, const Trajectory& traj,
                          const std::string& path);

}  // namespace marginlab
