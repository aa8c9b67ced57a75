#pragma once

#include "marginlab/net.hpp"

#include <string>
#include <vector>

namespace marginlab {

// Thrown by solve_per_layer_qp when a ReLU pre-activation in some layer >= l
// vanishes at theta, so the frozen-pattern linearisation is not locally valid.
struct ZeroPreactivationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class SolveStatus { Optimal, Infeasible, NotCertified };
const char* to_string(SolveStatus s);

// min 1/2 ||u||^2  s.t.  y_i <u, x_i> >= 1.  Dual active-set iteration;
// infeasibility is recognised exactly as 0 in conv{y_i x_i} (Farkas).
struct QpResult {
    SolveStatus status = SolveStatus::Infeasible;
    Vec u;
    Vec lambda;              // one multiplier per constraint
    double objective = 0.0;  // 1/2 ||u||^2
    double kkt_residual = 0.0;
    int iterations = 0;
};
QpResult solve_linear_maxmargin(const std::vector<Vec>& xs, const std::vector<int>& ys);

// min ||beta||_1  s.t.  y_i <beta, x_i> >= 1.  Vertex enumeration over basic
// feasible solutions (d <= 16); ties broken by the lexicographically smallest
// optimizer.
struct L1Result {
    SolveStatus status = SolveStatus::Infeasible;
    Vec beta;
    double objective = 0.0;
};
L1Result solve_l1_maxmargin(const std::vector<Vec>& xs, const std::vector<int>& ys);

// min sum_l ||u_l||  s.t.  y_i sum_l gate(i,l) <u_l, a(i,l)> >= 1.
// The neuron-space relaxation of the depth-2 parameter problem: group l is
// one hidden unit, a(i,l) its input patch on sample i, and gates freeze an
// activation pattern (all-ones for linear nets).
struct GroupProblem {
    std::vector<int> group_sizes;
    std::vector<std::vector<Vec>> data;   // data[i][l], size group_sizes[l]
    std::vector<std::vector<int>> gates;  // gates[i][l] in {0, 1}
    std::vector<int> ys;

    int groups() const { return static_cast<int>(group_sizes.size()); }
    int samples() const { return static_cast<int>(ys.size()); }
    void validate() const;  // throws SpecError naming the field
};

struct GroupConfig {
    long budget = 200000;        // subgradient iterations
    double gap_tol = 1e-10;      // primal-dual gap for early exit
    double cert_tol = 1e-6;      // KKT residual required for "certified"
    double zero_group_rel = 1e-9;  // ||u_l|| <= this * objective counts as zero
};

struct GroupResult {
    SolveStatus status = SolveStatus::Infeasible;
    std::vector<Vec> u;
    double objective = 0.0;
    Vec lambda;
    double kkt_residual = 0.0;   // stationarity + zero-group subgradient check
    double duality_gap = 0.0;
    bool certified = false;      // NotCertified <=> budget exhausted above cert_tol
    long iterations = 0;
};
GroupResult solve_group_maxmargin(const GroupProblem& prob, const GroupConfig& cfg = {});

// Builds the neuron-space group problem of a depth-2 no-share net. When
// gate_theta is non-null and the net is ReLU, gates are 1(<w_l, x_i^l> >= 0)
// at that parameter point; otherwise all gates are 1.
GroupProblem group_problem_depth2(const ArchSpec& arch, const Dataset& data,
                                  const Vec* gate_theta = nullptr);

// sum_l ||v_l w_l|| for a depth-2 no-share net: the group objective realised
// by theta. Bounded by ||theta||^2 / 2 with equality iff ||w_l|| == |v_l|.
double realized_group_objective(const ArchSpec& arch, const Vec& theta);

// Freeze every layer except `layer` at theta and solve
// min 1/2 ||u||^2 s.t. y_i Phi(..., u, ...; x_i) >= 1, which is affine in u
// for linear nets and for ReLU nets under the pattern frozen at theta.
// Throws ZeroPreactivationError when that pattern is not strict.
struct PerLayerQpResult {
    SolveStatus status = SolveStatus::Infeasible;
    int layer = 0;
    Vec u;                    // optimum of the layer problem
    double objective = 0.0;
    double kkt_residual = 0.0;
    std::vector<Vec> constraint_grads;  // a_i = y_i dPhi/du^(layer) at theta
};
PerLayerQpResult solve_per_layer_qp(const ArchSpec& arch, const Vec& theta,
                                    const Dataset& data, int layer,
                                    double tau0 = 1e-8);

// Exact Farkas test: constraints {y_i <u, x_i> >= 1} are infeasible iff
// 0 lies in conv{y_i x_i}. Decided by Caratheodory subset enumeration.
bool linear_constraints_infeasible(const std::vector<Vec>& xs, const std::vector<int>& ys);

}  // namespace marginlab
