#pragma once

#include "marginlab/convex.hpp"
#include "marginlab/flow.hpp"
#include "marginlab/kkt.hpp"
#include "marginlab/probe.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace marginlab {

struct EpsOutOfRangeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct PreconditionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class PerLayerVerdict { GLOBAL, LOCAL, NOT_LOCAL, SKIPPED };
const char* to_string(PerLayerVerdict v);

struct ExpectedVerdicts {
    std::optional<KktVerdict> kkt;
    std::optional<ProbeVerdict> local;
    std::optional<GapVerdict> global;
    std::map<int, PerLayerVerdict> per_layer;  // 1-based layer index
};

// A reproducible experiment: architecture, dataset, a qualifying start point,
// closed-form witnesses where one exists, and the verdicts the run is
// expected to produce.
struct Scenario {
    std::string id;
    std::string summary;

    ArchSpec arch;
    Dataset data;
    Vec init;
    std::vector<LossKind> losses = {LossKind::Exponential};
    FlowConfig flow;  // per-scenario integrator overrides (loss is set per run)

    // Witness family (registry key resolved by scenario_witness); empty = none.
    std::string witness_form;
    double eps_default = 0.1;
    double eps_lo = 0.0, eps_hi = 0.0;  // witness valid for eps in (lo, hi)
    int witness_layer = -1;             // layer the witness perturbs; -1 = several

    // Random probe defaults (used when there is no closed-form witness).
    double probe_eps = 0.1;
    long probe_budget = 10000;
    std::uint64_t probe_seed = 7;

    // Global-optimality reference: "" (none), "candidate" (explicit point),
    // "linear_qp" (depth * ||u*||^(2/depth) from the linear max-margin QP),
    // "l1_x2" (2 * ||beta*||_1, the depth-2 diagonal realisation bound).
    std::string global_ref;
    Vec global_candidate;

    std::optional<Vec> expected_theta;  // rescaled limit, when pinned
    double expected_theta_tol = 1e-2;

    std::vector<std::string> preconditions;  // named checks run before the flow
    ExpectedVerdicts expected;

    // Scenario-specific numeric expectations surfaced in reports.
    std::optional<double> expected_sq_norm;
    double expected_sq_norm_tol = 1e-3;
};

std::vector<std::string> catalog_ids();

struct BuildOverrides {
    std::optional<double> eps;
    std::optional<std::uint64_t> seed;
    std::optional<long> budget;
    std::optional<double> s_budget;  // threaded through to the flow config
};
Scenario build_scenario(const std::string& id, const BuildOverrides& ov = {});

// Closed-form witness at the given eps; throws EpsOutOfRangeError outside
// (eps_lo, eps_hi) and SpecError when the scenario has no witness family.
Vec scenario_witness(const Scenario& sc, double eps);

// Throws PreconditionError naming the failed check.
void check_preconditions(const Scenario& sc, LossKind loss);

// The two-point dataset {(+1, b), (-1, b)} with a two-unit ReLU net and the
// standard qualifying start; b parameterises how orthogonal the two samples
// are. FC_RELU_D2 is exactly this at b = 1/4.
Scenario two_point_relu_scenario(double b);

// Monte-Carlo estimate of how often an i.i.d. N(0, 1/2) draw of the depth-2
// parameters satisfies the scenario's sign preconditions. Reported, never
// asserted against a target.
double qualifying_init_frequency(const Scenario& sc, long trials, std::uint64_t seed);

struct PerLayerOutcome {
    int layer = 0;
    PerLayerVerdict verdict = PerLayerVerdict::SKIPPED;
    double dist_to_layer = 0.0;  // ||u* - u^(layer)||_inf
    double objective = 0.0;
    std::string note;
};

struct NumericCheck {
    std::string name;
    double value = 0.0;
    double tol = 0.0;
    bool pass = false;
};

struct RunOverrides {
    std::optional<double> eps;
    std::optional<std::uint64_t> seed;
    std::optional<long> budget;
    std::optional<double> s_budget;
    std::optional<double> tol_stat;
};

struct RunReport {
    std::string scenario;
    LossKind loss = LossKind::Exponential;

    bool flow_converged = false;
    FlowStatus flow_status = FlowStatus::BudgetExhausted;
    double s_final = 0.0;
    long steps = 0;
    long checkpoints = 0;
    double loss_final = 0.0;
    double norm_final = 0.0;
    double direction_stability = 0.0;
    double wall_seconds = 0.0;  // reported on stderr only, never serialized

    BalanceReport balance;

    double scale = 0.0;
    Vec theta_tilde;
    Vec margins;
    KktCertificate kkt;

    std::optional<WitnessReport> witness;
    std::optional<ProbeReport> probe;
    std::optional<GapReport> gap;
    std::vector<PerLayerOutcome> per_layer;

    std::optional<double> l1_objective;
    std::optional<Vec> l1_beta;
    std::optional<double> group_objective;
    std::optional<bool> group_certified;
    std::optional<Vec> predictor;  // row of the product matrix, linear nets

    std::vector<NumericCheck> checks;

    bool verdicts_match = false;
    bool pass = false;
    std::string fail_reason;
};

RunReport run_scenario(const Scenario& sc, LossKind loss, const RunOverrides& ov = {});

// Trajectory export path helper used by the CLI: runs the flow only.
FlowResult run_flow(const Scenario& sc, LossKind loss, const RunOverrides& ov = {});

}  // namespace marginlab
