#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

namespace marginlab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Thrown when an operation is asked of an architecture it is not defined for
// (e.g. activation patterns of a purely linear network).
struct NotApplicableError : std::logic_error {
    using std::logic_error::logic_error;
};

// Thrown by loaders/validators; the message names the offending field.
struct SpecError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

enum class Activation { Linear, ReLU };

const char* to_string(Activation a);
Activation activation_from_string(const std::string& s);

// One weight slot of a sparse/shared layer: W(row, col) = u[param].
// Positions not covered by any slot are structurally zero. Zero-based.
struct WeightSlot {
    int row = 0;
    int col = 0;
    int param = 0;
};

struct LayerSpec {
    int rows = 0;    // d_l
    int cols = 0;    // d_{l-1}
    int params = 0;  // length of this layer's parameter vector u^(l)
    std::vector<WeightSlot> slots;
};

// A feedforward architecture where every layer is a sparsity/weight-sharing
// pattern over a dense matrix: fully-connected, diagonal and patch-conv
// layers are all instances. Hidden layers share one activation; the output
// is scalar and never passes through the activation.
struct ArchSpec {
    std::vector<int> dims;  // d_0 .. d_m, dims.back() == 1
    Activation activation = Activation::ReLU;
    double relu_zero_slope = 0.0;  // derivative assigned to ReLU at 0
    std::vector<LayerSpec> layers;

    int depth() const { return static_cast<int>(layers.size()); }
    int input_dim() const { return dims.empty() ? 0 : dims.front(); }
    int param_count() const;
    int layer_offset(int layer) const;  // offset of u^(layer) in the flat vector

    // Throws SpecError naming the field when the description is inconsistent.
    void validate() const;

    bool layer_is_dense(int layer) const;  // covers every (row, col) with distinct params
    bool is_no_share() const;              // every param used in exactly one slot
};

ArchSpec fully_connected(const std::vector<int>& dims, Activation act,
                         double relu_zero_slope = 0.0);
ArchSpec diagonal(int dim, int depth, Activation act, double relu_zero_slope = 0.0);
// Depth-2 net whose single kernel of size `patch` slides with stride `patch`
// over the input; one hidden unit per patch, dense scalar output on top.
ArchSpec conv_depth2(int input_dim, int patch, Activation act,
                     double relu_zero_slope = 0.0);

struct Sample {
    Vec x;
    int y = 1;  // label in {-1, +1}
};
using Dataset = std::vector<Sample>;

// --- parameter vector helpers (flat layout: u^(1) | u^(2) | ... | u^(m)) ---

Eigen::VectorBlock<Vec> layer_params(const ArchSpec& arch, Vec& theta, int layer);
Eigen::VectorBlock<const Vec> layer_params(const ArchSpec& arch, const Vec& theta,
                                           int layer);

Mat materialize(const ArchSpec& arch, const Vec& theta, int layer);

double forward(const ArchSpec& arch, const Vec& theta, const Vec& x);

struct ForwardTrace {
    std::vector<Vec> pre;   // pre-activations, layer 1..m (sizes d_1..d_m)
    std::vector<Vec> post;  // h_0 = x, h_1..h_m (h_m == output)
    double value = 0.0;
};
ForwardTrace forward_trace(const ArchSpec& arch, const Vec& theta, const Vec& x);

// dPhi/dtheta via backprop. At ReLU kinks the derivative selection
// sigma'(0) := relu_zero_slope is used; shared slots accumulate.
Vec grad(const ArchSpec& arch, const Vec& theta, const Vec& x);

// y_i * Phi(theta; x_i) for every sample.
Vec margins(const ArchSpec& arch, const Vec& theta, const Dataset& data);

enum class LossKind { Exponential, Logistic };

const char* to_string(LossKind k);
LossKind loss_from_string(const std::string& s);

double loss_value(LossKind kind, double q);          // per-sample loss at margin q
double loss_log_abs_slope(LossKind kind, double q);  // log |l'(q)|, overflow-safe

struct LossGrad {
    double loss = 0.0;
    Vec grad;     // dL/dtheta
    Vec margins;  // y_i Phi(theta; x_i)
};
LossGrad loss_and_grad(const ArchSpec& arch, const Vec& theta, const Dataset& data,
                       LossKind kind);

// Phi(alpha * theta) == alpha^L Phi(theta) with L = depth.
int homogeneity_degree(const ArchSpec& arch);
// Max over alpha in {0.5, 2, 10} of |Phi(alpha theta;x) - alpha^L Phi(theta;x)|
// normalised by 1 + |alpha^L Phi|.
double homogeneity_residual(const ArchSpec& arch, const Vec& theta, const Vec& x);

// Sign of every hidden pre-activation per sample: -1, 0, +1. A value counts
// as 0 when |pre| <= tau0 * ||theta||^layer (pre-activations of layer l are
// l-homogeneous in theta, so the zero band must scale accordingly).
// Only defined for ReLU networks; throws NotApplicableError otherwise.
struct ActivationPattern {
    // sign[sample][hidden_layer][unit], hidden layers 1..m-1
    std::vector<std::vector<std::vector<int>>> sign;

    bool has_zero() const;
    bool operator==(const ActivationPattern&) const = default;
};
ActivationPattern activation_pattern(const ArchSpec& arch, const Vec& theta,
                                     const Dataset& data, double tau0 = 1e-8);

}  // namespace marginlab
