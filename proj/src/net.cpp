#include "marginlab/net.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace marginlab {

const char* to_string(Activation a) {
    return a == Activation::Linear ? "Linear" : "ReLU";
}

Activation activation_from_string(const std::string& s) {
    if (s == "Linear") return Activation::Linear;
    if (s == "ReLU") return Activation::ReLU;
    throw SpecError("activation: expected \"Linear\" or \"ReLU\", got \"" + s + "\"");
}

const char* to_string(LossKind k) {
    return k == LossKind::Exponential ? "exp" : "log";
}

LossKind loss_from_string(const std::string& s) {
    if (s == "exp") return LossKind::Exponential;
    if (s == "log") return LossKind::Logistic;
    throw SpecError("loss: expected \"exp\" or \"log\", got \"" + s + "\"");
}

int ArchSpec::param_count() const {
    int n = 0;
    for (const auto& l : layers) n += l.params;
    return n;
}

int ArchSpec::layer_offset(int layer) const {
    int off = 0;
    for (int l = 0; l < layer; ++l) off += layers[l].params;
    return off;
}

void ArchSpec::validate() const {
    if (layers.size() < 2) throw SpecError("depth: need at least 2 layers");
    if (dims.size() != layers.size() + 1)
        throw SpecError("dims: expected depth+1 entries, got " +
                        std::to_string(dims.size()));
    if (dims.back() != 1) throw SpecError("dims: output dimension must be 1");
    for (size_t i = 0; i < dims.size(); ++i)
        if (dims[i] <= 0) throw SpecError("dims: entry " + std::to_string(i) + " not positive");
    if (relu_zero_slope < 0.0 || relu_zero_slope > 1.0)
        throw SpecError("relu_zero_slope: must lie in [0, 1]");
    for (size_t l = 0; l < layers.size(); ++l) {
        const auto& layer = layers[l];
        const std::string tag = "layers[" + std::to_string(l + 1) + "]";
        if (layer.rows != dims[l + 1] || layer.cols != dims[l])
            throw SpecError(tag + ": shape does not match dims");
        if (layer.params <= 0) throw SpecError(tag + ": empty parameter vector");
        std::vector<char> used(static_cast<size_t>(layer.params), 0);
        std::set<std::pair<int, int>> seen;
        for (const auto& s : layer.slots) {
            if (s.row < 0 || s.row >= layer.rows)
                throw SpecError(tag + ": slot row out of range");
            if (s.col < 0 || s.col >= layer.cols)
                throw SpecError(tag + ": slot col out of range");
            if (s.param < 0 || s.param >= layer.params)
                throw SpecError(tag + ": slot param index out of range");
            if (!seen.insert({s.row, s.col}).second)
                throw SpecError(tag + ": duplicate slot position");
            used[static_cast<size_t>(s.param)] = 1;
        }
        if (std::find(used.begin(), used.end(), 0) != used.end())
            throw SpecError(tag + ": some parameter index appears in no slot");
    }
}

bool ArchSpec::layer_is_dense(int layer) const {
    const auto& l = layers[layer];
    if (l.params != l.rows * l.cols) return false;
    if (static_cast<int>(l.slots.size()) != l.params) return false;
    std::vector<char> used(static_cast<size_t>(l.params), 0);
    for (const auto& s : l.slots) {
        if (used[static_cast<size_t>(s.param)]) return false;
        used[static_cast<size_t>(s.param)] = 1;
    }
    return true;
}

bool ArchSpec::is_no_share() const {
    for (const auto& l : layers) {
        std::vector<char> used(static_cast<size_t>(l.params), 0);
        for (const auto& s : l.slots) {
            if (used[static_cast<size_t>(s.param)]) return false;
            used[static_cast<size_t>(s.param)] = 1;
        }
    }
    return true;
}

ArchSpec fully_connected(const std::vector<int>& dims, Activation act,
                         double relu_zero_slope) {
    ArchSpec arch;
    arch.dims = dims;
    arch.activation = act;
    arch.relu_zero_slope = relu_zero_slope;
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
        LayerSpec layer;
        layer.rows = dims[l + 1];
        layer.cols = dims[l];
        layer.params = layer.rows * layer.cols;
        for (int i = 0; i < layer.rows; ++i)
            for (int j = 0; j < layer.cols; ++j)
                layer.slots.push_back({i, j, i * layer.cols + j});
        arch.layers.push_back(std::move(layer));
    }
    arch.validate();
    return arch;
}

ArchSpec diagonal(int dim, int depth, Activation act, double relu_zero_slope) {
    ArchSpec arch;
    arch.activation = act;
    arch.relu_zero_slope = relu_zero_slope;
    arch.dims.assign(static_cast<size_t>(depth) + 1, dim);
    arch.dims.back() = 1;
    for (int l = 0; l < depth; ++l) {
        LayerSpec layer;
        layer.cols = dim;
        layer.rows = (l + 1 == depth) ? 1 : dim;
        layer.params = dim;
        for (int j = 0; j < dim; ++j)
            layer.slots.push_back({(l + 1 == depth) ? 0 : j, j, j});
        arch.layers.push_back(std::move(layer));
    }
    arch.validate();
    return arch;
}

ArchSpec conv_depth2(int input_dim, int patch, Activation act, double relu_zero_slope) {
    if (patch <= 0 || input_dim % patch != 0)
        throw SpecError("conv_depth2: patch must divide input_dim");
    const int hidden = input_dim / patch;
    ArchSpec arch;
    arch.activation = act;
    arch.relu_zero_slope = relu_zero_slope;
    arch.dims = {input_dim, hidden, 1};
    LayerSpec l1;
    l1.rows = hidden;
    l1.cols = input_dim;
    l1.params = patch;  // one shared kernel
    for (int p = 0; p < hidden; ++p)
        for (int k = 0; k < patch; ++k) l1.slots.push_back({p, p * patch + k, k});
    LayerSpec l2;
    l2.rows = 1;
    l2.cols = hidden;
    l2.params = hidden;
    for (int j = 0; j < hidden; ++j) l2.slots.push_back({0, j, j});
    arch.layers = {std::move(l1), std::move(l2)};
    arch.validate();
    return arch;
}

Eigen::VectorBlock<Vec> layer_params(const ArchSpec& arch, Vec& theta, int layer) {
    return theta.segment(arch.layer_offset(layer), arch.layers[layer].params);
}

Eigen::VectorBlock<const Vec> layer_params(const ArchSpec& arch, const Vec& theta,
                                           int layer) {
    return theta.segment(arch.layer_offset(layer), arch.layers[layer].params);
}

Mat materialize(const ArchSpec& arch, const Vec& theta, int layer) {
    const auto& l = arch.layers[layer];
    Mat w = Mat::Zero(l.rows, l.cols);
    const int off = arch.layer_offset(layer);
    for (const auto& s : l.slots) w(s.row, s.col) = theta[off + s.param];
    return w;
}

namespace {

inline void apply_layer(const ArchSpec& arch, const Vec& theta, int layer,
                        const Vec& h, Vec& pre) {
    const auto& l = arch.layers[layer];
    pre.setZero(l.rows);
    const int off = arch.layer_offset(layer);
    for (const auto& s : l.slots) pre[s.row] += theta[off + s.param] * h[s.col];
}

}  // namespace

ForwardTrace forward_trace(const ArchSpec& arch, const Vec& theta, const Vec& x) {
    if (x.size() != arch.input_dim())
        throw SpecError("x: dimension does not match dims[0]");
    const int m = arch.depth();
    ForwardTrace t;
    t.pre.resize(static_cast<size_t>(m));
    t.post.resize(static_cast<size_t>(m) + 1);
    t.post[0] = x;
    for (int l = 0; l < m; ++l) {
        apply_layer(arch, theta, l, t.post[static_cast<size_t>(l)],
                    t.pre[static_cast<size_t>(l)]);
        if (l + 1 < m && arch.activation == Activation::ReLU)
            t.post[static_cast<size_t>(l) + 1] =
                t.pre[static_cast<size_t>(l)].cwiseMax(0.0);
        else
            t.post[static_cast<size_t>(l) + 1] = t.pre[static_cast<size_t>(l)];
    }
    t.value = t.post.back()[0];
    return t;
}

double forward(const ArchSpec& arch, const Vec& theta, const Vec& x) {
    return forward_trace(arch, theta, x).value;
}

Vec grad(const ArchSpec& arch, const Vec& theta, const Vec& x) {
    const ForwardTrace t = forward_trace(arch, theta, x);
    const int m = arch.depth();
    Vec g = Vec::Zero(arch.param_count());
    Vec delta = Vec::Ones(1);  // d value / d pre of the layer being visited
    for (int l = m - 1; l >= 0; --l) {
        const auto& layer = arch.layers[l];
        const int off = arch.layer_offset(l);
        const Vec& h = t.post[static_cast<size_t>(l)];
        Vec delta_prev = Vec::Zero(layer.cols);
        for (const auto& s : layer.slots) {
            g[off + s.param] += delta[s.row] * h[s.col];
            delta_prev[s.col] += delta[s.row] * theta[off + s.param];
        }
        if (l > 0 && arch.activation == Activation::ReLU) {
            const Vec& pre = t.pre[static_cast<size_t>(l) - 1];
            for (int j = 0; j < delta_prev.size(); ++j) {
                if (pre[j] > 0.0) continue;
                delta_prev[j] *= (pre[j] == 0.0) ? arch.relu_zero_slope : 0.0;
            }
        }
        delta = std::move(delta_prev);
    }
    return g;
}

Vec margins(const ArchSpec& arch, const Vec& theta, const Dataset& data) {
    Vec out(static_cast<Eigen::Index>(data.size()));
    for (size_t i = 0; i < data.size(); ++i)
        out[static_cast<Eigen::Index>(i)] = data[i].y * forward(arch, theta, data[i].x);
    return out;
}

double loss_value(LossKind kind, double q) {
    if (kind == LossKind::Exponential) return std::exp(-q);
    // log(1 + e^{-q}) without overflow on either tail
    return q > 0.0 ? std::log1p(std::exp(-q)) : -q + std::log1p(std::exp(q));
}

double loss_log_abs_slope(LossKind kind, double q) {
    if (kind == LossKind::Exponential) return -q;
    // |l'(q)| = 1 / (1 + e^q)
    return q > 0.0 ? -(q + std::log1p(std::exp(-q))) : -std::log1p(std::exp(q));
}

LossGrad loss_and_grad(const ArchSpec& arch, const Vec& theta, const Dataset& data,
                       LossKind kind) {
    LossGrad out;
    out.grad = Vec::Zero(arch.param_count());
    out.margins.resize(static_cast<Eigen::Index>(data.size()));
    for (size_t i = 0; i < data.size(); ++i) {
        const double m = data[i].y * forward(arch, theta, data[i].x);
        out.margins[static_cast<Eigen::Index>(i)] = m;
        out.loss += loss_value(kind, m);
        const double slope = -std::exp(loss_log_abs_slope(kind, m));  // l'(m) < 0
        out.grad += slope * data[i].y * grad(arch, theta, data[i].x);
    }
    return out;
}

int homogeneity_degree(const ArchSpec& arch) { return arch.depth(); }

double homogeneity_residual(const ArchSpec& arch, const Vec& theta, const Vec& x) {
    const double base = forward(arch, theta, x);
    const int L = homogeneity_degree(arch);
    double worst = 0.0;
    for (double alpha : {0.5, 2.0, 10.0}) {
        const double scaled = forward(arch, Vec(alpha * theta), x);
        const double expected = std::pow(alpha, L) * base;
        const double resid = std::abs(scaled - expected) / (1.0 + std::abs(expected));
        worst = std::max(worst, resid);
    }
    return worst;
}

bool ActivationPattern::has_zero() const {
    for (const auto& per_sample : sign)
        for (const auto& layer : per_sample)
            for (int s : layer)
                if (s == 0) return true;
    return false;
}

ActivationPattern activation_pattern(const ArchSpec& arch, const Vec& theta,
                                     const Dataset& data, double tau0) {
    if (arch.activation != Activation::ReLU)
        throw NotApplicableError("activation_pattern: linear network has no pattern");
    const int m = arch.depth();
    const double norm = theta.norm();
    ActivationPattern pat;
    pat.sign.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) {
        const ForwardTrace t = forward_trace(arch, theta, data[i].x);
        pat.sign[i].resize(static_cast<size_t>(m) - 1);
        for (int l = 0; l + 1 < m; ++l) {
            const Vec& pre = t.pre[static_cast<size_t>(l)];
            const double band = tau0 * std::pow(norm, l + 1);
            auto& signs = pat.sign[i][static_cast<size_t>(l)];
            signs.resize(static_cast<size_t>(pre.size()));
            for (int j = 0; j < pre.size(); ++j)
                signs[static_cast<size_t>(j)] =
                    std::abs(pre[j]) <= band ? 0 : (pre[j] > 0.0 ? 1 : -1);
        }
    }
    return pat;
}

}  // namespace marginlab
