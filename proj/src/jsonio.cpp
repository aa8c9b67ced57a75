#include "marginlab/jsonio.hpp"

#include "marginlab/ioutil.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

namespace marginlab {

namespace {

json vec_to_json(const Vec& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

Vec vec_from_json(const json& j, const std::string& field) {
    if (!j.is_array()) throw SpecError(field + ": expected an array of numbers");
    Vec v(static_cast<Eigen::Index>(j.size()));
    Eigen::Index i = 0;
    for (const auto& x : j) {
        if (!x.is_number()) throw SpecError(field + ": expected an array of numbers");
        v[i++] = x.get<double>();
    }
    return v;
}

template <typename T>
T require(const json& j, const std::string& field) {
    if (!j.contains(field)) throw SpecError(field + ": missing");
    try {
        return j.at(field).get<T>();
    } catch (const json::exception&) {
        throw SpecError(field + ": wrong type");
    }
}

template <typename T>
T optional_or(const json& j, const std::string& field, T fallback) {
    if (!j.contains(field)) return fallback;
    try {
        return j.at(field).get<T>();
    } catch (const json::exception&) {
        throw SpecError(field + ": wrong type");
    }
}

}  // namespace

json arch_to_json(const ArchSpec& arch) {
    json j;
    j["depth"] = arch.depth();
    j["dims"] = arch.dims;
    j["activation"] = to_string(arch.activation);
    j["relu_zero_slope"] = arch.relu_zero_slope;
    json layers = json::array();
    for (const LayerSpec& l : arch.layers) {
        json slots = json::array();
        for (const WeightSlot& s : l.slots)
            slots.push_back(json::array({s.row + 1, s.col + 1, s.param + 1}));
        layers.push_back(slots);
    }
    j["layers"] = layers;
    return j;
}

ArchSpec arch_from_json(const json& j) {
    ArchSpec arch;
    arch.dims = require<std::vector<int>>(j, "dims");
    arch.activation = activation_from_string(require<std::string>(j, "activation"));
    arch.relu_zero_slope = optional_or<double>(j, "relu_zero_slope", 0.0);
    if (!j.contains("layers") || !j.at("layers").is_array())
        throw SpecError("layers: missing or not an array");
    for (const auto& jl : j.at("layers")) {
        LayerSpec l;
        const int idx = static_cast<int>(arch.layers.size());
        if (idx + 1 >= static_cast<int>(arch.dims.size()))
            throw SpecError("layers: more layers than dims admits");
        l.rows = arch.dims[static_cast<size_t>(idx) + 1];
        l.cols = arch.dims[static_cast<size_t>(idx)];
        if (!jl.is_array()) throw SpecError("layers: each layer is an array of triples");
        int max_param = 0;
        for (const auto& js : jl) {
            if (!js.is_array() || js.size() != 3)
                throw SpecError("layers: slot must be a [row, col, param] triple");
            WeightSlot s;
            s.row = js.at(0).get<int>() - 1;
            s.col = js.at(1).get<int>() - 1;
            s.param = js.at(2).get<int>() - 1;
            max_param = std::max(max_param, s.param + 1);
            l.slots.push_back(s);
        }
        l.params = max_param;
        arch.layers.push_back(std::move(l));
    }
    if (j.contains("depth") && j.at("depth").get<int>() != arch.depth())
        throw SpecError("depth: does not match the number of layers");
    arch.validate();
    return arch;
}

json dataset_to_json(const Dataset& data) {
    json a = json::array();
    for (const Sample& s : data) {
        json js;
        js["x"] = vec_to_json(s.x);
        js["y"] = s.y;
        a.push_back(js);
    }
    return a;
}

Dataset dataset_from_json(const json& j) {
    if (!j.is_array()) throw SpecError("data: expected an array of samples");
    Dataset data;
    for (const auto& js : j) {
        Sample s;
        s.x = vec_from_json(js.contains("x") ? js.at("x") : json(), "data.x");
        s.y = require<int>(js, "y");
        if (s.y != 1 && s.y != -1) throw SpecError("data.y: labels are +1 or -1");
        data.push_back(std::move(s));
    }
    return data;
}

json theta_to_json(const ArchSpec& arch, const Vec& theta) {
    json a = json::array();
    for (int l = 0; l < arch.depth(); ++l)
        a.push_back(vec_to_json(layer_params(arch, theta, l)));
    return a;
}

Vec theta_from_json(const ArchSpec& arch, const json& j) {
    if (!j.is_array() || static_cast<int>(j.size()) != arch.depth())
        throw SpecError("theta: expected one array per layer");
    Vec theta(arch.param_count());
    for (int l = 0; l < arch.depth(); ++l) {
        const Vec seg = vec_from_json(j.at(static_cast<size_t>(l)), "theta");
        if (seg.size() != arch.layers[static_cast<size_t>(l)].params)
            throw SpecError("theta: layer " + std::to_string(l + 1) + " has wrong length");
        theta.segment(arch.layer_offset(l), seg.size()) = seg;
    }
    return theta;
}

json certificate_to_json(const KktCertificate& cert) {
    json j;
    j["verdict"] = to_string(cert.verdict);
    j["scale"] = cert.scale;
    j["margins"] = vec_to_json(cert.margins);
    j["active"] = cert.active;
    j["lambda"] = vec_to_json(cert.lambda);
    j["stationarity_abs"] = cert.stationarity_abs;
    j["stationarity_rel"] = cert.stationarity_rel;
    j["complementarity"] = cert.complementarity;
    j["kink_contact"] = cert.kink_contact;
    j["tolerances"] = {{"tau_act", cert.tolerances.tau_act},
                       {"tau_feas", cert.tolerances.tau_feas},
                       {"tau_stat", cert.tolerances.tau_stat},
                       {"tau_comp", cert.tolerances.tau_comp}};
    return j;
}

json witness_report_to_json(const WitnessReport& w) {
    json j;
    j["verdict"] = to_string(w.verdict);
    j["eps"] = w.eps;
    j["distance"] = w.distance;
    j["delta_sq_norm"] = w.delta_sq_norm;
    j["margins"] = vec_to_json(w.margins);
    j["theta_prime"] = vec_to_json(w.theta_prime);
    return j;
}

json probe_report_to_json(const ProbeReport& p) {
    json j;
    j["verdict"] = to_string(p.verdict);
    j["eps"] = p.eps;
    j["samples"] = p.samples;
    j["seed"] = p.seed;
    if (p.verdict == ProbeVerdict::NOT_LOCAL) j["witness"] = witness_report_to_json(p.best);
    return j;
}

json gap_report_to_json(const GapReport& g) {
    json j;
    j["verdict"] = to_string(g.verdict);
    j["theta_sq_norm"] = g.theta_sq_norm;
    j["ref_sq_norm"] = g.ref_sq_norm;
    j["ratio"] = g.ratio;
    return j;
}

json balance_report_to_json(const BalanceReport& b) {
    json j;
    json drift = json::object();
    for (size_t i = 0; i < b.names.size(); ++i) drift[b.names[i]] = b.drift[i];
    json gaps = json::object();
    for (size_t i = 0; i < b.gap_names.size(); ++i) gaps[b.gap_names[i]] = b.limit_gap[i];
    j["drift"] = drift;
    j["max_drift"] = b.max_drift();
    j["limit_gap"] = gaps;
    j["max_limit_gap"] = b.max_limit_gap();
    return j;
}

namespace {

json flow_config_to_json(const FlowConfig& f) {
    json j;
    j["unit_speed"] = f.unit_speed;
    j["rel_tol"] = f.rel_tol;
    j["abs_tol"] = f.abs_tol;
    j["s_budget"] = f.s_budget;
    j["s_min"] = f.s_min;
    j["loss_target"] = f.loss_target;
    j["direction_tolerance"] = f.direction_tolerance;
    j["direction_window"] = f.direction_window;
    j["checkpoint_stride"] = f.checkpoint_stride;
    j["h_init"] = f.h_init;
    j["h_min"] = f.h_min;
    j["h_max"] = f.h_max;
    j["kink_min_step"] = f.kink_min_step;
    return j;
}

FlowConfig flow_config_from_json(const json& j) {
    FlowConfig f;
    f.unit_speed = optional_or<bool>(j, "unit_speed", f.unit_speed);
    f.rel_tol = optional_or<double>(j, "rel_tol", f.rel_tol);
    f.abs_tol = optional_or<double>(j, "abs_tol", f.abs_tol);
    f.s_budget = optional_or<double>(j, "s_budget", f.s_budget);
    f.s_min = optional_or<double>(j, "s_min", f.s_min);
    f.loss_target = optional_or<double>(j, "loss_target", f.loss_target);
    f.direction_tolerance = optional_or<double>(j, "direction_tolerance", f.direction_tolerance);
    f.direction_window = optional_or<int>(j, "direction_window", f.direction_window);
    f.checkpoint_stride = optional_or<int>(j, "checkpoint_stride", f.checkpoint_stride);
    f.h_init = optional_or<double>(j, "h_init", f.h_init);
    f.h_min = optional_or<double>(j, "h_min", f.h_min);
    f.h_max = optional_or<double>(j, "h_max", f.h_max);
    f.kink_min_step = optional_or<double>(j, "kink_min_step", f.kink_min_step);
    return f;
}

}  // namespace

json scenario_to_json(const Scenario& sc) {
    json j;
    j["id"] = sc.id;
    j["summary"] = sc.summary;
    j["arch"] = arch_to_json(sc.arch);
    j["data"] = dataset_to_json(sc.data);
    j["init"] = theta_to_json(sc.arch, sc.init);
    json losses = json::array();
    for (LossKind k : sc.losses) losses.push_back(to_string(k));
    j["losses"] = losses;
    j["flow"] = flow_config_to_json(sc.flow);
    if (!sc.witness_form.empty()) {
        j["witness_form"] = sc.witness_form;
        j["eps_default"] = sc.eps_default;
        j["eps_range"] = json::array({sc.eps_lo, sc.eps_hi});
        if (sc.witness_layer > 0) j["witness_layer"] = sc.witness_layer;
    }
    j["probe"] = {{"eps", sc.probe_eps}, {"budget", sc.probe_budget}, {"seed", sc.probe_seed}};
    if (!sc.global_ref.empty()) {
        j["global_ref"] = sc.global_ref;
        if (sc.global_ref == "candidate")
            j["global_candidate"] = theta_to_json(sc.arch, sc.global_candidate);
    }
    if (sc.expected_theta) {
        j["expected_theta"] = theta_to_json(sc.arch, *sc.expected_theta);
        j["expected_theta_tol"] = sc.expected_theta_tol;
    }
    if (sc.expected_sq_norm) {
        j["expected_sq_norm"] = *sc.expected_sq_norm;
        j["expected_sq_norm_tol"] = sc.expected_sq_norm_tol;
    }
    j["preconditions"] = sc.preconditions;
    json ev = json::object();
    if (sc.expected.kkt) ev["kkt"] = to_string(*sc.expected.kkt);
    if (sc.expected.local) ev["local"] = to_string(*sc.expected.local);
    if (sc.expected.global) ev["global"] = to_string(*sc.expected.global);
    if (!sc.expected.per_layer.empty()) {
        json pl = json::object();
        for (const auto& [layer, v] : sc.expected.per_layer)
            pl[std::to_string(layer)] = to_string(v);
        ev["per_layer"] = pl;
    }
    j["expected"] = ev;
    return j;
}

namespace {

KktVerdict kkt_verdict_from_string(const std::string& s) {
    if (s == "KKT") return KktVerdict::KKT;
    if (s == "NOT_KKT") return KktVerdict::NOT_KKT;
    if (s == "INFEASIBLE") return KktVerdict::INFEASIBLE;
    throw SpecError("expected.kkt: unknown verdict '" + s + "'");
}

ProbeVerdict probe_verdict_from_string(const std::string& s) {
    if (s == "NOT_LOCAL") return ProbeVerdict::NOT_LOCAL;
    if (s == "NO_WITNESS_FOUND") return ProbeVerdict::NO_WITNESS_FOUND;
    if (s == "INVALID_WITNESS") return ProbeVerdict::INVALID_WITNESS;
    throw SpecError("expected.local: unknown verdict '" + s + "'");
}

GapVerdict gap_verdict_from_string(const std::string& s) {
    if (s == "NOT_GLOBAL") return GapVerdict::NOT_GLOBAL;
    if (s == "NO_GAP_DETECTED") return GapVerdict::NO_GAP_DETECTED;
    throw SpecError("expected.global: unknown verdict '" + s + "'");
}

PerLayerVerdict per_layer_verdict_from_string(const std::string& s) {
    if (s == "GLOBAL") return PerLayerVerdict::GLOBAL;
    if (s == "LOCAL") return PerLayerVerdict::LOCAL;
    if (s == "NOT_LOCAL") return PerLayerVerdict::NOT_LOCAL;
    if (s == "SKIPPED") return PerLayerVerdict::SKIPPED;
    throw SpecError("expected.per_layer: unknown verdict '" + s + "'");
}

}  // namespace

Scenario scenario_from_json(const json& j) {
    Scenario sc;
    sc.id = require<std::string>(j, "id");
    sc.summary = optional_or<std::string>(j, "summary", "");
    if (!j.contains("arch")) throw SpecError("arch: missing");
    sc.arch = arch_from_json(j.at("arch"));
    if (!j.contains("data")) throw SpecError("data: missing");
    sc.data = dataset_from_json(j.at("data"));
    if (!j.contains("init")) throw SpecError("init: missing");
    sc.init = theta_from_json(sc.arch, j.at("init"));
    if (j.contains("losses")) {
        sc.losses.clear();
        for (const auto& jl : j.at("losses"))
            sc.losses.push_back(loss_from_string(jl.get<std::string>()));
        if (sc.losses.empty()) throw SpecError("losses: must not be empty");
    }
    if (j.contains("flow")) sc.flow = flow_config_from_json(j.at("flow"));
    sc.witness_form = optional_or<std::string>(j, "witness_form", "");
    sc.eps_default = optional_or<double>(j, "eps_default", sc.eps_default);
    if (j.contains("eps_range")) {
        const auto& r = j.at("eps_range");
        if (!r.is_array() || r.size() != 2) throw SpecError("eps_range: expected [lo, hi]");
        sc.eps_lo = r.at(0).get<double>();
        sc.eps_hi = r.at(1).get<double>();
    }
    sc.witness_layer = optional_or<int>(j, "witness_layer", -1);
    if (j.contains("probe")) {
        const auto& p = j.at("probe");
        sc.probe_eps = optional_or<double>(p, "eps", sc.probe_eps);
        sc.probe_budget = optional_or<long>(p, "budget", sc.probe_budget);
        sc.probe_seed = optional_or<std::uint64_t>(p, "seed", sc.probe_seed);
    }
    sc.global_ref = optional_or<std::string>(j, "global_ref", "");
    if (sc.global_ref == "candidate") {
        if (!j.contains("global_candidate"))
            throw SpecError("global_candidate: required when global_ref is 'candidate'");
        sc.global_candidate = theta_from_json(sc.arch, j.at("global_candidate"));
    }
    if (j.contains("expected_theta")) {
        sc.expected_theta = theta_from_json(sc.arch, j.at("expected_theta"));
        sc.expected_theta_tol = optional_or<double>(j, "expected_theta_tol", sc.expected_theta_tol);
    }
    if (j.contains("expected_sq_norm")) {
        sc.expected_sq_norm = require<double>(j, "expected_sq_norm");
        sc.expected_sq_norm_tol =
            optional_or<double>(j, "expected_sq_norm_tol", sc.expected_sq_norm_tol);
    }
    sc.preconditions = optional_or<std::vector<std::string>>(j, "preconditions", {});
    if (j.contains("expected")) {
        const auto& ev = j.at("expected");
        if (ev.contains("kkt"))
            sc.expected.kkt = kkt_verdict_from_string(ev.at("kkt").get<std::string>());
        if (ev.contains("local"))
            sc.expected.local = probe_verdict_from_string(ev.at("local").get<std::string>());
        if (ev.contains("global"))
            sc.expected.global = gap_verdict_from_string(ev.at("global").get<std::string>());
        if (ev.contains("per_layer"))
            for (const auto& [key, val] : ev.at("per_layer").items())
                sc.expected.per_layer[std::stoi(key)] =
                    per_layer_verdict_from_string(val.get<std::string>());
    }
    return sc;
}

json run_report_to_json(const RunReport& r) {
    json j;
    j["scenario"] = r.scenario;
    j["loss"] = to_string(r.loss);
    j["pass"] = r.pass;
    if (!r.fail_reason.empty()) j["fail_reason"] = r.fail_reason;
    json flow;
    flow["converged"] = r.flow_converged;
    flow["status"] = to_string(r.flow_status);
    flow["s_final"] = r.s_final;
    flow["steps"] = r.steps;
    flow["checkpoints"] = r.checkpoints;
    flow["loss_final"] = r.loss_final;
    flow["norm_final"] = r.norm_final;
    flow["direction_stability"] = r.direction_stability;
    j["flow"] = flow;
    if (!r.flow_converged) return j;
    j["balance"] = balance_report_to_json(r.balance);
    j["scale"] = r.scale;
    j["theta_tilde"] = vec_to_json(r.theta_tilde);
    j["margins"] = vec_to_json(r.margins);
    j["kkt"] = certificate_to_json(r.kkt);
    if (r.witness) j["witness"] = witness_report_to_json(*r.witness);
    if (r.probe) j["probe"] = probe_report_to_json(*r.probe);
    if (r.gap) j["gap"] = gap_report_to_json(*r.gap);
    if (!r.per_layer.empty()) {
        json pl = json::array();
        for (const PerLayerOutcome& o : r.per_layer) {
            json jo;
            jo["layer"] = o.layer;
            jo["verdict"] = to_string(o.verdict);
            jo["dist_to_layer"] = o.dist_to_layer;
            jo["objective"] = o.objective;
            if (!o.note.empty()) jo["note"] = o.note;
            pl.push_back(jo);
        }
        j["per_layer"] = pl;
    }
    if (r.l1_objective) j["l1_objective"] = *r.l1_objective;
    if (r.l1_beta) j["l1_beta"] = vec_to_json(*r.l1_beta);
    if (r.group_objective) j["group_objective"] = *r.group_objective;
    if (r.group_certified) j["group_certified"] = *r.group_certified;
    if (r.predictor) j["predictor"] = vec_to_json(*r.predictor);
    json checks = json::array();
    for (const NumericCheck& c : r.checks) {
        json jc;
        jc["name"] = c.name;
        jc["value"] = c.value;
        jc["tol"] = c.tol;
        jc["pass"] = c.pass;
        checks.push_back(jc);
    }
    j["checks"] = checks;
    j["verdicts_match"] = r.verdicts_match;
    return j;
}

Scenario load_scenario(const std::string& id_or_path, const BuildOverrides& ov) {
    const auto ids = catalog_ids();
    if (std::find(ids.begin(), ids.end(), id_or_path) != ids.end())
        return build_scenario(id_or_path, ov);
    if (!std::filesystem::exists(id_or_path))
        throw SpecError("scenario: '" + id_or_path + "' is neither a catalog id nor a file");
    std::ifstream in(id_or_path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw SpecError("scenario file: malformed JSON: " + std::string(e.what()));
    }
    Scenario sc = scenario_from_json(j);
    if (ov.eps) {
        sc.eps_default = *ov.eps;
        sc.probe_eps = *ov.eps;
    }
    if (ov.seed) sc.probe_seed = *ov.seed;
    if (ov.budget) sc.probe_budget = *ov.budget;
    if (ov.s_budget) sc.flow.s_budget = *ov.s_budget;
    check_preconditions(sc, sc.losses.front());
    return sc;
}

}  // namespace marginlab
