#include "marginlab/ioutil.hpp"
#include "marginlab/jsonio.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace {

using namespace marginlab;

constexpr int kExitOk = 0;
constexpr int kExitLoadFailure = 2;
constexpr int kExitFlowNotConverged = 3;
constexpr int kExitVerdictMismatch = 4;

LossKind parse_loss(const std::string& s) {
    if (s == "exp") return LossKind::Exponential;
    if (s == "log") return LossKind::Logistic;
    throw SpecError("loss: expected 'exp' or 'log'");
}

std::string loss_tag(LossKind k) { return k == LossKind::Exponential ? "exp" : "log"; }

std::optional<std::uint64_t> env_seed() {
    const char* v = std::getenv("MARGINLAB_SEED");
    if (!v || !*v) return std::nullopt;
    return std::strtoull(v, nullptr, 10);
}

struct CommonFlags {
    std::string scenario;
    std::string loss;
    std::optional<double> eps;
    std::optional<std::uint64_t> seed;
    std::optional<long> budget;
    std::optional<double> s_budget;
    std::optional<double> tol_stat;
    std::string out_dir;
    std::string csv_path;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_scenario = true) {
    if (with_scenario)
        cmd->add_option("--scenario", f.scenario, "catalog id or scenario JSON file")
            ->required();
    cmd->add_option("--loss", f.loss, "loss kind: exp | log")
        ->check(CLI::IsMember({"exp", "log"}));
    cmd->add_option("--eps", f.eps, "witness / probe radius");
    cmd->add_option("--seed", f.seed, "probe seed (falls back to MARGINLAB_SEED)");
    cmd->add_option("--budget", f.budget, "probe sample budget");
    cmd->add_option("--s-budget", f.s_budget, "flow arc-length budget");
    cmd->add_option("--tol-stat", f.tol_stat, "KKT stationarity tolerance");
    cmd->add_option("--out", f.out_dir, "directory for JSON reports");
    cmd->add_option("--csv", f.csv_path, "trajectory CSV path");
}

BuildOverrides build_overrides(const CommonFlags& f) {
    BuildOverrides ov;
    ov.eps = f.eps;
    ov.seed = f.seed ? f.seed : env_seed();
    ov.budget = f.budget;
    ov.s_budget = f.s_budget;
    return ov;
}

RunOverrides run_overrides(const CommonFlags& f) {
    RunOverrides ov;
    ov.eps = f.eps;
    ov.seed = f.seed ? f.seed : env_seed();
    ov.budget = f.budget;
    ov.s_budget = f.s_budget;
    ov.tol_stat = f.tol_stat;
    return ov;
}

void emit_json(const json& j, const std::string& out_dir, const std::string& name) {
    if (out_dir.empty()) {
        std::cout << j.dump(2) << "\n";
        return;
    }
    std::filesystem::create_directories(out_dir);
    write_file_atomic((std::filesystem::path(out_dir) / name).string(), j.dump(2) + "\n");
}

json dataset_file_to_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SpecError("data: cannot open '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw SpecError("data: malformed JSON: " + std::string(e.what()));
    }
    return j;
}

int cmd_list() {
    for (const std::string& id : catalog_ids()) {
        const Scenario sc = build_scenario(id);
        std::cout << id << "  " << sc.summary << "\n";
    }
    return kExitOk;
}

int cmd_run(const CommonFlags& f) {
    const Scenario sc = load_scenario(f.scenario, build_overrides(f));
    const LossKind loss = f.loss.empty() ? sc.losses.front() : parse_loss(f.loss);
    const RunReport rep = run_scenario(sc, loss, run_overrides(f));
    emit_json(run_report_to_json(rep), f.out_dir,
              sc.id + "_" + loss_tag(loss) + ".json");
    if (!f.csv_path.empty()) {
        const FlowResult flow = run_flow(sc, loss, run_overrides(f));
        write_trajectory_csv(sc.arch, flow.traj, f.csv_path);
    }
    std::cerr << "run " << sc.id << " (" << loss_tag(loss) << "): "
              << (rep.pass ? "pass" : "FAIL") << " in " << rep.wall_seconds << " s\n";
    if (!rep.flow_converged) return kExitFlowNotConverged;
    return rep.pass ? kExitOk : kExitVerdictMismatch;
}

int cmd_flow(const CommonFlags& f) {
    const Scenario sc = load_scenario(f.scenario, build_overrides(f));
    const LossKind loss = f.loss.empty() ? sc.losses.front() : parse_loss(f.loss);
    const auto t0 = std::chrono::steady_clock::now();
    const FlowResult flow = run_flow(sc, loss, run_overrides(f));
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::string csv = f.csv_path;
    if (csv.empty() && !f.out_dir.empty()) {
        std::filesystem::create_directories(f.out_dir);
        csv = (std::filesystem::path(f.out_dir) /
               (sc.id + "_" + loss_tag(loss) + "_trajectory.csv"))
                  .string();
    }
    if (!csv.empty()) write_trajectory_csv(sc.arch, flow.traj, csv);
    json j;
    j["scenario"] = sc.id;
    j["loss"] = to_string(loss);
    j["status"] = to_string(flow.status);
    j["s_final"] = flow.traj.back().s;
    j["steps_accepted"] = flow.steps_accepted;
    j["steps_rejected"] = flow.steps_rejected;
    j["checkpoints"] = flow.traj.points.size();
    j["loss_final"] = flow.traj.back().loss;
    j["norm_final"] = flow.traj.back().norm;
    if (!csv.empty()) j["csv"] = csv;
    std::cout << j.dump(2) << "\n";
    std::cerr << "flow " << sc.id << " (" << loss_tag(loss) << "): "
              << to_string(flow.status) << " in " << secs << " s\n";
    return flow.status == FlowStatus::ReachedTarget ? kExitOk : kExitFlowNotConverged;
}

int cmd_kkt(const CommonFlags& f, const std::string& theta_path) {
    const Scenario sc = load_scenario(f.scenario, build_overrides(f));
    const json jt = dataset_file_to_json(theta_path);
    const Vec theta = theta_from_json(sc.arch, jt.contains("theta") ? jt.at("theta") : jt);
    KktConfig cfg;
    if (f.tol_stat) cfg.tau_stat = *f.tol_stat;
    const KktCertificate cert = kkt_certificate(sc.arch, theta, sc.data, cfg);
    emit_json(certificate_to_json(cert), f.out_dir, sc.id + "_kkt.json");
    return kExitOk;
}

int cmd_probe(const CommonFlags& f) {
    const Scenario sc = load_scenario(f.scenario, build_overrides(f));
    const LossKind loss = f.loss.empty() ? sc.losses.front() : parse_loss(f.loss);
    const FlowResult flow = run_flow(sc, loss, run_overrides(f));
    if (flow.status != FlowStatus::ReachedTarget) {
        std::cerr << "probe " << sc.id << ": flow did not converge: "
                  << to_string(flow.status) << "\n";
        return kExitFlowNotConverged;
    }
    const DirectionLimit dl =
        direction_limit(flow.traj, sc.flow.direction_window, sc.flow.direction_tolerance);
    const RescaleResult rs = rescale_to_unit_margin(sc.arch, dl.direction, sc.data);
    if (!rs.ok) {
        std::cerr << "probe " << sc.id << ": " << rs.error << "\n";
        return kExitFlowNotConverged;
    }
    const ProbeReport rep = local_probe(
        sc.arch, sc.data, rs.theta_tilde, {}, f.eps.value_or(sc.probe_eps),
        f.budget.value_or(sc.probe_budget),
        f.seed ? *f.seed : env_seed().value_or(sc.probe_seed));
    json j = probe_report_to_json(rep);
    j["scenario"] = sc.id;
    emit_json(j, f.out_dir, sc.id + "_probe.json");
    return kExitOk;
}

int cmd_solve(const std::string& problem, const std::string& data_path,
              const std::string& out_dir) {
    const json jd = dataset_file_to_json(data_path);
    json j;
    j["problem"] = problem;
    if (problem == "group") {
        GroupProblem gp;
        if (jd.contains("arch")) {
            const ArchSpec arch = arch_from_json(jd.at("arch"));
            const Dataset data = dataset_from_json(jd.at("data"));
            std::optional<Vec> theta;
            if (jd.contains("theta")) theta = theta_from_json(arch, jd.at("theta"));
            gp = group_problem_depth2(arch, data, theta ? &*theta : nullptr);
        } else {
            throw SpecError("data: group problems need an 'arch' plus 'data' file");
        }
        const GroupResult res = solve_group_maxmargin(gp);
        j["status"] = to_string(res.status);
        if (res.status != SolveStatus::Infeasible) {
            j["objective"] = res.objective;
            j["certified"] = res.certified;
            j["duality_gap"] = res.duality_gap;
            json groups = json::array();
            for (const Vec& u : res.u) {
                json g = json::array();
                for (Eigen::Index i = 0; i < u.size(); ++i) g.push_back(u[i]);
                groups.push_back(g);
            }
            j["u"] = groups;
        }
    } else {
        const Dataset data = dataset_from_json(jd.contains("data") ? jd.at("data") : jd);
        std::vector<Vec> xs;
        std::vector<int> ys;
        for (const Sample& s : data) {
            xs.push_back(s.x);
            ys.push_back(s.y);
        }
        if (problem == "qp") {
            const QpResult res = solve_linear_maxmargin(xs, ys);
            j["status"] = to_string(res.status);
            if (res.status == SolveStatus::Optimal) {
                json u = json::array();
                for (Eigen::Index i = 0; i < res.u.size(); ++i) u.push_back(res.u[i]);
                j["u"] = u;
                j["objective"] = res.objective;
                j["kkt_residual"] = res.kkt_residual;
            }
        } else if (problem == "l1") {
            const L1Result res = solve_l1_maxmargin(xs, ys);
            j["status"] = to_string(res.status);
            if (res.status == SolveStatus::Optimal) {
                json beta = json::array();
                for (Eigen::Index i = 0; i < res.beta.size(); ++i)
                    beta.push_back(res.beta[i]);
                j["beta"] = beta;
                j["objective"] = res.objective;
            }
        } else {
            throw SpecError("problem: expected qp, l1 or group");
        }
    }
    emit_json(j, out_dir, "solve_" + problem + ".json");
    return kExitOk;
}

int cmd_report(std::vector<std::string> ids, const std::string& out_dir,
               const CommonFlags& f) {
    if (ids.empty()) ids = catalog_ids();
    std::filesystem::create_directories(out_dir);
    std::ostringstream csv;
    csv << "scenario,loss,pass,flow_status,s_final,loss_final,sq_norm,kkt,local,global,"
           "fail_reason\n";
    bool all_pass = true;
    for (const std::string& id : ids) {
        const Scenario sc = load_scenario(id, build_overrides(f));
        for (LossKind loss : sc.losses) {
            const auto t0 = std::chrono::steady_clock::now();
            const RunReport rep = run_scenario(sc, loss, run_overrides(f));
            const double secs =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                    .count();
            all_pass = all_pass && rep.pass;
            const std::string name = sc.id + "_" + loss_tag(loss) + ".json";
            write_file_atomic((std::filesystem::path(out_dir) / name).string(),
                              run_report_to_json(rep).dump(2) + "\n");
            std::string local = "-", global = "-";
            if (rep.witness) local = to_string(rep.witness->verdict);
            if (rep.probe) local = to_string(rep.probe->verdict);
            if (rep.gap) global = to_string(rep.gap->verdict);
            csv << sc.id << ',' << loss_tag(loss) << ',' << (rep.pass ? "pass" : "fail")
                << ',' << to_string(rep.flow_status) << ',' << format17(rep.s_final)
                << ',' << format17(rep.loss_final) << ','
                << format17(rep.theta_tilde.size() ? rep.theta_tilde.squaredNorm() : 0.0)
                << ',' << to_string(rep.kkt.verdict) << ',' << local << ',' << global
                << ',' << (rep.fail_reason.empty() ? "" : "\"" + rep.fail_reason + "\"")
                << "\n";
            std::cerr << "report " << sc.id << " (" << loss_tag(loss) << "): "
                      << (rep.pass ? "pass" : "FAIL") << " in " << secs << " s\n";
        }
    }
    write_file_atomic((std::filesystem::path(out_dir) / "summary.csv").string(),
                      csv.str());
    std::cout << "wrote " << (std::filesystem::path(out_dir) / "summary.csv").string()
              << "\n";
    return all_pass ? kExitOk : kExitVerdictMismatch;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"margin analysis of homogeneous nets under gradient flow"};
    app.require_subcommand(1);

    CommonFlags run_f, flow_f, kkt_f, probe_f, report_f;
    std::string theta_path, problem, data_path, solve_out;
    std::vector<std::string> report_ids;

    app.add_subcommand("list", "print the scenario catalog");

    CLI::App* c_run = app.add_subcommand("run", "full pipeline on one scenario");
    add_common(c_run, run_f);

    CLI::App* c_flow = app.add_subcommand("flow", "integration only, with CSV export");
    add_common(c_flow, flow_f);

    CLI::App* c_kkt = app.add_subcommand("kkt", "certify a provided parameter point");
    add_common(c_kkt, kkt_f);
    c_kkt->add_option("--theta", theta_path, "JSON file with per-layer parameter arrays")
        ->required();

    CLI::App* c_probe = app.add_subcommand("probe", "randomized local-optimality probe");
    add_common(c_probe, probe_f);

    CLI::App* c_solve = app.add_subcommand("solve", "convex reference solvers");
    c_solve->add_option("--problem", problem, "qp | l1 | group")
        ->required()
        ->check(CLI::IsMember({"qp", "l1", "group"}));
    c_solve->add_option("--data", data_path, "dataset or problem JSON file")->required();
    c_solve->add_option("--out", solve_out, "directory for the result JSON");

    CLI::App* c_report = app.add_subcommand("report", "run many scenarios, summarize as CSV");
    c_report->add_option("ids", report_ids, "catalog ids (default: all)");
    add_common(c_report, report_f, false);

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("list")) return cmd_list();
        if (app.got_subcommand("run")) return cmd_run(run_f);
        if (app.got_subcommand("flow")) return cmd_flow(flow_f);
        if (app.got_subcommand("kkt")) return cmd_kkt(kkt_f, theta_path);
        if (app.got_subcommand("probe")) return cmd_probe(probe_f);
        if (app.got_subcommand("solve")) return cmd_solve(problem, data_path, solve_out);
        if (app.got_subcommand("report"))
            return cmd_report(report_ids,
                              report_f.out_dir.empty() ? std::string("reports")
                                                       : report_f.out_dir,
                              report_f);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitLoadFailure;
    }
    return kExitLoadFailure;
}
