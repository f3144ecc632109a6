#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "dcgrid/controller.hpp"
#include "dcgrid/integrator.hpp"
#include "dcgrid/oracle.hpp"
#include "dcgrid/plant.hpp"
#include "dcgrid/scenario.hpp"

namespace dcgrid {

/// Plant and decision system stacked into one ODE, y = (I, V, I_l, controller).
/// With reduced = true the estimator is replaced by its quasi-steady state
/// and the upsilon/nu blocks stay frozen.
class ClosedLoopSystem {
public:
    ClosedLoopSystem(GameDefinition game, ControllerParams cp, bool reduced = false)
        : game_(std::move(game)), plant_(game_.plant, game_.topo), cp_(cp), cl_(game_.n(), game_.m()),
          px_(2 * game_.n() + game_.m()), reduced_(reduced) {}

    int plant_dim() const noexcept { return px_; }
    int size() const noexcept { return px_ + cl_.size(); }
    const GameDefinition& game() const noexcept { return game_; }
    const PlantModel& plant() const noexcept { return plant_; }
    const ControllerParams& params() const noexcept { return cp_; }
    const ControllerLayout& layout() const noexcept { return cl_; }

    ControllerView<const double> controller(const Eigen::VectorXd& y) const { return {y.data() + px_, cl_}; }

    ControllerState controller_state(const Eigen::VectorXd& y) const {
        return ControllerState(game_.n(), game_.m(), y.segment(px_, cl_.size()));
    }

    void operator()(double, const Eigen::VectorXd& y, Eigen::VectorXd& dy) const {
        const ControllerView<const double> cs(y.data() + px_, cl_);
        ControllerView<double> dcs(dy.data() + px_, cl_);
        const auto x = y.head(px_);
        if (reduced_) {
            reduced_model_rhs(plant_, game_, cp_, x, cs, dy.head(px_), dcs);
            return;
        }
        plant_.rhs(x, cs.u(), dy.head(px_));
        controller_fast_rhs(game_, cp_, cs, dcs);
        controller_slow_rhs(game_, cp_, cs, cs.upsilon(), x.head(game_.n()), dcs);
    }

    /// A penalized coordinate of xhat that stepped across one of its bounds
    /// is put back on the bound, where the flow then slides.
    void post_step(const Eigen::VectorXd& prev, Eigen::VectorXd& y) const {
        const auto& al = game_.layout;
        const int base = px_ + cl_.xhat();
        for (int i = 0; i < al.n; ++i)
            for (int j = 1; j < al.size[i]; ++j) {
                const int idx = base + al.x_offset[i] + j;
                const Box b = game_.box(i, j);
                for (const double bound : {b.lo, b.hi}) {
                    const double before = prev[idx] - bound, after = y[idx] - bound;
                    if ((before > 0 && after < 0) || (before < 0 && after > 0)) {
                        y[idx] = bound;
                        break;
                    }
                }
            }
    }

    /// Swaps in new physical parameters; the state is untouched.
    void set_plant(const PlantParams& p) {
        game_ = game_.with_plant(p);
        plant_ = PlantModel(p, game_.topo);
    }

private:
    GameDefinition game_;
    PlantModel plant_;
    ControllerParams cp_;
    ControllerLayout cl_;
    int px_;
    bool reduced_;
};

/// Everything computed at one output sample.
struct SampleDiagnostics {
    double t = 0.0;
    SamplePhase phase = SamplePhase::Regular;
    KktResidual kkt;
    ConsensusErrors consensus;
    double aggregate_error = 0.0; // max_i |upsilon_i - sum Ihat|
    double nu_drift = 0.0;        // |1^T nu(t) - 1^T nu(0)|
    double theta_drift = 0.0;     // |sum_i theta_i(t) - sum_i theta_i(0)|_inf
    LyapunovSample lyapunov;
    double V_violation = 0.0;  // largest excursion of a plant voltage outside its box
    double Il_violation = 0.0; // same for line currents
};

inline double box_excursion(double v, double lo, double hi) { return std::max({0.0, lo - v, v - hi}); }

inline SampleDiagnostics diagnose(const ClosedLoopSystem& sys, double t, const Eigen::VectorXd& y,
                                  const Eigen::VectorXd& y0, SamplePhase phase) {
    const auto& g = sys.game();
    const int n = g.n(), m = g.m();
    const ControllerState cs = sys.controller_state(y);
    const ControllerState c0 = sys.controller_state(y0);
    SampleDiagnostics d;
    d.t = t;
    d.phase = phase;
    d.kkt = kkt_residual(cs, g, sys.params().kink_tol);
    d.consensus = consensus_errors(cs, g.r_vector());
    const double total = cs.ihat(g.layout).sum();
    d.aggregate_error = (cs.upsilon().array() - total).abs().maxCoeff();
    d.nu_drift = std::abs(cs.nu().sum() - c0.nu().sum());
    d.theta_drift = (cs.theta().rowwise().sum() - c0.theta().rowwise().sum()).lpNorm<Eigen::Infinity>();
    const Eigen::VectorXd x = y.head(sys.plant_dim());
    d.lyapunov = lyapunov_diagnostics(sys.plant(), g, sys.params(), x, cs);
    for (int i = 0; i < n; ++i)
        d.V_violation = std::max(d.V_violation, box_excursion(x[n + i], g.plant.dgus[i].V_min, g.plant.dgus[i].V_max));
    for (int k = 0; k < m; ++k)
        d.Il_violation =
            std::max(d.Il_violation, box_excursion(x[2 * n + k], g.plant.lines[k].I_min, g.plant.lines[k].I_max));
    return d;
}

inline std::vector<std::string> csv_header(const GameDefinition& g) {
    const int n = g.n(), m = g.m();
    std::vector<std::string> h{"time", "phase"};
    auto idx = [](int k) { return std::to_string(k + 1); };
    for (int i = 0; i < n; ++i) h.push_back("plant.I." + idx(i));
    for (int i = 0; i < n; ++i) h.push_back("plant.V." + idx(i));
    for (int k = 0; k < m; ++k) h.push_back("plant.Il." + idx(k));
    for (int i = 0; i < n; ++i) h.push_back("ctrl.upsilon." + idx(i));
    for (int i = 0; i < n; ++i) h.push_back("ctrl.nu." + idx(i));
    for (int i = 0; i < n; ++i) h.push_back("ctrl.u." + idx(i));
    for (int i = 0; i < n; ++i) {
        h.push_back("ctrl.xhat." + idx(i) + ".I");
        h.push_back("ctrl.xhat." + idx(i) + ".V");
        for (int line : g.topo.managed_lines(i)) h.push_back("ctrl.xhat." + idx(i) + ".Il" + idx(line));
    }
    const int d = n + m;
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) h.push_back("ctrl.lambda." + idx(i) + "." + idx(c));
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) h.push_back("ctrl.theta." + idx(i) + "." + idx(c));
    for (int i = 0; i < n; ++i) h.push_back("ctrl.gamma." + idx(i));
    h.push_back("diag.kkt");
    for (int l = 0; l < 7; ++l) h.push_back("diag.kkt." + idx(l));
    for (const char* s : {"diag.upsilon_spread", "diag.lambda_spread", "diag.aggregate_error", "diag.nu_drift",
                          "diag.theta_drift", "diag.E_b", "diag.E_r", "diag.V_violation", "diag.Il_violation"})
        h.emplace_back(s);
    return h;
}

inline const char* phase_name(SamplePhase p) {
    switch (p) {
    case SamplePhase::Regular: return "sample";
    case SamplePhase::BeforeEvent: return "pre_event";
    case SamplePhase::AfterEvent: return "post_event";
    }
    return "?";
}

/// Writes CSV rows with 17 significant digits, so reruns compare byte for byte.
class CsvWriter {
public:
    explicit CsvWriter(std::ostream& out) : out_(out) {}

    void header(const std::vector<std::string>& cols) {
        for (std::size_t c = 0; c < cols.size(); ++c) out_ << (c ? "," : "") << cols[c];
        out_ << '\n';
    }

    void row(double t, SamplePhase phase, const Eigen::VectorXd& y, const SampleDiagnostics& d) {
        put(t);
        out_ << ',' << phase_name(phase);
        for (Eigen::Index k = 0; k < y.size(); ++k) out_ << ',', put(y[k]);
        out_ << ',', put(d.kkt.max());
        for (double v : d.kkt.lines) out_ << ',', put(v);
        for (double v : {d.consensus.upsilon_spread, d.consensus.weighted_lambda_spread, d.aggregate_error, d.nu_drift,
                         d.theta_drift, d.lyapunov.E_b, d.lyapunov.E_r, d.V_violation, d.Il_violation})
            out_ << ',', put(v);
        out_ << '\n';
    }

private:
    void put(double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out_ << buf;
    }

    std::ostream& out_;
};

struct RunOptions {
    std::optional<std::string> out_dir; // write timeseries and summary here
    bool reduced = false;               // quasi-steady-state estimator
    bool record_states = false;         // keep every sampled state in the result
    bool solve_oracle = true;           // per-segment equilibrium comparison
};

/// Oracle equilibrium for one constant-parameter segment and how far the
/// controller is from it at the end of the segment.
struct SegmentReport {
    double t_start = 0.0;
    double t_end = 0.0;
    KktResidual kkt;                       // at the end of the segment
    std::optional<double> convergence_time; // first t after which kkt < threshold until the segment ends
    double V_min = 0.0, V_max = 0.0;       // plant voltages at the end of the segment
    double Il_min = 0.0, Il_max = 0.0;     // plant line currents at the end of the segment
    double V_violation = 0.0, Il_violation = 0.0;
    double assumption1 = 0.0;
    std::optional<EquilibriumSolution> oracle;
    std::optional<PenaltySlack> penalty_slack;
    double u_rel_error = 0.0;      // controller u vs oracle u*, componentwise relative
    double xhat_rel_error = 0.0;   // controller xhat vs oracle x*
    double lambda_rel_error = 0.0; // r_i lambda_i vs oracle shared multiplier
    // Stationary point of the penalized costs. Differs from the oracle when
    // the penalty weights are below the exact-penalty bound.
    std::optional<PenalizedEquilibrium> penalized;
    double u_pen_error = 0.0, xhat_pen_error = 0.0, lambda_pen_error = 0.0;
    ConsensusErrors consensus;
    double aggregate_error = 0.0;
};

struct RunResult {
    Eigen::VectorXd y0;
    Eigen::VectorXd final_state;
    std::vector<SampleDiagnostics> samples;
    std::vector<double> state_times;
    std::vector<Eigen::VectorXd> states; // only with record_states
    std::vector<SegmentReport> segments;
    Eigen::VectorXd assumption3;
    IntegrationStats stats;
    double max_drift_rate = 0.0; // max over samples of drift / max(t, 1 s)
    nlohmann::json summary;
};

/// Componentwise |a - b| / max(|b|, 1), so entries near zero are compared
/// absolutely.
inline double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return ((a - b).array().abs() / b.array().abs().max(1.0)).maxCoeff();
}

/// Controller state at which the closed loop rests for the given
/// equilibrium: theta is the minimum-norm solution of L theta_i = A_i x_i - s_Ai.
inline Eigen::VectorXd controller_equilibrium(const GameDefinition& g, const EquilibriumSolution& sol) {
    const int n = g.n(), m = g.m();
    ControllerState cs(n, m);
    cs.u() = sol.u_star;
    cs.xhat() = g.layout.global_to_agent(sol.x_star);
    cs.gamma() = sol.gamma_star;
    for (int i = 0; i < n; ++i) cs.lambda().col(i) = sol.lambda_star / g.r(i);
    const auto fast = fast_equilibrium(cs.ihat(g.layout), g.comm_laplacian);
    cs.upsilon() = fast.upsilon;
    cs.nu() = fast.nu;
    Eigen::MatrixXd local(n + m, n);
    for (int i = 0; i < n; ++i)
        local.col(i) = g.constraints.A_blocks[i] * cs.xhat().segment(g.layout.x_offset[i], g.layout.size[i]) -
                       g.constraints.s_A_blocks[i];
    const Eigen::MatrixXd shifted = g.comm_laplacian + Eigen::MatrixXd::Constant(n, n, 1.0 / n);
    cs.theta() = shifted.ldlt().solve(local.transpose()).transpose();
    return cs.data();
}

/// Initial closed-loop state: the plant at the oracle equilibrium of the
/// pre-event parameters (or zero), the controller at zero unless overridden.
inline Eigen::VectorXd initial_state(const Scenario& s, const GameDefinition& g,
                                     const std::optional<EquilibriumSolution>& pre) {
    const int n = g.n(), m = g.m(), px = 2 * n + m;
    const ControllerLayout cl(n, m);
    Eigen::VectorXd y = Eigen::VectorXd::Zero(px + cl.size());
    Eigen::VectorXd u0 = Eigen::VectorXd::Zero(n);
    const auto& ci = s.controller_init;
    std::optional<EquilibriumSolution> sol = pre;
    if (!sol && (s.plant_init == PlantInit::Equilibrium || ci.at_equilibrium)) sol = solve_vi(g);
    if (s.plant_init == PlantInit::Equilibrium) {
        u0 = sol->u_star;
        y.head(px) = plant_equilibrium(u0, s.plant, s.topo).stacked();
    }
    if (ci.at_equilibrium) y.tail(cl.size()) = controller_equilibrium(g, *sol);
    ControllerView<double> cv(y.data() + px, cl);
    if (ci.upsilon) cv.upsilon() = *ci.upsilon;
    if (ci.nu) cv.nu() = *ci.nu;
    if (ci.gamma) cv.gamma() = *ci.gamma;
    if (ci.u) cv.u() = *ci.u;
    if (ci.u_from_plant) cv.u() = y.segment(n, n) + PlantModel(s.plant, s.topo).R.cwiseProduct(y.head(n));
    if (ci.xhat) cv.xhat() = *ci.xhat;
    if (ci.xhat_from_plant) cv.xhat() = g.layout.global_to_agent(y.head(px));
    return y;
}

namespace detail {

inline nlohmann::json to_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline nlohmann::json to_json(const KktResidual& k) {
    return {{"max", k.max()}, {"lines", std::vector<double>(k.lines.begin(), k.lines.end())}};
}

} // namespace detail

/// Runs a validated scenario. Throws ConfigError for invalid input and
/// IntegrationError when the state blows up.
inline RunResult run_scenario(const Scenario& s, const RunOptions& opt = {}) {
    if (const auto problems = validate_scenario(s); !problems.empty()) throw ConfigError(problems);
    const GameDefinition g0 = s.game();
    const int n = g0.n();

    // Parameter sets in force on each segment between events.
    // A zero horizon produces no trajectory, only the validation output.
    const double t_end = s.integrator.t_end;
    std::vector<double> cuts{0.0};
    for (const auto& e : s.events)
        if (e.time < t_end) cuts.push_back(e.time);
    cuts.push_back(t_end);
    const std::size_t nseg = t_end > 0 ? cuts.size() - 1 : 0;

    std::vector<GameDefinition> games;
    for (std::size_t k = 0; k < std::max<std::size_t>(nseg, 1); ++k) games.push_back(g0.with_plant(s.plant_after(k)));

    RunResult res;
    res.assumption3 = check_assumption3(s.weights, s.price, reference_voltages(s.plant));
    res.segments.resize(nseg);
    for (std::size_t k = 0; k < nseg; ++k) {
        auto& seg = res.segments[k];
        seg.t_start = cuts[k];
        seg.t_end = cuts[k + 1];
        seg.assumption1 = check_assumption1(games[k].plant, s.price);
        if (opt.solve_oracle) {
            seg.oracle = solve_vi(games[k]);
            Eigen::MatrixXd lam(n + g0.m(), n);
            for (int i = 0; i < n; ++i) lam.col(i) = seg.oracle->lambda_star / games[k].r(i);
            seg.penalty_slack = check_penalty_bounds(games[k], lam, seg.oracle->gamma_star);
            seg.penalized = solve_penalized_equilibrium(games[k], &seg.oracle->z);
        }
    }

    std::optional<EquilibriumSolution> pre;
    if (!res.segments.empty() && res.segments[0].oracle) pre = res.segments[0].oracle;
    const Eigen::VectorXd y0 = initial_state(s, g0, pre);
    res.y0 = y0;

    ClosedLoopSystem sys(g0, s.controller, opt.reduced);

    std::ofstream csv_file;
    std::optional<CsvWriter> csv;
    if (opt.out_dir) {
        std::filesystem::create_directories(*opt.out_dir);
        csv_file.open(std::filesystem::path(*opt.out_dir) / s.output.timeseries);
        if (!csv_file) throw std::runtime_error("cannot write " + s.output.timeseries);
        csv.emplace(csv_file);
        csv->header(csv_header(g0));
    }

    std::size_t segment = 0;
    auto close_segment = [&](const Eigen::VectorXd& y) {
        if (segment >= nseg) return;
        auto& seg = res.segments[segment];
        const auto& g = sys.game();
        const ControllerState cs = sys.controller_state(y);
        seg.kkt = kkt_residual(cs, g, s.controller.kink_tol);
        seg.consensus = consensus_errors(cs, g.r_vector());
        seg.aggregate_error = (cs.upsilon().array() - cs.ihat(g.layout).sum()).abs().maxCoeff();
        const auto V = y.segment(n, n);
        const auto Il = y.segment(2 * n, g.m());
        seg.V_min = V.minCoeff(), seg.V_max = V.maxCoeff();
        seg.Il_min = g.m() ? Il.minCoeff() : 0.0, seg.Il_max = g.m() ? Il.maxCoeff() : 0.0;
        for (int i = 0; i < n; ++i)
            seg.V_violation = std::max(seg.V_violation, box_excursion(V[i], g.plant.dgus[i].V_min, g.plant.dgus[i].V_max));
        for (int k = 0; k < g.m(); ++k)
            seg.Il_violation = std::max(seg.Il_violation, box_excursion(Il[k], g.plant.lines[k].I_min, g.plant.lines[k].I_max));
        if (seg.oracle) {
            seg.u_rel_error = relative_error(cs.u(), seg.oracle->u_star);
            seg.xhat_rel_error = relative_error(g.layout.agent_to_global(cs.xhat()), seg.oracle->x_star);
            double worst = 0.0;
            for (int i = 0; i < n; ++i)
                worst = std::max(worst, relative_error(g.r(i) * cs.lambda().col(i), seg.oracle->lambda_star));
            seg.lambda_rel_error = worst;
        }
        if (seg.penalized && seg.penalized->solution.converged) {
            const auto& p = seg.penalized->solution;
            seg.u_pen_error = relative_error(cs.u(), p.u_star);
            seg.xhat_pen_error = relative_error(g.layout.agent_to_global(cs.xhat()), p.x_star);
            double worst = 0.0;
            for (int i = 0; i < n; ++i) worst = std::max(worst, relative_error(g.r(i) * cs.lambda().col(i), p.lambda_star));
            seg.lambda_pen_error = worst;
        }
        // Convergence time: the last sample in the segment at or above the
        // threshold fixes it.
        std::optional<double> last_bad;
        bool any = false;
        for (const auto& d : res.samples) {
            if (d.t < seg.t_start || d.t > seg.t_end) continue;
            if (d.t == seg.t_start && d.phase == SamplePhase::BeforeEvent) continue;
            if (d.t == seg.t_end && d.phase == SamplePhase::AfterEvent) continue;
            any = true;
            if (!(d.kkt.max() < s.checks.kkt)) last_bad = d.t;
        }
        if (any) {
            if (!last_bad) seg.convergence_time = seg.t_start;
            else if (*last_bad < seg.t_end) {
                // next sample after last_bad
                for (const auto& d : res.samples)
                    if (d.t > *last_bad && d.t <= seg.t_end) {
                        seg.convergence_time = d.t;
                        break;
                    }
            }
        }
        ++segment;
    };

    auto observe = [&](double t, const Eigen::VectorXd& y, SamplePhase phase) {
        SampleDiagnostics d = diagnose(sys, t, y, y0, phase);
        if (t > 0) {
            res.max_drift_rate = std::max(res.max_drift_rate, std::max(d.nu_drift, d.theta_drift) / std::max(t, 1.0));
        }
        if (csv) csv->row(t, phase, y, d);
        res.samples.push_back(d);
        if (opt.record_states) {
            res.state_times.push_back(t);
            res.states.push_back(y);
        }
        if (phase == SamplePhase::BeforeEvent) close_segment(y);
    };

    auto on_event = [&](std::size_t e, double, Eigen::VectorXd&) { sys.set_plant(s.plant_after(e + 1)); };

    const auto event_times = s.event_times();
    if (t_end > 0) res.final_state = integrate(sys, y0, s.integrator, event_times, on_event, observe, &res.stats);
    else res.final_state = y0;
    if (nseg > 0) close_segment(res.final_state);

    // Summary.
    using nlohmann::json;
    json j;
    j["scenario"] = s.name;
    j["config"] = s.source;
    j["flags"] = {
        {"price_reading", "l = 5 is the base price and p_r = 0.01 its sensitivity to the aggregate current"},
        {"load_step", "events subtract dI_load from I_L and dZ_load ohms from Z_L at every DGU"},
        {"input_dynamics", "u tracks r_i alpha_u (u - u_ref) and is driven by I - Ihat"},
        {"estimator", opt.reduced ? "quasi-steady state" : "dynamic"},
        {"plant_initial", s.plant_init == PlantInit::Equilibrium ? "oracle equilibrium" : "zero"},
    };
    json margins;
    margins["assumption3"] = detail::to_json(res.assumption3);
    json a1 = json::array(), slack = json::array();
    for (std::size_t k = 0; k <= s.events.size(); ++k) a1.push_back(check_assumption1(s.plant_after(k), s.price));
    for (const auto& seg : res.segments) {
        if (seg.penalty_slack)
            slack.push_back({{"voltage", detail::to_json(seg.penalty_slack->voltage)},
                             {"line", detail::to_json(seg.penalty_slack->line)}});
    }
    margins["assumption1"] = a1;
    margins["penalty"] = slack;
    j["margins"] = margins;

    json segs = json::array(), conv = json::array(), oracle = json::array();
    for (const auto& seg : res.segments) {
        segs.push_back({{"t_start", seg.t_start},
                        {"t_end", seg.t_end},
                        {"kkt", detail::to_json(seg.kkt)},
                        {"voltage_range", {seg.V_min, seg.V_max}},
                        {"line_current_range", {seg.Il_min, seg.Il_max}},
                        {"voltage_violation", seg.V_violation},
                        {"line_current_violation", seg.Il_violation}});
        conv.push_back(seg.convergence_time ? json(*seg.convergence_time) : json(nullptr));
        if (seg.oracle) {
            const auto& o = *seg.oracle;
            oracle.push_back({{"u_star", detail::to_json(o.u_star)},
                              {"x_star", detail::to_json(o.x_star)},
                              {"lambda_star", detail::to_json(o.lambda_star)},
                              {"gamma_star", detail::to_json(o.gamma_star)},
                              {"iterations", o.iterations},
                              {"residual", o.residual},
                              {"converged", o.converged},
                              {"multiplier_residual", o.multiplier_residual},
                              {"agreement",
                               {{"u", seg.u_rel_error}, {"xhat", seg.xhat_rel_error}, {"lambda", seg.lambda_rel_error}}}});
            if (seg.penalized) {
                const auto& p = seg.penalized->solution;
                oracle.back()["penalized"] = {
                    {"converged", p.converged},
                    {"u", detail::to_json(p.u_star)},
                    {"x", detail::to_json(p.x_star)},
                    {"lambda", detail::to_json(p.lambda_star)},
                    {"gamma", detail::to_json(p.gamma_star)},
                    {"agreement", {{"u", seg.u_pen_error}, {"xhat", seg.xhat_pen_error}, {"lambda", seg.lambda_pen_error}}}};
            }
        }
    }
    j["residuals"] = {{"segments", segs}};
    if (!res.samples.empty()) j["residuals"]["final"] = detail::to_json(res.samples.back().kkt);
    j["convergence_times"] = conv;
    j["oracle"] = oracle;
    if (!res.samples.empty()) {
        const auto& last = res.samples.back();
        j["consensus"] = {{"upsilon_spread", last.consensus.upsilon_spread},
                          {"lambda_spread", last.consensus.weighted_lambda_spread},
                          {"aggregate_error", last.aggregate_error}};
        double nu_max = 0, th_max = 0, eb_min = last.lyapunov.E_b, eb_max = last.lyapunov.E_b;
        double vmax = 0, ilmax = 0;
        for (const auto& d : res.samples) {
            nu_max = std::max(nu_max, d.nu_drift);
            th_max = std::max(th_max, d.theta_drift);
            eb_min = std::min(eb_min, d.lyapunov.E_b);
            eb_max = std::max(eb_max, d.lyapunov.E_b);
            vmax = std::max(vmax, d.V_violation);
            ilmax = std::max(ilmax, d.Il_violation);
        }
        j["conservation"] = {{"nu_drift_max", nu_max}, {"theta_drift_max", th_max}, {"drift_rate_max", res.max_drift_rate}};
        j["lyapunov"] = {{"E_b_min", eb_min},
                         {"E_b_max", eb_max},
                         {"E_r_first", res.samples.front().lyapunov.E_r},
                         {"E_r_last", last.lyapunov.E_r}};
        j["constraint_violation"] = {{"voltage_max", vmax}, {"line_current_max", ilmax}};
    }
    j["stats"] = {{"steps", res.stats.steps}, {"rejected", res.stats.rejected}, {"samples", res.samples.size()}};
    res.summary = j;

    if (opt.out_dir) {
        std::ofstream sj(std::filesystem::path(*opt.out_dir) / s.output.summary);
        sj << res.summary.dump(2) << '\n';
    }
    return res;
}

struct CheckOutcome {
    std::string name;
    double value = 0.0;
    double threshold = 0.0;
    bool pass = false;
};

/// Acceptance thresholds applied to a finished run.
inline std::vector<CheckOutcome> check_run(const Scenario& s, const RunResult& r) {
    std::vector<CheckOutcome> out;
    auto add = [&](std::string name, double v, double thr) { out.push_back({std::move(name), v, thr, v < thr}); };
    for (std::size_t k = 0; k < r.segments.size(); ++k) {
        const auto& seg = r.segments[k];
        const std::string p = "segment " + std::to_string(k + 1) + " ";
        add(p + "kkt residual", seg.kkt.max(), s.checks.kkt);
        add(p + "voltage box excursion", seg.V_violation, 1e-9);
        add(p + "line current box excursion", seg.Il_violation, 1e-9);
        if (seg.oracle) {
            add(p + "oracle agreement u", seg.u_rel_error, 1e-2);
            add(p + "oracle agreement xhat", seg.xhat_rel_error, 1e-2);
            add(p + "oracle agreement lambda", seg.lambda_rel_error, 1e-2);
        }
    }
    if (!r.samples.empty()) {
        const auto& last = r.samples.back();
        add("upsilon spread", last.consensus.upsilon_spread, s.checks.upsilon_spread);
        add("aggregate error", last.aggregate_error, s.checks.aggregate_error);
        add("weighted lambda spread", last.consensus.weighted_lambda_spread, s.checks.lambda_spread);
        add("conservation drift per second", r.max_drift_rate, s.checks.drift_per_second);
    }
    return out;
}

} // namespace dcgrid
