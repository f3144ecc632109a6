#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <random>

#include "dcgrid/engine.hpp"

using namespace dcgrid;

namespace {

enum Exit { Ok = 0, Invalid = 1, Runtime = 2, CheckFailed = 3 };

struct Overrides {
    std::optional<double> dt, t_end, eps;
};

Scenario load(const std::string& path, const Overrides& ov) {
    Scenario s = load_scenario(path);
    if (ov.dt) s.integrator.dt = *ov.dt, s.source["overrides"]["dt"] = *ov.dt;
    if (ov.t_end) s.integrator.t_end = *ov.t_end, s.source["overrides"]["t_end"] = *ov.t_end;
    if (ov.eps) s.controller.eps_fast = *ov.eps, s.source["overrides"]["eps"] = *ov.eps;
    if (const auto p = validate_scenario(s); !p.empty()) throw ConfigError(p);
    return s;
}

void print_vector(const char* name, const Eigen::VectorXd& v) {
    std::printf("%s", name);
    for (Eigen::Index k = 0; k < v.size(); ++k) std::printf(" %.10g", v[k]);
    std::printf("\n");
}

int cmd_validate(const std::string& path, const Overrides& ov, std::optional<unsigned> seed) {
    const Scenario s = load(path, ov);
    const GameDefinition g = s.game();
    int status = Ok;
    std::printf("scenario: %s\n", s.name.c_str());
    std::printf("DGUs %d, lines %d\n", g.n(), g.m());
    for (int i = 0; i < g.n(); ++i) {
        std::printf("DGU %d manages lines:", i + 1);
        for (int k : g.topo.managed_lines(i)) std::printf(" %d", k + 1);
        std::printf("\n");
    }
    for (std::size_t k = 0; k <= s.events.size(); ++k) {
        const double a1 = check_assumption1(s.plant_after(k), s.price);
        std::printf("price margin (after %zu events): %.6f\n", k, a1);
    }
    print_vector("monotonicity margins:", check_assumption3(s.weights, s.price, reference_voltages(s.plant)));
    for (std::size_t k = 0; k <= s.events.size(); ++k) {
        const GameDefinition gk = g.with_plant(s.plant_after(k));
        const auto sol = solve_vi(gk);
        Eigen::MatrixXd lam(g.n() + g.m(), g.n());
        for (int i = 0; i < g.n(); ++i) lam.col(i) = sol.lambda_star / gk.r(i);
        const auto slack = check_penalty_bounds(gk, lam, sol.gamma_star);
        std::printf("penalty slack (after %zu events):\n", k);
        print_vector("  voltage:", slack.voltage);
        print_vector("  line:", slack.line);
        if (slack.voltage.minCoeff() <= 0 || (g.m() > 0 && slack.line.minCoeff() <= 0)) {
            std::printf("  penalty weights are below the required bound\n");
            status = Invalid;
        }
        if (!sol.converged) std::printf("  warning: equilibrium solver did not reach its tolerance\n");
    }
    if (seed) {
        // Pseudo-gradient against central differences of the costs at random points.
        std::mt19937_64 rng(*seed);
        std::uniform_real_distribution<double> unit(-1.0, 1.0);
        const auto& L = g.layout;
        double worst = 0.0;
        for (int trial = 0; trial < 10; ++trial) {
            Eigen::VectorXd z(L.z_dim());
            for (Eigen::Index k = 0; k < z.size(); ++k) z[k] = 50.0 * unit(rng);
            const Eigen::VectorXd F = pseudo_gradient(g, z);
            for (int i = 0; i < g.n(); ++i) {
                const int o = L.z_offset[i];
                for (int j = 0; j <= L.size[i]; ++j) {
                    const double h = 1e-4;
                    auto eval = [&](double shift) {
                        Eigen::VectorXd zz = z;
                        zz[o + j] += shift;
                        const Eigen::VectorXd xx = L.z_state_global(zz);
                        return cost(g, i, zz[o], zz.segment(o + 1, L.size[i]), xx.head(g.n()).sum());
                    };
                    const double fd = g.r(i) * (eval(h) - eval(-h)) / (2 * h);
                    worst = std::max(worst, std::abs(fd - F[o + j]) / std::max(1.0, std::abs(fd)));
                }
            }
        }
        std::printf("pseudo-gradient check (seed %u): max relative error %.3e\n", *seed, worst);
        if (worst > 1e-6) status = Invalid;
    }
    std::printf("%s\n", status == Ok ? "valid" : "invalid");
    return status;
}

int cmd_equilibrium(const std::string& path, const Overrides& ov, const std::string& format) {
    const Scenario s = load(path, ov);
    const GameDefinition g0 = s.game();
    nlohmann::json out = nlohmann::json::array();
    for (std::size_t k = 0; k <= s.events.size(); ++k) {
        const GameDefinition g = g0.with_plant(s.plant_after(k));
        const auto sol = solve_vi(g);
        if (format == "json") {
            out.push_back({{"events_applied", k},
                           {"u_star", detail::to_json(sol.u_star)},
                           {"x_star", detail::to_json(sol.x_star)},
                           {"lambda_star", detail::to_json(sol.lambda_star)},
                           {"gamma_star", detail::to_json(sol.gamma_star)},
                           {"iterations", sol.iterations},
                           {"residual", sol.residual},
                           {"converged", sol.converged},
                           {"multiplier_residual", sol.multiplier_residual}});
        } else {
            if (k == 0) std::printf("events_applied,quantity,index,value\n");
            auto rows = [&](const char* name, const Eigen::VectorXd& v) {
                for (Eigen::Index c = 0; c < v.size(); ++c) std::printf("%zu,%s,%ld,%.17g\n", k, name, long(c + 1), v[c]);
            };
            rows("u", sol.u_star);
            rows("x", sol.x_star);
            rows("lambda", sol.lambda_star);
            rows("gamma", sol.gamma_star);
            std::printf("%zu,residual,1,%.17g\n", k, sol.residual);
        }
        if (!sol.converged) std::fprintf(stderr, "warning: equilibrium solver did not reach its tolerance\n");
    }
    if (format == "json") std::cout << out.dump(2) << '\n';
    return Ok;
}

int report(const Scenario& s, const RunResult& r, bool check, const std::string& format) {
    if (format == "json") std::cout << r.summary.dump(2) << '\n';
    else {
        for (std::size_t k = 0; k < r.segments.size(); ++k) {
            const auto& seg = r.segments[k];
            std::printf("segment %zu [%g, %g] s: kkt %.3e, converged at %s, V in [%.4f, %.4f], Il in [%.4f, %.4f]\n",
                        k + 1, seg.t_start, seg.t_end, seg.kkt.max(),
                        seg.convergence_time ? std::to_string(*seg.convergence_time).c_str() : "never", seg.V_min,
                        seg.V_max, seg.Il_min, seg.Il_max);
            if (seg.oracle)
                std::printf("  oracle agreement: u %.2e, xhat %.2e, lambda %.2e\n", seg.u_rel_error, seg.xhat_rel_error,
                            seg.lambda_rel_error);
        }
        std::printf("steps %ld, samples %zu\n", r.stats.steps, r.samples.size());
    }
    if (!check) return Ok;
    int status = Ok;
    for (const auto& c : check_run(s, r)) {
        std::fprintf(stderr, "%s %s: %.3e (threshold %.1e)\n", c.pass ? "PASS" : "FAIL", c.name.c_str(), c.value,
                     c.threshold);
        if (!c.pass) status = CheckFailed;
    }
    return status;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"DC microgrid energy-trading game simulator"};
    app.require_subcommand(1);
    Overrides ov;
    std::string format = "csv";
    std::optional<unsigned> seed;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--dt", ov.dt, "fixed step (s)");
        sub->add_option("--t-end", ov.t_end, "simulated horizon (s)");
        sub->add_option("--eps", ov.eps, "estimator time scale");
        sub->add_option("--seed", seed, "seed for randomized checks");
        sub->add_option("--format", format, "output format")->check(CLI::IsMember({"csv", "json"}));
    };

    std::string path;
    std::string out_dir;
    bool check = false;

    auto* sim = app.add_subcommand("simulate", "run the closed loop");
    sim->add_option("scenario", path, "scenario file")->required();
    sim->add_option("--out", out_dir, "output directory");
    sim->add_flag("--check", check, "exit 3 unless acceptance thresholds hold");
    common(sim);

    auto* val = app.add_subcommand("validate", "check margins, partition and penalty bounds");
    val->add_option("scenario", path, "scenario file")->required();
    common(val);

    auto* eq = app.add_subcommand("equilibrium", "solve for the normalized equilibrium");
    eq->add_option("scenario", path, "scenario file")->required();
    common(eq);

    auto* red = app.add_subcommand("reduced", "run with the estimator at its quasi-steady state");
    red->add_option("scenario", path, "scenario file")->required();
    red->add_option("--out", out_dir, "output directory");
    common(red);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? Ok : Invalid;
    }

    try {
        if (*val) return cmd_validate(path, ov, seed);
        if (*eq) return cmd_equilibrium(path, ov, format);
        const Scenario s = load(path, ov);
        RunOptions opt;
        opt.reduced = static_cast<bool>(*red);
        if (!out_dir.empty()) opt.out_dir = out_dir;
        const auto start = std::chrono::steady_clock::now();
        const RunResult r = run_scenario(s, opt);
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::fprintf(stderr, "wall time %.2f s\n", wall);
        return report(s, r, check, format);
    } catch (const ConfigError& e) {
        for (const auto& p : e.problems()) std::fprintf(stderr, "error: %s\n", p.c_str());
        return Invalid;
    } catch (const IntegrationError& e) {
        std::fprintf(stderr, "integration failed: %s (last good t = %g)\n", e.what(), e.last_good_time());
        return Runtime;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return std::string(e.what()).rfind("cannot open scenario", 0) == 0 ? Invalid : Runtime;
    }
}
