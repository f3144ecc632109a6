#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dcgrid/controller.hpp"
#include "dcgrid/game.hpp"
#include "dcgrid/integrator.hpp"
#include "dcgrid/plant.hpp"
#include "dcgrid/topology.hpp"

namespace dcgrid {

enum class Dimension { Resistance, Inductance, Capacitance, Voltage, Current, Time };

inline const char* dimension_name(Dimension d) {
    switch (d) {
    case Dimension::Resistance: return "resistance";
    case Dimension::Inductance: return "inductance";
    case Dimension::Capacitance: return "capacitance";
    case Dimension::Voltage: return "voltage";
    case Dimension::Current: return "current";
    case Dimension::Time: return "time";
    }
    return "?";
}

namespace detail {

struct UnitInfo {
    Dimension dim;
    double scale;
};

inline const std::map<std::string, UnitInfo>& unit_table() {
    static const std::map<std::string, UnitInfo> table = {
        {"Ohm", {Dimension::Resistance, 1.0}},     {"ohm", {Dimension::Resistance, 1.0}},
        {"Ω", {Dimension::Resistance, 1.0}},  {"mOhm", {Dimension::Resistance, 1e-3}},
        {"mohm", {Dimension::Resistance, 1e-3}},   {"mΩ", {Dimension::Resistance, 1e-3}},
        {"kOhm", {Dimension::Resistance, 1e3}},    {"kΩ", {Dimension::Resistance, 1e3}},
        {"H", {Dimension::Inductance, 1.0}},       {"mH", {Dimension::Inductance, 1e-3}},
        {"uH", {Dimension::Inductance, 1e-6}},     {"µH", {Dimension::Inductance, 1e-6}},
        {"μH", {Dimension::Inductance, 1e-6}}, {"F", {Dimension::Capacitance, 1.0}},
        {"mF", {Dimension::Capacitance, 1e-3}},    {"uF", {Dimension::Capacitance, 1e-6}},
        {"µF", {Dimension::Capacitance, 1e-6}}, {"μF", {Dimension::Capacitance, 1e-6}},
        {"V", {Dimension::Voltage, 1.0}},          {"mV", {Dimension::Voltage, 1e-3}},
        {"kV", {Dimension::Voltage, 1e3}},         {"A", {Dimension::Current, 1.0}},
        {"mA", {Dimension::Current, 1e-3}},        {"kA", {Dimension::Current, 1e3}},
        {"s", {Dimension::Time, 1.0}},             {"ms", {Dimension::Time, 1e-3}},
        {"us", {Dimension::Time, 1e-6}},           {"µs", {Dimension::Time, 1e-6}},
    };
    return table;
}

} // namespace detail

/// Parses "1.8 mH" style quantities to SI. A bare number is taken as
/// already in SI. Throws ConfigError on unknown units or a unit of the
/// wrong dimension.
inline double parse_quantity(const nlohmann::json& v, Dimension dim, const std::string& where) {
    if (v.is_number()) return v.get<double>();
    if (!v.is_string()) throw ConfigError(where + ": expected a number or a quantity string");
    const std::string text = v.get<std::string>();
    std::istringstream in(text);
    in.imbue(std::locale::classic());
    double value = 0.0;
    if (!(in >> value)) throw ConfigError(where + ": cannot read a number from \"" + text + "\"");
    std::string unit;
    in >> unit;
    std::string rest;
    if (in >> rest) throw ConfigError(where + ": trailing text in \"" + text + "\"");
    if (unit.empty()) return value;
    const auto& table = detail::unit_table();
    const auto it = table.find(unit);
    if (it == table.end()) throw ConfigError(where + ": unknown unit \"" + unit + "\"");
    if (it->second.dim != dim)
        throw ConfigError(where + ": unit \"" + unit + "\" is a " + dimension_name(it->second.dim) + ", expected " +
                          dimension_name(dim));
    return value * it->second.scale;
}

struct LoadStep {
    double time = 0.0;
    double dI_load = 0.0; // subtracted from every I_L,i
    double dZ_load = 0.0; // subtracted from every Z_L,i
};

enum class PlantInit { Equilibrium, Zero };

/// Optional overrides of the controller's initial state. Unset blocks start
/// at zero; "plant" copies the initial plant state into xhat and the
/// matching input into u; "equilibrium" starts every block at the oracle
/// equilibrium of the pre-event parameters.
struct ControllerInit {
    std::optional<Eigen::VectorXd> upsilon, nu, u, gamma, xhat;
    bool u_from_plant = false;
    bool xhat_from_plant = false;
    bool at_equilibrium = false;
};

struct CheckThresholds {
    double kkt = 1e-3;
    double upsilon_spread = 1e-4;
    double aggregate_error = 1e-3;
    double lambda_spread = 1e-4;
    double drift_per_second = 1e-9;
};

struct OutputConfig {
    std::string timeseries = "timeseries.csv";
    std::string summary = "summary.json";
};

struct Scenario {
    std::string name = "scenario";
    MicrogridTopology topo;
    Graph comm;
    PlantParams plant;
    PriceParams price;
    ObjectiveWeights weights;
    PenaltyParams penalty;
    ControllerParams controller;
    IntegratorConfig integrator;
    std::vector<LoadStep> events;
    OutputConfig output;
    PlantInit plant_init = PlantInit::Equilibrium;
    ControllerInit controller_init;
    CheckThresholds checks;
    nlohmann::json source; // the parsed file, echoed into the summary

    GameDefinition game() const { return make_game(topo, comm, plant, price, weights, penalty); }

    /// Physical parameters in force after the first k events.
    PlantParams plant_after(std::size_t k) const {
        PlantParams p = plant;
        for (std::size_t e = 0; e < k && e < events.size(); ++e) p = apply_load_step(p, events[e].dI_load, events[e].dZ_load);
        return p;
    }

    std::vector<double> event_times() const {
        std::vector<double> t;
        for (const auto& e : events) t.push_back(e.time);
        return t;
    }
};

namespace detail {

class Reader {
public:
    std::vector<std::string> problems;

    const nlohmann::json* child(const nlohmann::json& obj, const std::string& key, const std::string& where,
                                bool required = true) {
        if (!obj.is_object()) {
            problems.push_back(where + ": expected an object");
            return nullptr;
        }
        const auto it = obj.find(key);
        if (it == obj.end()) {
            if (required) problems.push_back(where + ": missing \"" + key + "\"");
            return nullptr;
        }
        return &*it;
    }

    double quantity(const nlohmann::json& obj, const std::string& key, Dimension dim, const std::string& where,
                    std::optional<double> fallback = std::nullopt) {
        const auto* v = child(obj, key, where, !fallback.has_value());
        if (!v) return fallback.value_or(std::nan(""));
        try {
            return parse_quantity(*v, dim, where + "." + key);
        } catch (const ConfigError& e) {
            problems.insert(problems.end(), e.problems().begin(), e.problems().end());
            return std::nan("");
        }
    }

    double number(const nlohmann::json& obj, const std::string& key, const std::string& where,
                  std::optional<double> fallback = std::nullopt) {
        const auto* v = child(obj, key, where, !fallback.has_value());
        if (!v) return fallback.value_or(std::nan(""));
        if (!v->is_number()) {
            problems.push_back(where + "." + key + ": expected a number");
            return std::nan("");
        }
        return v->get<double>();
    }

    int integer(const nlohmann::json& obj, const std::string& key, const std::string& where) {
        const auto* v = child(obj, key, where);
        if (!v) return 0;
        if (!v->is_number_integer()) {
            problems.push_back(where + "." + key + ": expected an integer");
            return 0;
        }
        return v->get<int>();
    }

    std::optional<Eigen::VectorXd> vector(const nlohmann::json& obj, const std::string& key, int size,
                                          const std::string& where) {
        const auto* v = child(obj, key, where, false);
        if (!v) return std::nullopt;
        if (!v->is_array() || static_cast<int>(v->size()) != size) {
            problems.push_back(where + "." + key + ": expected an array of " + std::to_string(size) + " numbers");
            return std::nullopt;
        }
        Eigen::VectorXd out(size);
        for (int i = 0; i < size; ++i) {
            if (!(*v)[i].is_number()) {
                problems.push_back(where + "." + key + ": expected numbers");
                return std::nullopt;
            }
            out[i] = (*v)[i].get<double>();
        }
        return out;
    }
};

inline std::vector<Edge> read_edges(Reader& rd, const nlohmann::json& list, int n, const std::string& where,
                                    std::vector<int>* managers) {
    std::vector<Edge> edges;
    if (!list.is_array()) {
        rd.problems.push_back(where + ": expected an array");
        return edges;
    }
    for (std::size_t k = 0; k < list.size(); ++k) {
        const std::string w = where + "[" + std::to_string(k + 1) + "]";
        const int head = rd.integer(list[k], "head", w);
        const int tail = rd.integer(list[k], "tail", w);
        if (head < 1 || head > n || tail < 1 || tail > n) rd.problems.push_back(w + ": node id out of range 1.." + std::to_string(n));
        edges.push_back({head - 1, tail - 1});
        if (managers) managers->push_back(rd.integer(list[k], "manager", w) - 1);
    }
    return edges;
}

} // namespace detail

/// Builds a scenario from a parsed JSON tree, collecting every problem it
/// finds before throwing.
inline Scenario scenario_from_json(const nlohmann::json& j) {
    detail::Reader rd;
    Scenario s;
    s.source = j;
    if (!j.is_object()) throw ConfigError("scenario: expected a JSON object at the top level");
    if (j.contains("name") && j["name"].is_string()) s.name = j["name"].get<std::string>();

    const auto* dgus = rd.child(j, "dgus", "scenario");
    const auto* lines = rd.child(j, "lines", "scenario");
    if (!dgus || !lines || !dgus->is_array() || !lines->is_array() || dgus->empty()) {
        if (dgus && (!dgus->is_array() || dgus->empty())) rd.problems.push_back("dgus: expected a non-empty array");
        if (lines && !lines->is_array()) rd.problems.push_back("lines: expected an array");
        throw ConfigError(rd.problems);
    }
    const int n = static_cast<int>(dgus->size());
    const int m = static_cast<int>(lines->size());

    s.weights.agents.resize(n);
    s.weights.alpha_Il.resize(m);
    s.penalty.rho_V.resize(n);
    s.penalty.rho_Il.resize(m);
    for (int i = 0; i < n; ++i) {
        const auto& d = (*dgus)[i];
        const std::string w = "dgus[" + std::to_string(i + 1) + "]";
        DguParams p;
        p.R = rd.quantity(d, "R", Dimension::Resistance, w);
        p.L = rd.quantity(d, "L", Dimension::Inductance, w);
        p.C = rd.quantity(d, "C", Dimension::Capacitance, w);
        p.Z_load = rd.quantity(d, "Z_load", Dimension::Resistance, w);
        p.I_load = rd.quantity(d, "I_load", Dimension::Current, w);
        p.V_min = rd.quantity(d, "V_min", Dimension::Voltage, w);
        p.V_max = rd.quantity(d, "V_max", Dimension::Voltage, w);
        p.V_ref = rd.quantity(d, "V_ref", Dimension::Voltage, w);
        p.I_ref = rd.quantity(d, "I_ref", Dimension::Current, w, 0.0);
        p.u_ref = rd.quantity(d, "u_ref", Dimension::Voltage, w, 0.0);
        s.plant.dgus.push_back(p);
        auto& a = s.weights.agents[i];
        a.r = rd.number(d, "r", w);
        a.alpha_I = rd.number(d, "alpha_I", w);
        a.alpha_V = rd.number(d, "alpha_V", w);
        a.alpha_u = rd.number(d, "alpha_u", w);
        s.penalty.rho_V[i] = rd.number(d, "rho_V", w);
    }

    std::vector<int> managers;
    const auto edges = detail::read_edges(rd, *lines, n, "lines", &managers);
    for (int k = 0; k < m; ++k) {
        const auto& l = (*lines)[k];
        const std::string w = "lines[" + std::to_string(k + 1) + "]";
        LineParams p;
        p.R = rd.quantity(l, "R", Dimension::Resistance, w);
        p.L = rd.quantity(l, "L", Dimension::Inductance, w);
        p.I_min = rd.quantity(l, "I_min", Dimension::Current, w);
        p.I_max = rd.quantity(l, "I_max", Dimension::Current, w);
        p.I_ref = rd.quantity(l, "I_ref", Dimension::Current, w, 0.0);
        s.plant.lines.push_back(p);
        s.weights.alpha_Il[k] = rd.number(l, "alpha", w);
        s.penalty.rho_Il[k] = rd.number(l, "rho", w);
    }

    if (const auto* price = rd.child(j, "price", "scenario")) {
        s.price.l = rd.number(*price, "l", "price");
        s.price.p_r = rd.number(*price, "p_r", "price");
    }

    if (const auto* c = rd.child(j, "controller", "scenario", false)) {
        s.controller.eps_fast = rd.number(*c, "eps", "controller", s.controller.eps_fast);
        s.controller.eps_u = rd.number(*c, "eps_u", "controller", s.controller.eps_u);
        s.controller.kink_tol = rd.number(*c, "kink_tol", "controller", s.controller.kink_tol);
        const auto* init = rd.child(*c, "initial", "controller", false);
        if (init && *init == "equilibrium") {
            s.controller_init.at_equilibrium = true;
        } else if (init) {
            auto& ci = s.controller_init;
            ci.upsilon = rd.vector(*init, "upsilon", n, "controller.initial");
            ci.nu = rd.vector(*init, "nu", n, "controller.initial");
            ci.gamma = rd.vector(*init, "gamma", n, "controller.initial");
            if (init->contains("u") && (*init)["u"] == "plant") ci.u_from_plant = true;
            else ci.u = rd.vector(*init, "u", n, "controller.initial");
            if (init->contains("xhat") && (*init)["xhat"] == "plant") ci.xhat_from_plant = true;
            else ci.xhat = rd.vector(*init, "xhat", 2 * n + m, "controller.initial");
        }
    }

    if (const auto* in = rd.child(j, "integrator", "scenario", false)) {
        const std::string method = in->value("method", std::string("rk4"));
        if (method == "rk4") s.integrator.method = Method::Rk4;
        else if (method == "rk45") s.integrator.method = Method::Rk45;
        else rd.problems.push_back("integrator.method: expected \"rk4\" or \"rk45\"");
        s.integrator.dt = rd.quantity(*in, "dt", Dimension::Time, "integrator", s.integrator.dt);
        s.integrator.t_end = rd.quantity(*in, "t_end", Dimension::Time, "integrator", s.integrator.t_end);
        s.integrator.rtol = rd.number(*in, "rtol", "integrator", s.integrator.rtol);
        s.integrator.atol = rd.number(*in, "atol", "integrator", s.integrator.atol);
    }

    if (const auto* out = rd.child(j, "output", "scenario", false)) {
        s.integrator.sample_period =
            rd.quantity(*out, "sample_period", Dimension::Time, "output", s.integrator.sample_period);
        s.output.timeseries = out->value("timeseries", s.output.timeseries);
        s.output.summary = out->value("summary", s.output.summary);
    }

    if (const auto* ev = rd.child(j, "events", "scenario", false)) {
        if (!ev->is_array()) rd.problems.push_back("events: expected an array");
        else
            for (std::size_t e = 0; e < ev->size(); ++e) {
                const std::string w = "events[" + std::to_string(e + 1) + "]";
                LoadStep st;
                st.time = rd.quantity((*ev)[e], "time", Dimension::Time, w);
                st.dI_load = rd.quantity((*ev)[e], "dI_load", Dimension::Current, w, 0.0);
                st.dZ_load = rd.quantity((*ev)[e], "dZ_load", Dimension::Resistance, w, 0.0);
                s.events.push_back(st);
            }
    }

    if (j.contains("initial_plant")) {
        const auto v = j["initial_plant"];
        if (v == "equilibrium") s.plant_init = PlantInit::Equilibrium;
        else if (v == "zero") s.plant_init = PlantInit::Zero;
        else rd.problems.push_back("initial_plant: expected \"equilibrium\" or \"zero\"");
    }

    if (const auto* ch = rd.child(j, "checks", "scenario", false)) {
        auto& c = s.checks;
        c.kkt = rd.number(*ch, "kkt", "checks", c.kkt);
        c.upsilon_spread = rd.number(*ch, "upsilon_spread", "checks", c.upsilon_spread);
        c.aggregate_error = rd.number(*ch, "aggregate_error", "checks", c.aggregate_error);
        c.lambda_spread = rd.number(*ch, "lambda_spread", "checks", c.lambda_spread);
        c.drift_per_second = rd.number(*ch, "drift_per_second", "checks", c.drift_per_second);
    }

    // Structural problems make the rest meaningless.
    if (!rd.problems.empty()) throw ConfigError(rd.problems);

    try {
        s.topo = MicrogridTopology(Graph(n, edges), managers);
    } catch (const std::exception& e) {
        rd.problems.push_back(std::string("topology: ") + e.what());
    }
    s.comm = s.topo.graph();
    if (const auto* comm = rd.child(j, "communication", "scenario", false)) {
        const auto cedges = detail::read_edges(rd, *comm, n, "communication", nullptr);
        try {
            if (rd.problems.empty()) s.comm = Graph(n, cedges);
        } catch (const std::exception& e) {
            rd.problems.push_back(std::string("communication: ") + e.what());
        }
    }
    if (!rd.problems.empty()) throw ConfigError(rd.problems);
    return s;
}

/// Revalidates every model invariant, including those that depend on the
/// events (positive loads and price margin after each step). Returns all
/// problems; empty means valid.
inline std::vector<std::string> validate_scenario(const Scenario& s) {
    std::vector<std::string> problems;
    auto absorb = [&](auto&& fn) {
        try {
            fn();
        } catch (const ConfigError& e) {
            problems.insert(problems.end(), e.problems().begin(), e.problems().end());
        } catch (const std::exception& e) {
            problems.emplace_back(e.what());
        }
    };
    absorb([&] { s.game(); });
    absorb([&] { s.controller.validate(); });
    const auto& ic = s.integrator;
    if (!(ic.dt > 0)) problems.push_back("integrator: dt must be positive");
    if (!(ic.t_end >= 0)) problems.push_back("integrator: t_end must be nonnegative");
    if (!(ic.sample_period > 0)) problems.push_back("output: sample period must be positive");
    if (ic.method == Method::Rk45 && !(ic.rtol > 0 && ic.atol > 0)) problems.push_back("integrator: tolerances must be positive");
    for (std::size_t e = 0; e < s.events.size(); ++e) {
        if (!(s.events[e].time > 0)) problems.push_back("events[" + std::to_string(e + 1) + "]: time must be positive");
        if (e > 0 && !(s.events[e].time > s.events[e - 1].time))
            problems.push_back("events: times must be strictly increasing");
    }
    for (std::size_t k = 1; k <= s.events.size(); ++k)
        absorb([&] {
            const PlantParams p = s.plant_after(k);
            const double a1 = check_assumption1(p, s.price);
            if (!(a1 > 0))
                problems.push_back("after event " + std::to_string(k) + ": price margin is not positive (" +
                                   std::to_string(a1) + ")");
        });
    if (ic.method == Method::Rk4 && ic.dt > 0 && problems.empty()) {
        const double bound = 2.0 * PlantModel(s.plant, s.topo).min_line_time_constant();
        if (!(ic.dt < bound))
            problems.push_back("integrator: dt = " + std::to_string(ic.dt) + " s is not below the line stability bound " +
                               std::to_string(bound) + " s");
    }
    return problems;
}

inline Scenario load_scenario(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open scenario file: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return scenario_from_json(j);
}

} // namespace dcgrid
