#pragma once

#include <gtest/gtest.h>

#include <random>
#include <string>

#include "dcgrid/engine.hpp"

namespace dcgrid::testing {

inline std::string scenario_path(const std::string& name) { return std::string(DCGRID_SCENARIO_DIR) + "/" + name; }

inline Scenario ring_scenario() { return load_scenario(scenario_path("ring4.json")); }

inline MicrogridTopology ring4() {
    return MicrogridTopology(Graph(4, {{0, 1}, {1, 2}, {2, 3}, {3, 0}}), {0, 1, 2, 0});
}

inline MicrogridTopology path2() { return MicrogridTopology(Graph(2, {{0, 1}}), {0}); }

inline DguParams plain_dgu() {
    DguParams d;
    d.R = 0.02, d.L = 1.8e-3, d.C = 2.2e-3, d.Z_load = 16, d.I_load = 30;
    d.V_min = 377, d.V_max = 383, d.V_ref = 380;
    return d;
}

inline LineParams plain_line() {
    LineParams l;
    l.R = 0.07, l.L = 2.1e-6, l.I_min = -20, l.I_max = 20;
    return l;
}

/// One DGU, no lines: the smallest game there is.
inline GameDefinition single_agent(double box_halfwidth = 1e6) {
    MicrogridTopology topo(Graph(1, {}), {});
    PlantParams p;
    DguParams d = plain_dgu();
    // Assumption 1 involves V_max, so only the lower bound is moved.
    d.V_min = d.V_max - box_halfwidth;
    d.I_ref = 2, d.u_ref = 5;
    p.dgus = {d};
    ObjectiveWeights w;
    w.agents = {{1.3, 1.1, 10.0, 0.8}};
    w.alpha_Il = Eigen::VectorXd(0);
    PenaltyParams pen{Eigen::VectorXd::Constant(1, 1200), Eigen::VectorXd(0)};
    PriceParams price{5.0, 0.01};
    return make_game(topo, topo.graph(), p, price, w, pen);
}

/// The ring game with every box widened far enough that no bound is active.
inline GameDefinition wide_box_ring_game() {
    Scenario s = ring_scenario();
    for (auto& d : s.plant.dgus) d.V_min = -1e4, d.V_max = 383;
    for (auto& l : s.plant.lines) l.I_min = -500, l.I_max = 500;
    return s.game();
}

/// Pseudo-gradient over z written out from the costs, independent of the
/// library's version.
inline Eigen::VectorXd reference_pseudo_gradient(const GameDefinition& g, const Eigen::VectorXd& z) {
    const auto& L = g.layout;
    double total = 0;
    for (int i = 0; i < g.n(); ++i) total += z[L.z_offset[i] + 1];
    Eigen::VectorXd F(z.size());
    for (int i = 0; i < g.n(); ++i) {
        const int o = L.z_offset[i];
        const auto& a = g.weights.agents[i];
        const auto& d = g.plant.dgus[i];
        const double r = a.r, pr = g.price.p_r;
        F[o] = r * a.alpha_u * (z[o] - d.u_ref);
        F[o + 1] = r * (a.alpha_I * (z[o + 1] - d.I_ref) - d.V_ref * (g.price.l - pr * total) + pr * d.V_ref * z[o + 1]);
        F[o + 2] = r * a.alpha_V * (z[o + 2] - d.V_ref);
        const auto& lines = g.topo.managed_lines(i);
        for (std::size_t j = 0; j < lines.size(); ++j)
            F[o + 3 + j] = r * g.weights.alpha_Il[lines[j]] * (z[o + 3 + j] - g.plant.lines[lines[j]].I_ref);
    }
    return F;
}

/// Equality constraints over z assembled from the circuit laws:
/// KCL and line rows, then R_i I_i + V_i - u_i = 0.
inline void reference_constraints(const GameDefinition& g, Eigen::MatrixXd& M, Eigen::VectorXd& b) {
    const int n = g.n(), m = g.m();
    const auto& L = g.layout;
    const Eigen::MatrixXd B = g.topo.incidence_matrix();
    M = Eigen::MatrixXd::Zero(2 * n + m, L.z_dim());
    b = Eigen::VectorXd::Zero(2 * n + m);
    auto col = [&](int global) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < L.size[i]; ++j)
                if (L.global[i][j] == global) return L.z_offset[i] + 1 + j;
        return -1;
    };
    for (int i = 0; i < n; ++i) {
        M(i, col(i)) = 1;
        M(i, col(n + i)) = -1.0 / g.plant.dgus[i].Z_load;
        for (int k = 0; k < m; ++k) M(i, col(2 * n + k)) += B(i, k);
        b[i] = g.plant.dgus[i].I_load;
    }
    for (int k = 0; k < m; ++k) {
        M(n + k, col(2 * n + k)) = g.plant.lines[k].R;
        for (int i = 0; i < n; ++i) M(n + k, col(n + i)) += B(i, k);
    }
    for (int i = 0; i < n; ++i) {
        M(n + m + i, col(i)) = g.plant.dgus[i].R;
        M(n + m + i, col(n + i)) = 1;
        M(n + m + i, L.z_offset[i]) = -1;
    }
}

/// Interior equilibrium from one linear solve: F(z) + M^T mu = 0, M z = b.
inline Eigen::VectorXd interior_equilibrium(const GameDefinition& g) {
    const int dz = g.layout.z_dim();
    Eigen::MatrixXd M;
    Eigen::VectorXd b;
    reference_constraints(g, M, b);
    const Eigen::VectorXd F0 = reference_pseudo_gradient(g, Eigen::VectorXd::Zero(dz));
    Eigen::MatrixXd J(dz, dz);
    for (int c = 0; c < dz; ++c) J.col(c) = reference_pseudo_gradient(g, Eigen::VectorXd::Unit(dz, c)) - F0;
    const int nc = static_cast<int>(M.rows());
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(dz + nc, dz + nc);
    K.topLeftCorner(dz, dz) = J;
    K.topRightCorner(dz, nc) = M.transpose();
    K.bottomLeftCorner(nc, dz) = M;
    Eigen::VectorXd rhs(dz + nc);
    rhs << -F0, b;
    return K.fullPivLu().solve(rhs).head(dz);
}

} // namespace dcgrid::testing
