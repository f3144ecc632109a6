#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "dcgrid/errors.hpp"
#include "dcgrid/plant.hpp"
#include "dcgrid/topology.hpp"

namespace dcgrid {

struct PriceParams {
    double l = 0.0;   // base price
    double p_r = 0.0; // price sensitivity to the aggregate generated current
};

struct AgentWeights {
    double r = 1.0; // normalization weight of the shared multiplier
    double alpha_u = 1.0;
    double alpha_I = 1.0;
    double alpha_V = 1.0;
};

/// Per-agent objective weights. Line weights are stored per line; each line
/// belongs to exactly one agent through the management partition.
struct ObjectiveWeights {
    std::vector<AgentWeights> agents;
    Eigen::VectorXd alpha_Il;
};

struct PenaltyParams {
    Eigen::VectorXd rho_V;  // per DGU
    Eigen::VectorXd rho_Il; // per line
};

struct Box {
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
};

/// Closed interval of reals; the subdifferential of a box penalty.
struct Interval {
    double lo = 0.0;
    double hi = 0.0;

    bool contains(double v) const noexcept { return lo <= v && v <= hi; }
    bool is_point() const noexcept { return lo == hi; }

    /// Element of smallest magnitude.
    double min_norm() const noexcept { return std::clamp(0.0, lo, hi); }

    /// Distance from v to the interval.
    double distance(double v) const noexcept {
        if (v < lo) return lo - v;
        if (v > hi) return v - hi;
        return 0.0;
    }
};

/// Subdifferential of rho * ([lo - v]_+ + [v - hi]_+). Values within
/// kink_tol of a bound are treated as sitting on it.
inline Interval penalty_subgradient(double value, Box box, double rho, double kink_tol = 0.0) {
    if (std::abs(value - box.lo) <= kink_tol) return {-rho, 0.0};
    if (std::abs(value - box.hi) <= kink_tol) return {0.0, rho};
    if (value < box.lo) return {-rho, -rho};
    if (value > box.hi) return {rho, rho};
    return {0.0, 0.0};
}

inline double penalty_value(double value, Box box, double rho) {
    return rho * (std::max(0.0, box.lo - value) + std::max(0.0, value - box.hi));
}

/// Index bookkeeping for agent-local slices x_i = (I_i, V_i, I_c,i).
///
/// Two stackings are used: the global plant ordering x = (I, V, I_l) and the
/// agent ordering col{x_1, ..., x_n}. Decision vectors z = col{u_i, x_i}
/// interleave each agent's input in front of its slice.
struct AgentLayout {
    int n = 0;
    int m = 0;
    std::vector<int> size;                 // 2 + |E_i|
    std::vector<int> x_offset;             // offset of x_i in the agent stacking (length 2n+m)
    std::vector<int> z_offset;             // offset of (u_i, x_i) in z (length 3n+m)
    std::vector<std::vector<int>> global;  // global plant index of each local coordinate

    AgentLayout() = default;

    explicit AgentLayout(const MicrogridTopology& topo) : n(topo.n()), m(topo.m()) {
        int xo = 0;
        for (int i = 0; i < n; ++i) {
            const auto& lines = topo.managed_lines(i);
            std::vector<int> g{i, n + i};
            for (int k : lines) g.push_back(2 * n + k);
            size.push_back(static_cast<int>(g.size()));
            x_offset.push_back(xo);
            z_offset.push_back(xo + i);
            global.push_back(std::move(g));
            xo += size.back();
        }
    }

    int x_dim() const noexcept { return 2 * n + m; }
    int z_dim() const noexcept { return 3 * n + m; }
    int coupling_dim() const noexcept { return n + m; }

    Eigen::VectorXd agent_to_global(const Eigen::Ref<const Eigen::VectorXd>& xa) const {
        Eigen::VectorXd xg(x_dim());
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < size[i]; ++j) xg[global[i][j]] = xa[x_offset[i] + j];
        return xg;
    }

    Eigen::VectorXd global_to_agent(const Eigen::Ref<const Eigen::VectorXd>& xg) const {
        Eigen::VectorXd xa(x_dim());
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < size[i]; ++j) xa[x_offset[i] + j] = xg[global[i][j]];
        return xa;
    }

    /// Builds z from inputs and a global-order state.
    Eigen::VectorXd make_z(const Eigen::Ref<const Eigen::VectorXd>& u,
                           const Eigen::Ref<const Eigen::VectorXd>& xg) const {
        Eigen::VectorXd z(z_dim());
        for (int i = 0; i < n; ++i) {
            z[z_offset[i]] = u[i];
            for (int j = 0; j < size[i]; ++j) z[z_offset[i] + 1 + j] = xg[global[i][j]];
        }
        return z;
    }

    Eigen::VectorXd z_inputs(const Eigen::Ref<const Eigen::VectorXd>& z) const {
        Eigen::VectorXd u(n);
        for (int i = 0; i < n; ++i) u[i] = z[z_offset[i]];
        return u;
    }

    Eigen::VectorXd z_state_global(const Eigen::Ref<const Eigen::VectorXd>& z) const {
        Eigen::VectorXd xg(x_dim());
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < size[i]; ++j) xg[global[i][j]] = z[z_offset[i] + 1 + j];
        return xg;
    }
};

/// Coupling constraints A x = s_A (nodal current balance and line steady
/// state) with their per-agent split, plus the local vectors D_i with
/// D_i^T x_i = R_i I_i + V_i.
struct ConstraintData {
    std::vector<Eigen::MatrixXd> A_blocks;   // (m+n) x (2+|E_i|)
    std::vector<Eigen::VectorXd> s_A_blocks; // m+n
    std::vector<Eigen::VectorXd> D;          // 2+|E_i|
    Eigen::MatrixXd A_full;                  // (m+n) x (2n+m), global ordering
    Eigen::VectorXd s_A_full;                // m+n
};

inline ConstraintData build_constraints(const MicrogridTopology& topo, const PlantParams& p) {
    p.validate(topo);
    const int n = topo.n(), m = topo.m(), rows = n + m;
    const Eigen::MatrixXd B = topo.incidence_matrix();
    const AgentLayout layout(topo);

    ConstraintData c;
    c.A_full = Eigen::MatrixXd::Zero(rows, 2 * n + m);
    c.s_A_full = Eigen::VectorXd::Zero(rows);
    for (int i = 0; i < n; ++i) {
        c.A_full(i, i) = 1.0;
        c.A_full(i, n + i) = -1.0 / p.dgus[i].Z_load;
        c.s_A_full[i] = p.dgus[i].I_load;
    }
    c.A_full.block(0, 2 * n, n, m) = B;
    c.A_full.block(n, n, m, n) = B.transpose();
    for (int k = 0; k < m; ++k) c.A_full(n + k, 2 * n + k) = p.lines[k].R;

    for (int i = 0; i < n; ++i) {
        const int ni = layout.size[i];
        Eigen::MatrixXd Ai(rows, ni);
        for (int j = 0; j < ni; ++j) Ai.col(j) = c.A_full.col(layout.global[i][j]);
        c.A_blocks.push_back(std::move(Ai));

        Eigen::VectorXd si = Eigen::VectorXd::Zero(rows);
        si[i] = p.dgus[i].I_load;
        c.s_A_blocks.push_back(std::move(si));

        Eigen::VectorXd Di = Eigen::VectorXd::Zero(ni);
        Di[0] = p.dgus[i].R;
        Di[1] = 1.0;
        c.D.push_back(std::move(Di));
    }
    return c;
}

/// Everything that defines the game: network, physical parameters (which fix
/// references and boxes), prices, weights, penalties and the derived
/// constraint data.
struct GameDefinition {
    MicrogridTopology topo;
    Graph comm;
    Eigen::MatrixXd comm_laplacian;
    PlantParams plant;
    PriceParams price;
    ObjectiveWeights weights;
    PenaltyParams penalty;
    ConstraintData constraints;
    AgentLayout layout;

    int n() const noexcept { return topo.n(); }
    int m() const noexcept { return topo.m(); }

    double r(int i) const { return weights.agents[i].r; }

    Eigen::VectorXd r_vector() const {
        Eigen::VectorXd out(n());
        for (int i = 0; i < n(); ++i) out[i] = weights.agents[i].r;
        return out;
    }

    /// Reference slice x_i^r.
    Eigen::VectorXd reference(int i) const {
        Eigen::VectorXd ref(layout.size[i]);
        ref[0] = plant.dgus[i].I_ref;
        ref[1] = plant.dgus[i].V_ref;
        const auto& lines = topo.managed_lines(i);
        for (std::size_t j = 0; j < lines.size(); ++j) ref[2 + j] = plant.lines[lines[j]].I_ref;
        return ref;
    }

    /// Diagonal of A_{x_i}.
    Eigen::VectorXd state_weights(int i) const {
        Eigen::VectorXd w(layout.size[i]);
        w[0] = weights.agents[i].alpha_I;
        w[1] = weights.agents[i].alpha_V;
        const auto& lines = topo.managed_lines(i);
        for (std::size_t j = 0; j < lines.size(); ++j) w[2 + j] = weights.alpha_Il[lines[j]];
        return w;
    }

    /// Box and penalty weight of local coordinate j of agent i (j >= 1).
    Box box(int i, int j) const {
        if (j == 1) return {plant.dgus[i].V_min, plant.dgus[i].V_max};
        const auto& line = plant.lines[topo.managed_lines(i)[j - 2]];
        return {line.I_min, line.I_max};
    }

    double rho(int i, int j) const {
        if (j == 1) return penalty.rho_V[i];
        return penalty.rho_Il[topo.managed_lines(i)[j - 2]];
    }

    /// Same game with new physical parameters (e.g. after a load step).
    GameDefinition with_plant(const PlantParams& p) const {
        GameDefinition g = *this;
        g.plant = p;
        g.constraints = build_constraints(topo, p);
        return g;
    }
};

/// l - p_r * sum_i (V_i^max / Z_L,i + I_L,i); must be positive.
inline double check_assumption1(const PlantParams& p, const PriceParams& price) {
    double worst = 0.0;
    for (const auto& d : p.dgus) worst += d.V_max / d.Z_load + d.I_load;
    return price.l - price.p_r * worst;
}

/// Per-agent left-hand side of the monotonicity bound; all must be positive.
inline Eigen::VectorXd check_assumption3(const ObjectiveWeights& w, const PriceParams& price,
                                         const Eigen::VectorXd& V_ref) {
    const int n = static_cast<int>(w.agents.size());
    if (V_ref.size() != n) throw std::invalid_argument("check_assumption3: dimension mismatch");
    double shared = 0.0;
    for (int i = 0; i < n; ++i) shared += w.agents[i].r * price.p_r * V_ref[i];
    Eigen::VectorXd margin(n);
    for (int i = 0; i < n; ++i) {
        const auto& a = w.agents[i];
        margin[i] = 2.0 * a.r * a.alpha_I + (6.0 - n) * a.r * price.p_r * V_ref[i] - shared;
    }
    return margin;
}

inline Eigen::VectorXd reference_voltages(const PlantParams& p) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(p.dgus.size()));
    for (std::size_t i = 0; i < p.dgus.size(); ++i) v[static_cast<Eigen::Index>(i)] = p.dgus[i].V_ref;
    return v;
}

/// Builds the game and validates every invariant, listing all problems.
inline GameDefinition make_game(const MicrogridTopology& topo, const Graph& comm, const PlantParams& plant,
                                const PriceParams& price, const ObjectiveWeights& weights,
                                const PenaltyParams& penalty) {
    std::vector<std::string> problems = plant.problems();
    const int n = topo.n(), m = topo.m();
    if (static_cast<int>(plant.dgus.size()) != n || static_cast<int>(plant.lines.size()) != m)
        problems.push_back("plant parameter counts do not match topology");
    if (comm.nodes() != n) problems.push_back("communication graph must span all DGUs");
    if (static_cast<int>(weights.agents.size()) != n || weights.alpha_Il.size() != m)
        problems.push_back("objective weight counts do not match topology");
    if (penalty.rho_V.size() != n || penalty.rho_Il.size() != m)
        problems.push_back("penalty counts do not match topology");
    if (!problems.empty()) throw ConfigError(problems);

    if (!(price.l > 0)) problems.push_back("price l must be positive");
    if (!(price.p_r > 0)) problems.push_back("price sensitivity p_r must be positive");
    for (int i = 0; i < n; ++i) {
        const auto& a = weights.agents[i];
        if (!(a.r > 0 && a.alpha_u > 0 && a.alpha_I > 0 && a.alpha_V > 0))
            problems.push_back("DGU " + std::to_string(i + 1) + ": objective weights must be positive");
        if (!(penalty.rho_V[i] > 0))
            problems.push_back("DGU " + std::to_string(i + 1) + ": voltage penalty must be positive");
    }
    for (int k = 0; k < m; ++k) {
        if (!(weights.alpha_Il[k] > 0))
            problems.push_back("line " + std::to_string(k + 1) + ": current weight must be positive");
        if (!(penalty.rho_Il[k] > 0))
            problems.push_back("line " + std::to_string(k + 1) + ": current penalty must be positive");
    }
    const double a1 = check_assumption1(plant, price);
    if (!(a1 > 0)) problems.push_back("price stays positive only if l - p_r * sum(V_max/Z_L + I_L) > 0 (margin " +
                                      std::to_string(a1) + ")");
    const Eigen::VectorXd a3 = check_assumption3(weights, price, reference_voltages(plant));
    for (int i = 0; i < n; ++i)
        if (!(a3[i] > 0))
            problems.push_back("DGU " + std::to_string(i + 1) + ": monotonicity margin is not positive (" +
                               std::to_string(a3[i]) + ")");
    if (!problems.empty()) throw ConfigError(problems);

    GameDefinition g;
    g.topo = topo;
    g.comm = comm;
    g.comm_laplacian = comm.laplacian();
    g.plant = plant;
    g.price = price;
    g.weights = weights;
    g.penalty = penalty;
    g.constraints = build_constraints(topo, plant);
    g.layout = AgentLayout(topo);
    return g;
}

/// Smooth part of agent i's gradient with respect to its own slice,
/// with the aggregate current supplied explicitly (the true sum for the
/// game, the consensus estimate inside the controller).
template <class X, class Out>
void smooth_state_gradient(const GameDefinition& g, int i, const X& xi, double aggregate, Out&& out) {
    const auto& a = g.weights.agents[i];
    const auto& d = g.plant.dgus[i];
    const double pr = g.price.p_r;
    out[0] = a.alpha_I * (xi[0] - d.I_ref) - d.V_ref * (g.price.l - pr * aggregate) + pr * d.V_ref * xi[0];
    out[1] = a.alpha_V * (xi[1] - d.V_ref);
    const auto& lines = g.topo.managed_lines(i);
    for (std::size_t j = 0; j < lines.size(); ++j) {
        const auto k = lines[j];
        out[2 + j] = g.weights.alpha_Il[k] * (xi[2 + j] - g.plant.lines[k].I_ref);
    }
}

/// f_i = 1/2 alpha_u (u_i - u_i^r)^2 + 1/2 |x_i - x_i^r|^2_{A_xi} - (l - p_r S) V_i^r I_i.
inline double cost(const GameDefinition& g, int i, double u_i, const Eigen::VectorXd& xi, double aggregate_I) {
    const auto& a = g.weights.agents[i];
    const auto& d = g.plant.dgus[i];
    const Eigen::VectorXd dev = xi - g.reference(i);
    const double f1 = 0.5 * a.alpha_u * (u_i - d.u_ref) * (u_i - d.u_ref) +
                      0.5 * dev.dot(g.state_weights(i).cwiseProduct(dev));
    const double f2 = -(g.price.l - g.price.p_r * aggregate_I) * d.V_ref * xi[0];
    return f1 + f2;
}

/// Penalty g_i(x_i) on agent i's voltage and managed line currents.
inline double penalty_cost(const GameDefinition& g, int i, const Eigen::VectorXd& xi) {
    double total = 0.0;
    for (int j = 1; j < g.layout.size[i]; ++j) total += penalty_value(xi[j], g.box(i, j), g.rho(i, j));
    return total;
}

/// F_r(u, x) = col{r_i grad_(u_i, x_i) f_i}, smooth part only, over z.
inline Eigen::VectorXd pseudo_gradient(const GameDefinition& g, const Eigen::VectorXd& z) {
    const auto& L = g.layout;
    if (z.size() != L.z_dim()) throw std::invalid_argument("pseudo_gradient: dimension mismatch");
    double total_I = 0.0;
    for (int i = 0; i < L.n; ++i) total_I += z[L.z_offset[i] + 1];

    Eigen::VectorXd F(L.z_dim());
    for (int i = 0; i < L.n; ++i) {
        const int o = L.z_offset[i];
        const double r = g.r(i);
        const auto& a = g.weights.agents[i];
        F[o] = r * a.alpha_u * (z[o] - g.plant.dgus[i].u_ref);
        auto block = F.segment(o + 1, L.size[i]);
        smooth_state_gradient(g, i, z.segment(o + 1, L.size[i]), total_I, block);
        block *= r;
    }
    return F;
}

/// Constant Jacobian of the (affine) pseudo-gradient.
inline Eigen::MatrixXd pseudo_gradient_jacobian(const GameDefinition& g) {
    const auto& L = g.layout;
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(L.z_dim(), L.z_dim());
    const double pr = g.price.p_r;
    for (int i = 0; i < L.n; ++i) {
        const int o = L.z_offset[i];
        const double r = g.r(i);
        const auto& a = g.weights.agents[i];
        const double vref = g.plant.dgus[i].V_ref;
        J(o, o) = r * a.alpha_u;
        J(o + 1, o + 1) = r * (a.alpha_I + pr * vref);
        for (int j = 0; j < L.n; ++j) J(o + 1, L.z_offset[j] + 1) += r * pr * vref;
        J(o + 2, o + 2) = r * a.alpha_V;
        const auto& lines = g.topo.managed_lines(i);
        for (std::size_t j = 0; j < lines.size(); ++j)
            J(o + 3 + j, o + 3 + j) = r * g.weights.alpha_Il[lines[j]];
    }
    return J;
}

struct PenaltySlack {
    Eigen::VectorXd voltage; // per DGU
    Eigen::VectorXd line;    // per line
};

/// Slack in the lower bounds the penalty weights must exceed, given the
/// per-agent coupling multipliers (column i = lambda_i) and gamma.
inline PenaltySlack check_penalty_bounds(const GameDefinition& g, const Eigen::MatrixXd& lambda,
                                         const Eigen::VectorXd& gamma) {
    const int n = g.n(), m = g.m();
    if (lambda.rows() != n + m || lambda.cols() != n || gamma.size() != n)
        throw std::invalid_argument("check_penalty_bounds: dimension mismatch");
    const auto& A = g.constraints.A_full;
    PenaltySlack s{Eigen::VectorXd(n), Eigen::VectorXd(m)};
    for (int i = 0; i < n; ++i) {
        const auto& d = g.plant.dgus[i];
        const double coupling = A.col(n + i).dot(lambda.col(i));
        s.voltage[i] = g.penalty.rho_V[i] -
                       (g.weights.agents[i].alpha_V * (d.V_max - d.V_ref) + coupling + gamma[i]);
    }
    for (int k = 0; k < m; ++k) {
        const int owner = g.topo.manager(k);
        const auto& line = g.plant.lines[k];
        const double coupling = A.col(2 * n + k).dot(lambda.col(owner));
        s.line[k] = g.penalty.rho_Il[k] - (g.weights.alpha_Il[k] * (line.I_max - line.I_ref) + coupling);
    }
    return s;
}

} // namespace dcgrid
