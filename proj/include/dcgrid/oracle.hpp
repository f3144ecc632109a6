#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "dcgrid/controller.hpp"
#include "dcgrid/game.hpp"
#include "dcgrid/plant.hpp"

namespace dcgrid {

/// Feasible set of the game over z = col{u_i, x_i}: the coupling equalities,
/// the local equalities D_i^T x_i = u_i, and the voltage/line-current boxes.
class FeasibleSet {
public:
    explicit FeasibleSet(const GameDefinition& g) {
        const auto& L = g.layout;
        const auto& cd = g.constraints;
        const int n = L.n, dz = L.z_dim(), dc = L.coupling_dim();

        M_ = Eigen::MatrixXd::Zero(dc + n, dz);
        b_ = Eigen::VectorXd::Zero(dc + n);
        for (int i = 0; i < n; ++i) {
            const int o = L.z_offset[i];
            M_.block(0, o + 1, dc, L.size[i]) = cd.A_blocks[i];
            M_(dc + i, o) = -1.0;
            M_.block(dc + i, o + 1, 1, L.size[i]) = cd.D[i].transpose();
        }
        b_.head(dc) = cd.s_A_full;
        gram_ = (M_ * M_.transpose()).ldlt();

        lo_ = Eigen::VectorXd::Constant(dz, -std::numeric_limits<double>::infinity());
        hi_ = Eigen::VectorXd::Constant(dz, std::numeric_limits<double>::infinity());
        for (int i = 0; i < n; ++i)
            for (int j = 1; j < L.size[i]; ++j) {
                const Box box = g.box(i, j);
                lo_[L.z_offset[i] + 1 + j] = box.lo;
                hi_[L.z_offset[i] + 1 + j] = box.hi;
            }
    }

    const Eigen::MatrixXd& equality_matrix() const noexcept { return M_; }
    const Eigen::VectorXd& equality_rhs() const noexcept { return b_; }
    const Eigen::VectorXd& lower() const noexcept { return lo_; }
    const Eigen::VectorXd& upper() const noexcept { return hi_; }

    Eigen::VectorXd project_affine(const Eigen::VectorXd& z) const {
        return z - M_.transpose() * gram_.solve(M_ * z - b_);
    }

    Eigen::VectorXd project_box(const Eigen::VectorXd& z) const { return z.cwiseMax(lo_).cwiseMin(hi_); }

    struct Projection {
        Eigen::VectorXd point;
        int iterations = 0;
        bool converged = false;
        double gap = 0.0; // distance between the last affine and box iterates
    };

    /// Dykstra's alternating projection onto the intersection.
    Projection project(const Eigen::VectorXd& z, double tol = 1e-12, int max_iter = 200000) const {
        Projection out;
        Eigen::VectorXd x = z, p = Eigen::VectorXd::Zero(z.size()), q = Eigen::VectorXd::Zero(z.size());
        Eigen::VectorXd y(z.size()), x_prev(z.size());
        const double scale = 1.0 + z.lpNorm<Eigen::Infinity>();
        for (int k = 1; k <= max_iter; ++k) {
            x_prev = x;
            y = project_affine(x + p);
            p = x + p - y;
            x = project_box(y + q);
            q = y + q - x;
            out.iterations = k;
            if ((x - x_prev).lpNorm<Eigen::Infinity>() <= tol * scale &&
                (x - y).lpNorm<Eigen::Infinity>() <= tol * scale) {
                out.converged = true;
                break;
            }
        }
        out.gap = (x - project_affine(x)).lpNorm<Eigen::Infinity>();
        out.point = x;
        return out;
    }

private:
    Eigen::MatrixXd M_;
    Eigen::VectorXd b_;
    Eigen::LDLT<Eigen::MatrixXd> gram_;
    Eigen::VectorXd lo_, hi_;
};

struct EquilibriumSolution {
    Eigen::VectorXd z;           // col{u_i, x_i}
    Eigen::VectorXd u_star;      // n
    Eigen::VectorXd x_star;      // 2n+m, global ordering (I, V, I_l)
    Eigen::VectorXd lambda_star; // shared normalized multiplier r_i lambda_i
    Eigen::VectorXd gamma_star;  // n
    int iterations = 0;
    double residual = 0.0;       // natural-map residual |z - P(z - tau F(z))| / tau
    bool converged = false;
    double multiplier_residual = 0.0;
};

/// Largest singular value of the Jacobian of F_r by power iteration on
/// J^T J, with J v obtained from differences of the affine map.
inline double pseudo_gradient_lipschitz(const GameDefinition& g, int iterations = 200) {
    const int dz = g.layout.z_dim();
    const Eigen::VectorXd base = Eigen::VectorXd::Zero(dz);
    const Eigen::VectorXd f0 = pseudo_gradient(g, base);
    // F_r is affine, so differences recover J exactly; dz is small enough to
    // assemble it column by column.
    Eigen::MatrixXd J(dz, dz);
    for (int c = 0; c < dz; ++c) J.col(c) = pseudo_gradient(g, Eigen::VectorXd::Unit(dz, c)) - f0;
    Eigen::VectorXd v = Eigen::VectorXd::Ones(dz).normalized();
    double sigma = 0.0;
    for (int k = 0; k < iterations; ++k) {
        Eigen::VectorXd w = J.transpose() * (J * v);
        const double nw = w.norm();
        if (nw == 0.0) break;
        sigma = std::sqrt(nw);
        v = w / nw;
    }
    return sigma;
}

struct MultiplierRecovery {
    Eigen::VectorXd lambda_bar;     // shared multiplier, m+n
    Eigen::VectorXd gamma;          // n
    Eigen::VectorXd box_multiplier; // subgradient element s for each active box coordinate
    std::vector<int> active;        // z indices of the active box coordinates
    double residual = 0.0;
    bool rank_deficient = false;
    bool in_subdifferential = true; // every s inside its penalty interval
};

/// Least-squares fit of (lambda_bar, gamma, s_active) to the input and state
/// stationarity rows of the distributed optimality system at a fixed (u, x).
inline MultiplierRecovery recover_multipliers(const GameDefinition& g, const Eigen::VectorXd& z,
                                              double active_tol = 1e-7) {
    const auto& L = g.layout;
    const auto& cd = g.constraints;
    const int n = L.n, dz = L.z_dim(), dc = L.coupling_dim();
    if (z.size() != dz) throw std::invalid_argument("recover_multipliers: dimension mismatch");

    MultiplierRecovery rec;
    for (int i = 0; i < n; ++i)
        for (int j = 1; j < L.size[i]; ++j) {
            const Box box = g.box(i, j);
            const double v = z[L.z_offset[i] + 1 + j];
            const double tol = active_tol * std::max(1.0, std::abs(v));
            if (std::abs(v - box.lo) <= tol || std::abs(v - box.hi) <= tol) rec.active.push_back(L.z_offset[i] + 1 + j);
        }
    const int na = static_cast<int>(rec.active.size());
    const int unknowns = dc + n + na;

    const Eigen::VectorXd F = pseudo_gradient(g, z);
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(dz, unknowns);
    const Eigen::VectorXd rhs = -F;
    for (int i = 0; i < n; ++i) {
        const int o = L.z_offset[i];
        G(o, dc + i) = -1.0;
        G.block(o + 1, 0, L.size[i], dc) = cd.A_blocks[i].transpose();
        G.block(o + 1, dc + i, L.size[i], 1) = cd.D[i];
    }
    for (int a = 0; a < na; ++a) {
        const int idx = rec.active[a];
        int owner = 0;
        while (owner + 1 < n && L.z_offset[owner + 1] <= idx) ++owner;
        G(idx, dc + n + a) = g.r(owner);
    }

    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(G);
    cod.setThreshold(1e-10);
    const Eigen::VectorXd sol = cod.solve(rhs);
    rec.rank_deficient = cod.rank() < unknowns;
    rec.lambda_bar = sol.head(dc);
    rec.gamma = sol.segment(dc, n);
    rec.box_multiplier = sol.tail(na);
    rec.residual = (G * sol - rhs).lpNorm<Eigen::Infinity>();

    for (int a = 0; a < na; ++a) {
        const int idx = rec.active[a];
        int owner = 0;
        while (owner + 1 < n && L.z_offset[owner + 1] <= idx) ++owner;
        const int j = idx - L.z_offset[owner] - 1;
        const Interval s = penalty_subgradient(z[idx], g.box(owner, j), g.rho(owner, j),
                                               active_tol * std::max(1.0, std::abs(z[idx])));
        if (!s.contains(rec.box_multiplier[a])) rec.in_subdifferential = false;
    }
    return rec;
}

struct VIOptions {
    double tol = 1e-9;
    int max_iter = 200000;
    double step_fraction = 0.5; // step = step_fraction / Lipschitz estimate
    double projection_tol = 1e-13;
};

/// Normalized Nash equilibrium from the variational inequality over the
/// full feasible set, by projected extragradient. Boxes are handled by
/// projection, not by the penalties.
inline EquilibriumSolution solve_vi(const GameDefinition& g, const VIOptions& opt = {},
                                    std::vector<double>* residual_history = nullptr) {
    const auto& L = g.layout;
    const FeasibleSet set(g);
    const double lip = pseudo_gradient_lipschitz(g);
    const double tau = opt.step_fraction / lip;

    auto project = [&](const Eigen::VectorXd& v) {
        auto p = set.project(v, opt.projection_tol);
        if (!p.converged && p.gap > 1e-6)
            throw ConfigError("feasible set appears empty: alternating projection did not converge (gap " +
                              std::to_string(p.gap) + ")");
        return p.point;
    };

    // Start from the projection of the references.
    Eigen::VectorXd z(L.z_dim());
    for (int i = 0; i < L.n; ++i) {
        z[L.z_offset[i]] = g.plant.dgus[i].u_ref;
        z.segment(L.z_offset[i] + 1, L.size[i]) = g.reference(i);
    }
    z = project(z);

    EquilibriumSolution sol;
    for (int k = 1; k <= opt.max_iter; ++k) {
        const Eigen::VectorXd y = project(z - tau * pseudo_gradient(g, z));
        const double res = (z - y).norm() / tau;
        if (residual_history) residual_history->push_back(res);
        sol.iterations = k;
        sol.residual = res;
        if (res < opt.tol) {
            sol.converged = true;
            break;
        }
        z = project(z - tau * pseudo_gradient(g, y));
    }

    sol.z = z;
    sol.u_star = L.z_inputs(z);
    sol.x_star = L.z_state_global(z);
    const auto rec = recover_multipliers(g, z);
    sol.lambda_star = rec.lambda_bar;
    sol.gamma_star = rec.gamma;
    sol.multiplier_residual = rec.residual;
    return sol;
}

/// Equilibrium of the penalized game, where the boxes enter only through
/// the penalties. This is the point the controller flow can reach; it equals
/// solve_vi exactly when the penalty weights dominate the box multipliers.
/// Found by a primal-dual active-set iteration: every penalized coordinate
/// is classified (below, on the lower bound, inside, on the upper bound,
/// above), the resulting linear system is solved, and inconsistent
/// coordinates are reclassified until nothing changes. A start point (e.g.
/// the solve_vi solution) seeds the classification with its active bounds.
struct PenalizedEquilibrium {
    EquilibriumSolution solution;
    std::vector<int> coordinates; // z indices of the penalized coordinates
    std::vector<int> status;      // -2 below, -1 on lower bound, 0 inside, 1 on upper bound, 2 above
    int sweeps = 0;
};

inline PenalizedEquilibrium solve_penalized_equilibrium(const GameDefinition& g,
                                                        const Eigen::VectorXd* start = nullptr,
                                                        int max_sweeps = 500) {
    const auto& L = g.layout;
    const int n = L.n, dz = L.z_dim(), dc = L.coupling_dim();
    const FeasibleSet set(g);
    const Eigen::MatrixXd& M = set.equality_matrix();
    const int rows = static_cast<int>(M.rows());

    const Eigen::VectorXd c = pseudo_gradient(g, Eigen::VectorXd::Zero(dz));
    Eigen::MatrixXd J(dz, dz);
    for (int k = 0; k < dz; ++k) J.col(k) = pseudo_gradient(g, Eigen::VectorXd::Unit(dz, k)) - c;

    PenalizedEquilibrium out;
    std::vector<double> weight, rho, lo, hi;
    for (int i = 0; i < n; ++i)
        for (int j = 1; j < L.size[i]; ++j) {
            out.coordinates.push_back(L.z_offset[i] + 1 + j);
            const Box b = g.box(i, j);
            lo.push_back(b.lo), hi.push_back(b.hi);
            rho.push_back(g.rho(i, j));
            weight.push_back(g.r(i));
        }
    const int np = static_cast<int>(out.coordinates.size());
    out.status.assign(np, 0);
    if (start) {
        for (int p = 0; p < np; ++p) {
            const double v = (*start)[out.coordinates[p]];
            const double tol = 1e-7 * std::max(1.0, std::abs(v));
            if (std::abs(v - lo[p]) <= tol) out.status[p] = -1;
            else if (std::abs(v - hi[p]) <= tol) out.status[p] = 1;
        }
    }

    Eigen::VectorXd z, mu, w;
    for (int sweep = 1; sweep <= max_sweeps; ++sweep) {
        out.sweeps = sweep;
        std::vector<int> pinned;
        Eigen::VectorXd rhs_f = -c;
        for (int p = 0; p < np; ++p) {
            const int st = out.status[p];
            if (st == -2) rhs_f[out.coordinates[p]] += weight[p] * rho[p];
            if (st == 2) rhs_f[out.coordinates[p]] -= weight[p] * rho[p];
            if (st == -1 || st == 1) pinned.push_back(p);
        }
        const int na = static_cast<int>(pinned.size());
        const int size = dz + rows + na;
        Eigen::MatrixXd K = Eigen::MatrixXd::Zero(size, size);
        Eigen::VectorXd rhs(size);
        K.topLeftCorner(dz, dz) = J;
        K.block(0, dz, dz, rows) = M.transpose();
        K.block(dz, 0, rows, dz) = M;
        rhs.head(dz) = rhs_f;
        rhs.segment(dz, rows) = set.equality_rhs();
        for (int a = 0; a < na; ++a) {
            const int p = pinned[a], idx = out.coordinates[p];
            K(idx, dz + rows + a) = 1.0;
            K(dz + rows + a, idx) = 1.0;
            rhs[dz + rows + a] = out.status[p] < 0 ? lo[p] : hi[p];
        }
        const Eigen::VectorXd sol = K.fullPivLu().solve(rhs);
        z = sol.head(dz);
        mu = sol.segment(dz, rows);
        w = sol.tail(na);

        // Reclassify only the worst offender; changing all at once can cycle.
        int worst = -1, worst_status = 0;
        double worst_violation = 0.0;
        auto offer = [&](int p, double violation, int status) {
            if (violation > worst_violation) worst = p, worst_violation = violation, worst_status = status;
        };
        int a = 0;
        for (int p = 0; p < np; ++p) {
            const double v = z[out.coordinates[p]];
            const double tol = 1e-12 * std::max(1.0, std::abs(v));
            switch (out.status[p]) {
            case -1: {
                const double sub = w[a++] / weight[p]; // subdifferential element holding the bound
                offer(p, -rho[p] - sub, -2);
                offer(p, sub, 0);
                break;
            }
            case 1: {
                const double sub = w[a++] / weight[p];
                offer(p, sub - rho[p], 2);
                offer(p, -sub, 0);
                break;
            }
            case -2: offer(p, v - lo[p] - tol, -1); break;
            case 2: offer(p, hi[p] - v - tol, 1); break;
            default:
                offer(p, lo[p] - v - tol, -1);
                offer(p, v - hi[p] - tol, 1);
            }
        }
        if (worst < 0) {
            out.solution.converged = true;
            break;
        }
        out.status[worst] = worst_status;
    }

    auto& s = out.solution;
    s.z = z;
    s.u_star = L.z_inputs(z);
    s.x_star = L.z_state_global(z);
    s.lambda_star = mu.head(dc);
    s.gamma_star = mu.tail(n);
    s.iterations = out.sweeps;
    return out;
}

/// Slow dynamics with the estimator replaced by its quasi-steady state
/// upsilon = (sum of Ihat) 1. Writes plant derivatives into dplant and the
/// slow controller derivatives into dcs (fast blocks are left at zero).
template <class PlantIn, class PlantOut, class State, class DState>
void reduced_model_rhs(const PlantModel& plant, const GameDefinition& g, const ControllerParams& cp,
                       const PlantIn& x, const State& cs, PlantOut&& dplant, DState& dcs) {
    plant.rhs(x, cs.u(), dplant);
    const Eigen::VectorXd h_ups = Eigen::VectorXd::Constant(g.n(), cs.ihat(g.layout).sum());
    dcs.upsilon().setZero();
    dcs.nu().setZero();
    const Eigen::VectorXd plant_I = x.head(g.n());
    controller_slow_rhs(g, cp, cs, h_ups, plant_I, dcs);
}

struct LyapunovSample {
    double E_b = 0.0; // boundary-layer function
    double E_r = 0.0; // reduced-order function
};

/// Lyapunov-function values at one closed-loop sample.
inline LyapunovSample lyapunov_diagnostics(const PlantModel& plant, const GameDefinition& g, const ControllerParams& cp,
                                           const Eigen::VectorXd& x, const ControllerState& cs) {
    const auto& lap = g.comm_laplacian;
    const Eigen::VectorXd ihat = cs.ihat(g.layout);
    const auto h = fast_equilibrium(ihat, lap);
    const Eigen::VectorXd ub = cs.upsilon() - h.upsilon;
    const Eigen::VectorXd nb = cs.nu() - h.nu;
    const double sigma = Eigen::JacobiSVD<Eigen::MatrixXd>(lap).singularValues()(0);

    LyapunovSample out;
    out.E_b = sigma * (ub.squaredNorm() + nb.squaredNorm()) + 0.5 * ub.squaredNorm() + 0.5 * ub.dot(lap * ub) +
              nb.dot(lap * ub);

    Eigen::VectorXd dx(x.size());
    ControllerState dcs(g.n(), g.m());
    reduced_model_rhs(plant, g, cp, x, cs, dx, dcs);
    const int n = plant.n, m = plant.m;
    const double electrical = dx.head(n).cwiseAbs2().dot(plant.L) + dx.segment(n, n).cwiseAbs2().dot(plant.C) +
                              dx.tail(m).cwiseAbs2().dot(plant.Ll);
    out.E_r = 0.5 * electrical + dcs.data().squaredNorm() / (2.0 * cp.eps_u);
    return out;
}

} // namespace dcgrid
