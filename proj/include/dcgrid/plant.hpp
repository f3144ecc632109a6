#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "dcgrid/errors.hpp"
#include "dcgrid/topology.hpp"

namespace dcgrid {

/// One distributed generation unit with its filter, shunt capacitor and
/// local ZI load. SI units throughout.
struct DguParams {
    double R = 0.0;      // filter resistance, Ohm
    double L = 0.0;      // filter inductance, H
    double C = 0.0;      // shunt capacitance, F
    double Z_load = 0.0; // constant-impedance load, Ohm
    double I_load = 0.0; // constant-current load, A
    double V_min = 0.0;
    double V_max = 0.0;
    double V_ref = 0.0;
    double I_ref = 0.0;
    double u_ref = 0.0;
};

struct LineParams {
    double R = 0.0; // Ohm
    double L = 0.0; // H
    double I_min = 0.0;
    double I_max = 0.0;
    double I_ref = 0.0;
};

struct PlantParams {
    std::vector<DguParams> dgus;
    std::vector<LineParams> lines;

    /// Every invariant violation, empty when valid.
    std::vector<std::string> problems() const {
        std::vector<std::string> out;
        for (std::size_t i = 0; i < dgus.size(); ++i) {
            const auto& d = dgus[i];
            const std::string tag = "DGU " + std::to_string(i + 1) + ": ";
            if (!(d.R > 0)) out.push_back(tag + "filter resistance must be positive");
            if (!(d.L > 0)) out.push_back(tag + "filter inductance must be positive");
            if (!(d.C > 0)) out.push_back(tag + "capacitance must be positive");
            if (!(d.Z_load > 0)) out.push_back(tag + "load resistance must be positive");
            if (!(d.V_min < d.V_max)) out.push_back(tag + "V_min must be below V_max");
        }
        for (std::size_t k = 0; k < lines.size(); ++k) {
            const auto& l = lines[k];
            const std::string tag = "line " + std::to_string(k + 1) + ": ";
            if (!(l.R > 0)) out.push_back(tag + "resistance must be positive");
            if (!(l.L > 0)) out.push_back(tag + "inductance must be positive");
            if (!(l.I_min < l.I_max)) out.push_back(tag + "I_min must be below I_max");
        }
        return out;
    }

    void validate(const MicrogridTopology& topo) const {
        auto p = problems();
        if (static_cast<int>(dgus.size()) != topo.n()) p.push_back("DGU count does not match topology");
        if (static_cast<int>(lines.size()) != topo.m()) p.push_back("line count does not match topology");
        if (!p.empty()) throw ConfigError(p);
    }
};

/// Electrical state: generated currents, load voltages, line currents.
struct PlantState {
    Eigen::VectorXd I;
    Eigen::VectorXd V;
    Eigen::VectorXd Il;

    static PlantState zero(int n, int m) {
        return {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(m)};
    }

    /// Global ordering (I, V, I_l).
    Eigen::VectorXd stacked() const {
        Eigen::VectorXd x(I.size() + V.size() + Il.size());
        x << I, V, Il;
        return x;
    }

    static PlantState from_stacked(const Eigen::Ref<const Eigen::VectorXd>& x, int n, int m) {
        if (x.size() != 2 * n + m) throw std::invalid_argument("PlantState: stacked size mismatch");
        return {x.head(n), x.segment(n, n), x.tail(m)};
    }
};

/// Diagonal parameter matrices of the circuit model, cached as vectors.
struct PlantModel {
    int n = 0;
    int m = 0;
    Eigen::MatrixXd B;
    Eigen::VectorXd R, L, C, Zinv, I_load, Rl, Ll;

    PlantModel() = default;

    PlantModel(const PlantParams& p, const MicrogridTopology& topo)
        : n(topo.n()), m(topo.m()), B(topo.incidence_matrix()) {
        p.validate(topo);
        R.resize(n), L.resize(n), C.resize(n), Zinv.resize(n), I_load.resize(n);
        for (int i = 0; i < n; ++i) {
            const auto& d = p.dgus[i];
            R[i] = d.R, L[i] = d.L, C[i] = d.C, Zinv[i] = 1.0 / d.Z_load, I_load[i] = d.I_load;
        }
        Rl.resize(m), Ll.resize(m);
        for (int k = 0; k < m; ++k) Rl[k] = p.lines[k].R, Ll[k] = p.lines[k].L;
    }

    /// Writes the state derivative for stacked state x = (I, V, I_l). The
    /// load current term is scaled by load_gain so that load_gain = 0 gives
    /// the purely linear part.
    template <class In, class Out>
    void rhs(const In& x, const Eigen::Ref<const Eigen::VectorXd>& u, Out&& dx,
             double load_gain = 1.0) const {
        const auto I = x.head(n);
        const auto V = x.segment(n, n);
        const auto Il = x.tail(m);
        dx.head(n) = (-V - R.cwiseProduct(I) + u).cwiseQuotient(L);
        dx.segment(n, n) =
            (I + B * Il - Zinv.cwiseProduct(V) - load_gain * I_load).cwiseQuotient(C);
        dx.tail(m) = (-Rl.cwiseProduct(Il) - B.transpose() * V).cwiseQuotient(Ll);
    }

    /// Smallest line time constant L_l/R_l, the stiffness bound for explicit steps.
    double min_line_time_constant() const {
        if (m == 0) return std::numeric_limits<double>::infinity();
        return Ll.cwiseQuotient(Rl).minCoeff();
    }
};

inline PlantState plant_rhs(const PlantState& s, const Eigen::VectorXd& u, const PlantParams& p,
                            const MicrogridTopology& topo) {
    const int n = topo.n(), m = topo.m();
    if (s.I.size() != n || s.V.size() != n || s.Il.size() != m || u.size() != n)
        throw std::invalid_argument("plant_rhs: dimension mismatch");
    const PlantModel model(p, topo);
    Eigen::VectorXd dx(2 * n + m);
    model.rhs(s.stacked(), u, dx);
    return PlantState::from_stacked(dx, n, m);
}

/// Steady state of the circuit for a constant input u.
inline PlantState plant_equilibrium(const Eigen::VectorXd& u, const PlantParams& p,
                                    const MicrogridTopology& topo) {
    const PlantModel model(p, topo);
    const int n = model.n, m = model.m, dim = 2 * n + m;
    if (u.size() != n) throw std::invalid_argument("plant_equilibrium: dimension mismatch");

    // Rows: R I + V = u ; I - Z^-1 V + B I_l = I_L ; B^T V + R_l I_l = 0.
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(dim, dim);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dim);
    M.block(0, 0, n, n).diagonal() = model.R;
    M.block(0, n, n, n).diagonal().setOnes();
    M.block(n, 0, n, n).diagonal().setOnes();
    M.block(n, n, n, n).diagonal() = -model.Zinv;
    M.block(n, 2 * n, n, m) = model.B;
    M.block(2 * n, n, m, n) = model.B.transpose();
    M.block(2 * n, 2 * n, m, m).diagonal() = model.Rl;
    rhs.head(n) = u;
    rhs.segment(n, n) = model.I_load;

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(M);
    const auto& sv = svd.singularValues();
    if (sv(dim - 1) <= 0.0 || sv(0) / sv(dim - 1) > 1e12)
        throw SingularSystemError("plant_equilibrium: steady-state system is singular or ill-conditioned");
    const Eigen::VectorXd x = M.partialPivLu().solve(rhs);
    const double rel = (M * x - rhs).norm() / std::max(1.0, rhs.norm());
    if (!(rel < 1e-10))
        throw SingularSystemError("plant_equilibrium: linear solve residual too large");
    return PlantState::from_stacked(x, n, m);
}

/// Decreases every current load by dI_load and every impedance load by dZ_load.
inline PlantParams apply_load_step(const PlantParams& p, double dI_load, double dZ_load) {
    PlantParams out = p;
    std::vector<std::string> problems;
    for (std::size_t i = 0; i < out.dgus.size(); ++i) {
        out.dgus[i].I_load -= dI_load;
        out.dgus[i].Z_load -= dZ_load;
        if (!(out.dgus[i].Z_load > 0))
            problems.push_back("load step leaves DGU " + std::to_string(i + 1) +
                               " with nonpositive load resistance");
    }
    if (!problems.empty()) throw ConfigError(problems);
    return out;
}

} // namespace dcgrid
