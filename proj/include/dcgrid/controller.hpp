#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <type_traits>

#include "dcgrid/game.hpp"

namespace dcgrid {

/// Offsets of the controller blocks inside one flat vector:
/// upsilon, nu, u (n each), xhat (2n+m, agent stacking), lambda and theta
/// (n blocks of m+n, agent-major), gamma (n).
struct ControllerLayout {
    int n = 0;
    int m = 0;

    ControllerLayout() = default;
    ControllerLayout(int n_, int m_) : n(n_), m(m_) {}

    int d() const noexcept { return n + m; }
    int upsilon() const noexcept { return 0; }
    int nu() const noexcept { return n; }
    int u() const noexcept { return 2 * n; }
    int xhat() const noexcept { return 3 * n; }
    int lambda() const noexcept { return xhat() + 2 * n + m; }
    int theta() const noexcept { return lambda() + n * d(); }
    int gamma() const noexcept { return theta() + n * d(); }
    int size() const noexcept { return gamma() + n; }
};

/// Non-owning view of a flat controller vector with named blocks. Scalar is
/// double for a mutable view and const double for a read-only one.
template <class Scalar>
class ControllerView {
    using Vec = std::conditional_t<std::is_const_v<Scalar>, const Eigen::VectorXd, Eigen::VectorXd>;
    using Mat = std::conditional_t<std::is_const_v<Scalar>, const Eigen::MatrixXd, Eigen::MatrixXd>;

public:
    ControllerView(Scalar* data, ControllerLayout layout) : p_(data), l_(layout) {}

    const ControllerLayout& layout() const noexcept { return l_; }

    Eigen::Map<Vec> upsilon() const { return {p_ + l_.upsilon(), l_.n}; }
    Eigen::Map<Vec> nu() const { return {p_ + l_.nu(), l_.n}; }
    Eigen::Map<Vec> u() const { return {p_ + l_.u(), l_.n}; }
    Eigen::Map<Vec> xhat() const { return {p_ + l_.xhat(), 2 * l_.n + l_.m}; }
    Eigen::Map<Vec> gamma() const { return {p_ + l_.gamma(), l_.n}; }
    /// Column i is lambda_i.
    Eigen::Map<Mat> lambda() const { return {p_ + l_.lambda(), l_.d(), l_.n}; }
    /// Column i is theta_i.
    Eigen::Map<Mat> theta() const { return {p_ + l_.theta(), l_.d(), l_.n}; }

    /// Decision copy of the generated currents, one per agent.
    Eigen::VectorXd ihat(const AgentLayout& al) const {
        Eigen::VectorXd out(l_.n);
        for (int i = 0; i < l_.n; ++i) out[i] = p_[l_.xhat() + al.x_offset[i]];
        return out;
    }

private:
    Scalar* p_;
    ControllerLayout l_;
};

/// Decision-system state of all agents, stored flat so it can be
/// integrated directly.
class ControllerState {
public:
    ControllerState() = default;
    ControllerState(int n, int m) : layout_(n, m), data_(Eigen::VectorXd::Zero(layout_.size())) {}
    ControllerState(int n, int m, Eigen::VectorXd data) : layout_(n, m), data_(std::move(data)) {
        if (data_.size() != layout_.size()) throw std::invalid_argument("ControllerState: size mismatch");
    }

    const ControllerLayout& layout() const noexcept { return layout_; }
    Eigen::VectorXd& data() noexcept { return data_; }
    const Eigen::VectorXd& data() const noexcept { return data_; }

    ControllerView<double> view() { return {data_.data(), layout_}; }
    ControllerView<const double> view() const { return {data_.data(), layout_}; }

    auto upsilon() { return view().upsilon(); }
    auto upsilon() const { return view().upsilon(); }
    auto nu() { return view().nu(); }
    auto nu() const { return view().nu(); }
    auto u() { return view().u(); }
    auto u() const { return view().u(); }
    auto xhat() { return view().xhat(); }
    auto xhat() const { return view().xhat(); }
    auto gamma() { return view().gamma(); }
    auto gamma() const { return view().gamma(); }
    auto lambda() { return view().lambda(); }
    auto lambda() const { return view().lambda(); }
    auto theta() { return view().theta(); }
    auto theta() const { return view().theta(); }
    Eigen::VectorXd ihat(const AgentLayout& al) const { return view().ihat(al); }

private:
    ControllerLayout layout_;
    Eigen::VectorXd data_;
};

struct ControllerParams {
    double eps_fast = 0.01; // time scale of the consensus estimator
    double eps_u = 0.1;     // gain of the plant-current feedback into the input dynamics
    double kink_tol = 1e-9; // distance at which a penalized coordinate counts as on its bound

    void validate() const {
        std::vector<std::string> p;
        if (!(eps_fast > 0)) p.push_back("fast time-scale parameter must be positive");
        if (!(eps_u > 0)) p.push_back("input feedback gain must be positive");
        if (!(kink_tol >= 0)) p.push_back("kink tolerance must be nonnegative");
        if (!p.empty()) throw ConfigError(p);
    }
};

/// Velocity of a penalized coordinate: q is its velocity without the
/// penalty term and the penalty enters as -r * s with s in the
/// subdifferential. On a bound the element of the resulting velocity
/// interval closest to zero is taken, which lets the coordinate slide.
inline double penalized_velocity(double q, double value, Box box, double rho, double r, double kink_tol) {
    const Interval s = penalty_subgradient(value, box, rho, kink_tol);
    const double lo = q - r * s.hi;
    const double hi = q - r * s.lo;
    return std::clamp(0.0, lo, hi);
}

/// Slow part of the controller: input, decision copy, multiplier and local
/// multiplier dynamics, driven by an explicit aggregate estimate upsilon
/// (the state's own estimate, or its quasi-steady-state value).
template <class State, class Ups, class Out>
void controller_slow_rhs(const GameDefinition& g, const ControllerParams& cp, const State& cs, const Ups& upsilon,
                         const Eigen::Ref<const Eigen::VectorXd>& plant_I, Out& dcs) {
    const auto& al = g.layout;
    const auto& cd = g.constraints;
    const int n = al.n;

    const auto u = cs.u();
    const auto xh = cs.xhat();
    const auto lam = cs.lambda();
    const auto th = cs.theta();
    const auto gam = cs.gamma();

    auto du = dcs.u();
    auto dxh = dcs.xhat();
    auto dlam = dcs.lambda();
    auto dth = dcs.theta();
    auto dgam = dcs.gamma();

    const Eigen::VectorXd r = g.r_vector();
    const Eigen::MatrixXd r_lam = lam * r.asDiagonal();
    const Eigen::MatrixXd lap_r_lam = r_lam * g.comm_laplacian;  // column i = L_i A_r lambda
    const Eigen::MatrixXd lap_theta = th * g.comm_laplacian;

    Eigen::VectorXd q;
    for (int i = 0; i < n; ++i) {
        const auto& a = g.weights.agents[i];
        const int xo = al.x_offset[i], ni = al.size[i];
        const auto xi = xh.segment(xo, ni);
        const double ihat_i = xi[0];

        du[i] = -r[i] * a.alpha_u * (u[i] - g.plant.dgus[i].u_ref) + gam[i] - cp.eps_u * (plant_I[i] - ihat_i);

        q.resize(ni);
        smooth_state_gradient(g, i, xi, upsilon[i], q);
        q = -r[i] * q - cd.A_blocks[i].transpose() * lam.col(i) * r[i] - gam[i] * cd.D[i];
        dxh[xo] = q[0];
        for (int j = 1; j < ni; ++j)
            dxh[xo + j] = penalized_velocity(q[j], xi[j], g.box(i, j), g.rho(i, j), r[i], cp.kink_tol);

        dlam.col(i) = r[i] * (cd.A_blocks[i] * xi - cd.s_A_blocks[i]) - r[i] * (lap_r_lam.col(i) + lap_theta.col(i));
        dth.col(i) = lap_r_lam.col(i);
        dgam[i] = -u[i] + cd.D[i].dot(xi);
    }
}

/// Fast consensus estimator of the aggregate current.
template <class State, class Out>
void controller_fast_rhs(const GameDefinition& g, const ControllerParams& cp, const State& cs, Out& dcs) {
    const auto& lap = g.comm_laplacian;
    const int n = g.n();
    const Eigen::VectorXd ihat = cs.ihat(g.layout);
    const Eigen::VectorXd lap_ups = lap * cs.upsilon();
    dcs.upsilon() = (-cs.upsilon() - lap_ups - lap * cs.nu() + n * ihat) / cp.eps_fast;
    dcs.nu() = lap_ups / cp.eps_fast;
}

inline ControllerState controller_rhs(const ControllerState& cs, const Eigen::VectorXd& plant_I,
                                      const GameDefinition& g, const ControllerParams& cp) {
    if (cs.layout().n != g.n() || cs.layout().m != g.m() || plant_I.size() != g.n())
        throw std::invalid_argument("controller_rhs: dimension mismatch");
    ControllerState d(g.n(), g.m());
    controller_fast_rhs(g, cp, cs, d);
    controller_slow_rhs(g, cp, cs, cs.upsilon(), plant_I, d);
    return d;
}

struct FastEquilibrium {
    Eigen::VectorXd upsilon;
    Eigen::VectorXd nu;
};

/// Zero of the fast estimator for frozen Ihat: every upsilon_i equals the
/// sum of Ihat, and nu solves L nu = n Ihat - upsilon with 1^T nu = 0.
inline FastEquilibrium fast_equilibrium(const Eigen::VectorXd& ihat, const Eigen::MatrixXd& lap) {
    const int n = static_cast<int>(ihat.size());
    if (lap.rows() != n || lap.cols() != n) throw std::invalid_argument("fast_equilibrium: dimension mismatch");
    FastEquilibrium eq;
    eq.upsilon = Eigen::VectorXd::Constant(n, ihat.sum());
    // L + 11^T/n is nonsingular for a connected graph and maps the
    // zero-mean subspace onto itself.
    const Eigen::MatrixXd shifted = lap + Eigen::MatrixXd::Constant(n, n, 1.0 / n);
    eq.nu = shifted.ldlt().solve(n * ihat - eq.upsilon);
    return eq;
}

struct KktResidual {
    // Indexed by line of the distributed optimality system:
    // 0 estimator, 1 estimator consensus, 2 input stationarity,
    // 3 state stationarity, 4 local equality, 5 coupling, 6 multiplier consensus.
    std::array<double, 7> lines{};

    double max() const { return *std::max_element(lines.begin(), lines.end()); }
};

/// Evaluates the distributed optimality conditions at a controller state.
/// Set-valued rows (penalized coordinates on a bound) contribute their
/// distance to zero. Each line is reported as an infinity norm over agents.
inline KktResidual kkt_residual(const ControllerState& cs, const GameDefinition& g, double kink_tol = 1e-9) {
    const auto& al = g.layout;
    const auto& cd = g.constraints;
    const auto& lap = g.comm_laplacian;
    const int n = al.n;
    KktResidual res;

    const Eigen::VectorXd ihat = cs.ihat(al);
    const Eigen::VectorXd ups = cs.upsilon();
    res.lines[0] = (-ups - lap * ups - lap * cs.nu() + n * ihat).lpNorm<Eigen::Infinity>();
    res.lines[1] = (lap * ups).lpNorm<Eigen::Infinity>();

    const Eigen::VectorXd r = g.r_vector();
    const Eigen::MatrixXd r_lam = cs.lambda() * r.asDiagonal();
    const Eigen::MatrixXd lap_r_lam = r_lam * lap;
    const Eigen::MatrixXd lap_theta = cs.theta() * lap;
    res.lines[6] = lap_r_lam.lpNorm<Eigen::Infinity>();

    Eigen::VectorXd grad;
    for (int i = 0; i < n; ++i) {
        const auto& a = g.weights.agents[i];
        const int xo = al.x_offset[i], ni = al.size[i];
        const Eigen::VectorXd xi = cs.xhat().segment(xo, ni);

        res.lines[2] = std::max(res.lines[2], std::abs(r[i] * a.alpha_u * (cs.u()[i] - g.plant.dgus[i].u_ref) -
                                                       cs.gamma()[i]));

        grad.resize(ni);
        smooth_state_gradient(g, i, xi, ups[i], grad);
        grad = r[i] * grad + r[i] * cd.A_blocks[i].transpose() * cs.lambda().col(i) + cs.gamma()[i] * cd.D[i];
        double worst = std::abs(grad[0]);
        for (int j = 1; j < ni; ++j) {
            const Interval s = penalty_subgradient(xi[j], g.box(i, j), g.rho(i, j), kink_tol);
            // 0 must lie in grad_j + r_i * s.
            worst = std::max(worst, Interval{grad[j] + r[i] * s.lo, grad[j] + r[i] * s.hi}.distance(0.0));
        }
        res.lines[3] = std::max(res.lines[3], worst);

        res.lines[4] = std::max(res.lines[4], std::abs(cd.D[i].dot(xi) - cs.u()[i]));
        const Eigen::VectorXd coupling =
            r[i] * (cd.A_blocks[i] * xi - cd.s_A_blocks[i]) - r[i] * (lap_r_lam.col(i) + lap_theta.col(i));
        res.lines[5] = std::max(res.lines[5], coupling.lpNorm<Eigen::Infinity>());
    }
    return res;
}

struct ConsensusErrors {
    double upsilon_spread = 0.0;
    double weighted_lambda_spread = 0.0;
};

inline ConsensusErrors consensus_errors(const ControllerState& cs, const Eigen::VectorXd& r) {
    ConsensusErrors e;
    const auto ups = cs.upsilon();
    e.upsilon_spread = ups.maxCoeff() - ups.minCoeff();
    const Eigen::MatrixXd r_lam = cs.lambda() * r.asDiagonal();
    for (Eigen::Index k = 0; k < r_lam.rows(); ++k)
        e.weighted_lambda_spread = std::max(e.weighted_lambda_spread, r_lam.row(k).maxCoeff() - r_lam.row(k).minCoeff());
    return e;
}

} // namespace dcgrid
