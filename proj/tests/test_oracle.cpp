#include <gtest/gtest.h>

#include <random>

#include "support.hpp"

using namespace dcgrid;
using namespace dcgrid::testing;

TEST(Oracle, SingleAgentMatchesClosedForm) {
    const auto g = single_agent();
    const auto& d = g.plant.dgus[0];
    const auto& a = g.weights.agents[0];
    const double pr = g.price.p_r, l = g.price.l;
    // Eliminate I = I_L + V/Z and u = R I + V; the cost is then a quadratic
    // in V whose derivative vanishes at the equilibrium.
    const double dI = 1.0 / d.Z_load, du = d.R * dI + 1.0;
    const double I0 = d.I_load, u0 = d.R * I0;
    // f'(V) = alpha_u (u - u_ref) du + (alpha_I (I - I_ref) - V_ref l + 2 p_r V_ref I) dI + alpha_V (V - V_ref)
    const double slope = a.alpha_u * du * du + (a.alpha_I + 2 * pr * d.V_ref) * dI * dI + a.alpha_V;
    const double offset = a.alpha_u * (u0 - d.u_ref) * du +
                          (a.alpha_I * (I0 - d.I_ref) - d.V_ref * l + 2 * pr * d.V_ref * I0) * dI -
                          a.alpha_V * d.V_ref;
    const double V = -offset / slope, I = I0 + V * dI, u = d.R * I + V;

    const auto sol = solve_vi(g);
    ASSERT_TRUE(sol.converged);
    EXPECT_NEAR(sol.u_star[0], u, 1e-8 * std::max(1.0, std::abs(u)));
    EXPECT_NEAR(sol.x_star[0], I, 1e-8 * std::max(1.0, std::abs(I)));
    EXPECT_NEAR(sol.x_star[1], V, 1e-8 * std::max(1.0, std::abs(V)));
}

TEST(Oracle, InteriorSolutionEqualsLinearKktSolve) {
    const auto g = wide_box_ring_game();
    const Eigen::VectorXd z_ref = interior_equilibrium(g);
    const auto sol = solve_vi(g);
    ASSERT_TRUE(sol.converged);
    EXPECT_LT(relative_error(sol.z, z_ref), 1e-8);
    EXPECT_LT(sol.multiplier_residual, 1e-8);
}

TEST(Oracle, RingEquilibriumInsideTheBoxes) {
    const auto g = ring_scenario().game();
    const auto sol = solve_vi(g);
    ASSERT_TRUE(sol.converged);
    for (int i = 0; i < 4; ++i) {
        EXPECT_GE(sol.x_star[4 + i], 377 - 1e-8);
        EXPECT_LE(sol.x_star[4 + i], 383 + 1e-8);
        EXPECT_GE(sol.x_star[8 + i], -20 - 1e-8);
        EXPECT_LE(sol.x_star[8 + i], 20 + 1e-8);
    }
    // The first voltage sits on its lower bound.
    EXPECT_NEAR(sol.x_star[4], 377.0, 1e-7);
    const auto& c = g.constraints;
    EXPECT_LT((c.A_full * sol.x_star - c.s_A_full).lpNorm<Eigen::Infinity>(), 1e-8);
}

TEST(Oracle, VariationalInequalityHoldsAgainstFeasiblePoints) {
    const auto g = ring_scenario().game();
    const auto sol = solve_vi(g);
    const FeasibleSet set(g);
    const Eigen::VectorXd F = pseudo_gradient(g, sol.z);
    std::mt19937_64 rng(9);
    std::normal_distribution<double> nd(0, 5);
    for (int trial = 0; trial < 50; ++trial) {
        Eigen::VectorXd w = sol.z;
        for (auto& v : w) v += nd(rng);
        const Eigen::VectorXd y = set.project(w).point;
        EXPECT_GE(F.dot(y - sol.z), -1e-6 * std::max(1.0, (y - sol.z).norm()));
    }
}

TEST(Oracle, MultipliersSatisfyStationarity) {
    const auto g = ring_scenario().game();
    const auto sol = solve_vi(g);
    EXPECT_LT(sol.multiplier_residual, 1e-8);
    // Input row: r_i alpha_u (u - u_ref) = gamma_i.
    for (int i = 0; i < 4; ++i)
        EXPECT_NEAR(sol.gamma_star[i], g.r(i) * g.weights.agents[i].alpha_u * (sol.u_star[i] - g.plant.dgus[i].u_ref),
                    1e-8 * std::abs(sol.gamma_star[i]));
}

TEST(Oracle, RecoveryOnInteriorSolutionIsExact) {
    const auto g = wide_box_ring_game();
    const auto sol = solve_vi(g);
    const auto rec = recover_multipliers(g, sol.z);
    EXPECT_TRUE(rec.active.empty());
    EXPECT_FALSE(rec.rank_deficient);
    EXPECT_LT(rec.residual, 1e-8);
}

TEST(Oracle, DegenerateGameHasZeroCouplingMultiplier) {
    // References that are themselves feasible and a vanishing price: the
    // references solve every agent's unconstrained problem.
    auto s = ring_scenario();
    s.price = {1e-9, 1e-12};
    const Eigen::Vector4d u(380.5, 380.2, 380.4, 380.1);
    const auto eq = plant_equilibrium(u, s.plant, s.topo);
    for (int i = 0; i < 4; ++i) {
        s.plant.dgus[i].I_ref = eq.I[i];
        s.plant.dgus[i].V_ref = eq.V[i];
        s.plant.dgus[i].u_ref = u[i];
        s.plant.dgus[i].V_min = eq.V[i] - 3, s.plant.dgus[i].V_max = eq.V[i] + 3;
    }
    for (int k = 0; k < 4; ++k) s.plant.lines[k].I_ref = eq.Il[k];
    const auto g = s.game();
    const auto sol = solve_vi(g);
    EXPECT_LT(sol.lambda_star.cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT(sol.gamma_star.cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Oracle, UniformWeightScalingKeepsTheEquilibrium) {
    auto s = ring_scenario();
    const auto base = solve_vi(s.game());
    for (auto& a : s.weights.agents) a.r *= 2.5;
    const auto scaled = solve_vi(s.game());
    EXPECT_LT(relative_error(scaled.u_star, base.u_star), 1e-7);
    EXPECT_LT(relative_error(scaled.x_star, base.x_star), 1e-7);
    // The shared multiplier carries the factor; per-agent lambda_i = lambda_bar / r_i does not.
    EXPECT_LT(relative_error(scaled.lambda_star, 2.5 * base.lambda_star), 1e-6);
    EXPECT_LT(relative_error(scaled.gamma_star, 2.5 * base.gamma_star), 1e-6);
}

TEST(Oracle, ProjectionOfFeasiblePointIsIdentity) {
    const auto g = ring_scenario().game();
    const auto sol = solve_vi(g);
    const FeasibleSet set(g);
    const auto p = set.project(sol.z);
    EXPECT_LT((p.point - sol.z).cwiseAbs().maxCoeff(), 1e-10);
    const auto again = set.project(set.project(sol.z + Eigen::VectorXd::Constant(sol.z.size(), 3.0)).point);
    EXPECT_TRUE(again.converged);
}

TEST(Oracle, ExtragradientResidualDoesNotIncrease) {
    const auto g = ring_scenario().game();
    std::vector<double> hist;
    solve_vi(g, {}, &hist);
    ASSERT_GT(hist.size(), 20u);
    for (std::size_t k = 11; k < hist.size(); ++k)
        EXPECT_LE(hist[k], hist[k - 1] * (1 + 1e-9) + 1e-12) << "iteration " << k;
}

TEST(Oracle, IterationCapReturnsFlag) {
    const auto g = ring_scenario().game();
    VIOptions opt;
    opt.max_iter = 3;
    const auto sol = solve_vi(g, opt);
    EXPECT_FALSE(sol.converged);
    EXPECT_EQ(sol.iterations, 3);
    EXPECT_TRUE(sol.z.allFinite());
}

TEST(Oracle, EmptyFeasibleSetIsReported) {
    auto s = ring_scenario();
    // Line 1 forced to carry more than 50 A while its box stops at 20 A.
    for (auto& l : s.plant.lines) l.I_min = 50, l.I_max = 60;
    EXPECT_THROW(solve_vi(s.game()), ConfigError);
}

TEST(PenalizedEquilibrium, CoincidesWithOracleWhenPenaltyIsLarge) {
    auto s = ring_scenario();
    s.penalty.rho_V.setConstant(5000);
    const auto g = s.game();
    const auto box = solve_vi(g);
    const auto pen = solve_penalized_equilibrium(g, &box.z);
    ASSERT_TRUE(pen.solution.converged);
    EXPECT_LT(relative_error(pen.solution.z, box.z), 1e-6);
    EXPECT_LT(relative_error(pen.solution.lambda_star, box.lambda_star), 1e-5);
}

// The default voltage penalty is smaller than the multiplier of the active
// bound, so the penalized game settles slightly outside the box. Reference
// values from an independent enumeration of active sets.
TEST(PenalizedEquilibrium, DefaultPenaltyLeavesFirstVoltageBelowItsBound) {
    const auto g = ring_scenario().game();
    const auto box = solve_vi(g);
    const auto pen = solve_penalized_equilibrium(g, &box.z);
    ASSERT_TRUE(pen.solution.converged);
    const Eigen::Vector4d V = pen.solution.x_star.segment(4, 4);
    EXPECT_NEAR(V[0], 376.935, 1e-3);
    EXPECT_NEAR(V[1], 377.524, 1e-3);
    EXPECT_NEAR(V[2], 377.025, 1e-3);
    EXPECT_NEAR(V[3], 377.0, 1e-9);
    const Eigen::Vector4d Il = pen.solution.x_star.tail(4);
    EXPECT_NEAR(Il[0], 8.41, 1e-2);
    EXPECT_NEAR(Il[1], -9.97, 1e-2);
    EXPECT_GT(relative_error(pen.solution.lambda_star, box.lambda_star), 1e-2);
    EXPECT_LT(relative_error(pen.solution.gamma_star, box.gamma_star), 1e-3);
}

TEST(PenalizedEquilibrium, InteriorCaseIsTheLinearSolve) {
    const auto g = wide_box_ring_game();
    const auto pen = solve_penalized_equilibrium(g);
    ASSERT_TRUE(pen.solution.converged);
    EXPECT_LT(relative_error(pen.solution.z, interior_equilibrium(g)), 1e-9);
}
