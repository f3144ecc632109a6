#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <numeric>

#include "dcgrid/topology.hpp"
#include "support.hpp"

using namespace dcgrid;
using dcgrid::testing::path2;
using dcgrid::testing::ring4;

TEST(Topology, SingleEdgeIncidence) {
    Eigen::MatrixXd expected(2, 1);
    expected << 1, -1;
    EXPECT_EQ(incidence_matrix(path2()), expected);
}

TEST(Topology, RingIncidenceFollowsHeadTailColumns) {
    const Eigen::MatrixXd B = incidence_matrix(ring4());
    ASSERT_EQ(B.rows(), 4);
    ASSERT_EQ(B.cols(), 4);
    Eigen::MatrixXd expected(4, 4);
    expected << 1, 0, 0, -1,
               -1, 1, 0, 0,
                0, -1, 1, 0,
                0, 0, -1, 1;
    EXPECT_EQ(B, expected);
}

TEST(Topology, IncidenceColumnsSumToZero) {
    for (const auto& topo : {path2(), ring4()})
        EXPECT_EQ(incidence_matrix(topo).colwise().sum().cwiseAbs().maxCoeff(), 0.0);
}

TEST(Topology, RingLaplacianSpectrum) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(laplacian(ring4()));
    const Eigen::Vector4d expected(0, 2, 2, 4);
    EXPECT_LT((es.eigenvalues() - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Topology, PathLaplacian) {
    Eigen::Matrix2d expected;
    expected << 1, -1, -1, 1;
    EXPECT_EQ(laplacian(path2()), Eigen::MatrixXd(expected));
}

TEST(Topology, ConnectedGraphsHavePositiveAlgebraicConnectivity) {
    const Graph star(5, {{0, 1}, {0, 2}, {0, 3}, {0, 4}});
    const Graph chain(6, {{0, 1}, {2, 1}, {2, 3}, {4, 3}, {4, 5}});
    for (const auto& g : {star, chain, ring4().graph()}) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g.laplacian());
        EXPECT_NEAR(es.eigenvalues()[0], 0.0, 1e-12);
        EXPECT_GT(es.eigenvalues()[1], 1e-6);
    }
}

TEST(Topology, LaplacianIsIncidenceGram) {
    const Graph g(5, {{0, 1}, {1, 2}, {2, 0}, {3, 2}, {4, 3}, {1, 4}});
    const Eigen::MatrixXd B = g.incidence();
    EXPECT_EQ(g.laplacian(), B * B.transpose());
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(5);
    EXPECT_EQ((g.laplacian() * ones).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ((ones.transpose() * g.laplacian()).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Topology, DisconnectedGraphRejected) {
    EXPECT_THROW(Graph(4, {{0, 1}, {2, 3}}), ConfigError);
    EXPECT_THROW(Graph(2, {{0, 0}}), ConfigError);
    EXPECT_THROW(Graph(2, {{0, 2}}), ConfigError);
}

TEST(Topology, ManagerMustBeAnEndpoint) {
    EXPECT_THROW(MicrogridTopology(Graph(3, {{0, 1}, {1, 2}}), {0, 0}), ConfigError);
    EXPECT_THROW(MicrogridTopology(Graph(3, {{0, 1}, {1, 2}}), {0}), ConfigError);
}

TEST(Topology, ManagedLinesPartitionTheEdges) {
    const auto topo = ring4();
    std::vector<int> all;
    for (int i = 0; i < topo.n(); ++i)
        for (int k : topo.managed_lines(i)) {
            all.push_back(k);
            const auto& e = topo.edges()[k];
            EXPECT_TRUE(e.head == i || e.tail == i);
        }
    EXPECT_EQ(static_cast<int>(all.size()), topo.m());
    std::sort(all.begin(), all.end());
    std::vector<int> expected(topo.m());
    std::iota(expected.begin(), expected.end(), 0);
    EXPECT_EQ(all, expected);
    EXPECT_EQ(topo.managed_lines(0), (std::vector<int>{0, 3}));
    EXPECT_TRUE(topo.managed_lines(3).empty());
}

TEST(Topology, LiftedRowBlockPath) {
    Eigen::MatrixXd expected(1, 2);
    expected << 1, -1;
    EXPECT_EQ(lifted_row_block(path2(), 0, 1), expected);
}

TEST(Topology, LiftedRowBlockRingPattern) {
    const Eigen::MatrixXd blk = lifted_row_block(ring4(), 1, 8);
    ASSERT_EQ(blk.rows(), 8);
    ASSERT_EQ(blk.cols(), 32);
    const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(8, 8);
    EXPECT_EQ(blk.middleCols(0, 8), -I);
    EXPECT_EQ(blk.middleCols(8, 8), 2 * I);
    EXPECT_EQ(blk.middleCols(16, 8), -I);
    EXPECT_EQ(blk.middleCols(24, 8), Eigen::MatrixXd::Zero(8, 8));
}

TEST(Topology, StackedBlocksEqualKroneckerProduct) {
    const auto topo = ring4();
    const Eigen::MatrixXd lap = laplacian(topo);
    for (int d : {1, 3, 8}) {
        Eigen::MatrixXd stacked(4 * d, 4 * d);
        for (int i = 0; i < 4; ++i) stacked.middleRows(i * d, d) = lifted_row_block(topo, i, d);
        // Kronecker product written out entrywise.
        Eigen::MatrixXd kron = Eigen::MatrixXd::Zero(4 * d, 4 * d);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                for (int a = 0; a < d; ++a) kron(i * d + a, j * d + a) = lap(i, j);
        EXPECT_EQ(stacked, kron);
    }
}

TEST(Topology, LiftedRowBlockRejectsBadIndex) {
    EXPECT_THROW(lifted_row_block(ring4(), 4, 2), std::out_of_range);
    EXPECT_THROW(lifted_row_block(ring4(), -1, 2), std::out_of_range);
}
