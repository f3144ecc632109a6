#pragma once

#include <Eigen/Dense>

#include <queue>
#include <string>
#include <vector>

#include "dcgrid/errors.hpp"

namespace dcgrid {

// Node and edge ids are zero-based everywhere in the library. Scenario files
// use one-based ids and convert at parse time.

struct Edge {
    int head = 0;
    int tail = 0;
};

/// Connected, undirected, unweighted graph with a fixed edge orientation.
class Graph {
public:
    Graph() = default;

    Graph(int nodes, std::vector<Edge> edges) : n_(nodes), edges_(std::move(edges)) {
        std::vector<std::string> problems;
        if (n_ < 1) problems.push_back("graph needs at least one node");
        for (std::size_t k = 0; k < edges_.size(); ++k) {
            const auto& e = edges_[k];
            if (e.head < 0 || e.head >= n_ || e.tail < 0 || e.tail >= n_)
                problems.push_back("edge " + std::to_string(k + 1) + " has an endpoint out of range");
            else if (e.head == e.tail)
                problems.push_back("edge " + std::to_string(k + 1) + " is a self loop");
        }
        if (problems.empty() && !connected())
            problems.push_back("graph is not connected");
        if (!problems.empty()) throw ConfigError(problems);
    }

    int nodes() const noexcept { return n_; }
    int edge_count() const noexcept { return static_cast<int>(edges_.size()); }
    const std::vector<Edge>& edges() const noexcept { return edges_; }

    /// Oriented node-edge incidence matrix (n x m): +1 at head, -1 at tail.
    Eigen::MatrixXd incidence() const {
        Eigen::MatrixXd b = Eigen::MatrixXd::Zero(n_, edge_count());
        for (int k = 0; k < edge_count(); ++k) {
            b(edges_[k].head, k) = 1.0;
            b(edges_[k].tail, k) = -1.0;
        }
        return b;
    }

    /// Degree minus adjacency. Parallel edges count with multiplicity, so the
    /// result always equals incidence() * incidence()^T.
    Eigen::MatrixXd laplacian() const {
        Eigen::MatrixXd lap = Eigen::MatrixXd::Zero(n_, n_);
        for (const auto& e : edges_) {
            lap(e.head, e.head) += 1.0;
            lap(e.tail, e.tail) += 1.0;
            lap(e.head, e.tail) -= 1.0;
            lap(e.tail, e.head) -= 1.0;
        }
        return lap;
    }

private:
    bool connected() const {
        std::vector<std::vector<int>> adj(n_);
        for (const auto& e : edges_) {
            adj[e.head].push_back(e.tail);
            adj[e.tail].push_back(e.head);
        }
        std::vector<bool> seen(n_, false);
        std::queue<int> frontier;
        frontier.push(0);
        seen[0] = true;
        int reached = 1;
        while (!frontier.empty()) {
            const int v = frontier.front();
            frontier.pop();
            for (int w : adj[v]) {
                if (!seen[w]) {
                    seen[w] = true;
                    ++reached;
                    frontier.push(w);
                }
            }
        }
        return reached == n_;
    }

    int n_ = 0;
    std::vector<Edge> edges_;
};

/// Electrical graph of the microgrid plus the line-management partition:
/// every line is managed by exactly one of its two endpoint DGUs.
class MicrogridTopology {
public:
    MicrogridTopology() = default;

    MicrogridTopology(Graph graph, std::vector<int> manager)
        : graph_(std::move(graph)), manager_(std::move(manager)) {
        std::vector<std::string> problems;
        if (static_cast<int>(manager_.size()) != graph_.edge_count())
            problems.push_back("need one manager per line");
        else {
            for (int k = 0; k < graph_.edge_count(); ++k) {
                const auto& e = graph_.edges()[k];
                if (manager_[k] != e.head && manager_[k] != e.tail)
                    problems.push_back("line " + std::to_string(k + 1) +
                                       " is managed by a DGU that is not one of its endpoints");
            }
        }
        if (!problems.empty()) throw ConfigError(problems);

        managed_.assign(graph_.nodes(), {});
        for (int k = 0; k < graph_.edge_count(); ++k) managed_[manager_[k]].push_back(k);
    }

    const Graph& graph() const noexcept { return graph_; }
    int n() const noexcept { return graph_.nodes(); }
    int m() const noexcept { return graph_.edge_count(); }
    const std::vector<Edge>& edges() const noexcept { return graph_.edges(); }
    int manager(int line) const { return manager_.at(line); }

    /// Lines managed by DGU i, in increasing line order.
    const std::vector<int>& managed_lines(int i) const { return managed_.at(i); }

    Eigen::MatrixXd incidence_matrix() const { return graph_.incidence(); }
    Eigen::MatrixXd laplacian() const { return graph_.laplacian(); }

private:
    Graph graph_;
    std::vector<int> manager_;
    std::vector<std::vector<int>> managed_;
};

inline Eigen::MatrixXd incidence_matrix(const MicrogridTopology& topo) { return topo.incidence_matrix(); }
inline Eigen::MatrixXd laplacian(const MicrogridTopology& topo) { return topo.laplacian(); }

/// Row i of a Laplacian, Kronecker-lifted by an identity of size blockdim.
inline Eigen::MatrixXd lifted_row_block(const Eigen::MatrixXd& lap, int i, int blockdim) {
    const int n = static_cast<int>(lap.rows());
    if (i < 0 || i >= n) throw std::out_of_range("lifted_row_block: node index out of range");
    if (blockdim < 1) throw std::invalid_argument("lifted_row_block: blockdim must be positive");
    Eigen::MatrixXd block = Eigen::MatrixXd::Zero(blockdim, n * blockdim);
    for (int j = 0; j < n; ++j)
        if (lap(i, j) != 0.0)
            block.middleCols(j * blockdim, blockdim).diagonal().setConstant(lap(i, j));
    return block;
}

inline Eigen::MatrixXd lifted_row_block(const MicrogridTopology& topo, int i, int blockdim) {
    return lifted_row_block(topo.laplacian(), i, blockdim);
}

} // namespace dcgrid
