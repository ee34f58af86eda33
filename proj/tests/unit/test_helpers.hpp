#pragma once

#include <random>

#include "gml/graph.hpp"
#include "gml/models.hpp"

namespace gml::testing {

inline Graph random_graph(std::mt19937_64& rng, int n, int d, double edge_p,
                          int num_classes, bool binary_features = true) {
    std::uniform_real_distribution<double> unit(0, 1);
    Graph g;
    g.n = n;
    g.adjacency = Matrix(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            if (unit(rng) < edge_p) g.adjacency.at(i, j) = g.adjacency.at(j, i) = 1.0;
    g.features = Matrix(n, d);
    for (double& v : g.features.data)
        v = binary_features ? (unit(rng) < 0.4 ? 1.0 : 0.0) : unit(rng) * 2.0 - 1.0;
    g.feature_kind = binary_features ? FeatureKind::binary : FeatureKind::continuous;
    std::uniform_int_distribution<int> lab(0, num_classes - 1);
    g.labels.resize(n);
    for (int& l : g.labels) l = lab(rng);
    g.train_mask.assign(n, 0);
    g.test_mask.assign(n, 0);
    for (int i = 0; i < n; ++i) (i % 5 != 4 ? g.train_mask : g.test_mask)[i] = 1;
    return g;
}

inline Graph permute_graph(const Graph& g, const std::vector<int>& perm) {
    // node i of the output is node perm[i] of the input
    Graph out;
    out.n = g.n;
    out.feature_kind = g.feature_kind;
    out.features = Matrix(g.n, g.features.cols);
    out.adjacency = Matrix(g.n, g.n);
    out.labels.resize(g.n);
    out.train_mask.resize(g.n);
    out.test_mask.resize(g.n);
    for (int i = 0; i < g.n; ++i) {
        for (int j = 0; j < g.features.cols; ++j)
            out.features.at(i, j) = g.features.at(perm[i], j);
        for (int j = 0; j < g.n; ++j)
            out.adjacency.at(i, j) = g.adjacency.at(perm[i], perm[j]);
        out.labels[i] = g.labels[perm[i]];
        out.train_mask[i] = g.train_mask[perm[i]];
        out.test_mask[i] = g.test_mask[perm[i]];
    }
    return out;
}

inline std::vector<Arch> all_archs() {
    return {Arch::gcn, Arch::chebnet, Arch::sage, Arch::gin, Arch::gat,
            Arch::graphormer_lite};
}

// Test-side eigenvalue oracle: classic two-sided Jacobi iteration for
// symmetric matrices, independent of the library's numerics.
inline std::vector<double> jacobi_eigenvalues(Matrix a) {
    int n = a.rows;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                if (std::abs(a.at(p, q)) < 1e-300) continue;
                double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * a.at(p, q));
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (int k = 0; k < n; ++k) {
                    double akp = a.at(k, p), akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    double apk = a.at(p, k), aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
            }
    }
    std::vector<double> ev(n);
    for (int i = 0; i < n; ++i) ev[i] = a.at(i, i);
    return ev;
}

// Test-side rank oracle: Gaussian elimination with partial pivoting.
inline int row_reduction_rank(Matrix a, double tol = 1e-10) {
    double maxabs = 0.0;
    for (double v : a.data) maxabs = std::max(maxabs, std::abs(v));
    if (maxabs == 0.0) return 0;
    int rank = 0;
    int rows = a.rows, cols = a.cols;
    for (int col = 0; col < cols && rank < rows; ++col) {
        int pivot = rank;
        for (int r = rank + 1; r < rows; ++r)
            if (std::abs(a.at(r, col)) > std::abs(a.at(pivot, col))) pivot = r;
        if (std::abs(a.at(pivot, col)) <= tol * maxabs) continue;
        for (int j = 0; j < cols; ++j) std::swap(a.at(pivot, j), a.at(rank, j));
        for (int r = 0; r < rows; ++r) {
            if (r == rank) continue;
            double f = a.at(r, col) / a.at(rank, col);
            if (f == 0.0) continue;
            for (int j = 0; j < cols; ++j) a.at(r, j) -= f * a.at(rank, j);
        }
        ++rank;
    }
    return rank;
}

} // namespace gml::testing
