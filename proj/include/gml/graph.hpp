#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gml/matrix.hpp"

namespace gml {

enum class FeatureKind { binary, continuous };

/// Undirected node-classified graph: features X (n x d), binary symmetric
/// adjacency with zero diagonal, integer labels, disjoint train/test masks.
struct Graph {
    int n = 0;
    Matrix features;   // n x d
    Matrix adjacency;  // n x n, entries in {0,1}
    std::vector<int> labels;
    std::vector<std::uint8_t> train_mask;
    std::vector<std::uint8_t> test_mask;
    FeatureKind feature_kind = FeatureKind::binary;

    int feature_dim() const { return features.cols; }

    int num_classes() const {
        int c = 0;
        for (int l : labels) c = std::max(c, l + 1);
        return c;
    }

    int edge_count() const {
        int m = 0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j)
                if (adjacency.at(i, j) != 0.0) ++m;
        return m;
    }

    double edge_density() const {
        return n < 2 ? 0.0 : edge_count() / (n * (n - 1) / 2.0);
    }

    void validate() const {
        if (features.rows != n || adjacency.rows != n || adjacency.cols != n ||
            static_cast<int>(labels.size()) != n ||
            static_cast<int>(train_mask.size()) != n ||
            static_cast<int>(test_mask.size()) != n)
            throw ConfigError("graph: inconsistent sizes");
        for (int i = 0; i < n; ++i) {
            if (adjacency.at(i, i) != 0.0) throw ConfigError("graph: nonzero diagonal");
            if (train_mask[i] && test_mask[i]) throw ConfigError("graph: overlapping masks");
            for (int j = 0; j < n; ++j) {
                double a = adjacency.at(i, j);
                if (a != 0.0 && a != 1.0) throw ConfigError("graph: non-binary adjacency");
                if (a != adjacency.at(j, i)) throw ConfigError("graph: asymmetric adjacency");
            }
        }
        if (feature_kind == FeatureKind::binary)
            for (double v : features.data)
                if (v != 0.0 && v != 1.0)
                    throw ConfigError("graph: binary feature kind with non-binary entry");
    }
};

/// Planted-partition generator: C equal blocks, within/between edge
/// probabilities, Bernoulli features whose rate is shifted on a per-class
/// column band. Defaults give a desk-scale graph with citation-network-like
/// sparsity (mean degree ~4) and a moderately hard classification task.
struct SbmSpec {
    int blocks = 4;
    int nodes_per_block = 75;
    double p_in = 0.04;
    double p_out = 0.004;
    int d = 64;
    double signal = 0.2;
    std::uint64_t seed = 0;

    void validate() const {
        if (blocks < 1 || nodes_per_block < 1 || d < 1)
            throw ConfigError("sbm: counts must be positive");
        if (!(0.0 <= p_out && p_out <= p_in && p_in <= 1.0))
            throw ConfigError("sbm: need 0 <= p_out <= p_in <= 1");
        if (signal < 0.0) throw ConfigError("sbm: signal must be nonnegative");
    }
};

namespace detail {

// Seeded 80/20 split over all nodes.
inline void assign_masks(Graph& g, std::uint64_t seed) {
    std::vector<int> order(g.n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    g.train_mask.assign(g.n, 0);
    g.test_mask.assign(g.n, 0);
    int train_count = static_cast<int>(g.n * 0.8);
    for (int i = 0; i < g.n; ++i)
        (i < train_count ? g.train_mask : g.test_mask)[order[i]] = 1;
}

} // namespace detail

inline Graph generate_sbm(const SbmSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    Graph g;
    g.n = spec.blocks * spec.nodes_per_block;
    g.adjacency = Matrix(g.n, g.n);
    g.labels.resize(g.n);
    for (int v = 0; v < g.n; ++v) g.labels[v] = v / spec.nodes_per_block;

    for (int i = 0; i < g.n; ++i)
        for (int j = i + 1; j < g.n; ++j) {
            double p = g.labels[i] == g.labels[j] ? spec.p_in : spec.p_out;
            if (unit(rng) < p) {
                g.adjacency.at(i, j) = 1.0;
                g.adjacency.at(j, i) = 1.0;
            }
        }

    // Bernoulli features; a class-aligned band of columns gets its rate
    // shifted by `signal` (clamped to 1).
    const double base_rate = 0.1;
    int band = std::max(1, spec.d / spec.blocks);
    g.features = Matrix(g.n, spec.d);
    g.feature_kind = FeatureKind::binary;
    for (int v = 0; v < g.n; ++v)
        for (int j = 0; j < spec.d; ++j) {
            bool aligned = (j / band) == g.labels[v];
            double rate = std::min(1.0, base_rate + (aligned ? spec.signal : 0.0));
            g.features.at(v, j) = unit(rng) < rate ? 1.0 : 0.0;
        }

    detail::assign_masks(g, spec.seed + 1);
    return g;
}

inline Graph load_graph(const std::string& edge_path, const std::string& feature_path,
                        const std::string& label_path, bool feature_header = false) {
    std::ifstream ff(feature_path);
    if (!ff) throw IoError("cannot open feature file " + feature_path);
    std::vector<std::vector<double>> rows;
    std::string line;
    bool skipped_header = !feature_header;
    while (std::getline(ff, line)) {
        if (line.empty()) continue;
        if (!skipped_header) {
            skipped_header = true;
            continue;
        }
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ','))
            try {
                row.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw ConfigError("feature file: bad value '" + cell + "'");
            }
        if (!rows.empty() && row.size() != rows.front().size())
            throw ConfigError("feature file: ragged row " + std::to_string(rows.size()));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw ConfigError("feature file: no rows");

    Graph g;
    g.n = static_cast<int>(rows.size());
    g.features = Matrix(g.n, static_cast<int>(rows.front().size()));
    for (int i = 0; i < g.n; ++i)
        for (int j = 0; j < g.features.cols; ++j) g.features.at(i, j) = rows[i][j];
    g.feature_kind = FeatureKind::continuous;
    bool binary = true;
    for (double v : g.features.data)
        if (v != 0.0 && v != 1.0) binary = false;
    if (binary) g.feature_kind = FeatureKind::binary;

    std::ifstream lf(label_path);
    if (!lf) throw IoError("cannot open label file " + label_path);
    while (std::getline(lf, line)) {
        if (line.empty()) continue;
        try {
            g.labels.push_back(std::stoi(line));
        } catch (const std::exception&) {
            throw ConfigError("label file: bad value '" + line + "'");
        }
    }
    if (static_cast<int>(g.labels.size()) != g.n)
        throw ConfigError("label file: " + std::to_string(g.labels.size()) +
                          " labels for " + std::to_string(g.n) + " nodes");

    std::ifstream ef(edge_path);
    if (!ef) throw IoError("cannot open edge file " + edge_path);
    g.adjacency = Matrix(g.n, g.n);
    while (std::getline(ef, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        long u, v;
        if (!(ss >> u >> v)) throw ConfigError("edge file: bad line '" + line + "'");
        if (u < 0 || v < 0 || u >= g.n || v >= g.n)
            throw ConfigError("edge file: node index out of range in '" + line + "'");
        if (u == v) continue; // drop self-loops
        g.adjacency.at(u, v) = 1.0;
        g.adjacency.at(v, u) = 1.0;
    }

    detail::assign_masks(g, 0);
    g.validate();
    return g;
}

inline nlohmann::json graph_to_json(const Graph& g) {
    nlohmann::json j;
    j["n"] = g.n;
    j["d"] = g.feature_dim();
    j["feature_kind"] = g.feature_kind == FeatureKind::binary ? "binary" : "continuous";
    auto edges = nlohmann::json::array();
    for (int u = 0; u < g.n; ++u)
        for (int v = u + 1; v < g.n; ++v)
            if (g.adjacency.at(u, v) != 0.0) edges.push_back({u, v});
    j["edges"] = std::move(edges);
    auto feats = nlohmann::json::array();
    for (int i = 0; i < g.n; ++i)
        feats.push_back(std::vector<double>(g.features.row(i), g.features.row(i) + g.features.cols));
    j["features"] = std::move(feats);
    j["labels"] = g.labels;
    j["train_mask"] = g.train_mask;
    j["test_mask"] = g.test_mask;
    return j;
}

inline Graph graph_from_json(const nlohmann::json& j) {
    Graph g;
    g.n = j.at("n").get<int>();
    int d = j.at("d").get<int>();
    g.feature_kind = j.at("feature_kind").get<std::string>() == "binary"
                         ? FeatureKind::binary
                         : FeatureKind::continuous;
    g.features = Matrix(g.n, d);
    const auto& feats = j.at("features");
    if (static_cast<int>(feats.size()) != g.n) throw ConfigError("graph json: feature rows");
    for (int i = 0; i < g.n; ++i) {
        const auto& row = feats[i];
        if (static_cast<int>(row.size()) != d) throw ConfigError("graph json: ragged features");
        for (int jj = 0; jj < d; ++jj) g.features.at(i, jj) = row[jj].get<double>();
    }
    g.adjacency = Matrix(g.n, g.n);
    for (const auto& e : j.at("edges")) {
        int u = e.at(0).get<int>(), v = e.at(1).get<int>();
        if (u < 0 || v < 0 || u >= g.n || v >= g.n || u == v)
            throw ConfigError("graph json: bad edge");
        g.adjacency.at(u, v) = 1.0;
        g.adjacency.at(v, u) = 1.0;
    }
    g.labels = j.at("labels").get<std::vector<int>>();
    g.train_mask = j.at("train_mask").get<std::vector<std::uint8_t>>();
    g.test_mask = j.at("test_mask").get<std::vector<std::uint8_t>>();
    g.validate();
    return g;
}

inline void save_graph(const Graph& g, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << graph_to_json(g).dump();
    if (!out) throw IoError("write failed: " + path);
}

inline Graph load_graph_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("graph json parse: ") + e.what());
    }
    return graph_from_json(j);
}

/// D^{-1/2} (A+I) D^{-1/2} with D the degree matrix of A+I.
inline Matrix normalize_adjacency(const Matrix& a) {
    int n = a.rows;
    std::vector<double> inv_sqrt(n);
    for (int i = 0; i < n; ++i) {
        double deg = 1.0; // self-loop
        for (int j = 0; j < n; ++j) deg += a.at(i, j);
        inv_sqrt[i] = 1.0 / std::sqrt(deg);
    }
    Matrix out(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double v = a.at(i, j) + (i == j ? 1.0 : 0.0);
            if (v != 0.0) out.at(i, j) = inv_sqrt[i] * v * inv_sqrt[j];
        }
    return out;
}

/// 2L/lambda_max - I with L = I - D^{-1/2} A D^{-1/2} and lambda_max
/// approximated as 2. Isolated nodes take degree 1.
inline Matrix scaled_laplacian(const Matrix& a) {
    int n = a.rows;
    std::vector<double> inv_sqrt(n);
    for (int i = 0; i < n; ++i) {
        double deg = 0.0;
        for (int j = 0; j < n; ++j) deg += a.at(i, j);
        inv_sqrt[i] = 1.0 / std::sqrt(std::max(deg, 1.0));
    }
    const double lambda_max = 2.0;
    Matrix out(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double norm = inv_sqrt[i] * a.at(i, j) * inv_sqrt[j];
            double lap = (i == j ? 1.0 : 0.0) - norm;
            out.at(i, j) = 2.0 * lap / lambda_max - (i == j ? 1.0 : 0.0);
        }
    return out;
}

/// BFS hop distances, clamped to cap (also used for unreachable pairs).
inline Matrix shortest_path_distances(const Matrix& a, int cap) {
    if (cap < 1) throw ConfigError("shortest_path_distances: cap must be >= 1");
    int n = a.rows;
    Matrix dist(n, n, static_cast<double>(cap));
    std::vector<int> frontier;
    for (int s = 0; s < n; ++s) {
        std::vector<int> hops(n, -1);
        std::deque<int> q{s};
        hops[s] = 0;
        while (!q.empty()) {
            int u = q.front();
            q.pop_front();
            if (hops[u] >= cap) continue;
            for (int v = 0; v < n; ++v)
                if (a.at(u, v) != 0.0 && hops[v] < 0) {
                    hops[v] = hops[u] + 1;
                    q.push_back(v);
                }
        }
        for (int v = 0; v < n; ++v)
            dist.at(s, v) = hops[v] < 0 ? cap : std::min(hops[v], cap);
    }
    return dist;
}

} // namespace gml
