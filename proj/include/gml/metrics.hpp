#pragma once

#include <map>
#include <optional>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "gml/matrix.hpp"

namespace gml {

/// Cosine similarity over the flattened matrices.
inline double feature_similarity(const Matrix& x, const Matrix& x_prime) {
    require_shape(x, x_prime, "feature_similarity");
    double nx = frobenius_norm(x), np = frobenius_norm(x_prime);
    if (nx == 0.0 || np == 0.0)
        throw ConfigError("feature_similarity: undefined for a zero matrix");
    return dot_flat(x, x_prime) / (nx * np);
}

/// Variant averaging per-node row cosines; rows that are zero in either
/// matrix are skipped.
inline double feature_similarity_per_node(const Matrix& x, const Matrix& x_prime) {
    require_shape(x, x_prime, "feature_similarity");
    double total = 0.0;
    int used = 0;
    for (int i = 0; i < x.rows; ++i) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            dot += x.at(i, j) * x_prime.at(i, j);
            na += x.at(i, j) * x.at(i, j);
            nb += x_prime.at(i, j) * x_prime.at(i, j);
        }
        if (na == 0.0 || nb == 0.0) continue;
        total += dot / std::sqrt(na * nb);
        ++used;
    }
    if (used == 0) throw ConfigError("feature_similarity_per_node: all rows degenerate");
    return total / used;
}

inline double match_ratio(const std::vector<int>& y, const std::vector<int>& y_prime) {
    if (y.size() != y_prime.size()) throw DimensionError("match_ratio: length mismatch");
    if (y.empty()) throw ConfigError("match_ratio: empty predictions");
    int hit = 0;
    for (size_t i = 0; i < y.size(); ++i)
        if (y[i] == y_prime[i]) ++hit;
    return static_cast<double>(hit) / y.size();
}

/// s*m + (1-s)(1-m), with the similarity clamped to [0,1] first so the
/// score behaves like a probability.
inline double consistency_score(double similarity, double match) {
    double s = std::min(std::max(similarity, 0.0), 1.0);
    return s * match + (1.0 - s) * (1.0 - match);
}

namespace detail {

inline std::vector<std::vector<int>> adjacency_lists(const Matrix& a) {
    std::vector<std::vector<int>> nbrs(a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j)
            if (a.at(i, j) != 0.0) nbrs[i].push_back(j);
    return nbrs;
}

inline double histogram_dot(const std::vector<int>& la, const std::vector<int>& lb) {
    std::unordered_map<int, long> ha, hb;
    for (int l : la) ++ha[l];
    for (int l : lb) ++hb[l];
    double dot = 0.0;
    for (const auto& [label, count] : ha) {
        auto it = hb.find(label);
        if (it != hb.end()) dot += static_cast<double>(count) * it->second;
    }
    return dot;
}

} // namespace detail

/// Unnormalized WL subtree kernel with degree initialization: the sum over
/// refinement rounds 0..iterations of the label-histogram dot products.
/// Both graphs share one label dictionary per round.
inline double wl_kernel_raw(const Matrix& a, const Matrix& a_prime, int iterations) {
    if (iterations < 1) throw ConfigError("wl_kernel: iterations must be >= 1");
    auto na = detail::adjacency_lists(a);
    auto nb = detail::adjacency_lists(a_prime);

    std::vector<int> la(na.size()), lb(nb.size());
    for (size_t i = 0; i < na.size(); ++i) la[i] = static_cast<int>(na[i].size());
    for (size_t i = 0; i < nb.size(); ++i) lb[i] = static_cast<int>(nb[i].size());

    double total = detail::histogram_dot(la, lb);
    for (int it = 0; it < iterations; ++it) {
        std::map<std::pair<int, std::vector<int>>, int> dictionary;
        auto refine = [&dictionary](const std::vector<std::vector<int>>& nbrs,
                                    std::vector<int>& labels) {
            std::vector<int> next(labels.size());
            for (size_t v = 0; v < labels.size(); ++v) {
                std::vector<int> sig;
                sig.reserve(nbrs[v].size());
                for (int u : nbrs[v]) sig.push_back(labels[u]);
                std::sort(sig.begin(), sig.end());
                auto key = std::make_pair(labels[v], std::move(sig));
                auto [pos, inserted] =
                    dictionary.emplace(std::move(key), static_cast<int>(dictionary.size()));
                next[v] = pos->second;
            }
            labels = std::move(next);
        };
        refine(na, la);
        refine(nb, lb);
        total += detail::histogram_dot(la, lb);
    }
    return total;
}

/// Normalized WL similarity in [0,1].
inline double wl_kernel(const Matrix& a, const Matrix& a_prime, int iterations = 3) {
    double cross = wl_kernel_raw(a, a_prime, iterations);
    double self_a = wl_kernel_raw(a, a, iterations);
    double self_b = wl_kernel_raw(a_prime, a_prime, iterations);
    return cross / std::sqrt(self_a * self_b);
}

/// The paper-facing scores for one metamer run; fields are present per mode.
struct InvarianceReport {
    std::optional<double> s_feat;
    std::optional<double> s_match;
    std::optional<double> cs_feat;
    std::optional<double> s_struct;
    std::optional<double> cs_struct;
    std::optional<double> activation_similarity;
    std::optional<int> jacobian_rank;
};

inline nlohmann::json invariance_report_to_json(const InvarianceReport& r) {
    nlohmann::json j;
    auto put = [&j](const char* key, const std::optional<double>& v) {
        if (v) j[key] = *v;
        else j[key] = nullptr;
    };
    put("s_feat", r.s_feat);
    put("s_match", r.s_match);
    put("cs_feat", r.cs_feat);
    put("s_struct", r.s_struct);
    put("cs_struct", r.cs_struct);
    put("activation_similarity", r.activation_similarity);
    if (r.jacobian_rank) j["jacobian_rank"] = *r.jacobian_rank;
    return j;
}

} // namespace gml
