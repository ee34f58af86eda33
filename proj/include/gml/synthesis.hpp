#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gml/metrics.hpp"
#include "gml/models.hpp"
#include "gml/training.hpp"

namespace gml {

enum class SynthMode { feature_binary, feature_continuous, structure };

inline const char* synth_mode_name(SynthMode m) {
    switch (m) {
        case SynthMode::feature_binary: return "feature-binary";
        case SynthMode::feature_continuous: return "feature-continuous";
        case SynthMode::structure: return "structure";
    }
    return "?";
}

inline SynthMode synth_mode_from_name(const std::string& s) {
    if (s == "feature-binary" || s == "feat-bin") return SynthMode::feature_binary;
    if (s == "feature-continuous" || s == "feat-cont") return SynthMode::feature_continuous;
    if (s == "structure" || s == "struct") return SynthMode::structure;
    throw ConfigError("unknown synthesis mode '" + s + "'");
}

struct SynthConfig {
    int target_layer = 1;
    int steps = 2000;
    double lr = 0.0005;
    double slope = 5.0;
    double lambda_reg = 0.1;
    double rho_init = -1.0; // negative: resolve to the reference's empirical density
    SynthMode mode = SynthMode::feature_binary;
    double converge_tol = 1e-3;
    bool clip_unit = false;          // continuous: project into [0,1] instead of [0,inf)
    bool margin_on_structure = false;
    std::uint64_t seed = 0;

    void validate(int model_layers) const {
        if (target_layer < 1 || target_layer > model_layers)
            throw ConfigError("synth: target layer out of range");
        if (steps < 1) throw ConfigError("synth: steps must be >= 1");
        if (!(slope > 0)) throw ConfigError("synth: slope must be positive");
        if (!(lr > 0)) throw ConfigError("synth: lr must be positive");
    }
};

struct TraceEntry {
    int step;
    double l_act;
    double l_margin;
};

/// Synthesis blow-up carrying the loss trace gathered before the failure.
class DivergenceError : public NumericError {
public:
    std::vector<TraceEntry> trace;
    DivergenceError(const std::string& msg, std::vector<TraceEntry> t)
        : NumericError(msg), trace(std::move(t)) {}
};

struct MetamerResult {
    SynthMode mode = SynthMode::feature_binary;
    int target_layer = 1;
    Matrix hard_output; // binary X'/A'; the projected real X' in continuous mode
    Matrix soft_output; // final soft parameters
    double final_loss = 0.0;
    bool converged = false;
    double activation_similarity = 0.0;
    double rho_final = 0.0; // meaningless in continuous mode
    std::vector<TraceEntry> trace;
};

/// || h' - h_ref ||^2 / || h_ref ||^2 as a tape node.
inline int activation_loss(Tape& tape, int h_prime, const Matrix& h_ref) {
    require_shape(tape.value(h_prime), h_ref, "activation_loss");
    double denom = squared_norm(h_ref);
    if (denom == 0.0)
        throw ConfigError("activation_loss: degenerate reference (zero norm)");
    Matrix neg = h_ref;
    for (double& v : neg.data) v = -v;
    return tape.scale(tape.sq_norm(tape.add(h_prime, tape.leaf(std::move(neg)))), 1.0 / denom);
}

inline double activation_loss_value(const Matrix& h_prime, const Matrix& h_ref) {
    require_shape(h_prime, h_ref, "activation_loss");
    double denom = squared_norm(h_ref);
    if (denom == 0.0)
        throw ConfigError("activation_loss: degenerate reference (zero norm)");
    double num = 0.0;
    for (int i = 0; i < h_ref.size(); ++i) {
        double d = h_prime.data[i] - h_ref.data[i];
        num += d * d;
    }
    return num / denom;
}

inline double cosine_flat(const Matrix& a, const Matrix& b) {
    double na = frobenius_norm(a), nb = frobenius_norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot_flat(a, b) / (na * nb);
}

/// Column-statistics initialization: X'_soft = mu 1^T + tau (.) eps with eps
/// standard normal, so the start lives in the reference distribution.
inline Matrix init_soft_features(const Graph& graph, std::uint64_t seed) {
    const Matrix& x = graph.features;
    if (x.size() == 0) throw ConfigError("init_soft_features: empty features");
    int n = x.rows, d = x.cols;
    std::vector<double> mu(d, 0.0), tau(d, 0.0);
    for (int j = 0; j < d; ++j) {
        for (int i = 0; i < n; ++i) mu[j] += x.at(i, j);
        mu[j] /= n;
        for (int i = 0; i < n; ++i) {
            double c = x.at(i, j) - mu[j];
            tau[j] += c * c;
        }
        tau[j] = std::sqrt(tau[j] / n);
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix soft(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) soft.at(i, j) = mu[j] + tau[j] * gauss(rng);
    return soft;
}

/// P = sigmoid(slope * soft)
inline int soft_probabilities(Tape& tape, int soft, double slope) {
    if (!(slope > 0)) throw ConfigError("soft_probabilities: slope must be positive");
    return tape.sigmoid(tape.scale(soft, slope));
}

/// Keep the floor(rho * eligible) largest entries of P as ones. Eligible
/// cells are every entry (feature mode) or the strict upper triangle
/// mirrored down (symmetric mode, zero diagonal). Ties break toward the
/// lower flattened index.
inline Matrix top_rho_mask(const Matrix& p, double rho, bool symmetric = false) {
    if (!(rho > 0.0 && rho < 1.0)) throw ConfigError("top_rho_mask: rho must be in (0,1)");
    std::vector<int> eligible;
    if (symmetric) {
        if (p.rows != p.cols) throw DimensionError("top_rho_mask: symmetric needs square");
        eligible.reserve(static_cast<size_t>(p.rows) * (p.rows - 1) / 2);
        for (int i = 0; i < p.rows; ++i)
            for (int j = i + 1; j < p.cols; ++j) eligible.push_back(i * p.cols + j);
    } else {
        eligible.resize(p.size());
        for (int i = 0; i < p.size(); ++i) eligible[i] = i;
    }
    int keep = static_cast<int>(rho * eligible.size());
    auto larger = [&p](int a, int b) {
        return p.data[a] > p.data[b] || (p.data[a] == p.data[b] && a < b);
    };
    if (keep > 0 && keep < static_cast<int>(eligible.size()))
        std::nth_element(eligible.begin(), eligible.begin() + keep, eligible.end(), larger);

    Matrix mask(p.rows, p.cols);
    for (int i = 0; i < keep; ++i) mask.data[eligible[i]] = 1.0;
    if (symmetric)
        for (int i = 0; i < p.rows; ++i)
            for (int j = i + 1; j < p.cols; ++j) mask.at(j, i) = mask.at(i, j);
    return mask;
}

/// STE: the node's value is `hard`, its gradient flows to the soft path.
inline int ste_combine(Tape& tape, int p, Matrix hard) {
    return tape.ste(p, std::move(hard));
}

/// mean of P(1-P); the caller applies lambda_reg.
inline int margin_regularizer(Tape& tape, int p) {
    const Matrix& pv = tape.value(p);
    int ones = tape.leaf(Matrix(pv.rows, pv.cols, 1.0));
    int pq = tape.hadamard(p, tape.add(ones, tape.scale(p, -1.0)));
    return tape.scale(tape.sum(pq), 1.0 / pv.size());
}

namespace detail {

inline double clamp_unit_open(double x) { return std::min(std::max(x, 1e-3), 1.0 - 1e-3); }

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct SynthLoop {
    Tape tape;
    int soft_leaf = -1;
    int rho_logit_leaf = -1;
    int p_node = -1;
    int rho_node = -1;
    int ste_node = -1;
    int h_node = -1;
    int l_act_node = -1;
    int l_margin_node = -1; // -1 when margin unused
    int total_node = -1;
    TapeForward fw;
};

} // namespace detail

/// Gradient-descent synthesis of a feature metamer against the reference
/// activations at config.target_layer, adjacency held fixed. soft_init, when
/// given, replaces the column-statistics initialization.
inline MetamerResult synthesize_feature_metamer(const Model& model, const Graph& graph,
                                                const SynthConfig& config,
                                                const Matrix* soft_init = nullptr) {
    config.validate(model.config.layers);
    if (config.mode == SynthMode::structure)
        throw ConfigError("synthesize_feature_metamer: structure mode requested");
    const int k = config.target_layer;
    Matrix h_ref = activations_at(model, graph, k);

    MetamerResult result;
    result.mode = config.mode;
    result.target_layer = k;

    detail::SynthLoop s;
    Matrix soft0 = soft_init ? *soft_init : init_soft_features(graph, config.seed);
    require_shape(soft0, graph.features, "synthesize_feature_metamer init");
    s.soft_leaf = s.tape.leaf(soft0, true);

    const bool binary = config.mode == SynthMode::feature_binary;
    double rho = 0.0;
    if (binary) {
        double density = 0.0;
        for (double v : graph.features.data) density += v != 0.0 ? 1.0 : 0.0;
        density /= graph.features.size();
        rho = detail::clamp_unit_open(config.rho_init < 0 ? density : config.rho_init);
        s.rho_logit_leaf = s.tape.leaf(Matrix(1, 1, detail::logit(rho)), true);
        s.p_node = soft_probabilities(s.tape, s.soft_leaf, config.slope);
        s.rho_node = s.tape.sigmoid(s.rho_logit_leaf);
        s.ste_node = ste_combine(
            s.tape, s.p_node, top_rho_mask(s.tape.value(s.p_node), rho, false));
    } else {
        s.ste_node = s.tape.relu(s.soft_leaf); // boundary between phases
    }

    ForwardOptions opt;
    opt.x_node = s.ste_node;
    opt.max_layer = k;
    s.fw = build_forward(s.tape, model, graph, opt);
    s.h_node = s.fw.layer_outputs[k - 1];
    s.l_act_node = activation_loss(s.tape, s.h_node, h_ref);
    s.total_node = s.l_act_node;
    if (binary) {
        if (config.lambda_reg != 0.0) {
            s.l_margin_node = margin_regularizer(s.tape, s.p_node);
            s.total_node =
                s.tape.add(s.total_node, s.tape.scale(s.l_margin_node, config.lambda_reg));
        }
        // Surrogate gradient for rho: the top-rho selection is piecewise
        // constant, so rho-logit learns through a soft count penalty.
        int mean_p = s.tape.scale(s.tape.sum(s.p_node), 1.0 / s.tape.value(s.p_node).size());
        int count_pen =
            s.tape.sq_norm(s.tape.add(mean_p, s.tape.scale(s.rho_node, -1.0)));
        s.total_node = s.tape.add(s.total_node, s.tape.scale(count_pen, 0.01));
    }

    Matrix soft = soft0;
    Matrix rho_logit(1, 1, binary ? detail::logit(rho) : 0.0);
    AdamState adam({&soft});

    try {
        for (int step = 0; /* exits below */; ++step) {
            s.tape.forward_range(0, s.ste_node);
            if (binary) {
                double rho_now = detail::sigmoid_scalar(rho_logit.at(0, 0));
                s.tape.set_ste_hard(
                    s.ste_node, top_rho_mask(s.tape.value(s.p_node), rho_now, false));
            }
            s.tape.forward_from(s.ste_node);

            double l_act = s.tape.scalar(s.l_act_node);
            double l_margin =
                s.l_margin_node >= 0 ? s.tape.scalar(s.l_margin_node) : 0.0;
            result.trace.push_back({step, l_act, l_margin});

            if (l_act < config.converge_tol) {
                result.converged = true;
                break;
            }
            if (step >= config.steps) break;

            s.tape.backward(s.total_node);
            adam_step(adam, {&soft}, {&s.tape.grad(s.soft_leaf)}, config.lr);
            // Adam's scale-free steps would let the weak count surrogate walk
            // rho arbitrarily far, so the scalar follows its raw gradient.
            if (binary)
                rho_logit.at(0, 0) -=
                    config.lr * s.tape.grad(s.rho_logit_leaf).at(0, 0);

            if (!binary) {
                for (double& v : soft.data) {
                    v = std::max(v, 0.0);
                    if (config.clip_unit) v = std::min(v, 1.0);
                }
            }
            s.tape.set_value(s.soft_leaf, soft);
            if (binary) s.tape.set_value(s.rho_logit_leaf, rho_logit);
        }
    } catch (const NumericError& e) {
        throw DivergenceError(std::string("feature synthesis diverged: ") + e.what(),
                              result.trace);
    }

    result.hard_output = s.tape.value(s.ste_node);
    result.soft_output = soft;
    result.final_loss = result.trace.back().l_act;
    result.rho_final = binary ? detail::sigmoid_scalar(rho_logit.at(0, 0)) : 0.0;
    result.activation_similarity = cosine_flat(s.tape.value(s.h_node), h_ref);
    return result;
}

/// Structure-metamer synthesis: a symmetric soft adjacency with zero
/// diagonal is sharpened through sigmoid + top-rho + STE while node features
/// stay fixed. The degree normalization differentiates through the STE
/// node, so gradients see the renormalization that extra edges cause.
inline MetamerResult synthesize_structure_metamer(const Model& model, const Graph& graph,
                                                  const SynthConfig& config,
                                                  const Matrix* soft_init = nullptr) {
    config.validate(model.config.layers);
    if (config.mode != SynthMode::structure)
        throw ConfigError("synthesize_structure_metamer: mode must be structure");
    const int k = config.target_layer;
    const int n = graph.n;
    Matrix h_ref = activations_at(model, graph, k);

    MetamerResult result;
    result.mode = config.mode;
    result.target_layer = k;

    double rho0 =
        detail::clamp_unit_open(config.rho_init < 0 ? graph.edge_density() : config.rho_init);

    // Random upper triangle, mirrored, zero diagonal. Centering the noise at
    // logit(rho)/slope keeps the initial soft probabilities distributed
    // around the reference edge density instead of around one half.
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix soft(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            soft.at(i, j) = soft.at(j, i) =
                (detail::logit(rho0) + gauss(rng)) / config.slope;
    if (soft_init) {
        if (soft_init->rows != n || soft_init->cols != n)
            throw DimensionError("synthesize_structure_metamer: init shape");
        soft = *soft_init;
        for (int i = 0; i < n; ++i) {
            soft.at(i, i) = 0.0;
            for (int j = i + 1; j < n; ++j) soft.at(j, i) = soft.at(i, j);
        }
    }

    double rho = rho0;

    detail::SynthLoop s;
    s.soft_leaf = s.tape.leaf(soft, true);
    s.rho_logit_leaf = s.tape.leaf(Matrix(1, 1, detail::logit(rho)), true);
    s.p_node = soft_probabilities(s.tape, s.soft_leaf, config.slope);
    s.rho_node = s.tape.sigmoid(s.rho_logit_leaf);
    Matrix hard = top_rho_mask(s.tape.value(s.p_node), rho, true);
    s.ste_node = ste_combine(s.tape, s.p_node, hard);

    ForwardOptions opt;
    opt.a_node = AdjacencyLeaf{s.ste_node};
    opt.max_layer = k;
    s.fw = build_forward(s.tape, model, graph, opt);
    s.h_node = s.fw.layer_outputs[k - 1];
    s.l_act_node = activation_loss(s.tape, s.h_node, h_ref);
    s.total_node = s.l_act_node;

    Matrix offdiag(n, n, 1.0);
    for (int i = 0; i < n; ++i) offdiag.at(i, i) = 0.0;
    const double eligible = static_cast<double>(n) * (n - 1);
    int offdiag_leaf = s.tape.leaf(std::move(offdiag));
    if (config.margin_on_structure && config.lambda_reg != 0.0) {
        int ones = s.tape.leaf(Matrix(n, n, 1.0));
        int pq = s.tape.hadamard(
            s.tape.hadamard(s.p_node, s.tape.add(ones, s.tape.scale(s.p_node, -1.0))),
            offdiag_leaf);
        s.l_margin_node = s.tape.scale(s.tape.sum(pq), 1.0 / eligible);
        s.total_node =
            s.tape.add(s.total_node, s.tape.scale(s.l_margin_node, config.lambda_reg));
    }
    int mean_p = s.tape.scale(s.tape.sum(s.tape.hadamard(s.p_node, offdiag_leaf)),
                              1.0 / eligible);
    int count_pen = s.tape.sq_norm(s.tape.add(mean_p, s.tape.scale(s.rho_node, -1.0)));
    s.total_node = s.tape.add(s.total_node, s.tape.scale(count_pen, 0.01));

    Matrix rho_logit(1, 1, detail::logit(rho));
    AdamState adam({&soft});

    try {
        for (int step = 0; /* exits below */; ++step) {
            s.tape.forward_range(0, s.ste_node);
            double rho_now = detail::sigmoid_scalar(rho_logit.at(0, 0));
            hard = top_rho_mask(s.tape.value(s.p_node), rho_now, true);
            s.tape.set_ste_hard(s.ste_node, hard);
            s.tape.forward_from(s.ste_node);

            double l_act = s.tape.scalar(s.l_act_node);
            double l_margin =
                s.l_margin_node >= 0 ? s.tape.scalar(s.l_margin_node) : 0.0;
            result.trace.push_back({step, l_act, l_margin});

            if (l_act < config.converge_tol) {
                result.converged = true;
                break;
            }
            if (step >= config.steps) break;

            s.tape.backward(s.total_node);
            // chain rule for the mirrored parameterization: tied entries sum
            Matrix g = s.tape.grad(s.soft_leaf);
            for (int i = 0; i < n; ++i) {
                g.at(i, i) = 0.0;
                for (int j = i + 1; j < n; ++j) {
                    double sum = g.at(i, j) + g.at(j, i);
                    g.at(i, j) = g.at(j, i) = sum;
                }
            }
            adam_step(adam, {&soft}, {&g}, config.lr);
            rho_logit.at(0, 0) -= config.lr * s.tape.grad(s.rho_logit_leaf).at(0, 0);
            for (int i = 0; i < n; ++i) soft.at(i, i) = 0.0;
            s.tape.set_value(s.soft_leaf, soft);
            s.tape.set_value(s.rho_logit_leaf, rho_logit);
        }
    } catch (const NumericError& e) {
        throw DivergenceError(std::string("structure synthesis diverged: ") + e.what(),
                              result.trace);
    }

    result.hard_output = s.tape.value(s.ste_node);
    result.soft_output = soft;
    result.final_loss = result.trace.back().l_act;
    result.rho_final = detail::sigmoid_scalar(rho_logit.at(0, 0));
    result.activation_similarity = cosine_flat(s.tape.value(s.h_node), h_ref);
    return result;
}

inline nlohmann::json metamer_result_to_json(const MetamerResult& r) {
    nlohmann::json j;
    j["mode"] = synth_mode_name(r.mode);
    j["target_layer"] = r.target_layer;
    j["final_loss"] = r.final_loss;
    j["converged"] = r.converged;
    j["activation_similarity"] = r.activation_similarity;
    if (r.mode == SynthMode::feature_continuous) j["rho_final"] = nullptr;
    else j["rho_final"] = r.rho_final;
    if (r.mode == SynthMode::structure) {
        auto edges = nlohmann::json::array();
        for (int u = 0; u < r.hard_output.rows; ++u)
            for (int v = u + 1; v < r.hard_output.cols; ++v)
                if (r.hard_output.at(u, v) != 0.0) edges.push_back({u, v});
        j["hard_output"] = {{"edges", std::move(edges)}, {"n", r.hard_output.rows}};
    } else {
        auto rows = nlohmann::json::array();
        for (int i = 0; i < r.hard_output.rows; ++i)
            rows.push_back(std::vector<double>(
                r.hard_output.row(i), r.hard_output.row(i) + r.hard_output.cols));
        j["hard_output"] = {{"dense", std::move(rows)}};
    }
    auto trace = nlohmann::json::array();
    for (const auto& t : r.trace) trace.push_back({t.step, t.l_act, t.l_margin});
    j["loss_trace"] = std::move(trace);
    return j;
}

inline void save_metamer_json(const MetamerResult& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << metamer_result_to_json(r).dump();
    if (!out) throw IoError("write failed: " + path);
}

} // namespace gml
