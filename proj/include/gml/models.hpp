#pragma once

#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "gml/graph.hpp"
#include "gml/tape.hpp"

namespace gml {

enum class Arch { gcn, chebnet, sage, gin, gat, graphormer_lite };
enum class Activation { relu, elu };

inline const char* arch_name(Arch a) {
    switch (a) {
        case Arch::gcn: return "gcn";
        case Arch::chebnet: return "chebnet";
        case Arch::sage: return "sage";
        case Arch::gin: return "gin";
        case Arch::gat: return "gat";
        case Arch::graphormer_lite: return "graphormer-lite";
    }
    return "?";
}

inline Arch arch_from_name(const std::string& s) {
    if (s == "gcn") return Arch::gcn;
    if (s == "chebnet") return Arch::chebnet;
    if (s == "sage") return Arch::sage;
    if (s == "gin") return Arch::gin;
    if (s == "gat") return Arch::gat;
    if (s == "graphormer-lite" || s == "graphormer") return Arch::graphormer_lite;
    throw ConfigError("unknown architecture '" + s + "'");
}

struct ModelConfig {
    Arch arch = Arch::gcn;
    int layers = 2;
    int hidden_dim = 16;
    Activation activation = Activation::relu;
    bool residual = false;
    int cheb_order = 3;  // chebnet only
    int heads = 1;       // gat / graphormer-lite only
    int spd_cap = 4;     // graphormer-lite only
    int num_classes = 0;
    int in_dim = 0;
    std::uint64_t seed = 0;

    void validate() const {
        if (layers < 1 || hidden_dim < 1 || cheb_order < 1 || heads < 1)
            throw ConfigError("model config: counts must be positive");
        if (num_classes < 1 || in_dim < 1)
            throw ConfigError("model config: num_classes and in_dim required");
        if (spd_cap < 1) throw ConfigError("model config: spd_cap must be >= 1");
    }
};

/// Architecture weights, keyed by creation order. Immutable during
/// inference; training mutates in place.
struct Model {
    ModelConfig config;
    std::vector<std::pair<std::string, Matrix>> weights;
    std::unordered_map<std::string, int> index;

    int add_weight(const std::string& name, Matrix m) {
        index.emplace(name, static_cast<int>(weights.size()));
        weights.emplace_back(name, std::move(m));
        return static_cast<int>(weights.size()) - 1;
    }
    const Matrix& weight(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw ConfigError("unknown weight " + name);
        return weights[it->second].second;
    }
    Matrix& weight_mut(const std::string& name) {
        return const_cast<Matrix&>(weight(name));
    }
};

namespace detail {

inline Matrix glorot(std::mt19937_64& rng, int rows, int cols) {
    double a = std::sqrt(6.0 / (rows + cols));
    std::uniform_real_distribution<double> u(-a, a);
    Matrix m(rows, cols);
    for (double& v : m.data) v = u(rng);
    return m;
}

inline int layer_out_dim(const ModelConfig& c, int k) {
    return k == c.layers ? c.num_classes : c.hidden_dim;
}

inline int layer_in_dim(const ModelConfig& c, int k) {
    return k == 1 ? c.in_dim : c.hidden_dim;
}

// Head width for layer k: hidden layers split the output across heads,
// the final layer runs full-width heads and averages them.
inline int head_dim(const ModelConfig& c, int k) {
    int out = layer_out_dim(c, k);
    if (k == c.layers) return out;
    if (out % c.heads != 0)
        throw ConfigError("heads must divide hidden_dim");
    return out / c.heads;
}

} // namespace detail

inline Model build_model(const ModelConfig& config) {
    config.validate();
    Model m;
    m.config = config;
    std::mt19937_64 rng(config.seed);
    auto& c = m.config;
    for (int k = 1; k <= c.layers; ++k) {
        int din = detail::layer_in_dim(c, k);
        int dout = detail::layer_out_dim(c, k);
        std::string prefix = "l" + std::to_string(k) + ".";
        switch (c.arch) {
            case Arch::gcn:
                m.add_weight(prefix + "w", detail::glorot(rng, din, dout));
                break;
            case Arch::chebnet:
                for (int q = 0; q < c.cheb_order; ++q)
                    m.add_weight(prefix + "cheb" + std::to_string(q),
                                 detail::glorot(rng, din, dout));
                break;
            case Arch::sage:
                m.add_weight(prefix + "w", detail::glorot(rng, 2 * din, dout));
                break;
            case Arch::gin:
                m.add_weight(prefix + "mlp1", detail::glorot(rng, din, dout));
                m.add_weight(prefix + "mlp2", detail::glorot(rng, dout, dout));
                break;
            case Arch::gat:
                for (int h = 0; h < c.heads; ++h) {
                    std::string hp = prefix + "h" + std::to_string(h) + ".";
                    int dh = detail::head_dim(c, k);
                    m.add_weight(hp + "w", detail::glorot(rng, din, dh));
                    m.add_weight(hp + "a1", detail::glorot(rng, dh, 1));
                    m.add_weight(hp + "a2", detail::glorot(rng, dh, 1));
                }
                break;
            case Arch::graphormer_lite:
                for (int h = 0; h < c.heads; ++h) {
                    std::string hp = prefix + "h" + std::to_string(h) + ".";
                    int dh = detail::head_dim(c, k);
                    m.add_weight(hp + "wq", detail::glorot(rng, din, dh));
                    m.add_weight(hp + "wk", detail::glorot(rng, din, dh));
                    m.add_weight(hp + "wv", detail::glorot(rng, din, dh));
                    m.add_weight(hp + "spd_bias", Matrix(1, c.spd_cap + 1));
                }
                break;
        }
        if (c.residual && din != dout)
            m.add_weight(prefix + "res", detail::glorot(rng, din, dout));
    }
    return m;
}

/// Differentiable adjacency input for structure synthesis.
struct AdjacencyLeaf {
    int node = -1;
};

struct ForwardOptions {
    const Matrix* x_override = nullptr;   // constant feature override
    const Matrix* a_override = nullptr;   // constant adjacency override
    int x_node = -1;                      // differentiable feature node
    std::optional<AdjacencyLeaf> a_node;  // differentiable adjacency node
    bool weights_as_leaves = false;       // training wants weight gradients
    int max_layer = 0;                    // 0 = all layers
};

struct TapeForward {
    std::vector<int> layer_outputs; // activations h^(1..K); last entry = logits
    int logits = -1;
    std::vector<int> weight_leaves; // aligned with model.weights (when leaves)
    std::vector<int> attention_nodes; // row-stochastic attention, gat/graphormer
};

namespace detail {

inline std::vector<double> degrees(const Matrix& a) {
    std::vector<double> deg(a.rows, 0.0);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) deg[i] += a.at(i, j);
    return deg;
}

inline int leaky_relu(Tape& t, int x, double slope) {
    return t.add(t.relu(x), t.scale(t.relu(t.scale(x, -1.0)), -slope));
}

inline int activation_node(Tape& t, int x, Activation act) {
    return act == Activation::relu ? t.relu(x) : t.elu(x, 1.0);
}

} // namespace detail

/// Build the full message-passing computation on a tape. Feature and
/// adjacency inputs may be constants or differentiable nodes; weights may be
/// registered as gradient-carrying leaves for training.
inline TapeForward build_forward(Tape& tape, const Model& model, const Graph& graph,
                                 const ForwardOptions& opt = {}) {
    const ModelConfig& c = model.config;
    int K = c.layers;
    int upto = opt.max_layer > 0 ? std::min(opt.max_layer, K) : K;

    if (opt.x_override && opt.x_node >= 0)
        throw ConfigError("forward: both constant and tape feature override");
    if (opt.a_override && opt.a_node)
        throw ConfigError("forward: both constant and tape adjacency override");

    const Matrix& x_in = opt.x_override ? *opt.x_override : graph.features;
    if (opt.x_node < 0 && (x_in.rows != graph.n || x_in.cols != c.in_dim))
        throw DimensionError("forward: feature override shape");
    if (opt.x_node >= 0) {
        const Matrix& xv = tape.value(opt.x_node);
        if (xv.rows != graph.n || xv.cols != c.in_dim)
            throw DimensionError("forward: feature node shape");
    }
    const Matrix& a_in = opt.a_override ? *opt.a_override : graph.adjacency;
    if (a_in.rows != graph.n || a_in.cols != graph.n)
        throw DimensionError("forward: adjacency override shape");

    TapeForward fw;

    // Aggregation operand: either a constant matrix precomputed from the
    // adjacency, or a tape expression over the differentiable adjacency node
    // with the degree normalization differentiated through as well.
    int agg = -1; // gcn: Ahat, chebnet: Ltilde, sage: row-normalized A, gin: A+I
    if (opt.a_node) {
        int a = opt.a_node->node;
        int ones_col = tape.leaf(Matrix(graph.n, 1, 1.0));
        int deg = tape.matmul(a, ones_col); // n x 1
        auto max_with_one = [&](int x) {
            // relu(x - 1) + 1
            int shifted = tape.add(x, tape.leaf(Matrix(graph.n, 1, -1.0)));
            return tape.add(tape.relu(shifted), tape.leaf(Matrix(graph.n, 1, 1.0)));
        };
        switch (c.arch) {
            case Arch::gcn: {
                int s = tape.rsqrt(tape.add(deg, tape.leaf(Matrix(graph.n, 1, 1.0))));
                int outer = tape.matmul(s, tape.transpose(s));
                int a_plus_i = tape.add(a, tape.leaf(Matrix::identity(graph.n)));
                agg = tape.hadamard(a_plus_i, outer);
                break;
            }
            case Arch::chebnet: {
                int s = tape.rsqrt(max_with_one(deg));
                int outer = tape.matmul(s, tape.transpose(s));
                agg = tape.scale(tape.hadamard(a, outer), -1.0);
                break;
            }
            case Arch::sage: {
                int s = tape.rsqrt(max_with_one(deg));
                int inv = tape.hadamard(s, s); // 1 / max(deg, 1)
                int rowscale = tape.matmul(inv, tape.leaf(Matrix(1, graph.n, 1.0)));
                agg = tape.hadamard(a, rowscale);
                break;
            }
            case Arch::gin:
                agg = tape.add(a, tape.leaf(Matrix::identity(graph.n)));
                break;
            case Arch::gat:
            case Arch::graphormer_lite:
                throw ConfigError(std::string(arch_name(c.arch)) +
                                  ": differentiable adjacency unsupported");
        }
    } else {
        switch (c.arch) {
            case Arch::gcn:
                agg = tape.leaf(normalize_adjacency(a_in));
                break;
            case Arch::chebnet:
                agg = tape.leaf(scaled_laplacian(a_in));
                break;
            case Arch::sage:
                agg = tape.leaf(matmul(
                    [&] {
                        auto deg = detail::degrees(a_in);
                        Matrix dinv(graph.n, graph.n);
                        for (int i = 0; i < graph.n; ++i)
                            dinv.at(i, i) = 1.0 / std::max(deg[i], 1.0);
                        return dinv;
                    }(),
                    a_in));
                break;
            case Arch::gin: {
                Matrix api = a_in;
                for (int i = 0; i < graph.n; ++i) api.at(i, i) += 1.0;
                agg = tape.leaf(std::move(api));
                break;
            }
            case Arch::gat:
            case Arch::graphormer_lite:
                break; // attention archs use the raw adjacency / SPD below
        }
    }

    // GAT additive mask over neighbors-plus-self; graphormer SPD buckets.
    std::shared_ptr<Matrix> gat_mask;
    std::vector<std::shared_ptr<Matrix>> spd_buckets;
    if (c.arch == Arch::gat) {
        gat_mask = std::make_shared<Matrix>(graph.n, graph.n);
        for (int i = 0; i < graph.n; ++i)
            for (int j = 0; j < graph.n; ++j)
                if (i != j && a_in.at(i, j) == 0.0) gat_mask->at(i, j) = -1e30;
    } else if (c.arch == Arch::graphormer_lite) {
        Matrix spd = shortest_path_distances(a_in, c.spd_cap);
        for (int t = 0; t <= c.spd_cap; ++t) {
            auto bucket = std::make_shared<Matrix>(graph.n, graph.n);
            for (int i = 0; i < spd.size(); ++i)
                if (spd.data[i] == t) bucket->data[i] = 1.0;
            spd_buckets.push_back(std::move(bucket));
        }
    }

    auto weight_node = [&](const std::string& name) {
        int idx = model.index.at(name);
        if (opt.weights_as_leaves) {
            if (fw.weight_leaves.empty())
                fw.weight_leaves.assign(model.weights.size(), -1);
            if (fw.weight_leaves[idx] < 0)
                fw.weight_leaves[idx] = tape.leaf(model.weights[idx].second, true);
            return fw.weight_leaves[idx];
        }
        return tape.leaf(model.weights[idx].second);
    };

    int ones_1n = -1, ones_n1 = -1;
    if (c.arch == Arch::gat || c.arch == Arch::graphormer_lite) {
        ones_1n = tape.leaf(Matrix(1, graph.n, 1.0));
        ones_n1 = tape.leaf(Matrix(graph.n, 1, 1.0));
    }

    int h = opt.x_node >= 0 ? opt.x_node : tape.leaf(x_in, false);
    for (int k = 1; k <= upto; ++k) {
        std::string prefix = "l" + std::to_string(k) + ".";
        bool final_layer = k == K;
        int z = -1;
        switch (c.arch) {
            case Arch::gcn:
                z = tape.matmul(agg, tape.matmul(h, weight_node(prefix + "w")));
                break;
            case Arch::chebnet: {
                // T_q(L~) h via the three-term recurrence applied to h directly
                int s_prev2 = h;
                int s_prev1 = -1;
                for (int q = 0; q < c.cheb_order; ++q) {
                    int s_q;
                    if (q == 0) s_q = h;
                    else if (q == 1) s_q = s_prev1 = tape.matmul(agg, h);
                    else {
                        s_q = tape.add(tape.scale(tape.matmul(agg, s_prev1), 2.0),
                                       tape.scale(s_prev2, -1.0));
                        s_prev2 = s_prev1;
                        s_prev1 = s_q;
                    }
                    int term = tape.matmul(s_q, weight_node(prefix + "cheb" + std::to_string(q)));
                    z = q == 0 ? term : tape.add(z, term);
                }
                break;
            }
            case Arch::sage: {
                int mean_agg = tape.matmul(agg, h);
                z = tape.matmul(tape.concat_cols(h, mean_agg), weight_node(prefix + "w"));
                break;
            }
            case Arch::gin: {
                int summed = tape.matmul(agg, h);
                int inner = detail::activation_node(
                    tape, tape.matmul(summed, weight_node(prefix + "mlp1")), c.activation);
                z = tape.matmul(inner, weight_node(prefix + "mlp2"));
                break;
            }
            case Arch::gat: {
                int acc = -1;
                for (int head = 0; head < c.heads; ++head) {
                    std::string hp = prefix + "h" + std::to_string(head) + ".";
                    int zh = tape.matmul(h, weight_node(hp + "w"));
                    int u = tape.matmul(zh, weight_node(hp + "a1"));
                    int v = tape.matmul(zh, weight_node(hp + "a2"));
                    int logits_e = tape.add(tape.matmul(u, ones_1n),
                                            tape.transpose(tape.matmul(v, ones_1n)));
                    int e = detail::leaky_relu(tape, logits_e, 0.2);
                    int alpha = tape.softmax_row(e, gat_mask);
                    fw.attention_nodes.push_back(alpha);
                    int out_h = tape.matmul(alpha, zh);
                    if (final_layer)
                        acc = head == 0 ? out_h : tape.add(acc, out_h);
                    else
                        acc = head == 0 ? out_h : tape.concat_cols(acc, out_h);
                }
                z = (final_layer && c.heads > 1) ? tape.scale(acc, 1.0 / c.heads) : acc;
                break;
            }
            case Arch::graphormer_lite: {
                int acc = -1;
                for (int head = 0; head < c.heads; ++head) {
                    std::string hp = prefix + "h" + std::to_string(head) + ".";
                    int q = tape.matmul(h, weight_node(hp + "wq"));
                    int kk = tape.matmul(h, weight_node(hp + "wk"));
                    int v = tape.matmul(h, weight_node(hp + "wv"));
                    int dh = detail::head_dim(c, k);
                    int e = tape.scale(tape.matmul(q, tape.transpose(kk)),
                                       1.0 / std::sqrt(static_cast<double>(dh)));
                    // learned scalar bias per clamped SPD bucket
                    int bias_vec = weight_node(hp + "spd_bias");
                    for (int t = 0; t <= c.spd_cap; ++t) {
                        int picked = tape.matmul(bias_vec, tape.leaf([&] {
                            Matrix sel(c.spd_cap + 1, 1);
                            sel.at(t, 0) = 1.0;
                            return sel;
                        }()));
                        int full = tape.matmul(tape.matmul(ones_n1, picked), ones_1n);
                        e = tape.add(e, tape.hadamard(full, tape.leaf(*spd_buckets[t])));
                    }
                    int alpha = tape.softmax_row(e);
                    fw.attention_nodes.push_back(alpha);
                    int out_h = tape.matmul(alpha, v);
                    if (final_layer)
                        acc = head == 0 ? out_h : tape.add(acc, out_h);
                    else
                        acc = head == 0 ? out_h : tape.concat_cols(acc, out_h);
                }
                z = (final_layer && c.heads > 1) ? tape.scale(acc, 1.0 / c.heads) : acc;
                break;
            }
        }

        if (c.residual) {
            int din = detail::layer_in_dim(c, k);
            int dout = detail::layer_out_dim(c, k);
            int skip = din == dout ? h : tape.matmul(h, weight_node(prefix + "res"));
            z = tape.add(z, skip);
        }

        h = final_layer ? z : detail::activation_node(tape, z, c.activation);
        fw.layer_outputs.push_back(h);
    }
    if (upto == K) fw.logits = fw.layer_outputs.back();
    return fw;
}

struct ActivationBundle {
    std::vector<Matrix> per_layer; // h^(1..K); last entry equals logits
    Matrix logits;
    std::vector<int> predictions;  // row argmax, lowest index wins ties
};

inline std::vector<int> argmax_rows(const Matrix& logits) {
    std::vector<int> out(logits.rows);
    for (int i = 0; i < logits.rows; ++i) {
        const double* r = logits.row(i);
        int best = 0;
        for (int j = 1; j < logits.cols; ++j)
            if (r[j] > r[best]) best = j;
        out[i] = best;
    }
    return out;
}

inline ActivationBundle model_forward(const Model& model, const Graph& graph,
                                      const Matrix* x_override = nullptr,
                                      const Matrix* a_override = nullptr) {
    Tape tape;
    ForwardOptions opt;
    opt.x_override = x_override;
    opt.a_override = a_override;
    TapeForward fw = build_forward(tape, model, graph, opt);
    ActivationBundle out;
    for (int id : fw.layer_outputs) out.per_layer.push_back(tape.value(id));
    out.logits = tape.value(fw.logits);
    out.predictions = argmax_rows(out.logits);
    return out;
}

inline Matrix activations_at(const Model& model, const Graph& graph, int k,
                             const Matrix* x_override = nullptr,
                             const Matrix* a_override = nullptr) {
    if (k < 1 || k > model.config.layers)
        throw ConfigError("activations_at: layer " + std::to_string(k) + " out of range");
    Tape tape;
    ForwardOptions opt;
    opt.x_override = x_override;
    opt.a_override = a_override;
    opt.max_layer = k;
    TapeForward fw = build_forward(tape, model, graph, opt);
    return tape.value(fw.layer_outputs[k - 1]);
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {{"arch", arch_name(c.arch)},
            {"layers", c.layers},
            {"hidden_dim", c.hidden_dim},
            {"activation", c.activation == Activation::relu ? "relu" : "elu"},
            {"residual", c.residual},
            {"cheb_order", c.cheb_order},
            {"heads", c.heads},
            {"spd_cap", c.spd_cap},
            {"num_classes", c.num_classes},
            {"in_dim", c.in_dim},
            {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.arch = arch_from_name(j.at("arch").get<std::string>());
    c.layers = j.value("layers", c.layers);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.activation = j.value("activation", std::string("relu")) == "elu" ? Activation::elu
                                                                       : Activation::relu;
    c.residual = j.value("residual", false);
    c.cheb_order = j.value("cheb_order", c.cheb_order);
    c.heads = j.value("heads", c.heads);
    c.spd_cap = j.value("spd_cap", c.spd_cap);
    c.num_classes = j.value("num_classes", 0);
    c.in_dim = j.value("in_dim", 0);
    c.seed = j.value("seed", 0ull);
    return c;
}

inline void save_model(const Model& m, const std::string& path) {
    nlohmann::json j;
    j["config"] = model_config_to_json(m.config);
    auto ws = nlohmann::json::array();
    for (const auto& [name, mat] : m.weights)
        ws.push_back({{"name", name},
                      {"rows", mat.rows},
                      {"cols", mat.cols},
                      {"data", mat.data}});
    j["weights"] = std::move(ws);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << j.dump();
    if (!out) throw IoError("write failed: " + path);
}

inline Model load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model json parse: ") + e.what());
    }
    Model m;
    m.config = model_config_from_json(j.at("config"));
    for (const auto& w : j.at("weights")) {
        Matrix mat(w.at("rows").get<int>(), w.at("cols").get<int>());
        auto data = w.at("data").get<std::vector<double>>();
        if (static_cast<int>(data.size()) != mat.size())
            throw ConfigError("model json: weight size mismatch");
        mat.data = std::move(data);
        m.add_weight(w.at("name").get<std::string>(), std::move(mat));
    }
    return m;
}

} // namespace gml
