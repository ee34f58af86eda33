#pragma once

#include <functional>
#include <vector>

#include "gml/models.hpp"

namespace gml {

struct SvdResult {
    std::vector<double> singular; // descending
    Matrix v;                     // right singular vectors as columns, d x d
};

/// One-sided Jacobi SVD: rotate column pairs until mutually orthogonal;
/// singular values are the final column norms. Dense and accurate at the
/// small sizes this library analyzes.
inline SvdResult jacobi_svd(const Matrix& input, bool want_v = true) {
    Matrix a = input;
    const int m = a.rows, d = a.cols;
    Matrix v = want_v ? Matrix::identity(d) : Matrix();

    const double tol = 1e-14;
    for (int sweep = 0; sweep < 60; ++sweep) {
        bool rotated = false;
        for (int p = 0; p < d; ++p)
            for (int q = p + 1; q < d; ++q) {
                double app = 0, aqq = 0, apq = 0;
                for (int i = 0; i < m; ++i) {
                    double x = a.at(i, p), y = a.at(i, q);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if (apq == 0.0 || apq * apq <= tol * tol * app * aqq) continue;
                double zeta = (aqq - app) / (2.0 * apq);
                double t = (zeta >= 0 ? 1.0 : -1.0) /
                           (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = c * t;
                for (int i = 0; i < m; ++i) {
                    double x = a.at(i, p), y = a.at(i, q);
                    a.at(i, p) = c * x - s * y;
                    a.at(i, q) = s * x + c * y;
                }
                if (want_v)
                    for (int i = 0; i < d; ++i) {
                        double x = v.at(i, p), y = v.at(i, q);
                        v.at(i, p) = c * x - s * y;
                        v.at(i, q) = s * x + c * y;
                    }
                rotated = true;
            }
        if (!rotated) break;
    }

    std::vector<int> order(d);
    std::vector<double> norms(d);
    for (int j = 0; j < d; ++j) {
        double s = 0;
        for (int i = 0; i < m; ++i) s += a.at(i, j) * a.at(i, j);
        norms[j] = std::sqrt(s);
        order[j] = j;
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](int x, int y) { return norms[x] > norms[y]; });

    SvdResult out;
    out.singular.resize(d);
    if (want_v) out.v = Matrix(d, d);
    for (int j = 0; j < d; ++j) {
        out.singular[j] = norms[order[j]];
        if (want_v)
            for (int i = 0; i < d; ++i) out.v.at(i, j) = v.at(i, order[j]);
    }
    return out;
}

/// Builds a 1 x output_dim tape expression from a 1 x input_dim leaf.
using TapeMapFn = std::function<int(Tape&, int)>;

/// Jacobian of f at x, computed by reverse mode (one backward per output
/// coordinate) and cross-checked row-wise against central finite
/// differences. Disagreement signals a kink under the probe point.
inline Matrix jacobian(const TapeMapFn& f, const Matrix& x, double fd_step = 1e-5,
                       double cross_tol = 1e-4) {
    if (x.rows != 1) throw ConfigError("jacobian: input must be a row vector");
    const int d = x.cols;

    Tape tape;
    int x_leaf = tape.leaf(x, true);
    int out = f(tape, x_leaf);
    const Matrix& out_v = tape.value(out);
    if (out_v.rows != 1) throw ConfigError("jacobian: map must produce a row vector");
    const int m = out_v.cols;

    std::vector<int> roots(m);
    for (int i = 0; i < m; ++i) {
        Matrix pick(m, 1);
        pick.at(i, 0) = 1.0;
        roots[i] = tape.matmul(out, tape.leaf(std::move(pick)));
    }

    Matrix rev(m, d);
    for (int i = 0; i < m; ++i) {
        tape.backward(roots[i]);
        const Matrix& g = tape.grad(x_leaf);
        for (int j = 0; j < d; ++j) rev.at(i, j) = g.at(0, j);
    }

    Matrix fd(m, d);
    for (int j = 0; j < d; ++j) {
        Matrix probe = x;
        probe.at(0, j) += fd_step;
        tape.set_value(x_leaf, probe);
        tape.forward_all();
        Matrix plus = tape.value(out);
        probe.at(0, j) -= 2 * fd_step;
        tape.set_value(x_leaf, probe);
        tape.forward_all();
        const Matrix& minus = tape.value(out);
        for (int i = 0; i < m; ++i)
            fd.at(i, j) = (plus.at(0, i) - minus.at(0, i)) / (2 * fd_step);
    }
    tape.set_value(x_leaf, x);
    tape.forward_all();

    for (int i = 0; i < m; ++i) {
        double diff = 0, nr = 0, nf = 0;
        for (int j = 0; j < d; ++j) {
            double e = rev.at(i, j) - fd.at(i, j);
            diff += e * e;
            nr += rev.at(i, j) * rev.at(i, j);
            nf += fd.at(i, j) * fd.at(i, j);
        }
        double denom = std::max({std::sqrt(nr), std::sqrt(nf), 1e-8});
        if (std::sqrt(diff) / denom > cross_tol)
            throw NumericError("jacobian: reverse-mode and finite differences disagree on row " +
                               std::to_string(i) + " (input likely sits on an activation kink)");
    }
    return rev;
}

struct JacobianReport {
    int d = 0;
    int m = 0;
    std::vector<double> singular;
    int rank = 0;
    int metamer_dim = 0; // d - rank
    double tolerance = 0.0;
};

/// Numerical rank via SVD; singular values above rel_tol * sigma_max count.
inline JacobianReport local_metamer_dimension(const Matrix& jac, double rel_tol = 1e-8) {
    if (!(rel_tol > 0)) throw ConfigError("local_metamer_dimension: rel_tol must be positive");
    SvdResult svd = jacobi_svd(jac, false);
    JacobianReport rep;
    rep.d = jac.cols;
    rep.m = jac.rows;
    rep.singular = svd.singular;
    rep.tolerance = rel_tol;
    double sigma_max = svd.singular.empty() ? 0.0 : svd.singular.front();
    if (sigma_max > 0.0)
        for (double s : svd.singular)
            if (s > rel_tol * sigma_max) ++rep.rank;
    rep.metamer_dim = rep.d - rep.rank;
    return rep;
}

enum class VolumeActivation { relu, elu, sigmoid };

struct VolumeReport {
    std::vector<double> derivatives;
    double determinant = 1.0;
    int zero_count = 0;
};

/// Per-coordinate activation derivative at the pre-activation vector z; the
/// product is the local volume scaling factor, and zero entries are
/// collapsed directions.
inline VolumeReport activation_volume(const Matrix& z, VolumeActivation act) {
    VolumeReport rep;
    rep.derivatives.reserve(z.size());
    for (double zv : z.data) {
        double dv = 0.0;
        switch (act) {
            case VolumeActivation::relu:
                dv = zv > 0.0 ? 1.0 : 0.0;
                break;
            case VolumeActivation::elu:
                dv = zv > 0.0 ? 1.0 : std::exp(zv); // alpha = 1
                break;
            case VolumeActivation::sigmoid: {
                double s = 1.0 / (1.0 + std::exp(-zv));
                dv = s * (1.0 - s);
                break;
            }
        }
        rep.derivatives.push_back(dv);
        rep.determinant *= dv;
        if (dv == 0.0) ++rep.zero_count;
    }
    return rep;
}

/// Weighted neighbor aggregation for one node: row v of alpha * X.
inline Matrix aggregate_node_input(const Graph& graph, int v, const Matrix& alpha) {
    if (v < 0 || v >= graph.n) throw ConfigError("aggregate_node_input: bad node");
    if (alpha.rows != graph.n || alpha.cols != graph.n)
        throw DimensionError("aggregate_node_input: alpha shape");
    Matrix out(1, graph.feature_dim());
    for (int u = 0; u < graph.n; ++u) {
        double w = alpha.at(v, u);
        if (w == 0.0) continue;
        for (int j = 0; j < out.cols; ++j) out.at(0, j) += w * graph.features.at(u, j);
    }
    return out;
}

/// Which single-node map f the Jacobian describes. `aggregate` is the
/// post-aggregation layer transform (attention weights held at their
/// reference values); `concat_self` widens the input with the node's own
/// embedding for the concatenating update; `full_input` maps the node's raw
/// feature row through layers 1..k of the whole network, so attention terms
/// differentiate too.
enum class JacobianVariant { aggregate, concat_self, full_input };

struct NodeMapSpec {
    int node = 0;
    int layer = 1;
    bool post_activation = true;
    JacobianVariant variant = JacobianVariant::aggregate;
};

struct NodeMap {
    int input_dim = 0;
    int output_dim = 0;
    Matrix x_ref; // 1 x input_dim
    TapeMapFn fn;
};

namespace detail {

inline Matrix extract_row(const Matrix& m, int row) {
    Matrix out(1, m.cols);
    for (int j = 0; j < m.cols; ++j) out.at(0, j) = m.at(row, j);
    return out;
}

inline Matrix vstack(const std::vector<const Matrix*>& blocks) {
    int rows = 0, cols = blocks.front()->cols;
    for (auto* b : blocks) rows += b->rows;
    Matrix out(rows, cols);
    int at = 0;
    for (auto* b : blocks) {
        for (int i = 0; i < b->rows; ++i)
            for (int j = 0; j < cols; ++j) out.at(at + i, j) = b->at(i, j);
        at += b->rows;
    }
    return out;
}

} // namespace detail

inline NodeMap make_node_map(const Model& model, const Graph& graph,
                             const NodeMapSpec& spec) {
    const ModelConfig& c = model.config;
    const int k = spec.layer;
    if (k < 1 || k > c.layers) throw ConfigError("make_node_map: layer out of range");
    if (spec.node < 0 || spec.node >= graph.n) throw ConfigError("make_node_map: bad node");
    const bool final_layer = k == c.layers;
    const bool act = spec.post_activation && !final_layer;
    const Activation activation = c.activation;
    const int v = spec.node;
    const std::string prefix = "l" + std::to_string(k) + ".";

    NodeMap map;

    if (spec.variant == JacobianVariant::full_input) {
        // x_v through layers 1..k of the whole network; always the emitted
        // (post-activation) output. Attention terms differentiate here.
        map.input_dim = c.in_dim;
        map.output_dim = detail::layer_out_dim(c, k);
        map.x_ref = detail::extract_row(graph.features, v);
        const Model* model_p = &model;
        const Graph* graph_p = &graph;
        map.fn = [model_p, graph_p, v, k](Tape& tape, int x_leaf) {
            Matrix base = graph_p->features;
            for (int j = 0; j < base.cols; ++j) base.at(v, j) = 0.0;
            Matrix ev(graph_p->n, 1);
            ev.at(v, 0) = 1.0;
            int x_full = tape.add(tape.leaf(std::move(base)),
                                  tape.matmul(tape.leaf(std::move(ev)), x_leaf));
            ForwardOptions opt;
            opt.x_node = x_full;
            opt.max_layer = k;
            TapeForward fw = build_forward(tape, *model_p, *graph_p, opt);
            Matrix pick(1, graph_p->n);
            pick.at(0, v) = 1.0;
            return tape.matmul(tape.leaf(std::move(pick)), fw.layer_outputs[k - 1]);
        };
        return map;
    }

    // Reference input of layer k.
    Matrix h_in = k == 1 ? graph.features : model_forward(model, graph).per_layer[k - 2];
    const int din = h_in.cols;

    auto linear_map = [&map, act, activation](Matrix w, Matrix offset = Matrix()) {
        map.fn = [w = std::move(w), offset = std::move(offset), act,
                  activation](Tape& tape, int x_leaf) {
            int z = tape.matmul(x_leaf, tape.leaf(w));
            if (offset.size() > 0) z = tape.add(z, tape.leaf(offset));
            return act ? detail::activation_node(tape, z, activation) : z;
        };
    };

    switch (c.arch) {
        case Arch::gcn: {
            Matrix alpha = normalize_adjacency(graph.adjacency);
            Matrix agg(1, din);
            for (int u = 0; u < graph.n; ++u)
                for (int j = 0; j < din; ++j) agg.at(0, j) += alpha.at(v, u) * h_in.at(u, j);
            map.x_ref = std::move(agg);
            map.input_dim = din;
            const Matrix& w = model.weight(prefix + "w");
            map.output_dim = w.cols;
            linear_map(w);
            break;
        }
        case Arch::chebnet: {
            // stacked Chebyshev-filtered inputs; transform is the stacked weight
            Matrix lt = scaled_laplacian(graph.adjacency);
            std::vector<Matrix> filtered{h_in};
            if (c.cheb_order > 1) filtered.push_back(matmul(lt, h_in));
            for (int q = 2; q < c.cheb_order; ++q) {
                Matrix next = matmul(lt, filtered[q - 1]);
                for (int i = 0; i < next.size(); ++i)
                    next.data[i] = 2.0 * next.data[i] - filtered[q - 2].data[i];
                filtered.push_back(std::move(next));
            }
            map.input_dim = c.cheb_order * din;
            map.x_ref = Matrix(1, map.input_dim);
            for (int q = 0; q < c.cheb_order; ++q)
                for (int j = 0; j < din; ++j)
                    map.x_ref.at(0, q * din + j) = filtered[q].at(v, j);
            std::vector<const Matrix*> blocks;
            for (int q = 0; q < c.cheb_order; ++q)
                blocks.push_back(&model.weight(prefix + "cheb" + std::to_string(q)));
            Matrix wstack = detail::vstack(blocks);
            map.output_dim = wstack.cols;
            linear_map(std::move(wstack));
            break;
        }
        case Arch::sage: {
            auto deg = detail::degrees(graph.adjacency);
            Matrix agg(1, din);
            for (int u = 0; u < graph.n; ++u) {
                if (graph.adjacency.at(v, u) == 0.0) continue;
                for (int j = 0; j < din; ++j)
                    agg.at(0, j) += h_in.at(u, j) / std::max(deg[v], 1.0);
            }
            const Matrix& w = model.weight(prefix + "w"); // rows: [self | aggregated]
            map.output_dim = w.cols;
            if (spec.variant == JacobianVariant::concat_self) {
                map.input_dim = 2 * din;
                map.x_ref = Matrix(1, 2 * din);
                for (int j = 0; j < din; ++j) {
                    map.x_ref.at(0, j) = h_in.at(v, j);
                    map.x_ref.at(0, din + j) = agg.at(0, j);
                }
                linear_map(w);
            } else {
                map.input_dim = din;
                map.x_ref = std::move(agg);
                Matrix w_self(din, w.cols), w_agg(din, w.cols);
                for (int i = 0; i < din; ++i)
                    for (int j = 0; j < w.cols; ++j) {
                        w_self.at(i, j) = w.at(i, j);
                        w_agg.at(i, j) = w.at(din + i, j);
                    }
                Matrix offset = matmul(detail::extract_row(h_in, v), w_self);
                linear_map(std::move(w_agg), std::move(offset));
            }
            break;
        }
        case Arch::gin: {
            Matrix agg = detail::extract_row(h_in, v);
            for (int u = 0; u < graph.n; ++u) {
                if (graph.adjacency.at(v, u) == 0.0) continue;
                for (int j = 0; j < din; ++j) agg.at(0, j) += h_in.at(u, j);
            }
            map.input_dim = din;
            map.x_ref = std::move(agg);
            Matrix w1 = model.weight(prefix + "mlp1");
            Matrix w2 = model.weight(prefix + "mlp2");
            map.output_dim = w2.cols;
            map.fn = [w1 = std::move(w1), w2 = std::move(w2), act,
                      activation](Tape& tape, int x_leaf) {
                int inner = detail::activation_node(
                    tape, tape.matmul(x_leaf, tape.leaf(w1)), activation);
                int z = tape.matmul(inner, tape.leaf(w2));
                return act ? detail::activation_node(tape, z, activation) : z;
            };
            break;
        }
        case Arch::gat:
        case Arch::graphormer_lite: {
            if (spec.variant == JacobianVariant::concat_self)
                throw ConfigError("make_node_map: concat_self applies to the sage update");
            // attention weights at the reference input
            Tape probe;
            ForwardOptions opt;
            opt.max_layer = k;
            TapeForward fw = build_forward(probe, model, graph, opt);
            int heads = c.heads;
            map.input_dim = heads * din;
            map.x_ref = Matrix(1, map.input_dim);
            std::vector<Matrix> head_w;
            for (int h = 0; h < heads; ++h) {
                const Matrix& alpha =
                    probe.value(fw.attention_nodes[(k - 1) * heads + h]);
                for (int u = 0; u < graph.n; ++u) {
                    double w = alpha.at(v, u);
                    if (w == 0.0) continue;
                    for (int j = 0; j < din; ++j)
                        map.x_ref.at(0, h * din + j) += w * h_in.at(u, j);
                }
                std::string hp = prefix + "h" + std::to_string(h) + ".";
                head_w.push_back(model.weight(
                    c.arch == Arch::gat ? hp + "w" : hp + "wv"));
            }
            int dh = head_w.front().cols;
            if (final_layer) {
                // heads average into the class dimension
                Matrix wstack(heads * din, dh);
                for (int h = 0; h < heads; ++h)
                    for (int i = 0; i < din; ++i)
                        for (int j = 0; j < dh; ++j)
                            wstack.at(h * din + i, j) = head_w[h].at(i, j) / heads;
                map.output_dim = dh;
                linear_map(std::move(wstack));
            } else {
                // block-diagonal: heads concatenate
                Matrix wblock(heads * din, heads * dh);
                for (int h = 0; h < heads; ++h)
                    for (int i = 0; i < din; ++i)
                        for (int j = 0; j < dh; ++j)
                            wblock.at(h * din + i, h * dh + j) = head_w[h].at(i, j);
                map.output_dim = heads * dh;
                linear_map(std::move(wblock));
            }
            break;
        }
    }
    return map;
}

} // namespace gml
