#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "gml/matrix.hpp"

namespace gml {

enum class Op {
    leaf,
    matmul,
    add,
    hadamard,
    relu,
    elu,
    sigmoid,
    softmax_row,
    concat_cols,
    scale,
    sum,
    sq_norm,
    log_softmax_nll,
    ste_passthrough,
    transpose,
    rsqrt,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::matmul: return "matmul";
        case Op::add: return "add";
        case Op::hadamard: return "hadamard";
        case Op::relu: return "relu";
        case Op::elu: return "elu";
        case Op::sigmoid: return "sigmoid";
        case Op::softmax_row: return "softmax-row";
        case Op::concat_cols: return "concat-cols";
        case Op::scale: return "scale";
        case Op::sum: return "sum";
        case Op::sq_norm: return "sq-norm";
        case Op::log_softmax_nll: return "log-softmax-nll";
        case Op::ste_passthrough: return "ste-passthrough";
        case Op::transpose: return "transpose";
        case Op::rsqrt: return "rsqrt";
    }
    return "?";
}

/// Reverse-mode autodiff over dense matrices. Nodes are appended eagerly
/// (construction evaluates the value), so node ids are already in
/// topological order; backward walks ids in reverse. A built tape can be
/// re-run with new leaf values via set_value + forward_from, which is how
/// the training and synthesis loops avoid rebuilding the graph each step.
class Tape {
public:
    struct Node {
        Op op = Op::leaf;
        int a = -1;
        int b = -1;
        bool requires_grad = false; // meaningful for leaves only
        double c0 = 0.0;            // scale factor / elu alpha
        Matrix value;
        Matrix grad;
        Matrix hard;                                    // ste: forward value
        std::shared_ptr<const Matrix> additive_mask;    // softmax-row
        std::shared_ptr<const std::vector<int>> labels; // nll
        std::shared_ptr<const std::vector<std::uint8_t>> row_mask; // nll
    };

    bool check_finite = true;

    int size() const { return static_cast<int>(nodes_.size()); }
    const Matrix& value(int id) const { return nodes_[id].value; }
    const Matrix& grad(int id) const { return nodes_[id].grad; }
    double scalar(int id) const { return nodes_[id].value.at(0, 0); }
    Op op_of(int id) const { return nodes_[id].op; }

    int leaf(Matrix v, bool requires_grad = false) {
        Node n;
        n.op = Op::leaf;
        n.requires_grad = requires_grad;
        n.value = std::move(v);
        nodes_.push_back(std::move(n));
        return size() - 1;
    }

    void set_value(int id, const Matrix& v) {
        Node& n = nodes_[id];
        if (n.op != Op::leaf) throw ConfigError("set_value: not a leaf");
        require_shape(n.value, v, "set_value");
        n.value = v;
    }

    int matmul(int a, int b) { return push(Op::matmul, a, b); }
    int add(int a, int b) { return push(Op::add, a, b); }
    int hadamard(int a, int b) { return push(Op::hadamard, a, b); }
    int relu(int a) { return push(Op::relu, a); }
    int elu(int a, double alpha = 1.0) {
        if (!(alpha > 0)) throw ConfigError("elu: alpha must be positive");
        return push(Op::elu, a, -1, alpha);
    }
    int sigmoid(int a) { return push(Op::sigmoid, a); }
    int concat_cols(int a, int b) { return push(Op::concat_cols, a, b); }
    int scale(int a, double c) { return push(Op::scale, a, -1, c); }
    int sum(int a) { return push(Op::sum, a); }
    int sq_norm(int a) { return push(Op::sq_norm, a); }
    int transpose(int a) { return push(Op::transpose, a); }
    int rsqrt(int a) { return push(Op::rsqrt, a); }

    int softmax_row(int a, std::shared_ptr<const Matrix> additive_mask = nullptr) {
        Node n;
        n.op = Op::softmax_row;
        n.a = a;
        n.additive_mask = std::move(additive_mask);
        if (n.additive_mask) require_shape(nodes_[a].value, *n.additive_mask, "softmax mask");
        nodes_.push_back(std::move(n));
        eval(size() - 1);
        return size() - 1;
    }

    // Mean negative log-likelihood of labels over rows where row_mask is set.
    int log_softmax_nll(int logits, std::shared_ptr<const std::vector<int>> labels,
                        std::shared_ptr<const std::vector<std::uint8_t>> row_mask) {
        const Matrix& lv = nodes_[logits].value;
        if (static_cast<int>(labels->size()) != lv.rows ||
            static_cast<int>(row_mask->size()) != lv.rows)
            throw DimensionError("log_softmax_nll: label/mask length");
        Node n;
        n.op = Op::log_softmax_nll;
        n.a = logits;
        n.labels = std::move(labels);
        n.row_mask = std::move(row_mask);
        nodes_.push_back(std::move(n));
        eval(size() - 1);
        return size() - 1;
    }

    // Forward takes the hard value bit-exactly; backward hands the upstream
    // gradient to the soft input unchanged.
    int ste(int soft, Matrix hard) {
        require_shape(nodes_[soft].value, hard, "ste");
        Node n;
        n.op = Op::ste_passthrough;
        n.a = soft;
        n.hard = std::move(hard);
        nodes_.push_back(std::move(n));
        eval(size() - 1);
        return size() - 1;
    }

    void set_ste_hard(int id, const Matrix& hard) {
        Node& n = nodes_[id];
        if (n.op != Op::ste_passthrough) throw ConfigError("set_ste_hard: not an STE node");
        require_shape(n.hard, hard, "set_ste_hard");
        n.hard = hard;
    }

    // Recompute values of non-leaf nodes in [first, last), in order.
    void forward_range(int first, int last) {
        for (int id = std::max(first, 0); id < std::min(last, size()); ++id)
            if (nodes_[id].op != Op::leaf) eval(id);
    }

    void forward_from(int first) { forward_range(first, size()); }

    void forward_all() { forward_from(0); }

    /// Accumulate d(root)/d(node) into every node's grad. Root must be 1x1.
    void backward(int root) {
        const Node& r = nodes_[root];
        if (r.value.rows != 1 || r.value.cols != 1)
            throw ConfigError("backward: root is not scalar");
        for (int id = 0; id <= root; ++id) {
            Node& n = nodes_[id];
            if (!n.grad.same_shape(n.value)) n.grad = Matrix(n.value.rows, n.value.cols);
            else n.grad.fill(0.0);
        }
        nodes_[root].grad.at(0, 0) = 1.0;
        for (int id = root; id >= 0; --id) propagate(id);
    }

private:
    std::vector<Node> nodes_;

    int push(Op op, int a, int b = -1, double c0 = 0.0) {
        Node n;
        n.op = op;
        n.a = a;
        n.b = b;
        n.c0 = c0;
        nodes_.push_back(std::move(n));
        eval(size() - 1);
        return size() - 1;
    }

    void eval(int id) {
        Node& n = nodes_[id];
        const Matrix& A = n.a >= 0 ? nodes_[n.a].value : n.value;
        switch (n.op) {
            case Op::leaf:
                break;
            case Op::matmul:
                matmul_into(n.value, A, nodes_[n.b].value);
                break;
            case Op::add: {
                const Matrix& B = nodes_[n.b].value;
                require_shape(A, B, "add");
                if (!n.value.same_shape(A)) n.value = Matrix(A.rows, A.cols);
                for (int i = 0; i < A.size(); ++i) n.value.data[i] = A.data[i] + B.data[i];
                break;
            }
            case Op::hadamard: {
                const Matrix& B = nodes_[n.b].value;
                require_shape(A, B, "hadamard");
                if (!n.value.same_shape(A)) n.value = Matrix(A.rows, A.cols);
                for (int i = 0; i < A.size(); ++i) n.value.data[i] = A.data[i] * B.data[i];
                break;
            }
            case Op::relu: {
                if (!n.value.same_shape(A)) n.value = Matrix(A.rows, A.cols);
                for (int i = 0; i < A.size(); ++i)
                    n.value.data[i] = A.data[i] > 0.0 ? A.data[i] : 0.0;
                break;
            }
            case Op::elu: {
                if (!n.value.same_shape(A)) n.value = Matrix(A.rows, A.cols);
                for (int i = 0; i < A.size(); ++i) {
                    double x = A.data[i];
                    n.value.data[i] = x > 0.0 ? x : n.c0 * std::expm1(x);
                }
                break;
            }
            case Op::sigmoid: {
                if (!n.value.same_shape(A)) n.value = Matrix(A.rows, A.cols);
                for (int i = 0; i < A.size(); ++i)
                    n.value.data[i] = 1.0 / (1.0 + std::exp(-A.data[i]));
                break;
            }
            case Op::softmax_row: {
                if (!n.value.same_shape(A)) n.value = Matrix(A.rows, A.cols);
                for (int i = 0; i < A.rows; ++i) {
                    const double* src = A.row(i);
                    const double* msk = n.additive_mask ? n.additive_mask->row(i) : nullptr;
                    double* dst = n.value.row(i);
                    double mx = -1e300;
                    for (int j = 0; j < A.cols; ++j) {
                        double v = src[j] + (msk ? msk[j] : 0.0);
                        if (v > mx) mx = v;
                    }
                    double denom = 0.0;
                    for (int j = 0; j < A.cols; ++j) {
                        double v = src[j] + (msk ? msk[j] : 0.0);
                        dst[j] = std::exp(v - mx);
                        denom += dst[j];
                    }
                    for (int j = 0; j < A.cols; ++j) dst[j] /= denom;
                }
                break;
            }
            case Op::concat_cols: {
                const Matrix& B = nodes_[n.b].value;
                if (A.rows != B.rows) throw DimensionError("concat-cols: row counts differ");
                if (n.value.rows != A.rows || n.value.cols != A.cols + B.cols)
                    n.value = Matrix(A.rows, A.cols + B.cols);
                for (int i = 0; i < A.rows; ++i) {
                    std::memcpy(n.value.row(i), A.row(i), A.cols * sizeof(double));
                    std::memcpy(n.value.row(i) + A.cols, B.row(i), B.cols * sizeof(double));
                }
                break;
            }
            case Op::scale: {
                if (!n.value.same_shape(A)) n.value = Matrix(A.rows, A.cols);
                for (int i = 0; i < A.size(); ++i) n.value.data[i] = n.c0 * A.data[i];
                break;
            }
            case Op::sum: {
                if (n.value.rows != 1 || n.value.cols != 1) n.value = Matrix(1, 1);
                double s = 0.0;
                for (double v : A.data) s += v;
                n.value.at(0, 0) = s;
                break;
            }
            case Op::sq_norm: {
                if (n.value.rows != 1 || n.value.cols != 1) n.value = Matrix(1, 1);
                n.value.at(0, 0) = squared_norm(A);
                break;
            }
            case Op::log_softmax_nll: {
                if (n.value.rows != 1 || n.value.cols != 1) n.value = Matrix(1, 1);
                double total = 0.0;
                int count = 0;
                for (int i = 0; i < A.rows; ++i) {
                    if (!(*n.row_mask)[i]) continue;
                    const double* src = A.row(i);
                    double mx = src[0];
                    for (int j = 1; j < A.cols; ++j) mx = std::max(mx, src[j]);
                    double denom = 0.0;
                    for (int j = 0; j < A.cols; ++j) denom += std::exp(src[j] - mx);
                    int y = (*n.labels)[i];
                    if (y < 0 || y >= A.cols)
                        throw ConfigError("log_softmax_nll: label out of range");
                    total += std::log(denom) - (src[y] - mx);
                    ++count;
                }
                if (count == 0) throw ConfigError("log_softmax_nll: empty row mask");
                n.value.at(0, 0) = total / count;
                break;
            }
            case Op::ste_passthrough:
                n.value = n.hard;
                break;
            case Op::transpose: {
                if (n.value.rows != A.cols || n.value.cols != A.rows)
                    n.value = Matrix(A.cols, A.rows);
                for (int i = 0; i < A.rows; ++i)
                    for (int j = 0; j < A.cols; ++j) n.value.at(j, i) = A.at(i, j);
                break;
            }
            case Op::rsqrt: {
                if (!n.value.same_shape(A)) n.value = Matrix(A.rows, A.cols);
                for (int i = 0; i < A.size(); ++i) {
                    if (!(A.data[i] > 0.0))
                        throw NumericError("rsqrt: nonpositive input");
                    n.value.data[i] = 1.0 / std::sqrt(A.data[i]);
                }
                break;
            }
        }
        if (check_finite && n.op != Op::leaf && !all_finite(n.value))
            throw NumericError(std::string("non-finite value out of ") + op_name(n.op));
    }

    void propagate(int id) {
        Node& n = nodes_[id];
        if (n.op == Op::leaf) return;
        const Matrix& g = n.grad;
        Matrix& ga = nodes_[n.a].grad;
        const Matrix& va = nodes_[n.a].value;
        switch (n.op) {
            case Op::leaf:
                break;
            case Op::matmul:
                matmul_nt_into(ga, g, nodes_[n.b].value, true);
                matmul_tn_into(nodes_[n.b].grad, va, g, true);
                break;
            case Op::add: {
                Matrix& gb = nodes_[n.b].grad;
                for (int i = 0; i < g.size(); ++i) {
                    ga.data[i] += g.data[i];
                    gb.data[i] += g.data[i];
                }
                break;
            }
            case Op::hadamard: {
                Matrix& gb = nodes_[n.b].grad;
                const Matrix& vb = nodes_[n.b].value;
                for (int i = 0; i < g.size(); ++i) {
                    ga.data[i] += g.data[i] * vb.data[i];
                    gb.data[i] += g.data[i] * va.data[i];
                }
                break;
            }
            case Op::relu:
                for (int i = 0; i < g.size(); ++i)
                    if (va.data[i] > 0.0) ga.data[i] += g.data[i];
                break;
            case Op::elu:
                // d/dx = 1 for x>0, alpha*exp(x) = value + alpha otherwise
                for (int i = 0; i < g.size(); ++i)
                    ga.data[i] += g.data[i] * (va.data[i] > 0.0 ? 1.0 : n.value.data[i] + n.c0);
                break;
            case Op::sigmoid:
                for (int i = 0; i < g.size(); ++i) {
                    double y = n.value.data[i];
                    ga.data[i] += g.data[i] * y * (1.0 - y);
                }
                break;
            case Op::softmax_row:
                for (int i = 0; i < g.rows; ++i) {
                    const double* y = n.value.row(i);
                    const double* gr = g.row(i);
                    double* gar = ga.row(i);
                    double dotyg = 0.0;
                    for (int j = 0; j < g.cols; ++j) dotyg += y[j] * gr[j];
                    for (int j = 0; j < g.cols; ++j) gar[j] += y[j] * (gr[j] - dotyg);
                }
                break;
            case Op::concat_cols: {
                Matrix& gb = nodes_[n.b].grad;
                int ca = va.cols;
                for (int i = 0; i < g.rows; ++i) {
                    const double* gr = g.row(i);
                    double* gar = ga.row(i);
                    double* gbr = gb.row(i);
                    for (int j = 0; j < ca; ++j) gar[j] += gr[j];
                    for (int j = 0; j < gb.cols; ++j) gbr[j] += gr[ca + j];
                }
                break;
            }
            case Op::scale:
                for (int i = 0; i < g.size(); ++i) ga.data[i] += n.c0 * g.data[i];
                break;
            case Op::sum: {
                double u = g.at(0, 0);
                for (int i = 0; i < ga.size(); ++i) ga.data[i] += u;
                break;
            }
            case Op::sq_norm: {
                double u = 2.0 * g.at(0, 0);
                for (int i = 0; i < ga.size(); ++i) ga.data[i] += u * va.data[i];
                break;
            }
            case Op::log_softmax_nll: {
                double u = g.at(0, 0);
                int count = 0;
                for (int i = 0; i < va.rows; ++i)
                    if ((*n.row_mask)[i]) ++count;
                double inv = u / count;
                for (int i = 0; i < va.rows; ++i) {
                    if (!(*n.row_mask)[i]) continue;
                    const double* src = va.row(i);
                    double* gar = ga.row(i);
                    double mx = src[0];
                    for (int j = 1; j < va.cols; ++j) mx = std::max(mx, src[j]);
                    double denom = 0.0;
                    for (int j = 0; j < va.cols; ++j) denom += std::exp(src[j] - mx);
                    for (int j = 0; j < va.cols; ++j)
                        gar[j] += inv * (std::exp(src[j] - mx) / denom -
                                         (j == (*n.labels)[i] ? 1.0 : 0.0));
                }
                break;
            }
            case Op::ste_passthrough:
                for (int i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
                break;
            case Op::transpose:
                for (int i = 0; i < g.rows; ++i)
                    for (int j = 0; j < g.cols; ++j) ga.at(j, i) += g.at(i, j);
                break;
            case Op::rsqrt:
                // d/dx x^{-1/2} = -x^{-3/2} / 2 = -v^3 / 2
                for (int i = 0; i < g.size(); ++i) {
                    double v = n.value.data[i];
                    ga.data[i] += g.data[i] * (-0.5 * v * v * v);
                }
                break;
        }
    }
};

} // namespace gml
