#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "gml/models.hpp"

namespace gml {

struct TrainConfig {
    int epochs = 200;
    double lr = 0.001;
    double weight_decay = 5e-4;
    bool adversarial = false;
    double adv_epsilon = 0.05;
    int adv_steps = 5;
    double adv_step_size = 0.0125; // adv_epsilon / 4
    std::uint64_t seed = 0;

    void validate() const {
        if (!(lr > 0)) throw ConfigError("train: lr must be positive");
        if (epochs < 0) throw ConfigError("train: epochs must be nonnegative");
        if (adv_epsilon < 0) throw ConfigError("train: adv_epsilon must be nonnegative");
        if (adversarial && adv_steps < 1)
            throw ConfigError("train: adv_steps must be >= 1 when adversarial");
    }
};

/// Bias-corrected Adam over a list of parameter matrices.
struct AdamState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    long step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit AdamState(const std::vector<const Matrix*>& params = {}) {
        for (const Matrix* p : params) {
            m.emplace_back(p->rows, p->cols);
            v.emplace_back(p->rows, p->cols);
        }
    }
};

inline void adam_step(AdamState& state, const std::vector<Matrix*>& weights,
                      const std::vector<const Matrix*>& grads, double lr) {
    if (weights.size() != grads.size() || weights.size() != state.m.size())
        throw ConfigError("adam_step: parameter count mismatch");
    ++state.step;
    double bc1 = 1.0 - std::pow(state.beta1, state.step);
    double bc2 = 1.0 - std::pow(state.beta2, state.step);
    for (size_t i = 0; i < weights.size(); ++i) {
        Matrix& w = *weights[i];
        const Matrix& g = *grads[i];
        require_shape(w, g, "adam_step");
        Matrix& mm = state.m[i];
        Matrix& vv = state.v[i];
        for (int jj = 0; jj < w.size(); ++jj) {
            double gj = g.data[jj];
            mm.data[jj] = state.beta1 * mm.data[jj] + (1.0 - state.beta1) * gj;
            vv.data[jj] = state.beta2 * vv.data[jj] + (1.0 - state.beta2) * gj * gj;
            double mhat = mm.data[jj] / bc1;
            double vhat = vv.data[jj] / bc2;
            w.data[jj] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

struct TrainMetrics {
    std::vector<double> loss_curve;
    std::vector<double> train_acc_curve;
    std::vector<double> test_acc_curve;
    double train_acc = 0.0;
    double test_acc = 0.0;
    double max_adv_deviation = 0.0; // largest |X_adv - X| seen across epochs
};

inline double masked_accuracy(const std::vector<int>& pred, const std::vector<int>& labels,
                              const std::vector<std::uint8_t>& mask) {
    int hit = 0, total = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (!mask[i]) continue;
        ++total;
        if (pred[i] == labels[i]) ++hit;
    }
    return total == 0 ? 0.0 : static_cast<double>(hit) / total;
}

/// Cross-entropy training on the train mask. With the adversarial flag the
/// per-epoch loss is taken at features moved by L-inf projected gradient
/// ascent from the clean features; binary features are perturbed in the
/// continuous relaxation and clipped to [0,1].
inline TrainMetrics train(Model& model, const Graph& graph, const TrainConfig& config,
                          const std::string& log_csv_path = {}) {
    config.validate();
    bool any_train = false;
    for (auto m : graph.train_mask) any_train |= m != 0;
    if (!any_train) throw ConfigError("train: empty train mask");

    auto labels = std::make_shared<const std::vector<int>>(graph.labels);
    auto train_mask = std::make_shared<const std::vector<std::uint8_t>>(graph.train_mask);

    Tape tape;
    int x_leaf = tape.leaf(graph.features, true);
    ForwardOptions opt;
    opt.x_node = x_leaf;
    opt.weights_as_leaves = true;
    TapeForward fw = build_forward(tape, model, graph, opt);
    int loss = tape.log_softmax_nll(fw.logits, labels, train_mask);

    std::vector<Matrix*> weights;
    std::vector<int> leaves;
    for (size_t i = 0; i < model.weights.size(); ++i) {
        int leaf = fw.weight_leaves[i];
        if (leaf < 0) continue;
        weights.push_back(&model.weights[i].second);
        leaves.push_back(leaf);
    }
    AdamState adam(std::vector<const Matrix*>(weights.begin(), weights.end()));

    TrainMetrics metrics;
    Matrix x_adv = graph.features;

    std::ofstream log;
    if (!log_csv_path.empty()) {
        log.open(log_csv_path);
        if (!log) throw IoError("cannot write " + log_csv_path);
        log << "epoch,loss,train_acc,test_acc\n";
    }

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        if (config.adversarial) {
            // PGD ascent on the training loss, from the clean features.
            x_adv = graph.features;
            for (int s = 0; s < config.adv_steps; ++s) {
                tape.set_value(x_leaf, x_adv);
                tape.forward_all();
                tape.backward(loss);
                const Matrix& g = tape.grad(x_leaf);
                for (int i = 0; i < x_adv.size(); ++i) {
                    double step = g.data[i] > 0 ? config.adv_step_size
                                 : g.data[i] < 0 ? -config.adv_step_size
                                                 : 0.0;
                    double moved = x_adv.data[i] + step;
                    double lo = graph.features.data[i] - config.adv_epsilon;
                    double hi = graph.features.data[i] + config.adv_epsilon;
                    moved = std::min(std::max(moved, lo), hi);
                    if (graph.feature_kind == FeatureKind::binary)
                        moved = std::min(std::max(moved, 0.0), 1.0);
                    x_adv.data[i] = moved;
                }
            }
            for (int i = 0; i < x_adv.size(); ++i)
                metrics.max_adv_deviation = std::max(
                    metrics.max_adv_deviation,
                    std::abs(x_adv.data[i] - graph.features.data[i]));
            tape.set_value(x_leaf, x_adv);
        }

        tape.forward_all();
        tape.backward(loss);
        metrics.loss_curve.push_back(tape.scalar(loss));

        // classic L2 regularization folded into the gradient
        std::vector<Matrix> reg_grads;
        reg_grads.reserve(weights.size());
        for (size_t i = 0; i < weights.size(); ++i) {
            Matrix g = tape.grad(leaves[i]);
            if (config.weight_decay != 0.0)
                for (int jj = 0; jj < g.size(); ++jj)
                    g.data[jj] += config.weight_decay * weights[i]->data[jj];
            reg_grads.push_back(std::move(g));
        }
        std::vector<const Matrix*> gptrs;
        for (const Matrix& g : reg_grads) gptrs.push_back(&g);
        adam_step(adam, weights, gptrs, config.lr);
        for (size_t i = 0; i < weights.size(); ++i) tape.set_value(leaves[i], *weights[i]);

        // epoch-end metrics on clean features
        tape.set_value(x_leaf, graph.features);
        tape.forward_all();
        auto pred = argmax_rows(tape.value(fw.logits));
        double tr = masked_accuracy(pred, graph.labels, graph.train_mask);
        double te = masked_accuracy(pred, graph.labels, graph.test_mask);
        metrics.train_acc_curve.push_back(tr);
        metrics.test_acc_curve.push_back(te);
        if (log)
            log << epoch << ',' << format_double(metrics.loss_curve.back()) << ','
                << format_double(tr) << ',' << format_double(te) << '\n';
    }

    tape.set_value(x_leaf, graph.features);
    tape.forward_all();
    auto pred = argmax_rows(tape.value(fw.logits));
    metrics.train_acc = masked_accuracy(pred, graph.labels, graph.train_mask);
    metrics.test_acc = masked_accuracy(pred, graph.labels, graph.test_mask);
    return metrics;
}

} // namespace gml
