#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "fd_oracle.hpp"
#include "gml/training.hpp"
#include "test_helpers.hpp"

using namespace gml;

namespace {

Graph desk_sbm(std::uint64_t seed) {
    return generate_sbm({.blocks = 4, .nodes_per_block = 40, .p_in = 0.1, .p_out = 0.01,
                         .d = 32, .signal = 0.5, .seed = seed});
}

ModelConfig gcn_config(const Graph& g, std::uint64_t seed) {
    ModelConfig c;
    c.arch = Arch::gcn;
    c.layers = 2;
    c.hidden_dim = 16;
    c.num_classes = g.num_classes();
    c.in_dim = g.feature_dim();
    c.seed = seed;
    return c;
}

} // namespace

TEST_CASE("adam leaves weights alone under zero gradients") {
    Matrix w = Matrix::from_rows({{1.0, -2.0}, {3.0, 4.0}});
    Matrix w0 = w;
    Matrix g(2, 2);
    AdamState st({&w});
    for (int i = 0; i < 10; ++i) adam_step(st, {&w}, {&g}, 0.01);
    CHECK(w.bit_equal(w0));
}

TEST_CASE("first adam step follows the bias-corrected closed form") {
    std::mt19937_64 rng(3);
    Matrix w(3, 3);
    Matrix g = gml::testing::random_matrix(rng, 3, 3);
    Matrix w0 = w;
    AdamState st({&w});
    const double lr = 0.37;
    adam_step(st, {&w}, {&g}, lr);
    for (int i = 0; i < 9; ++i) {
        double expect = w0.data[i] - lr * g.data[i] / (std::abs(g.data[i]) + st.eps);
        CHECK(w.data[i] == Catch::Approx(expect).margin(1e-14));
    }
}

TEST_CASE("adam minimizes a convex quadratic to the target") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-0.03, 0.03);
    Matrix c(4, 4);
    for (double& v : c.data) v = u(rng);
    Matrix w(4, 4);
    AdamState st({&w});
    for (int step = 0; step < 100; ++step) {
        Matrix g(4, 4);
        for (int i = 0; i < 16; ++i) g.data[i] = 2.0 * (w.data[i] - c.data[i]);
        adam_step(st, {&w}, {&g}, 1e-3);
    }
    for (int i = 0; i < 16; ++i) CHECK(std::abs(w.data[i] - c.data[i]) < 1e-3);
}

TEST_CASE("untrained models predict at chance on a balanced sbm") {
    // Per-seed accuracies are treated as draws with mean 1/C and variance at
    // most p(1-p); a 3-sigma band on the 20-seed mean follows.
    const int seeds = 20;
    double acc_sum = 0.0;
    for (int s = 0; s < seeds; ++s) {
        Graph g = desk_sbm(500 + s);
        Model m = build_model(gcn_config(g, 900 + s));
        TrainConfig tc;
        tc.epochs = 0;
        tc.seed = s;
        TrainMetrics metrics = train(m, g, tc);
        acc_sum += metrics.test_acc;
    }
    double p = 0.25;
    double band = 3.0 * std::sqrt(p * (1 - p) / seeds);
    CHECK(std::abs(acc_sum / seeds - p) <= band);
}

TEST_CASE("two-layer gcn separates an easy sbm") {
    Graph g = desk_sbm(7);
    Model m = build_model(gcn_config(g, 7));
    TrainConfig tc;
    tc.epochs = 200;
    tc.seed = 7;
    TrainMetrics metrics = train(m, g, tc);
    CHECK(metrics.test_acc > 0.8);
}

TEST_CASE("training is deterministic given seeds") {
    Graph g = desk_sbm(21);
    auto run = [&] {
        Model m = build_model(gcn_config(g, 5));
        TrainConfig tc;
        tc.epochs = 30;
        tc.seed = 5;
        train(m, g, tc);
        return m;
    };
    Model a = run();
    Model b = run();
    for (size_t i = 0; i < a.weights.size(); ++i)
        CHECK(a.weights[i].second.bit_equal(b.weights[i].second));
}

TEST_CASE("zero-radius adversarial training matches the clean trajectory") {
    Graph g = desk_sbm(13);
    TrainConfig clean;
    clean.epochs = 25;
    TrainConfig adv = clean;
    adv.adversarial = true;
    adv.adv_epsilon = 0.0;

    Model m1 = build_model(gcn_config(g, 3));
    Model m2 = build_model(gcn_config(g, 3));
    TrainMetrics r1 = train(m1, g, clean);
    TrainMetrics r2 = train(m2, g, adv);
    CHECK(r1.loss_curve == r2.loss_curve);
    for (size_t i = 0; i < m1.weights.size(); ++i)
        CHECK(m1.weights[i].second.bit_equal(m2.weights[i].second));
}

TEST_CASE("adversarial perturbations stay inside the L-inf ball") {
    Graph g = desk_sbm(17);
    Model m = build_model(gcn_config(g, 2));
    TrainConfig tc;
    tc.epochs = 12;
    tc.adversarial = true;
    tc.adv_epsilon = 0.05;
    tc.adv_steps = 5;
    tc.adv_step_size = 0.0125;
    TrainMetrics metrics = train(m, g, tc);
    CHECK(metrics.max_adv_deviation > 0.0); // it actually moved
    CHECK(metrics.max_adv_deviation <= tc.adv_epsilon + 1e-12);
}

TEST_CASE("loss is non-increasing over 20-epoch windows in the convex case") {
    // K=1 gcn on an edgeless graph aggregates with the identity, i.e. plain
    // logistic regression.
    std::mt19937_64 rng(29);
    Graph g = gml::testing::random_graph(rng, 60, 8, 0.0, 3, false);
    ModelConfig c;
    c.arch = Arch::gcn;
    c.layers = 1;
    c.hidden_dim = 8;
    c.num_classes = 3;
    c.in_dim = 8;
    c.seed = 4;
    Model m = build_model(c);
    TrainConfig tc;
    tc.epochs = 120;
    tc.weight_decay = 0.0;
    TrainMetrics metrics = train(m, g, tc);
    for (size_t i = 0; i + 20 < metrics.loss_curve.size(); ++i)
        CHECK(metrics.loss_curve[i + 20] <= metrics.loss_curve[i] + 1e-9);
}

TEST_CASE("empty train mask is rejected") {
    std::mt19937_64 rng(1);
    Graph g = gml::testing::random_graph(rng, 6, 4, 0.3, 2);
    g.train_mask.assign(g.n, 0);
    Model m = build_model(gcn_config(g, 1));
    CHECK_THROWS_AS(train(m, g, TrainConfig{}), ConfigError);
}

TEST_CASE("training log csv has one row per epoch") {
    Graph g = desk_sbm(31);
    Model m = build_model(gcn_config(g, 9));
    TrainConfig tc;
    tc.epochs = 5;
    auto path = (std::filesystem::temp_directory_path() / "train_log.csv").string();
    train(m, g, tc, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "epoch,loss,train_acc,test_acc");
    int rows = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 5);
}
