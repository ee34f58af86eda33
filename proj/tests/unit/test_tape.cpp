#include <catch2/catch_amalgamated.hpp>

#include "fd_oracle.hpp"
#include "gml/tape.hpp"

using namespace gml;
using gml::testing::central_fd;
using gml::testing::grad_rel_err;
using gml::testing::random_matrix;
using gml::testing::random_matrix_away_from_zero;

TEST_CASE("sigmoid of zero matrix is one half everywhere") {
    Tape t;
    int x = t.leaf(Matrix(2, 2));
    int y = t.sigmoid(x);
    for (double v : t.value(y).data) CHECK(v == 0.5);
}

TEST_CASE("relu clamps negatives") {
    Tape t;
    int x = t.leaf(Matrix::from_rows({{1.0, -1.0}}));
    int y = t.relu(x);
    CHECK(t.value(y).at(0, 0) == 1.0);
    CHECK(t.value(y).at(0, 1) == 0.0);
}

TEST_CASE("matmul by identity is identity map") {
    std::mt19937_64 rng(7);
    Matrix m = random_matrix(rng, 3, 5);
    Tape t;
    int im = t.leaf(Matrix::identity(3));
    int x = t.leaf(m);
    int y = t.matmul(im, x);
    CHECK(t.value(y).bit_equal(m));
}

TEST_CASE("sq_norm gradient is 2x") {
    Tape t;
    int x = t.leaf(Matrix::from_rows({{1.0, 2.0, 3.0}}), true);
    int y = t.sq_norm(x);
    t.backward(y);
    CHECK(t.grad(x).at(0, 0) == 2.0);
    CHECK(t.grad(x).at(0, 1) == 4.0);
    CHECK(t.grad(x).at(0, 2) == 6.0);
}

TEST_CASE("sigmoid derivative at zero is one quarter") {
    Tape t;
    int x = t.leaf(Matrix(1, 1), true);
    int y = t.sigmoid(x);
    t.backward(y);
    CHECK(t.grad(x).at(0, 0) == 0.25);
}

TEST_CASE("elu basics") {
    Tape t;
    int x = t.leaf(Matrix::from_rows({{0.0, -40.0, 2.0}}));
    int y = t.elu(x, 1.0);
    CHECK(t.value(y).at(0, 0) == 0.0);
    CHECK(t.value(y).at(0, 1) == Catch::Approx(-1.0).epsilon(1e-12)); // asymptote
    CHECK(t.value(y).at(0, 2) == 2.0);

    // derivative strictly positive on a grid over [-5, 5]
    for (int i = 0; i <= 100; ++i) {
        double z = -5.0 + 0.1 * i;
        Tape s;
        int xs = s.leaf(Matrix::from_rows({{z}}), true);
        int ys = s.elu(xs, 1.0);
        Matrix fd = central_fd(s, ys, xs);
        CHECK(fd.at(0, 0) > 0.0);
        s.backward(ys);
        CHECK(s.grad(xs).at(0, 0) > 0.0);
    }
}

namespace {

struct GradCase {
    const char* name;
    // returns (root, leaf ids to check)
    std::function<std::pair<int, std::vector<int>>(Tape&, std::mt19937_64&)> build;
};

void check_case(const GradCase& gc, uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tape t;
    auto [root, leaves] = gc.build(t, rng);
    t.backward(root);
    for (int leaf : leaves) {
        Matrix fd = central_fd(t, root, leaf);
        INFO(gc.name << " leaf " << leaf);
        CHECK(grad_rel_err(t.grad(leaf), fd) < 1e-6);
    }
}

std::vector<GradCase> gradient_cases() {
    return {
        {"matmul",
         [](Tape& t, std::mt19937_64& rng) {
             int a = t.leaf(random_matrix(rng, 3, 4), true);
             int b = t.leaf(random_matrix(rng, 4, 2), true);
             return std::pair{t.sq_norm(t.matmul(a, b)), std::vector{a, b}};
         }},
        {"add",
         [](Tape& t, std::mt19937_64& rng) {
             int a = t.leaf(random_matrix(rng, 3, 3), true);
             int b = t.leaf(random_matrix(rng, 3, 3), true);
             return std::pair{t.sq_norm(t.add(a, b)), std::vector{a, b}};
         }},
        {"hadamard",
         [](Tape& t, std::mt19937_64& rng) {
             int a = t.leaf(random_matrix(rng, 2, 5), true);
             int b = t.leaf(random_matrix(rng, 2, 5), true);
             return std::pair{t.sq_norm(t.hadamard(a, b)), std::vector{a, b}};
         }},
        {"relu",
         [](Tape& t, std::mt19937_64& rng) {
             int a = t.leaf(random_matrix_away_from_zero(rng, 3, 4), true);
             return std::pair{t.sq_norm(t.relu(a)), std::vector{a}};
         }},
        {"elu",
         [](Tape& t, std::mt19937_64& rng) {
             int a = t.leaf(random_matrix(rng, 3, 4), true);
             return std::pair{t.sq_norm(t.elu(a, 1.0)), std::vector{a}};
         }},
        {"sigmoid",
         [](Tape& t, std::mt19937_64& rng) {
             int a = t.leaf(random_matrix(rng, 4, 3), true);
             return std::pair{t.sq_norm(t.sigmoid(a)), std::vector{a}};
         }},
        {"softmax_row",
         [](Tape& t, std::mt19937_64& rng) {
             int a = t.leaf(random_matrix(rng, 3, 5), true);
             int w = t.leaf(random_matrix(rng, 3, 5));
             return std::pair{t.sq_norm(t.hadamard(t.softmax_row(a), w)), std::vector{a}};
         }},
        {"softmax_row masked",
         [](Tape& t, std::mt19937_64& rng) {
             auto mask = std::make_shared<Matrix>(3, 5);
             std::uniform_real_distribution<double> u(0, 1);
             for (int i = 0; i < 3; ++i)
                 for (int j = 1; j < 5; ++j)
                     if (u(rng) < 0.4) mask->at(i, j) = -1e30;
             int a = t.leaf(random_matrix(rng, 3, 5), true);
             int w = t.leaf(random_matrix(rng, 3, 5));
             return std::pair{t.sq_norm(t.hadamard(t.softmax_row(a, mask), w)),
                              std::vector{a}};
         }},
        {"concat_cols",
         [](Tape& t, std::mt19937_64& rng) {
             int a = t.leaf(random_matrix(rng, 3, 2), true);
             int b = t.leaf(random_matrix(rng, 3, 4), true);
             int w = t.leaf(random_matrix(rng, 6, 1));
             return std::pair{t.sq_norm(t.matmul(t.concat_cols(a, b), w)),
                              std::vector{a, b}};
         }},
        {"scale",
         [](Tape& t, std::mt19937_64& rng) {
             int a = t.leaf(random_matrix(rng, 2, 3), true);
             return std::pair{t.sq_norm(t.scale(a, -1.7)), std::vector{a}};
         }},
        {"sum",
         [](Tape& t, std::mt19937_64& rng) {
             int a = t.leaf(random_matrix(rng, 4, 4), true);
             return std::pair{t.sq_norm(t.sum(a)), std::vector{a}};
         }},
        {"sq_norm composed",
         [](Tape& t, std::mt19937_64& rng) {
             int a = t.leaf(random_matrix(rng, 3, 3), true);
             return std::pair{t.sq_norm(t.sigmoid(t.sq_norm(a))), std::vector{a}};
         }},
        {"transpose",
         [](Tape& t, std::mt19937_64& rng) {
             int a = t.leaf(random_matrix(rng, 2, 5), true);
             int b = t.leaf(random_matrix(rng, 2, 5));
             return std::pair{t.sq_norm(t.matmul(t.transpose(a), b)), std::vector{a}};
         }},
        {"log_softmax_nll",
         [](Tape& t, std::mt19937_64& rng) {
             int a = t.leaf(random_matrix(rng, 6, 4), true);
             auto labels = std::make_shared<std::vector<int>>();
             auto mask = std::make_shared<std::vector<std::uint8_t>>();
             std::uniform_int_distribution<int> lab(0, 3);
             for (int i = 0; i < 6; ++i) {
                 labels->push_back(lab(rng));
                 mask->push_back(i % 2 == 0);
             }
             return std::pair{t.log_softmax_nll(a, labels, mask), std::vector{a}};
         }},
        {"composite graph",
         [](Tape& t, std::mt19937_64& rng) {
             int x = t.leaf(random_matrix_away_from_zero(rng, 4, 3), true);
             int w1 = t.leaf(random_matrix(rng, 3, 5), true);
             int w2 = t.leaf(random_matrix(rng, 5, 2), true);
             int h = t.relu(t.matmul(x, w1));
             int z = t.sigmoid(t.matmul(h, w2));
             return std::pair{t.sq_norm(z), std::vector{x, w1, w2}};
         }},
    };
}

} // namespace

TEST_CASE("reverse-mode gradients match central finite differences") {
    for (const auto& gc : gradient_cases())
        for (uint64_t seed : {11u, 22u, 33u}) check_case(gc, seed);
}

TEST_CASE("STE contract: hard forward, untouched backward") {
    std::mt19937_64 rng(5);
    Matrix hard(3, 4);
    std::uniform_real_distribution<double> u(0, 1);
    for (double& v : hard.data) v = u(rng) < 0.5 ? 0.0 : 1.0;

    Tape t;
    int soft = t.leaf(random_matrix(rng, 3, 4), true);
    int p = t.sigmoid(soft);
    int x = t.ste(p, hard);
    CHECK(t.value(x).bit_equal(hard));

    int w = t.leaf(random_matrix(rng, 4, 2));
    int root = t.sq_norm(t.matmul(x, w));
    t.backward(root);

    // Reference: same downstream computation, hard values as a leaf.
    Tape ref;
    int xh = ref.leaf(hard, true);
    int wr = ref.leaf(t.value(w));
    int root2 = ref.sq_norm(ref.matmul(xh, wr));
    ref.backward(root2);

    CHECK(t.grad(p).bit_equal(ref.grad(xh)));

    // d(sum of STE output)/dP is all ones
    Tape t2;
    int soft2 = t2.leaf(random_matrix(rng, 2, 2), true);
    int p2 = t2.sigmoid(soft2);
    int x2 = t2.ste(p2, Matrix(2, 2, 1.0));
    t2.backward(t2.sum(x2));
    for (double v : t2.grad(p2).data) CHECK(v == 1.0);
}

TEST_CASE("backward is linear in the root") {
    std::mt19937_64 rng(99);
    const double ca = 0.75, cb = -2.5;

    Tape t;
    int x = t.leaf(random_matrix(rng, 3, 3), true);
    int f = t.sq_norm(t.sigmoid(x));
    int g = t.sum(t.hadamard(x, x));
    int combo = t.add(t.scale(f, ca), t.scale(g, cb));
    t.backward(combo);
    Matrix combined = t.grad(x);

    t.backward(f);
    Matrix gf = t.grad(x);
    t.backward(g);
    Matrix gg = t.grad(x);

    for (int i = 0; i < combined.size(); ++i)
        CHECK(combined.data[i] ==
              Catch::Approx(ca * gf.data[i] + cb * gg.data[i]).margin(1e-12));
}

TEST_CASE("identical tape and inputs give identical outputs and gradients") {
    auto run = [] {
        std::mt19937_64 rng(1234);
        Tape t;
        int x = t.leaf(random_matrix(rng, 5, 4), true);
        int w = t.leaf(random_matrix(rng, 4, 3), true);
        int root = t.sq_norm(t.softmax_row(t.matmul(x, w)));
        t.backward(root);
        return std::tuple{t.value(root).at(0, 0), t.grad(x), t.grad(w)};
    };
    auto [v1, gx1, gw1] = run();
    auto [v2, gx2, gw2] = run();
    CHECK(v1 == v2);
    CHECK(gx1.bit_equal(gx2));
    CHECK(gw1.bit_equal(gw2));
}

TEST_CASE("tape error paths") {
    Tape t;
    int a = t.leaf(Matrix(2, 3));
    int b = t.leaf(Matrix(2, 3));
    CHECK_THROWS_AS(t.matmul(a, b), DimensionError);

    int big = t.leaf(Matrix(1, 1, 1e308));
    CHECK_THROWS_AS(t.hadamard(big, big), NumericError); // overflows to inf

    int m = t.leaf(Matrix(2, 2));
    CHECK_THROWS_AS(t.backward(m), ConfigError);
}

TEST_CASE("rsqrt values and gradient") {
    Tape t;
    int x = t.leaf(Matrix::from_rows({{4.0, 1.0, 0.25}}), true);
    int y = t.rsqrt(x);
    CHECK(t.value(y).at(0, 0) == 0.5);
    CHECK(t.value(y).at(0, 1) == 1.0);
    CHECK(t.value(y).at(0, 2) == 2.0);

    int root = t.sq_norm(y);
    t.backward(root);
    Matrix fd = central_fd(t, root, x);
    CHECK(grad_rel_err(t.grad(x), fd) < 1e-6);

    Tape bad;
    int z = bad.leaf(Matrix::from_rows({{0.0}}));
    CHECK_THROWS_AS(bad.rsqrt(z), NumericError);
}
