#include <catch2/catch_amalgamated.hpp>

#include "fd_oracle.hpp"
#include "gml/jacobian.hpp"
#include "test_helpers.hpp"

using namespace gml;
using gml::testing::jacobi_eigenvalues;
using gml::testing::random_matrix;
using gml::testing::row_reduction_rank;

TEST_CASE("jacobi svd agrees with an independent eigensolve of A^T A") {
    std::mt19937_64 rng(41);
    for (auto [m, d] : {std::pair{6, 4}, {4, 6}, {5, 5}}) {
        Matrix a = random_matrix(rng, m, d);
        SvdResult svd = jacobi_svd(a);

        Matrix ata(d, d);
        matmul_tn_into(ata, a, a);
        auto ev = jacobi_eigenvalues(ata);
        std::sort(ev.begin(), ev.end(), std::greater<>());
        REQUIRE(svd.singular.size() == static_cast<size_t>(d));
        for (int i = 0; i < d; ++i)
            CHECK(svd.singular[i] * svd.singular[i] ==
                  Catch::Approx(std::max(ev[i], 0.0)).margin(1e-10));

        // right singular vectors: ||A v_j|| = sigma_j and V orthonormal
        for (int j = 0; j < d; ++j) {
            Matrix vj(d, 1);
            for (int i = 0; i < d; ++i) vj.at(i, 0) = svd.v.at(i, j);
            CHECK(frobenius_norm(matmul(a, vj)) ==
                  Catch::Approx(svd.singular[j]).margin(1e-10));
            CHECK(frobenius_norm(vj) == Catch::Approx(1.0).margin(1e-10));
        }
    }
}

TEST_CASE("jacobian of a linear map is the weight transpose") {
    std::mt19937_64 rng(3);
    Matrix w = random_matrix(rng, 5, 3);
    Matrix x = random_matrix(rng, 1, 5);
    Matrix j = jacobian(
        [&w](Tape& t, int x_leaf) { return t.matmul(x_leaf, t.leaf(w)); }, x);
    REQUIRE(j.rows == 3);
    REQUIRE(j.cols == 5);
    for (int i = 0; i < 3; ++i)
        for (int jj = 0; jj < 5; ++jj)
            CHECK(j.at(i, jj) == Catch::Approx(w.at(jj, i)).margin(1e-12));
}

TEST_CASE("relu map in its active region is still the weight transpose") {
    // W close to the identity and x well inside the positive orthant keep
    // every pre-activation strictly positive.
    std::mt19937_64 rng(5);
    Matrix w = Matrix::identity(4);
    Matrix noise = random_matrix(rng, 4, 4);
    for (int i = 0; i < 16; ++i) w.data[i] += 0.1 * noise.data[i];
    Matrix x(1, 4, 1.0);

    Matrix j = jacobian(
        [&w](Tape& t, int x_leaf) { return t.relu(t.matmul(x_leaf, t.leaf(w))); }, x);
    for (int i = 0; i < 4; ++i)
        for (int jj = 0; jj < 4; ++jj)
            CHECK(j.at(i, jj) == Catch::Approx(w.at(jj, i)).margin(1e-12));
}

TEST_CASE("random two-layer maps pass the built-in dual-route cross-check") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 5; ++trial) {
        Matrix w1 = random_matrix(rng, 6, 5);
        Matrix w2 = random_matrix(rng, 5, 3);
        Matrix x = random_matrix(rng, 1, 6);
        CHECK_NOTHROW(jacobian(
            [&](Tape& t, int x_leaf) {
                return t.matmul(t.sigmoid(t.matmul(x_leaf, t.leaf(w1))), t.leaf(w2));
            },
            x));
    }
}

TEST_CASE("a probe on an activation kink is reported as a numeric error") {
    Matrix x(1, 1); // relu kink sits exactly at zero
    CHECK_THROWS_AS(jacobian([](Tape& t, int x_leaf) { return t.relu(x_leaf); }, x),
                    NumericError);
}

TEST_CASE("local metamer dimension is input dim minus rank") {
    std::mt19937_64 rng(11);

    SECTION("generic full-rank wide map") {
        Matrix j = random_matrix(rng, 3, 5);
        JacobianReport rep = local_metamer_dimension(j);
        CHECK(rep.rank == 3);
        CHECK(rep.metamer_dim == 2);
    }
    SECTION("zero matrix") {
        JacobianReport rep = local_metamer_dimension(Matrix(3, 7));
        CHECK(rep.rank == 0);
        CHECK(rep.metamer_dim == 7);
    }
    SECTION("products of known rank match the row-reduction oracle") {
        for (int trial = 0; trial < 20; ++trial) {
            int d = 8, m = 5;
            std::uniform_int_distribution<int> rk(1, m);
            int r = rk(rng);
            Matrix j = matmul(random_matrix(rng, m, r), random_matrix(rng, r, d));
            JacobianReport rep = local_metamer_dimension(j);
            CHECK(rep.rank == row_reduction_rank(j));
            CHECK(rep.rank == r);
            CHECK(rep.metamer_dim == d - r);
        }
    }
    SECTION("dead relu units delete rows from the reachable map") {
        // J = diag(active) W^T: rank equals the row-deleted matrix's rank
        for (int trial = 0; trial < 10; ++trial) {
            int d = 6, m = 5;
            Matrix w = random_matrix(rng, d, m);
            std::uniform_int_distribution<int> coin(0, 1);
            std::vector<int> dead(m);
            for (int& v : dead) v = coin(rng);
            Matrix j(m, d);
            Matrix surviving(0, 0);
            std::vector<int> alive;
            for (int i = 0; i < m; ++i)
                if (!dead[i]) alive.push_back(i);
            surviving = Matrix(static_cast<int>(alive.size()), d);
            for (size_t r = 0; r < alive.size(); ++r)
                for (int c = 0; c < d; ++c) {
                    j.at(alive[r], c) = w.at(c, alive[r]);
                    surviving.at(static_cast<int>(r), c) = w.at(c, alive[r]);
                }
            JacobianReport rep = local_metamer_dimension(j);
            int expected = alive.empty() ? 0 : row_reduction_rank(surviving);
            CHECK(rep.rank == expected);
            CHECK(rep.metamer_dim == d - expected);
        }
    }
}

TEST_CASE("null directions are first-order flat") {
    std::mt19937_64 rng(13);
    Matrix w1 = random_matrix(rng, 7, 4);
    Matrix w2 = random_matrix(rng, 4, 3); // rank <= 3 < 7: null space exists
    auto fn = [&](Tape& t, int x_leaf) {
        return t.matmul(t.sigmoid(t.matmul(x_leaf, t.leaf(w1))), t.leaf(w2));
    };
    Matrix x = random_matrix(rng, 1, 7);
    Matrix j = jacobian(fn, x);
    SvdResult svd = jacobi_svd(j);
    JacobianReport rep = local_metamer_dimension(j);
    REQUIRE(rep.metamer_dim > 0);

    double sigma_off = svd.singular[rep.rank]; // largest below-threshold value
    auto eval = [&](const Matrix& point) {
        Tape t;
        int leaf = t.leaf(point);
        return t.value(fn(t, leaf));
    };
    Matrix f0 = eval(x);
    const double delta = 1e-4;
    for (int nullcol = rep.rank; nullcol < j.cols; ++nullcol) {
        Matrix moved = x;
        for (int i = 0; i < j.cols; ++i) moved.at(0, i) += delta * svd.v.at(i, nullcol);
        Matrix f1 = eval(moved);
        double dist = 0;
        for (int i = 0; i < f1.size(); ++i) {
            double e = f1.data[i] - f0.data[i];
            dist += e * e;
        }
        CHECK(std::sqrt(dist) <= 10 * delta * sigma_off + 100 * delta * delta);
    }
}

TEST_CASE("activation volume reports derivatives, determinant, zero count") {
    VolumeReport relu = activation_volume(Matrix::from_rows({{1, 2, 3}}),
                                          VolumeActivation::relu);
    CHECK(relu.determinant == 1.0);
    CHECK(relu.zero_count == 0);

    VolumeReport collapsed = activation_volume(Matrix::from_rows({{1, -1}}),
                                               VolumeActivation::relu);
    CHECK(collapsed.determinant == 0.0);
    CHECK(collapsed.zero_count == 1);

    VolumeReport sig = activation_volume(Matrix(1, 2), VolumeActivation::sigmoid);
    CHECK(sig.determinant == Catch::Approx(0.0625).margin(1e-15));

    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix z = random_matrix(rng, 1, 10, -4.0, 4.0);
        for (auto act : {VolumeActivation::relu, VolumeActivation::elu,
                         VolumeActivation::sigmoid}) {
            VolumeReport rep = activation_volume(z, act);
            CHECK(rep.determinant >= 0.0);
            CHECK(rep.determinant <= 1.0);
            if (act == VolumeActivation::elu) {
                CHECK(rep.zero_count == 0);
                CHECK(rep.determinant > 0.0);
            }
        }
    }
}

TEST_CASE("aggregate_node_input is a row of alpha times X") {
    std::mt19937_64 rng(19);
    Graph g = gml::testing::random_graph(rng, 8, 5, 0.4, 2);

    SECTION("isolated node with unit self weight") {
        Matrix alpha = Matrix::identity(g.n);
        Matrix x = aggregate_node_input(g, 2, alpha);
        for (int j = 0; j < 5; ++j) CHECK(x.at(0, j) == g.features.at(2, j));
    }
    SECTION("random alpha equals the dense product row") {
        Matrix alpha = random_matrix(rng, g.n, g.n);
        Matrix full = matmul(alpha, g.features);
        for (int v = 0; v < g.n; ++v) {
            Matrix x = aggregate_node_input(g, v, alpha);
            for (int j = 0; j < 5; ++j)
                CHECK(x.at(0, j) == Catch::Approx(full.at(v, j)).margin(1e-12));
        }
    }
}

TEST_CASE("node maps expose the per-architecture layer transforms") {
    std::mt19937_64 rng(23);
    Graph g = gml::testing::random_graph(rng, 10, 6, 0.35, 3);

    SECTION("gcn aggregate map: x_ref matches aggregate_node_input, J = W^T") {
        ModelConfig c;
        c.arch = Arch::gcn;
        c.layers = 2;
        c.hidden_dim = 7;
        c.num_classes = 3;
        c.in_dim = 6;
        c.seed = 2;
        Model m = build_model(c);
        NodeMapSpec spec;
        spec.node = 4;
        spec.post_activation = false;
        NodeMap map = make_node_map(m, g, spec);
        Matrix expect = aggregate_node_input(g, 4, normalize_adjacency(g.adjacency));
        REQUIRE(map.x_ref.cols == expect.cols);
        for (int j = 0; j < expect.cols; ++j)
            CHECK(map.x_ref.at(0, j) == Catch::Approx(expect.at(0, j)).margin(1e-12));

        Matrix jac = jacobian(map.fn, map.x_ref);
        const Matrix& w = m.weight("l1.w");
        for (int i = 0; i < jac.rows; ++i)
            for (int j = 0; j < jac.cols; ++j)
                CHECK(jac.at(i, j) == Catch::Approx(w.at(j, i)).margin(1e-12));
    }

    SECTION("every architecture's layer-1 map passes the dual-route check") {
        for (Arch arch : gml::testing::all_archs()) {
            INFO(arch_name(arch));
            ModelConfig c;
            c.arch = arch;
            c.layers = 2;
            c.hidden_dim = 8;
            c.num_classes = 3;
            c.in_dim = 6;
            c.seed = 5;
            Model m = build_model(c);
            for (auto variant : {JacobianVariant::aggregate, JacobianVariant::full_input}) {
                NodeMapSpec spec;
                spec.node = 1;
                spec.variant = variant;
                NodeMap map = make_node_map(m, g, spec);
                Matrix jac = jacobian(map.fn, map.x_ref);
                CHECK(jac.rows == map.output_dim);
                CHECK(jac.cols == map.input_dim);
                JacobianReport rep = local_metamer_dimension(jac);
                CHECK(rep.rank <= std::min(map.output_dim, map.input_dim));
                CHECK(rep.metamer_dim == map.input_dim - rep.rank);
            }
        }
    }

    SECTION("sage concat_self widens the input") {
        ModelConfig c;
        c.arch = Arch::sage;
        c.layers = 2;
        c.hidden_dim = 8;
        c.num_classes = 3;
        c.in_dim = 6;
        c.seed = 7;
        Model m = build_model(c);
        NodeMapSpec spec;
        spec.node = 0;
        spec.variant = JacobianVariant::concat_self;
        NodeMap map = make_node_map(m, g, spec);
        CHECK(map.input_dim == 12);
        CHECK_NOTHROW(jacobian(map.fn, map.x_ref));
    }

    SECTION("full gcn map equals the scaled aggregate map") {
        ModelConfig c;
        c.arch = Arch::gcn;
        c.layers = 2;
        c.hidden_dim = 7;
        c.num_classes = 3;
        c.in_dim = 6;
        c.seed = 11;
        Model m = build_model(c);
        const int v = 3;

        NodeMapSpec agg_spec;
        agg_spec.node = v;
        NodeMap agg = make_node_map(m, g, agg_spec);
        NodeMapSpec full_spec;
        full_spec.node = v;
        full_spec.variant = JacobianVariant::full_input;
        NodeMap full = make_node_map(m, g, full_spec);

        Matrix j_agg = jacobian(agg.fn, agg.x_ref);
        Matrix j_full = jacobian(full.fn, full.x_ref);
        double self_weight = normalize_adjacency(g.adjacency).at(v, v);
        for (int i = 0; i < j_full.rows; ++i)
            for (int j = 0; j < j_full.cols; ++j)
                CHECK(j_full.at(i, j) ==
                      Catch::Approx(self_weight * j_agg.at(i, j)).margin(1e-9));
    }
}
