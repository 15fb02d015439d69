#include <catch2/catch_amalgamated.hpp>

#include "dualrec/optim.hpp"
#include "dualrec/route.hpp"

using namespace dualrec;

TEST_CASE("baseline gate follows the sigmoid of log popularity") {
    REQUIRE(baseline_gate(5.0, 0.0, 0.3) == Catch::Approx(Tape::sigmoid_val(0.3)));
    REQUIRE(baseline_gate(100.0, 0.0, 0.3) == baseline_gate(1.0, 0.0, 0.3));
    REQUIRE(baseline_gate(1e12, 2.0, 0.0) > 0.999999);
    REQUIRE(baseline_gate(std::exp(1.0), 1.0, 0.0) == Catch::Approx(0.7310585786).margin(1e-9));
    REQUIRE_THROWS_AS(baseline_gate(0.0, 1.0, 0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(baseline_gate(-2.0, 1.0, 0.0), std::invalid_argument);

    // strictly increasing in popularity when w > 0
    double prev = baseline_gate(0.5, 1.3, -0.2);
    for (double pop : {1.0, 2.0, 7.0, 40.0, 900.0}) {
        const double g = baseline_gate(pop, 1.3, -0.2);
        REQUIRE(g > prev);
        prev = g;
    }
}

TEST_CASE("baseline allocation uses the floor rule") {
    REQUIRE(baseline_allocate(1.0, 4) == std::pair<int, int>{4, 0});
    REQUIRE(baseline_allocate(0.6, 5) == std::pair<int, int>{3, 2});
    REQUIRE(baseline_allocate(0.5, 3) == std::pair<int, int>{1, 2});
    REQUIRE(baseline_allocate(0.0, 3) == std::pair<int, int>{0, 3});
}

TEST_CASE("hard allocation rounds half up") {
    REQUIRE(hard_allocate(0.5, 4) == std::pair<int, int>{2, 2});
    REQUIRE(hard_allocate(0.5, 3) == std::pair<int, int>{2, 1});
    REQUIRE(hard_allocate(0.26, 4) == std::pair<int, int>{1, 3});
    REQUIRE(hard_allocate(0.0, 5) == std::pair<int, int>{0, 5});
    REQUIRE(hard_allocate(1.0, 5) == std::pair<int, int>{5, 0});
}

TEST_CASE("allocation conservation over random draws") {
    Rng rng(55);
    for (int trial = 0; trial < 10000; ++trial) {
        const double alpha = rng.uniform();
        const int total = 3 + rng.index(4);
        const auto [hc, hs] = hard_allocate(alpha, total);
        REQUIRE(hc + hs == total);
        REQUIRE(hc >= 0);
        REQUIRE(hs >= 0);
        const auto [bc, bs] = baseline_allocate(alpha, total);
        REQUIRE(bc + bs == total);
        REQUIRE(bc >= 0);
        REQUIRE(bs >= 0);
    }
}

TEST_CASE("soft masks reproduce the sigma schedule at alpha one half") {
    const auto m = soft_mask_values(0.5, 4, 0.1);
    REQUIRE(m[0] == Catch::Approx(Tape::sigmoid_val(15.0)).margin(1e-9));
    REQUIRE(m[1] == Catch::Approx(Tape::sigmoid_val(5.0)).margin(1e-9));
    REQUIRE(m[2] == Catch::Approx(Tape::sigmoid_val(-5.0)).margin(1e-9));
    REQUIRE(m[3] == Catch::Approx(Tape::sigmoid_val(-15.0)).margin(1e-9));
}

TEST_CASE("soft masks vanish at alpha zero and decrease in k") {
    const auto m = soft_mask_values(0.0, 6, 0.1);
    for (double v : m) REQUIRE(v < 0.01);
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const auto mm = soft_mask_values(rng.uniform(), 2 + rng.index(5), 0.05 + rng.uniform());
        for (size_t k = 1; k < mm.size(); ++k) REQUIRE(mm[k] <= mm[k - 1]);
    }
}

TEST_CASE("soft mask totals approach the budget away from half-integers") {
    Rng rng(17);
    for (int trial = 0; trial < 500; ++trial) {
        const int total = 3 + rng.index(4);
        const double alpha = rng.uniform();
        const double col_share = alpha * total;
        const double frac = std::abs(col_share - std::floor(col_share) - 0.5);
        if (frac < 0.3 / total) continue;  // near a mask step boundary
        const auto mc = soft_mask_values(alpha, total, 0.01);
        const auto ms = soft_mask_values(1.0 - alpha, total, 0.01);
        double sum = 0.0;
        for (double v : mc) sum += v;
        for (double v : ms) sum += v;
        REQUIRE(sum == Catch::Approx(static_cast<double>(total)).margin(1e-5));
    }
}

TEST_CASE("router gives alpha one half for equal logits") {
    ParamStore store;
    RouterConfig cfg;
    store.create("router.w1", Tensor::zeros({4, cfg.hidden}));
    store.create("router.b1", Tensor::zeros({cfg.hidden}));
    store.create("router.w2", Tensor::zeros({cfg.hidden, 2}));
    store.create("router.b2", Tensor::zeros({2}));
    REQUIRE(route_alpha(store, cfg, {0.3, 0.1, 0.9, 0.0}) == 0.5);
}

TEST_CASE("router saturates as the temperature drops") {
    ParamStore store;
    RouterConfig cfg;
    cfg.hidden = 1;
    store.create("router.w1", Tensor({4, 1}, {1.0, 0.0, 0.0, 0.0}));
    store.create("router.b1", Tensor::zeros({1}));
    store.create("router.w2", Tensor({1, 2}, {1.0, -1.0}));
    store.create("router.b2", Tensor::zeros({2}));
    cfg.tau_r = 1e-3;
    REQUIRE(route_alpha(store, cfg, {2.0, 0, 0, 0}) > 0.999999);  // z_col > z_sem
}

TEST_CASE("hand-set one-hidden-unit router matches the closed form") {
    ParamStore store;
    RouterConfig cfg;
    cfg.hidden = 1;
    cfg.tau_r = 0.5;
    store.create("router.w1", Tensor({4, 1}, {0.5, -0.25, 1.0, 2.0}));
    store.create("router.b1", Tensor({1}, {0.1}));
    store.create("router.w2", Tensor({1, 2}, {0.8, -0.3}));
    store.create("router.b2", Tensor({2}, {0.05, -0.02}));
    const std::array<double, 4> x{0.4, 0.6, 0.2, 0.1};
    const double h = std::max(0.0, 0.5 * 0.4 - 0.25 * 0.6 + 1.0 * 0.2 + 2.0 * 0.1 + 0.1);
    const double z0 = (0.8 * h + 0.05) / 0.5;
    const double z1 = (-0.3 * h - 0.02) / 0.5;
    const double expected = std::exp(z0) / (std::exp(z0) + std::exp(z1));
    REQUIRE(route_alpha(store, cfg, x) == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("tape and raw router paths agree and are permutation equivariant") {
    ParamStore store;
    Rng rng(23);
    RouterConfig cfg;
    init_router_params(store, cfg, rng);
    Tensor feats = randn(rng, {6, 4});
    Tape tape;
    auto alphas = route_alphas(tape, store, cfg, tape.input(feats));
    for (int i = 0; i < 6; ++i) {
        std::array<double, 4> x;
        std::copy(feats.row_ptr(i), feats.row_ptr(i) + 4, x.begin());
        REQUIRE(tape.val(alphas).at(i) == Catch::Approx(route_alpha(store, cfg, x)).epsilon(1e-12));
    }
    // permuting the batch permutes the outputs
    Tensor permuted({6, 4});
    const std::vector<int> perm{3, 0, 5, 1, 4, 2};
    for (int i = 0; i < 6; ++i)
        std::copy(feats.row_ptr(perm[static_cast<size_t>(i)]), feats.row_ptr(perm[static_cast<size_t>(i)]) + 4,
                  permuted.row_ptr(i));
    Tape tape2;
    auto alphas2 = route_alphas(tape2, store, cfg, tape2.input(permuted));
    for (int i = 0; i < 6; ++i)
        REQUIRE(tape2.val(alphas2).at(i) == tape.val(alphas).at(perm[static_cast<size_t>(i)]));
}

TEST_CASE("load balance extrema and fused-op agreement") {
    REQUIRE(load_balance_value({0.5, 0.5, 0.5}, {0, 0, 1}, 2) == 1.0);
    REQUIRE(load_balance_value({1.0, 1.0}, {0, 0}, 1) == 2.0);
    REQUIRE(load_balance_value({0.5, 0.5, 1.0}, {0, 0, 1}, 2) == Catch::Approx(1.5));
    REQUIRE_THROWS_AS(load_balance_value({}, {}, 2), std::invalid_argument);

    Rng rng(9);
    for (int trial = 0; trial < 30; ++trial) {
        const int n = 2 + rng.index(10);
        std::vector<double> alphas(static_cast<size_t>(n));
        std::vector<int> bands(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            alphas[static_cast<size_t>(i)] = rng.uniform();
            bands[static_cast<size_t>(i)] = rng.index(3);
        }
        REQUIRE(load_balance_value(alphas, bands, 3) >= 1.0 - 1e-12);
        Tape tape;
        auto node = tape.load_balance(tape.input(Tensor({n}, std::vector<double>(alphas))), bands, 3);
        REQUIRE(tape.val(node).item() == Catch::Approx(load_balance_value(alphas, bands, 3)).epsilon(1e-12));
    }
}

TEST_CASE("load balance strictly increases under unilateral deviation") {
    for (double mag : {0.01, 0.05, 0.1, 0.25, 0.5}) {
        std::vector<double> alphas(6, 0.5);
        const double base = load_balance_value(alphas, {0, 0, 0, 1, 1, 1}, 2);
        alphas[2] = 0.5 + mag;
        REQUIRE(load_balance_value(alphas, {0, 0, 0, 1, 1, 1}, 2) > base);
        alphas[2] = 0.5 - mag;
        REQUIRE(load_balance_value(alphas, {0, 0, 0, 1, 1, 1}, 2) > base);
    }
}

TEST_CASE("smoothness loss over the popularity ordering") {
    std::vector<std::int64_t> counts{100, 10, 1};
    const auto order = smoothness_order(counts, {0, 1, 2});
    REQUIRE(order == std::vector<int>{2, 1, 0});  // ascending popularity
    REQUIRE(smoothness_value({0.7, 0.7, 0.7}, order) == 0.0);
    REQUIRE(smoothness_value({1.0, 0.0}, {0, 1}) == 1.0);
    // alphas (0, 0.5, 1) in popularity order
    REQUIRE(smoothness_value({1.0, 0.5, 0.0}, order) == Catch::Approx(0.25));
    REQUIRE(smoothness_value({0.4}, {0}) == 0.0);

    Tape tape;
    auto node = tape.adjacent_smoothness(tape.input(Tensor({3}, {1.0, 0.5, 0.0})), order);
    REQUIRE(tape.val(node).item() == Catch::Approx(0.25));
}

TEST_CASE("smoothness strictly increases under unilateral deviation") {
    const std::vector<int> order{0, 1, 2, 3};
    for (double mag : {0.01, 0.05, 0.1, 0.3, 0.6}) {
        std::vector<double> alphas(4, 0.4);
        alphas[1] = 0.4 + mag;
        REQUIRE(smoothness_value(alphas, order) > 0.0);
    }
}

TEST_CASE("tape soft_mask matches the raw schedule") {
    Tape tape;
    auto alpha = tape.constant(0.37);
    auto mask = tape.soft_mask(alpha, 5, 0.1);
    const auto raw = soft_mask_values(0.37, 5, 0.1);
    for (int k = 0; k < 5; ++k) REQUIRE(tape.val(mask).at(k) == Catch::Approx(raw[static_cast<size_t>(k)]).epsilon(1e-15));
}

TEST_CASE("router feature vector stays in documented ranges") {
    std::vector<Interaction> rows;
    for (int u = 0; u < 4; ++u)
        for (int t = 0; t < 6; ++t)
            rows.push_back({"u" + std::to_string(u), "i" + std::to_string((u + t) % 5), static_cast<std::int64_t>(t)});
    auto ds = leave_last_out_split(build_sequences(rows));
    auto stats = compute_item_stats(ds);
    for (int i = 0; i < ds.num_items(); ++i) {
        const auto x = router_features(stats, i);
        REQUIRE(x[0] >= 0.0);
        REQUIRE(x[0] <= std::log(2.0) + 1e-12);
        REQUIRE(x[1] >= 0.0);
        REQUIRE(x[1] <= 1.0);
        REQUIRE(x[2] > 0.0);
        REQUIRE(x[2] <= 1.0);
        REQUIRE(x[3] >= 0.0);
        REQUIRE(x[3] <= 1.0);
    }
}
