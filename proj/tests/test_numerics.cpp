#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dualrec/autograd.hpp"
#include "dualrec/optim.hpp"
#include "dualrec/tensor.hpp"

using namespace dualrec;

TEST_CASE("tensor shape bookkeeping") {
    Tensor t({2, 3});
    REQUIRE(t.size() == 6);
    REQUIRE(t.rows() == 2);
    REQUIRE(t.cols() == 3);
    t.at(1, 2) = 7.0;
    REQUIRE(t.data[5] == 7.0);
    REQUIRE_THROWS_AS(Tensor({2, 0}), std::invalid_argument);
    REQUIRE_THROWS_AS(Tensor({2}, {1.0, 2.0, 3.0}), std::invalid_argument);
}

TEST_CASE("rng determinism and moments") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.uniform() == b.uniform());
    Rng c(7);
    double sum = 0.0, sumsq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double v = c.normal();
        sum += v;
        sumsq += v * v;
    }
    REQUIRE(std::abs(sum / n) < 0.03);
    REQUIRE(std::abs(sumsq / n - 1.0) < 0.05);
}

TEST_CASE("backward: sum gives all-ones gradient") {
    ParamStore store;
    store.create("x", Tensor({3}, {1.0, 2.0, 3.0}));
    Tape tape;
    auto x = tape.param(store, "x");
    const double loss = tape.backward(tape.sum(x));
    REQUIRE(loss == 6.0);
    for (int i = 0; i < 3; ++i) REQUIRE(store.grad("x").at(i) == 1.0);
}

TEST_CASE("backward: dot(x,x) gradient is 2x") {
    // loss = x.x with x = (1,2) -> grad = (2,4), hand differentiated
    ParamStore store;
    store.create("x", Tensor({2}, {1.0, 2.0}));
    Tape tape;
    auto x = tape.param(store, "x");
    const double loss = tape.backward(tape.dot(x, x));
    REQUIRE(loss == 5.0);
    REQUIRE(store.grad("x").at(0) == 2.0);
    REQUIRE(store.grad("x").at(1) == 4.0);
}

TEST_CASE("backward: constant loss leaves all gradients zero") {
    ParamStore store;
    store.create("x", Tensor({2}, {1.0, 2.0}));
    Tape tape;
    tape.param(store, "x");  // reachable but not contributing
    const double loss = tape.backward(tape.constant(3.5));
    REQUIRE(loss == 3.5);
    REQUIRE(store.grad("x").at(0) == 0.0);
    REQUIRE(store.grad("x").at(1) == 0.0);
}

TEST_CASE("backward rejects non-scalar loss") {
    ParamStore store;
    store.create("x", Tensor({2}, {1.0, 2.0}));
    Tape tape;
    auto x = tape.param(store, "x");
    REQUIRE_THROWS_AS(tape.backward(x), std::logic_error);
}

TEST_CASE("backward is deterministic bit for bit") {
    auto run = [] {
        ParamStore store;
        Rng rng(11);
        store.create("w", randn(rng, {4, 4}));
        store.create("b", randn(rng, {4}));
        Tape tape;
        auto x = tape.input(randn(rng, {3, 4}));
        auto h = tape.gelu(tape.affine(x, tape.param(store, "w"), tape.param(store, "b")));
        tape.backward(tape.sum_sq(h));
        return store.grad("w").data;
    };
    REQUIRE(run() == run());
}

TEST_CASE("adam: two hand-computed steps on a scalar parameter") {
    // lr=0.1, b1=0.9, b2=0.999, eps=1e-8, grads 0.5 then -0.25
    ParamStore store;
    store.create("p", Tensor::scalar(1.0));
    AdamT<double> adam;
    adam.lr = 0.1;

    store.grad("p").data[0] = 0.5;
    adam.step(store);
    // m=0.05, v=0.00025; mhat=0.5, vhat=0.25; p = 1 - 0.1*0.5/(0.5+1e-8)
    double m = 0.1 * 0.5;
    double v = 0.001 * 0.25;
    double p = 1.0 - 0.1 * (m / 0.1) / (std::sqrt(v / 0.001) + 1e-8);
    REQUIRE(store.value("p").item() == Catch::Approx(p).epsilon(1e-14));

    store.zero_grads();
    store.grad("p").data[0] = -0.25;
    adam.step(store);
    m = 0.9 * m + 0.1 * (-0.25);
    v = 0.999 * v + 0.001 * 0.0625;
    const double mhat = m / (1.0 - 0.9 * 0.9);
    const double vhat = v / (1.0 - 0.999 * 0.999);
    p -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    REQUIRE(store.value("p").item() == Catch::Approx(p).epsilon(1e-14));
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    ParamStore store;
    store.create("p", Tensor({3}, {1.0, -2.0, 0.5}));
    AdamT<double> adam;
    const auto before = store.value("p").data;
    adam.step(store);
    adam.step(store);
    REQUIRE(store.value("p").data == before);
}

TEST_CASE("adam: zero learning rate leaves parameters unchanged") {
    ParamStore store;
    store.create("p", Tensor({2}, {1.0, 2.0}));
    AdamT<double> adam;
    adam.lr = 0.0;
    store.grad("p").data = {3.0, -1.0};
    adam.step(store);
    REQUIRE(store.value("p").data == std::vector<double>{1.0, 2.0});
}

TEST_CASE("adam aborts on NaN gradient naming the parameter") {
    ParamStore store;
    store.create("bad_param", Tensor::scalar(1.0));
    AdamT<double> adam;
    store.grad("bad_param").data[0] = std::nan("");
    REQUIRE_THROWS_WITH(adam.step(store), Catch::Matchers::ContainsSubstring("bad_param"));
}

TEST_CASE("grad_check: quadratic loss within 1e-6") {
    ParamStore store;
    Rng rng(3);
    store.create("x", randn(rng, {5}));
    auto loss_fn = [](ParamStore& s) {
        Tape tape;
        auto x = tape.param(s, "x");
        return tape.backward(tape.sum_sq(x));
    };
    auto report = grad_check<double>(loss_fn, store, 1e-5);
    REQUIRE(report.deterministic);
    REQUIRE(report.max_rel_err <= 1e-6);
}

TEST_CASE("grad_check: constant loss, both sides zero") {
    ParamStore store;
    store.create("x", Tensor({2}, {1.0, 2.0}));
    auto loss_fn = [](ParamStore& s) {
        Tape tape;
        tape.param(s, "x");
        return tape.backward(tape.constant(2.0));
    };
    auto report = grad_check<double>(loss_fn, store, 1e-5);
    REQUIRE(report.max_rel_err == 0.0);
}

TEST_CASE("grad_check flags a non-deterministic loss as untestable") {
    ParamStore store;
    store.create("x", Tensor::scalar(1.0));
    int calls = 0;
    std::function<double(ParamStore&)> loss_fn = [&calls](ParamStore& s) {
        Tape tape;
        auto x = tape.param(s, "x");
        return tape.backward(tape.scale(x, 1.0 + 0.1 * calls++));
    };
    auto report = grad_check<double>(loss_fn, store, 1e-5);
    REQUIRE_FALSE(report.deterministic);
    REQUIRE_FALSE(report.passed(1e-3));
}

TEST_CASE("grad_check: composite graph of supported ops") {
    ParamStore store;
    Rng rng(17);
    store.create("w1", randn(rng, {4, 6}, 0.5));
    store.create("b1", randn(rng, {6}, 0.1));
    store.create("w2", randn(rng, {6, 3}, 0.5));
    store.create("b2", randn(rng, {3}, 0.1));
    store.create("g", Tensor::full({4}, 1.0));
    store.create("c", Tensor::full({4}, 0.0));
    store.create("table", randn(rng, {5, 4}, 0.8));
    auto loss_fn = [](ParamStore& s) {
        Tape tape;
        auto x = tape.gather_rows(tape.param(s, "table"), {0, 2, 4, 1});
        x = tape.layer_norm_rows(x, tape.param(s, "g"), tape.param(s, "c"));
        auto h = tape.gelu(tape.affine(x, tape.param(s, "w1"), tape.param(s, "b1")));
        auto logits = tape.affine(h, tape.param(s, "w2"), tape.param(s, "b2"));
        auto ce = tape.cross_entropy_rows(logits, {0, 1, 2, 1}, {1.0, 1.0, 0.0, 1.0});
        auto sm = tape.softmax_rows(logits);
        auto reg = tape.scale(tape.sum_sq(tape.l2_normalize_rows(h)), 0.05);
        return tape.backward(tape.add(ce, tape.add(reg, tape.scale(tape.mean(sm), 0.3))));
    };
    auto report = grad_check<double>(loss_fn, store, 1e-6);
    INFO("max rel err " << report.max_rel_err);
    REQUIRE(report.passed(1e-5));
}

TEST_CASE("grad_check: attention, masks, routing regularizers") {
    ParamStore store;
    Rng rng(23);
    store.create("q", randn(rng, {5, 8}, 0.7));
    store.create("k", randn(rng, {5, 8}, 0.7));
    store.create("v", randn(rng, {5, 8}, 0.7));
    store.create("alpha_logits", randn(rng, {6}, 0.4));
    auto loss_fn = [](ParamStore& s) {
        Tape tape;
        auto attn = tape.multi_head_attention(tape.param(s, "q"), tape.param(s, "k"), tape.param(s, "v"), 2, true);
        auto alphas = tape.sigmoid(tape.param(s, "alpha_logits"));
        auto lb = tape.load_balance(alphas, {0, 0, 1, 1, 2, 2}, 3);
        auto sm = tape.adjacent_smoothness(alphas, {3, 1, 4, 0, 5, 2});
        auto mask = tape.soft_mask(tape.select(alphas, 0), 4, 0.25);
        auto loss = tape.add(tape.sum_sq(attn), tape.add(lb, tape.add(sm, tape.sum(mask))));
        return tape.backward(loss);
    };
    auto report = grad_check<double>(loss_fn, store, 1e-6);
    INFO("max rel err " << report.max_rel_err);
    REQUIRE(report.passed(1e-5));
}

TEST_CASE("float instantiation: 32-bit tape passes at relaxed tolerance") {
    ParamStoreT<float> store;
    Rng rng(5);
    store.create("w", randn<float>(rng, {3, 3}, 0.5f));
    auto loss_fn = [](ParamStoreT<float>& s) {
        TapeT<float> tape;
        auto w = tape.param(s, "w");
        return tape.backward(tape.sum_sq(tape.sigmoid(w)));
    };
    auto report = grad_check<float>(loss_fn, store, 1e-2f);
    REQUIRE(report.passed(1e-3f));
}

TEST_CASE("detach blocks gradient flow (straight-through building block)") {
    ParamStore store;
    store.create("z", Tensor({2}, {0.3, -0.4}));
    store.create("q", Tensor({2}, {1.0, 0.0}));
    Tape tape;
    auto z = tape.param(store, "z");
    auto q = tape.param(store, "q");
    // straight-through: value of q, gradient of z
    auto st = tape.add(z, tape.detach(tape.sub(q, z)));
    REQUIRE(tape.val(st).data == std::vector<double>{1.0, 0.0});
    tape.backward(tape.sum_sq(st));
    REQUIRE(store.grad("z").at(0) == 2.0);  // d/dz sum(st^2) = 2*st
    REQUIRE(store.grad("z").at(1) == 0.0);
    REQUIRE(store.grad("q").at(0) == 0.0);
    REQUIRE(store.grad("q").at(1) == 0.0);
}

TEST_CASE("softmax rows sum to one and select/mul_scalar compose") {
    Tape tape;
    auto x = tape.input(Tensor({2, 3}, {1.0, 2.0, 3.0, -1.0, 0.0, 1.0}));
    auto y = tape.softmax_rows(x);
    for (int i = 0; i < 2; ++i) {
        double s = 0.0;
        for (int j = 0; j < 3; ++j) s += tape.val(y).at(i, j);
        REQUIRE(s == Catch::Approx(1.0).margin(1e-12));
    }
    auto picked = tape.select(y, 2);
    auto scaled = tape.mul_scalar(x, picked);
    REQUIRE(tape.val(scaled).at(0, 0) == Catch::Approx(tape.val(y).at(0, 2) * 1.0));
}
