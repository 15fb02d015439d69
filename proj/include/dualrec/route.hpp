#pragma once

// Popularity-aware token allocation: the baseline sigmoid gate, the MoE
// router over item features, differentiable soft masks, hard discretization,
// and the load-balance / smoothness regularizers.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualrec/autograd.hpp"
#include "dualrec/data.hpp"
#include "dualrec/tensor.hpp"

namespace dualrec {

// x_i = [log(1+f_i), age_i, sparsity_i, uncertainty_i]
inline std::array<double, 4> router_features(const ItemStats& stats, int item) {
    return {std::log1p(stats.frequency[static_cast<size_t>(item)]), stats.age[static_cast<size_t>(item)],
            stats.sparsity[static_cast<size_t>(item)], stats.uncertainty[static_cast<size_t>(item)]};
}

inline Tensor router_feature_matrix(const ItemStats& stats, const std::vector<int>& items) {
    Tensor out({static_cast<int>(items.size()), 4});
    for (size_t i = 0; i < items.size(); ++i) {
        const auto x = router_features(stats, items[i]);
        std::copy(x.begin(), x.end(), out.row_ptr(static_cast<int>(i)));
    }
    return out;
}

struct RouterConfig {
    int hidden = 16;
    double tau_r = 1.0;  // routing softmax temperature
    double tau_m = 0.1;  // mask temperature
    double init_std = 0.3;
};

inline void init_router_params(ParamStore& store, const RouterConfig& cfg, Rng& rng) {
    store.create("router.w1", randn(rng, {4, cfg.hidden}, cfg.init_std));
    store.create("router.b1", Tensor::zeros({cfg.hidden}));
    store.create("router.w2", randn(rng, {cfg.hidden, 2}, cfg.init_std));
    store.create("router.b2", Tensor::zeros({2}));
}

// alpha_i = softmax(logits / tau_r)[col] for each feature row; output (n,1)
inline Tape::Id route_alphas(Tape& tape, ParamStore& store, const RouterConfig& cfg, Tape::Id features) {
    auto h = tape.relu(tape.affine(features, tape.param(store, "router.w1"), tape.param(store, "router.b1")));
    auto logits = tape.affine(h, tape.param(store, "router.w2"), tape.param(store, "router.b2"));
    auto probs = tape.softmax_rows(tape.scale(logits, 1.0 / cfg.tau_r));
    auto pick_col = tape.input(Tensor({2, 1}, {1.0, 0.0}));
    return tape.matmul(probs, pick_col);
}

// tape-free router evaluation, numerically identical to route_alphas
inline double route_alpha(const ParamStore& store, const RouterConfig& cfg, const std::array<double, 4>& x) {
    const auto& w1 = store.value("router.w1");
    const auto& b1 = store.value("router.b1");
    const auto& w2 = store.value("router.w2");
    const auto& b2 = store.value("router.b2");
    std::vector<double> h(static_cast<size_t>(cfg.hidden), 0.0);
    for (int j = 0; j < cfg.hidden; ++j) {
        double acc = b1.at(j);
        for (int p = 0; p < 4; ++p) acc += x[static_cast<size_t>(p)] * w1.at(p, j);
        h[static_cast<size_t>(j)] = std::max(acc, 0.0);
    }
    double z[2];
    for (int j = 0; j < 2; ++j) {
        double acc = b2.at(j);
        for (int p = 0; p < cfg.hidden; ++p) acc += h[static_cast<size_t>(p)] * w2.at(p, j);
        z[j] = acc / cfg.tau_r;
    }
    const double mx = std::max(z[0], z[1]);
    const double e0 = std::exp(z[0] - mx), e1 = std::exp(z[1] - mx);
    return e0 / (e0 + e1);
}

// g(i) = sigmoid(w * log(pop) + b)
inline double baseline_gate(double pop, double w, double b) {
    if (!(pop > 0.0)) throw std::invalid_argument("baseline_gate: popularity must be positive");
    return Tape::sigmoid_val(w * std::log(pop) + b);
}

// floor rule: L_cf = floor(g * L), L_sem = L - L_cf
inline std::pair<int, int> baseline_allocate(double g, int total) {
    if (g < 0.0 || g > 1.0) throw std::invalid_argument("baseline_allocate: gate must be in [0,1]");
    const int cf = std::min(total, static_cast<int>(std::floor(g * static_cast<double>(total))));
    return {cf, total - cf};
}

// round-half-up discretization used at inference
inline std::pair<int, int> hard_allocate(double alpha, int total) {
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("hard_allocate: alpha must be in [0,1]");
    int col = static_cast<int>(std::floor(alpha * static_cast<double>(total) + 0.5));
    col = std::clamp(col, 0, total);
    return {col, total - col};
}

// m_k = sigmoid((share*L - (k - 1/2)) / tau_m), k = 1..L
inline std::vector<double> soft_mask_values(double share, int total, double tau_m) {
    std::vector<double> m(static_cast<size_t>(total));
    for (int k = 1; k <= total; ++k)
        m[static_cast<size_t>(k - 1)] =
            Tape::sigmoid_val((share * static_cast<double>(total) - (static_cast<double>(k) - 0.5)) / tau_m);
    return m;
}

struct Allocation {
    double alpha = 0.5;
    std::vector<double> mask_col;
    std::vector<double> mask_sem;
    int l_col = 0;
    int l_sem = 0;
};

inline Allocation make_allocation(double alpha, int total, double tau_m) {
    Allocation a;
    a.alpha = alpha;
    a.mask_col = soft_mask_values(alpha, total, tau_m);
    a.mask_sem = soft_mask_values(1.0 - alpha, total, tau_m);
    std::tie(a.l_col, a.l_sem) = hard_allocate(alpha, total);
    return a;
}

// per band b: 2*(mean^2 + (1-mean)^2), averaged over non-empty bands;
// minimum 1 exactly when every band mean is 1/2
inline double load_balance_value(const std::vector<double>& alphas, const std::vector<int>& bands, int num_bands) {
    if (alphas.empty()) throw std::invalid_argument("load_balance: empty batch");
    std::vector<double> sum(static_cast<size_t>(num_bands), 0.0);
    std::vector<int> count(static_cast<size_t>(num_bands), 0);
    for (size_t i = 0; i < alphas.size(); ++i) {
        sum[static_cast<size_t>(bands[i])] += alphas[i];
        ++count[static_cast<size_t>(bands[i])];
    }
    double loss = 0.0;
    int nonempty = 0;
    for (int b = 0; b < num_bands; ++b) {
        if (count[static_cast<size_t>(b)] == 0) continue;
        const double mu = sum[static_cast<size_t>(b)] / count[static_cast<size_t>(b)];
        loss += 2.0 * (mu * mu + (1.0 - mu) * (1.0 - mu));
        ++nonempty;
    }
    return loss / nonempty;
}

// order for the smoothness regularizer: log(1+count) ascending, ties by index
inline std::vector<int> smoothness_order(const std::vector<std::int64_t>& counts, const std::vector<int>& items) {
    std::vector<int> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const auto ca = counts[static_cast<size_t>(items[static_cast<size_t>(a)])];
        const auto cb = counts[static_cast<size_t>(items[static_cast<size_t>(b)])];
        return ca != cb ? ca < cb : items[static_cast<size_t>(a)] < items[static_cast<size_t>(b)];
    });
    return order;
}

// mean squared difference of allocation ratios between popularity-adjacent items
inline double smoothness_value(const std::vector<double>& alphas, const std::vector<int>& order) {
    if (alphas.size() < 2) return 0.0;
    double loss = 0.0;
    for (size_t p = 0; p + 1 < order.size(); ++p) {
        const double d = alphas[static_cast<size_t>(order[p + 1])] - alphas[static_cast<size_t>(order[p])];
        loss += d * d;
    }
    return loss / static_cast<double>(order.size() - 1);
}

// `item_id<TAB>alpha<TAB>L_col<TAB>L_sem`
inline void write_allocation_report(const std::string& path, const std::vector<std::string>& item_ids,
                                    const std::vector<Allocation>& allocations) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write allocation report: " + path);
    out.precision(10);
    for (size_t i = 0; i < item_ids.size(); ++i)
        out << item_ids[i] << '\t' << allocations[i].alpha << '\t' << allocations[i].l_col << '\t'
            << allocations[i].l_sem << '\n';
}

}  // namespace dualrec
