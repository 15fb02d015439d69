#pragma once

// Synthetic long-tail interaction generator. Head items follow a latent
// co-occurrence Markov structure that is independent of item semantics;
// tail items are chosen by semantic similarity to a per-user preference
// vector. This gives the two representation channels genuinely different
// predictive power, which the acceptance experiments rely on.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualrec/data.hpp"
#include "dualrec/tensor.hpp"

namespace dualrec {

struct SynthConfig {
    int num_items = 2000;
    int num_users = 1000;
    double zipf_exponent = 1.2;
    int latent_dim = 16;
    // probability that a tail step is a pure semantic nearest-neighbor pick
    // (the remainder are popularity draws); 1.0 = fully semantic
    double mixing_weight = 0.9;
    // probability that a step continues the head Markov chain
    double head_step_prob = 0.6;
    double head_fraction = 0.2;
    int num_clusters = 24;
    double cluster_noise = 0.35;
    double preference_noise = 0.25;
    int successors_per_head = 4;
    int min_seq_len = 8;
    int max_seq_len = 22;

    void validate() const {
        if (num_items < 10 || num_users < 1) throw std::invalid_argument("synth: too few items or users");
        if (zipf_exponent < 0.0) throw std::invalid_argument("synth: zipf_exponent must be >= 0");
        if (latent_dim < 2) throw std::invalid_argument("synth: latent_dim must be >= 2");
        if (mixing_weight < 0.0 || mixing_weight > 1.0) throw std::invalid_argument("synth: mixing_weight in [0,1]");
        if (head_step_prob < 0.0 || head_step_prob > 1.0) throw std::invalid_argument("synth: head_step_prob in [0,1]");
        if (head_fraction <= 0.0 || head_fraction >= 1.0) throw std::invalid_argument("synth: head_fraction in (0,1)");
        if (num_clusters < 1 || num_clusters > num_items) throw std::invalid_argument("synth: bad num_clusters");
        if (min_seq_len < 5 || max_seq_len < min_seq_len) throw std::invalid_argument("synth: bad sequence lengths");
        if (successors_per_head < 1) throw std::invalid_argument("synth: successors_per_head >= 1");
    }
};

struct SynthResult {
    std::vector<Interaction> raw;   // pre-filter event log
    SequenceDataset dataset;        // 5-core filtered + leave-last-out split
    ItemStats stats;
    Tensor semantic;                // (num_items, latent_dim), row = raw item rank
    std::vector<std::string> item_ids;
    std::vector<int> cluster_of;    // ground-truth semantic cluster per item
    Tensor user_pref;               // (num_users, latent_dim) preference vectors
    int head_n = 0;                 // generation-time head/tail boundary (by rank)
};

namespace detail {
inline void normalize_row(double* v, int d) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += v[j] * v[j];
    const double inv = 1.0 / std::sqrt(std::max(s, 1e-30));
    for (int j = 0; j < d; ++j) v[j] *= inv;
}
}  // namespace detail

inline SynthResult synth_longtail(const SynthConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    SynthResult res;
    Rng rng(Rng::stream_seed(seed, "synth"));

    const int n = cfg.num_items;
    const int d = cfg.latent_dim;

    // item index == popularity rank; weights Zipf in the rank
    std::vector<double> pop(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) pop[static_cast<size_t>(i)] = std::pow(static_cast<double>(i + 1), -cfg.zipf_exponent);

    res.item_ids.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "it%05d", i);
        res.item_ids[static_cast<size_t>(i)] = buf;
    }

    // semantic latents around cluster centers; cluster id independent of rank
    Tensor centers = randn(rng, {cfg.num_clusters, d});
    for (int c = 0; c < cfg.num_clusters; ++c) detail::normalize_row(centers.row_ptr(c), d);
    res.cluster_of.resize(static_cast<size_t>(n));
    res.semantic = Tensor({n, d});
    for (int i = 0; i < n; ++i) {
        const int c = rng.index(cfg.num_clusters);
        res.cluster_of[static_cast<size_t>(i)] = c;
        double* row = res.semantic.row_ptr(i);
        for (int j = 0; j < d; ++j) row[j] = centers.at(c, j) + cfg.cluster_noise * rng.normal();
        detail::normalize_row(row, d);
    }

    const int head_n = static_cast<int>(std::ceil(cfg.head_fraction * n));
    res.head_n = head_n;
    std::vector<double> head_pop(pop.begin(), pop.begin() + head_n);

    // head Markov chain: a few successors per head item, semantics-agnostic
    std::vector<std::vector<int>> succ(static_cast<size_t>(head_n));
    std::vector<std::vector<double>> succ_w(static_cast<size_t>(head_n));
    for (int h = 0; h < head_n; ++h) {
        const int k = std::min(cfg.successors_per_head, head_n - 1);
        std::vector<int> chosen;
        while (static_cast<int>(chosen.size()) < k) {
            const int cand = rng.pick_weighted(head_pop);
            if (cand == h) continue;
            if (std::find(chosen.begin(), chosen.end(), cand) != chosen.end()) continue;
            chosen.push_back(cand);
        }
        std::vector<double> w(chosen.size());
        for (auto& x : w) x = 0.25 + rng.uniform();  // uneven but bounded transition mass
        succ[static_cast<size_t>(h)] = std::move(chosen);
        succ_w[static_cast<size_t>(h)] = std::move(w);
    }

    const int tail_n = n - head_n;
    std::vector<double> tail_pop(pop.begin() + head_n, pop.end());

    // user preferences live near a primary cluster center
    res.user_pref = Tensor({cfg.num_users, d});
    for (int u = 0; u < cfg.num_users; ++u) {
        char ubuf[16];
        std::snprintf(ubuf, sizeof(ubuf), "u%05d", u);
        const std::string user_id = ubuf;

        std::vector<double> pref(static_cast<size_t>(d));
        const int cu = rng.index(cfg.num_clusters);
        for (int j = 0; j < d; ++j) pref[static_cast<size_t>(j)] = centers.at(cu, j) + cfg.preference_noise * rng.normal();
        detail::normalize_row(pref.data(), d);
        std::copy(pref.begin(), pref.end(), res.user_pref.row_ptr(u));

        // similarity order over tail items, most similar first (stable in index)
        std::vector<int> tail_order(static_cast<size_t>(tail_n));
        std::iota(tail_order.begin(), tail_order.end(), 0);
        std::vector<double> sim(static_cast<size_t>(tail_n));
        for (int t = 0; t < tail_n; ++t)
            sim[static_cast<size_t>(t)] = dot_span(res.semantic.row_ptr(head_n + t), pref.data(), d);
        std::sort(tail_order.begin(), tail_order.end(), [&sim](int a, int b) {
            const double sa = sim[static_cast<size_t>(a)], sb = sim[static_cast<size_t>(b)];
            return sa != sb ? sa > sb : a < b;
        });

        const int len = cfg.min_seq_len + rng.index(cfg.max_seq_len - cfg.min_seq_len + 1);
        std::vector<bool> tail_used(static_cast<size_t>(tail_n), false);
        int next_nn = 0;  // next unconsumed position in the similarity order
        int prev_head = -1;
        for (int t = 0; t < len; ++t) {
            int item;
            const bool head_step = t == 0 || rng.uniform() < cfg.head_step_prob;
            if (head_step) {
                if (prev_head >= 0)
                    item = succ[static_cast<size_t>(prev_head)][static_cast<size_t>(rng.pick_weighted(
                        succ_w[static_cast<size_t>(prev_head)]))];
                else
                    item = rng.pick_weighted(head_pop);
                prev_head = item;
            } else {
                int pick = -1;
                if (rng.uniform() < cfg.mixing_weight) {
                    while (next_nn < tail_n && tail_used[static_cast<size_t>(tail_order[static_cast<size_t>(next_nn)])])
                        ++next_nn;
                    if (next_nn < tail_n) pick = tail_order[static_cast<size_t>(next_nn)];
                }
                if (pick < 0) {
                    for (int tries = 0; tries < 64 && pick < 0; ++tries) {
                        const int cand = rng.pick_weighted(tail_pop);
                        if (!tail_used[static_cast<size_t>(cand)]) pick = cand;
                    }
                    if (pick < 0) pick = rng.pick_weighted(tail_pop);
                }
                tail_used[static_cast<size_t>(pick)] = true;
                item = head_n + pick;
            }
            res.raw.push_back(Interaction{user_id, res.item_ids[static_cast<size_t>(item)],
                                          static_cast<std::int64_t>(t) * 1000 + u % 997});
        }
    }

    res.dataset = leave_last_out_split(build_sequences(k_core_filter(res.raw, 5)));
    res.stats = compute_item_stats(res.dataset);
    return res;
}

// `item_id<TAB>v1,v2,...,vd` rows, full double precision
inline void write_semantic_vectors(const std::string& path, const std::vector<std::string>& item_ids,
                                   const Tensor& vectors) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write semantic vectors: " + path);
    out.precision(17);
    for (int i = 0; i < vectors.rows(); ++i) {
        out << item_ids[static_cast<size_t>(i)] << '\t';
        for (int j = 0; j < vectors.cols(); ++j) out << (j ? "," : "") << vectors.at(i, j);
        out << '\n';
    }
}

}  // namespace dualrec
