#pragma once

// Offline ranking metrics with head/tail breakdowns. Rankings come from a
// caller-supplied per-user provider so the harness stays independent of the
// model stack.

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dualrec/data.hpp"

namespace dualrec {

inline int recall_at_k(const std::vector<int>& ranked, int target, int k) {
    if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
    const int limit = std::min<int>(k, static_cast<int>(ranked.size()));
    for (int r = 0; r < limit; ++r)
        if (ranked[static_cast<size_t>(r)] == target) return 1;
    return 0;
}

// single relevant item, so ideal DCG is 1 and NDCG = 1/log2(rank+1)
inline double ndcg_at_k(const std::vector<int>& ranked, int target, int k) {
    if (k < 1) throw std::invalid_argument("ndcg_at_k: k must be >= 1");
    const int limit = std::min<int>(k, static_cast<int>(ranked.size()));
    for (int r = 0; r < limit; ++r)
        if (ranked[static_cast<size_t>(r)] == target)
            return 1.0 / std::log2(static_cast<double>(r) + 2.0);
    return 0.0;
}

struct MetricValue {
    double overall = 0.0;
    double head = 0.0;
    double tail = 0.0;
};

struct EvalReport {
    std::vector<int> ks;                      // e.g. {5, 10}
    std::map<std::string, MetricValue> metrics;  // "recall@5", "ndcg@10", ...
    int users_evaluated = 0;
    int head_users = 0;
    int tail_users = 0;
    int unknown_targets = 0;
    std::string config_fingerprint;
    std::uint64_t seed = 0;
    // per-user hit records: rank of the target in the top-K list, -1 if absent
    std::vector<int> hit_rank;

    double get(const std::string& key) const {
        auto it = metrics.find(key);
        if (it == metrics.end()) throw std::out_of_range("eval report: no metric " + key);
        return it->second.overall;
    }
};

using RankingProvider = std::function<std::vector<int>(int user)>;

// Per-user generation then averaged metrics; head/tail assignment follows the
// popularity of the user's test target on the train split.
inline EvalReport evaluate(const RankingProvider& rank_user, const SequenceDataset& ds, const ItemStats& stats,
                           const std::vector<int>& ks, double head_fraction) {
    if (!ds.split_done) throw std::logic_error("evaluate: dataset not split");
    EvalReport report;
    report.ks = ks;
    auto [head, tail] = head_tail_partition(stats.count, head_fraction);
    std::set<int> head_set(head.begin(), head.end());

    const int max_k = *std::max_element(ks.begin(), ks.end());
    struct Acc {
        double overall = 0.0, head = 0.0, tail = 0.0;
    };
    std::map<std::string, Acc> acc;
    for (int k : ks) {
        acc.emplace("recall@" + std::to_string(k), Acc{});
        acc.emplace("ndcg@" + std::to_string(k), Acc{});
    }

    report.hit_rank.assign(static_cast<size_t>(ds.num_users()), -1);
    for (int u = 0; u < ds.num_users(); ++u) {
        const int target = ds.test_item(u);
        std::vector<int> ranked;
        if (target < 0 || target >= ds.num_items()) {
            ++report.unknown_targets;  // counted as a miss
        } else {
            ranked = rank_user(u);
        }
        const bool is_head = head_set.count(target) != 0;
        ++report.users_evaluated;
        if (is_head)
            ++report.head_users;
        else
            ++report.tail_users;
        for (int r = 0; r < std::min<int>(max_k, static_cast<int>(ranked.size())); ++r)
            if (ranked[static_cast<size_t>(r)] == target) {
                report.hit_rank[static_cast<size_t>(u)] = r;
                break;
            }
        for (int k : ks) {
            const double rec = recall_at_k(ranked, target, k);
            const double ndcg = ndcg_at_k(ranked, target, k);
            auto& ra = acc.at("recall@" + std::to_string(k));
            auto& na = acc.at("ndcg@" + std::to_string(k));
            ra.overall += rec;
            na.overall += ndcg;
            if (is_head) {
                ra.head += rec;
                na.head += ndcg;
            } else {
                ra.tail += rec;
                na.tail += ndcg;
            }
        }
    }

    for (auto& [key, a] : acc) {
        MetricValue v;
        v.overall = report.users_evaluated > 0 ? a.overall / report.users_evaluated : 0.0;
        v.head = report.head_users > 0 ? a.head / report.head_users : 0.0;
        v.tail = report.tail_users > 0 ? a.tail / report.tail_users : 0.0;
        report.metrics.emplace(key, v);
    }
    return report;
}

// one metric per line: `key<TAB>overall<TAB>head<TAB>tail`
inline void write_eval_report(const std::string& path, const EvalReport& report) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write eval report: " + path);
    out.precision(10);
    out << "config_fingerprint\t" << report.config_fingerprint << "\n";
    out << "seed\t" << report.seed << "\n";
    out << "users_evaluated\t" << report.users_evaluated << "\n";
    out << "head_users\t" << report.head_users << "\n";
    out << "tail_users\t" << report.tail_users << "\n";
    out << "unknown_targets\t" << report.unknown_targets << "\n";
    for (const auto& [key, v] : report.metrics)
        out << key << '\t' << v.overall << '\t' << v.head << '\t' << v.tail << '\n';
}

}  // namespace dualrec
