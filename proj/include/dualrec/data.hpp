#pragma once

// Interaction ingestion, k-core filtering, chronological sequences with
// leave-last-out splits, and the per-item statistics that feed the router.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dualrec/tensor.hpp"

namespace dualrec {

enum class Channel { semantic, collaborative };

inline const char* channel_name(Channel c) { return c == Channel::semantic ? "sem" : "col"; }

struct Interaction {
    std::string user_id;
    std::string item_id;
    std::int64_t timestamp = 0;
};

// TSV rows: user_id<TAB>item_id<TAB>timestamp. '#' lines are comments.
inline std::vector<Interaction> load_interactions(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open interaction file: " + path);
    std::vector<Interaction> out;
    std::string line;
    std::int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto t1 = line.find('\t');
        const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields");
        Interaction rec;
        rec.user_id = line.substr(0, t1);
        rec.item_id = line.substr(t1 + 1, t2 - t1 - 1);
        const std::string ts = line.substr(t2 + 1);
        if (rec.user_id.empty() || rec.item_id.empty())
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty id");
        try {
            size_t pos = 0;
            rec.timestamp = std::stoll(ts, &pos);
            if (pos != ts.size()) throw std::invalid_argument(ts);
        } catch (const std::exception&) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad timestamp '" + ts + "'");
        }
        if (rec.timestamp < 0)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": negative timestamp");
        out.push_back(std::move(rec));
    }
    if (out.empty()) throw std::runtime_error(path + ": no interaction rows");
    return out;
}

inline void save_interactions(const std::string& path, const std::vector<Interaction>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write interaction file: " + path);
    for (const auto& r : rows) out << r.user_id << '\t' << r.item_id << '\t' << r.timestamp << '\n';
}

// Iteratively removes users and items with fewer than k interactions until a
// fixed point; the surviving rows form the unique maximal k-core.
inline std::vector<Interaction> k_core_filter(std::vector<Interaction> rows, int k) {
    if (k < 1) throw std::invalid_argument("k_core_filter: k must be >= 1");
    bool changed = true;
    while (changed) {
        changed = false;
        std::unordered_map<std::string, int> ucount, icount;
        for (const auto& r : rows) {
            ++ucount[r.user_id];
            ++icount[r.item_id];
        }
        std::vector<Interaction> kept;
        kept.reserve(rows.size());
        for (auto& r : rows) {
            if (ucount[r.user_id] >= k && icount[r.item_id] >= k)
                kept.push_back(std::move(r));
            else
                changed = true;
        }
        rows = std::move(kept);
    }
    return rows;
}

struct SequenceDataset {
    std::vector<std::string> user_ids;  // dense index -> external id
    std::vector<std::string> item_ids;
    std::unordered_map<std::string, int> user_index;
    std::unordered_map<std::string, int> item_index;
    // chronologically sorted per user (ties keep input order)
    std::vector<std::vector<int>> sequences;
    std::vector<std::vector<std::int64_t>> timestamps;
    // leave-last-out markers: train prefix length, then valid, then test
    std::vector<int> n_train;
    int dropped_users = 0;
    bool split_done = false;

    int num_users() const { return static_cast<int>(sequences.size()); }
    int num_items() const { return static_cast<int>(item_ids.size()); }

    int valid_item(int u) const { return sequences[static_cast<size_t>(u)][static_cast<size_t>(n_train[static_cast<size_t>(u)])]; }
    int test_item(int u) const { return sequences[static_cast<size_t>(u)][static_cast<size_t>(n_train[static_cast<size_t>(u)]) + 1]; }

    std::vector<int> train_prefix(int u) const {
        const auto& s = sequences[static_cast<size_t>(u)];
        return std::vector<int>(s.begin(), s.begin() + n_train[static_cast<size_t>(u)]);
    }
};

// Builds dense indices (first-appearance order) and per-user chronological
// sequences from an interaction list.
inline SequenceDataset build_sequences(const std::vector<Interaction>& rows) {
    SequenceDataset ds;
    struct Ev {
        int item;
        std::int64_t ts;
        std::int64_t order;
    };
    std::vector<std::vector<Ev>> events;
    std::int64_t order = 0;
    for (const auto& r : rows) {
        auto [uit, unew] = ds.user_index.emplace(r.user_id, static_cast<int>(ds.user_ids.size()));
        if (unew) {
            ds.user_ids.push_back(r.user_id);
            events.emplace_back();
        }
        auto [iit, inew] = ds.item_index.emplace(r.item_id, static_cast<int>(ds.item_ids.size()));
        if (inew) ds.item_ids.push_back(r.item_id);
        events[static_cast<size_t>(uit->second)].push_back(Ev{iit->second, r.timestamp, order++});
    }
    ds.sequences.resize(events.size());
    ds.timestamps.resize(events.size());
    for (size_t u = 0; u < events.size(); ++u) {
        auto& ev = events[u];
        std::stable_sort(ev.begin(), ev.end(), [](const Ev& a, const Ev& b) {
            return a.ts != b.ts ? a.ts < b.ts : a.order < b.order;
        });
        ds.sequences[u].reserve(ev.size());
        ds.timestamps[u].reserve(ev.size());
        for (const auto& e : ev) {
            ds.sequences[u].push_back(e.item);
            ds.timestamps[u].push_back(e.ts);
        }
    }
    return ds;
}

// test = last item, validation = second-to-last, train = remaining prefix.
// Users with fewer than 3 interactions are dropped (counted, not fatal).
inline SequenceDataset leave_last_out_split(SequenceDataset ds) {
    SequenceDataset out;
    out.item_ids = ds.item_ids;
    out.item_index = ds.item_index;
    for (size_t u = 0; u < ds.sequences.size(); ++u) {
        if (ds.sequences[u].size() < 3) {
            ++out.dropped_users;
            continue;
        }
        out.user_index.emplace(ds.user_ids[u], static_cast<int>(out.user_ids.size()));
        out.user_ids.push_back(ds.user_ids[u]);
        out.sequences.push_back(std::move(ds.sequences[u]));
        out.timestamps.push_back(std::move(ds.timestamps[u]));
        out.n_train.push_back(static_cast<int>(out.sequences.back().size()) - 2);
    }
    out.split_done = true;
    return out;
}

inline void write_split_manifest(const std::string& path, const SequenceDataset& ds) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write split manifest: " + path);
    for (int u = 0; u < ds.num_users(); ++u)
        out << ds.user_ids[static_cast<size_t>(u)] << '\t' << ds.n_train[static_cast<size_t>(u)] << '\t'
            << ds.item_ids[static_cast<size_t>(ds.valid_item(u))] << '\t'
            << ds.item_ids[static_cast<size_t>(ds.test_item(u))] << '\n';
}

// One embedding snapshot per training checkpoint, rows indexed by item.
using EmbeddingHistory = std::vector<Tensor>;

struct ItemStats {
    std::vector<std::int64_t> count;   // raw train-split interaction count
    std::vector<double> frequency;     // f_i = count_i / max_j count_j
    std::vector<double> age;           // (t_max - first_seen_i) / (t_max - t_min)
    std::vector<double> sparsity;      // 1 / (1 + count_i)
    std::vector<double> uncertainty;   // rank-normalized embedding variance
    std::vector<int> rank;             // 0 = most popular (ties by item index)
    std::vector<int> band;             // popularity stratum

    int num_items() const { return static_cast<int>(count.size()); }
};

// Popularity order: count descending, ties by item index ascending.
inline std::vector<int> popularity_order(const std::vector<std::int64_t>& count) {
    std::vector<int> order(count.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&count](int a, int b) {
        const auto ca = count[static_cast<size_t>(a)], cb = count[static_cast<size_t>(b)];
        return ca != cb ? ca > cb : a < b;
    });
    return order;
}

// Quantile partition of the popularity order into num_bands strata.
inline std::vector<int> popularity_bands(const std::vector<std::int64_t>& count, int num_bands) {
    if (num_bands < 1) throw std::invalid_argument("popularity_bands: num_bands must be >= 1");
    const int n = static_cast<int>(count.size());
    const auto order = popularity_order(count);
    std::vector<int> band(static_cast<size_t>(n), 0);
    for (int b = 0; b < num_bands; ++b) {
        const int lo = static_cast<int>(static_cast<std::int64_t>(b) * n / num_bands);
        const int hi = static_cast<int>(static_cast<std::int64_t>(b + 1) * n / num_bands);
        for (int p = lo; p < hi; ++p) band[static_cast<size_t>(order[static_cast<size_t>(p)])] = b;
    }
    return band;
}

// head = top ceil(head_fraction * n) items by train count; tail = complement.
inline std::pair<std::vector<int>, std::vector<int>> head_tail_partition(const std::vector<std::int64_t>& count,
                                                                         double head_fraction) {
    if (!(head_fraction > 0.0 && head_fraction < 1.0))
        throw std::invalid_argument("head_tail_partition: head_fraction must be in (0,1)");
    const int n = static_cast<int>(count.size());
    const int head_n = static_cast<int>(std::ceil(head_fraction * n));
    const auto order = popularity_order(count);
    std::vector<int> head(order.begin(), order.begin() + head_n);
    std::vector<int> tail(order.begin() + head_n, order.end());
    return {std::move(head), std::move(tail)};
}

// Statistics use the train split only. The uncertainty feature is the
// rank-normalized trace of the embedding variance across checkpoints and
// defaults to zero when no history is supplied.
inline ItemStats compute_item_stats(const SequenceDataset& ds, const EmbeddingHistory* history = nullptr,
                                    int num_bands = 4) {
    if (!ds.split_done) throw std::logic_error("compute_item_stats: split not computed");
    const int n = ds.num_items();
    ItemStats stats;
    stats.count.assign(static_cast<size_t>(n), 0);
    stats.frequency.assign(static_cast<size_t>(n), 0.0);
    stats.age.assign(static_cast<size_t>(n), 0.0);
    stats.sparsity.assign(static_cast<size_t>(n), 0.0);
    stats.uncertainty.assign(static_cast<size_t>(n), 0.0);

    std::vector<std::int64_t> first_seen(static_cast<size_t>(n), -1);
    std::int64_t t_min = std::numeric_limits<std::int64_t>::max();
    std::int64_t t_max = std::numeric_limits<std::int64_t>::min();
    for (int u = 0; u < ds.num_users(); ++u) {
        const auto& seq = ds.sequences[static_cast<size_t>(u)];
        const auto& ts = ds.timestamps[static_cast<size_t>(u)];
        for (int p = 0; p < ds.n_train[static_cast<size_t>(u)]; ++p) {
            const int item = seq[static_cast<size_t>(p)];
            ++stats.count[static_cast<size_t>(item)];
            auto& fs = first_seen[static_cast<size_t>(item)];
            if (fs < 0 || ts[static_cast<size_t>(p)] < fs) fs = ts[static_cast<size_t>(p)];
            t_min = std::min(t_min, ts[static_cast<size_t>(p)]);
            t_max = std::max(t_max, ts[static_cast<size_t>(p)]);
        }
    }
    std::int64_t max_count = 0;
    for (auto c : stats.count) max_count = std::max(max_count, c);
    const double span = static_cast<double>(t_max - t_min);
    for (int i = 0; i < n; ++i) {
        stats.frequency[static_cast<size_t>(i)] =
            max_count > 0 ? static_cast<double>(stats.count[static_cast<size_t>(i)]) / static_cast<double>(max_count)
                          : 0.0;
        stats.sparsity[static_cast<size_t>(i)] = 1.0 / (1.0 + static_cast<double>(stats.count[static_cast<size_t>(i)]));
        if (first_seen[static_cast<size_t>(i)] >= 0 && span > 0.0)
            stats.age[static_cast<size_t>(i)] = static_cast<double>(t_max - first_seen[static_cast<size_t>(i)]) / span;
    }

    if (history != nullptr && history->size() >= 2) {
        const int d = (*history)[0].cols();
        std::vector<double> trace(static_cast<size_t>(n), 0.0);
        for (int i = 0; i < n; ++i) {
            for (int c = 0; c < d; ++c) {
                double mean = 0.0;
                for (const auto& snap : *history) mean += snap.at(i, c);
                mean /= static_cast<double>(history->size());
                double var = 0.0;
                for (const auto& snap : *history) {
                    const double dv = snap.at(i, c) - mean;
                    var += dv * dv;
                }
                trace[static_cast<size_t>(i)] += var / static_cast<double>(history->size());
            }
        }
        // rank-normalize to [0,1], ties by item index
        std::vector<int> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&trace](int a, int b) {
            const double ta = trace[static_cast<size_t>(a)], tb = trace[static_cast<size_t>(b)];
            return ta != tb ? ta < tb : a < b;
        });
        for (int p = 0; p < n; ++p)
            stats.uncertainty[static_cast<size_t>(order[static_cast<size_t>(p)])] =
                n > 1 ? static_cast<double>(p) / static_cast<double>(n - 1) : 0.0;
    }

    const auto order = popularity_order(stats.count);
    stats.rank.assign(static_cast<size_t>(n), 0);
    for (int p = 0; p < n; ++p) stats.rank[static_cast<size_t>(order[static_cast<size_t>(p)])] = p;
    stats.band = popularity_bands(stats.count, num_bands);
    return stats;
}

}  // namespace dualrec
