#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "dualrec/data.hpp"
#include "dualrec/synth.hpp"

using namespace dualrec;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
    const auto path = std::filesystem::temp_directory_path() / name;
    std::ofstream out(path);
    out << content;
    return path.string();
}

std::vector<Interaction> make_rows(const std::vector<std::tuple<std::string, std::string, std::int64_t>>& spec) {
    std::vector<Interaction> rows;
    for (const auto& [u, i, t] : spec) rows.push_back({u, i, t});
    return rows;
}

// naive iterate-to-fixpoint oracle, kept independent of the library path
std::vector<Interaction> kcore_oracle(std::vector<Interaction> rows, int k) {
    while (true) {
        std::map<std::string, int> uc, ic;
        for (const auto& r : rows) {
            uc[r.user_id]++;
            ic[r.item_id]++;
        }
        std::vector<Interaction> next;
        for (const auto& r : rows)
            if (uc[r.user_id] >= k && ic[r.item_id] >= k) next.push_back(r);
        if (next.size() == rows.size()) return rows;
        rows = std::move(next);
    }
}

bool same_rows(const std::vector<Interaction>& a, const std::vector<Interaction>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i].user_id != b[i].user_id || a[i].item_id != b[i].item_id || a[i].timestamp != b[i].timestamp)
            return false;
    return true;
}

}  // namespace

TEST_CASE("load_interactions parses rows in order") {
    const auto path = write_temp("dr_basic.tsv", "u1\ti1\t10\nu1\ti2\t20\nu2\ti1\t5\n");
    const auto rows = load_interactions(path);
    REQUIRE(rows.size() == 3);
    REQUIRE(rows[0].user_id == "u1");
    REQUIRE(rows[2].timestamp == 5);
}

TEST_CASE("load_interactions reports the offending line") {
    const auto path = write_temp("dr_bad.tsv", "u1\ti1\t10\nu1\ti2\tnotanumber\n");
    REQUIRE_THROWS_WITH(load_interactions(path), Catch::Matchers::ContainsSubstring(":2"));
    const auto empty = write_temp("dr_empty.tsv", "# only comments\n");
    REQUIRE_THROWS(load_interactions(empty));
}

TEST_CASE("load_interactions skips interleaved comments") {
    const auto path = write_temp("dr_comments.tsv", "# header\nu1\ti1\t1\n# middle\nu1\ti2\t2\nu2\ti1\t3\n# end\n");
    const auto rows = load_interactions(path);
    // hand parse of the fixture above
    REQUIRE(rows.size() == 3);
    REQUIRE(rows[1].item_id == "i2");
    REQUIRE(rows[2].user_id == "u2");
}

TEST_CASE("k_core_filter leaves a k-core unchanged and k=1 is identity") {
    // 5 users x 5 items grid: every user and item has 5 interactions
    std::vector<Interaction> rows;
    for (int u = 0; u < 5; ++u)
        for (int i = 0; i < 5; ++i) rows.push_back({"u" + std::to_string(u), "i" + std::to_string(i), u * 5 + i});
    REQUIRE(same_rows(k_core_filter(rows, 5), rows));
    auto one = make_rows({{"a", "x", 1}, {"b", "y", 2}});
    REQUIRE(same_rows(k_core_filter(one, 1), one));
}

TEST_CASE("k_core_filter cascades like the fixpoint oracle") {
    // removing the weak item drops u3 below k, which cascades
    auto rows = make_rows({{"u1", "a", 1}, {"u1", "b", 2}, {"u2", "a", 3}, {"u2", "b", 4},
                           {"u3", "a", 5}, {"u3", "weak", 6}});
    const auto got = k_core_filter(rows, 2);
    REQUIRE(same_rows(got, kcore_oracle(rows, 2)));
    for (const auto& r : got) REQUIRE(r.item_id != "weak");
}

TEST_CASE("k_core_filter matches oracle on random instances") {
    Rng rng(99);
    for (int trial = 0; trial < 25; ++trial) {
        std::vector<Interaction> rows;
        const int users = 3 + rng.index(47);
        const int items = 3 + rng.index(20);
        const int events = 10 + rng.index(200);
        for (int e = 0; e < events; ++e)
            rows.push_back({"u" + std::to_string(rng.index(users)), "i" + std::to_string(rng.index(items)),
                            static_cast<std::int64_t>(e)});
        const int k = 1 + rng.index(5);
        REQUIRE(same_rows(k_core_filter(rows, k), kcore_oracle(rows, k)));
    }
}

TEST_CASE("leave_last_out_split marks train/valid/test") {
    auto rows = make_rows({{"u", "a", 1}, {"u", "b", 2}, {"u", "c", 3}, {"u", "d", 4}});
    auto ds = leave_last_out_split(build_sequences(rows));
    REQUIRE(ds.num_users() == 1);
    REQUIRE(ds.n_train[0] == 2);
    REQUIRE(ds.item_ids[static_cast<size_t>(ds.valid_item(0))] == "c");
    REQUIRE(ds.item_ids[static_cast<size_t>(ds.test_item(0))] == "d");
    REQUIRE(ds.train_prefix(0) == std::vector<int>{0, 1});

    auto three = leave_last_out_split(build_sequences(make_rows({{"u", "a", 1}, {"u", "b", 2}, {"u", "c", 3}})));
    REQUIRE(three.n_train[0] == 1);
    auto two = leave_last_out_split(build_sequences(make_rows({{"u", "a", 1}, {"u", "b", 2}})));
    REQUIRE(two.num_users() == 0);
    REQUIRE(two.dropped_users == 1);
}

TEST_CASE("split positions are disjoint and reconstruct the sequence") {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<Interaction> rows;
        const int users = 2 + rng.index(6);
        for (int u = 0; u < users; ++u) {
            const int len = 3 + rng.index(8);
            for (int t = 0; t < len; ++t)
                rows.push_back({"u" + std::to_string(u), "i" + std::to_string(rng.index(12)),
                                static_cast<std::int64_t>(t)});
        }
        auto ds = leave_last_out_split(build_sequences(rows));
        for (int u = 0; u < ds.num_users(); ++u) {
            auto rebuilt = ds.train_prefix(u);
            rebuilt.push_back(ds.valid_item(u));
            rebuilt.push_back(ds.test_item(u));
            REQUIRE(rebuilt == ds.sequences[static_cast<size_t>(u)]);
        }
    }
}

TEST_CASE("sequences sort by timestamp with input-order ties") {
    auto rows = make_rows({{"u", "b", 5}, {"u", "a", 1}, {"u", "c", 5}, {"u", "d", 2}});
    auto ds = build_sequences(rows);
    std::vector<std::string> got;
    for (int it : ds.sequences[0]) got.push_back(ds.item_ids[static_cast<size_t>(it)]);
    REQUIRE(got == std::vector<std::string>{"a", "d", "b", "c"});
}

TEST_CASE("compute_item_stats matches a hand-computed fixture") {
    // train events after split: u1: a(t=0), b(t=10); u2: a(t=5), a(t=10)
    auto rows = make_rows({{"u1", "a", 0}, {"u1", "b", 10}, {"u1", "c", 20}, {"u1", "d", 30},
                           {"u2", "a", 5}, {"u2", "a", 10}, {"u2", "b", 15}, {"u2", "c", 20}});
    auto ds = leave_last_out_split(build_sequences(rows));
    auto stats = compute_item_stats(ds);
    const int a = ds.item_index.at("a"), b = ds.item_index.at("b"), c = ds.item_index.at("c"),
              d = ds.item_index.at("d");
    REQUIRE(stats.count[static_cast<size_t>(a)] == 3);
    REQUIRE(stats.count[static_cast<size_t>(b)] == 1);
    REQUIRE(stats.count[static_cast<size_t>(c)] == 0);
    REQUIRE(stats.frequency[static_cast<size_t>(a)] == 1.0);
    REQUIRE(stats.frequency[static_cast<size_t>(b)] == Catch::Approx(1.0 / 3.0));
    REQUIRE(stats.frequency[static_cast<size_t>(c)] == 0.0);
    REQUIRE(stats.sparsity[static_cast<size_t>(a)] == Catch::Approx(0.25));
    REQUIRE(stats.sparsity[static_cast<size_t>(c)] == 1.0);
    // train timestamps span [0, 10]; a first seen 0, b first seen 10
    REQUIRE(stats.age[static_cast<size_t>(a)] == Catch::Approx(1.0));
    REQUIRE(stats.age[static_cast<size_t>(b)] == Catch::Approx(0.0));
    REQUIRE(stats.uncertainty[static_cast<size_t>(a)] == 0.0);  // no history supplied
    REQUIRE(stats.count[static_cast<size_t>(d)] == 0);
}

TEST_CASE("uncertainty is the rank-normalized variance trace") {
    auto rows = make_rows({{"u1", "a", 0}, {"u1", "b", 1}, {"u1", "c", 2}, {"u1", "a", 3}, {"u1", "b", 4}});
    auto ds = leave_last_out_split(build_sequences(rows));
    EmbeddingHistory hist;
    hist.push_back(Tensor({3, 2}, {0, 0, 1, 1, 5, 5}));
    hist.push_back(Tensor({3, 2}, {0, 0, 2, 2, 5, 6}));
    // variance traces: a=0, b=1.0 (0.25*2*2), c=0.25
    auto stats = compute_item_stats(ds, &hist);
    REQUIRE(stats.uncertainty[0] == 0.0);
    REQUIRE(stats.uncertainty[1] == 1.0);
    REQUIRE(stats.uncertainty[2] == 0.5);
}

TEST_CASE("popularity_bands quantiles and ties") {
    std::vector<std::int64_t> counts = {9, 8, 7, 6, 5, 4, 3, 2, 1, 0};
    auto band = popularity_bands(counts, 2);
    for (int i = 0; i < 5; ++i) REQUIRE(band[static_cast<size_t>(i)] == 0);
    for (int i = 5; i < 10; ++i) REQUIRE(band[static_cast<size_t>(i)] == 1);

    std::vector<std::int64_t> equal(6, 7);
    auto eb = popularity_bands(equal, 3);
    REQUIRE(eb == std::vector<int>{0, 0, 1, 1, 2, 2});

    // more bands than items: each item its own band
    std::vector<std::int64_t> tiny = {5, 3};
    auto tb = popularity_bands(tiny, 4);
    std::set<int> distinct(tb.begin(), tb.end());
    REQUIRE(distinct.size() == 2);
}

TEST_CASE("popularity_bands partitions against a sort oracle") {
    Rng rng(31);
    std::vector<std::int64_t> counts(40);
    for (auto& c : counts) c = static_cast<std::int64_t>(rng.index(1000));
    const int nb = 4;
    auto band = popularity_bands(counts, nb);
    auto order = popularity_order(counts);
    for (int p = 0; p < 40; ++p) {
        const int expected = p / 10;
        REQUIRE(band[static_cast<size_t>(order[static_cast<size_t>(p)])] == expected);
    }
    std::vector<int> seen(40, 0);
    for (int b : band) {
        REQUIRE(b >= 0);
        REQUIRE(b < nb);
    }
}

TEST_CASE("head_tail_partition sizes and Zipf sort oracle") {
    std::vector<std::int64_t> counts(10);
    for (int i = 0; i < 10; ++i) counts[static_cast<size_t>(i)] = 10 - i;
    auto [head, tail] = head_tail_partition(counts, 0.2);
    REQUIRE(head.size() == 2);
    REQUIRE(head == std::vector<int>{0, 1});
    REQUIRE(tail.size() == 8);

    std::vector<std::int64_t> zipf(30);
    for (int i = 0; i < 30; ++i) zipf[static_cast<size_t>(i)] = static_cast<std::int64_t>(1000.0 / (1 + i));
    auto [h2, t2] = head_tail_partition(zipf, 0.3);
    auto order = popularity_order(zipf);
    REQUIRE(std::vector<int>(order.begin(), order.begin() + 9) == h2);
}

TEST_CASE("synth_longtail is deterministic") {
    SynthConfig cfg;
    cfg.num_items = 200;
    cfg.num_users = 60;
    auto a = synth_longtail(cfg, 7);
    auto b = synth_longtail(cfg, 7);
    REQUIRE(a.raw.size() == b.raw.size());
    REQUIRE(same_rows(a.raw, b.raw));
    REQUIRE(a.semantic.data == b.semantic.data);
    auto c = synth_longtail(cfg, 8);
    REQUIRE_FALSE(same_rows(a.raw, c.raw));
}

TEST_CASE("synth_longtail zipf 0 gives near-uniform popularity draws") {
    // disable the Markov chain and semantic picks so every tail event is a
    // raw popularity draw
    SynthConfig cfg;
    cfg.num_items = 50;
    cfg.num_users = 400;
    cfg.zipf_exponent = 0.0;
    cfg.head_fraction = 0.5;
    cfg.head_step_prob = 0.0;
    cfg.mixing_weight = 0.0;
    auto r = synth_longtail(cfg, 3);
    std::map<std::string, int> counts;
    int tail_events = 0;
    for (const auto& e : r.raw) {
        const int idx = static_cast<int>(std::find(r.item_ids.begin(), r.item_ids.end(), e.item_id) -
                                         r.item_ids.begin());
        if (idx >= r.head_n) {
            counts[e.item_id]++;
            ++tail_events;
        }
    }
    const double mean = static_cast<double>(tail_events) / static_cast<double>(cfg.num_items - r.head_n);
    for (const auto& [id, c] : counts) {
        REQUIRE(c < 1.5 * mean);
        REQUIRE(c > 0.5 * mean);
    }
}

TEST_CASE("synth_longtail mixing weight 1 matches the nearest-neighbor oracle") {
    SynthConfig cfg;
    cfg.num_items = 300;
    cfg.num_users = 40;
    cfg.mixing_weight = 1.0;
    cfg.head_step_prob = 0.5;
    auto r = synth_longtail(cfg, 11);
    const int d = cfg.latent_dim;
    for (int u = 0; u < cfg.num_users; ++u) {
        char ubuf[16];
        std::snprintf(ubuf, sizeof(ubuf), "u%05d", u);
        // the user's tail picks, in raw log order
        std::vector<int> picks;
        for (const auto& e : r.raw)
            if (e.user_id == ubuf) {
                auto it = std::find(r.item_ids.begin(), r.item_ids.end(), e.item_id);
                const int idx = static_cast<int>(it - r.item_ids.begin());
                if (idx >= r.head_n) picks.push_back(idx);
            }
        // oracle: tail items sorted by similarity to the user preference
        std::vector<int> tail_order;
        for (int i = r.head_n; i < cfg.num_items; ++i) tail_order.push_back(i);
        std::sort(tail_order.begin(), tail_order.end(), [&](int a, int b) {
            const double sa = dot_span(r.semantic.row_ptr(a), r.user_pref.row_ptr(u), d);
            const double sb = dot_span(r.semantic.row_ptr(b), r.user_pref.row_ptr(u), d);
            return sa != sb ? sa > sb : a < b;
        });
        REQUIRE(picks == std::vector<int>(tail_order.begin(), tail_order.begin() + picks.size()));
    }
}

TEST_CASE("split manifest round-trips through the documented format") {
    auto rows = make_rows({{"u1", "a", 1}, {"u1", "b", 2}, {"u1", "c", 3}, {"u1", "d", 4}});
    auto ds = leave_last_out_split(build_sequences(rows));
    const auto path = (std::filesystem::temp_directory_path() / "dr_manifest.tsv").string();
    write_split_manifest(path, ds);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    REQUIRE(line == "u1\t2\tc\td");
}
