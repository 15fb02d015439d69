#pragma once

// Continuous embedding sources: semantic vectors ingested from files and
// collaborative vectors trained by a small self-attentive next-item model.

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dualrec/autograd.hpp"
#include "dualrec/data.hpp"
#include "dualrec/optim.hpp"
#include "dualrec/tensor.hpp"
#include "dualrec/transformer.hpp"

namespace dualrec {

struct EmbeddingTable {
    int dim = 0;
    Channel channel = Channel::semantic;
    std::vector<std::string> ids;
    std::unordered_map<std::string, int> index;
    Tensor vectors;  // (num_items, dim)

    int size() const { return static_cast<int>(ids.size()); }

    const double* row(const std::string& item_id) const {
        auto it = index.find(item_id);
        if (it == index.end()) throw std::out_of_range("embedding lookup: unknown item '" + item_id + "'");
        return vectors.row_ptr(it->second);
    }

    std::vector<double> embed_item(const std::string& item_id) const {
        const double* r = row(item_id);
        return std::vector<double>(r, r + dim);
    }

    // rows reordered to a dataset's dense item indexing
    Tensor aligned_to(const SequenceDataset& ds) const {
        Tensor out({ds.num_items(), dim});
        for (int i = 0; i < ds.num_items(); ++i) {
            const double* src = row(ds.item_ids[static_cast<size_t>(i)]);
            std::copy(src, src + dim, out.row_ptr(i));
        }
        return out;
    }

    std::uint64_t content_hash() const {
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&h](const void* p, size_t n) {
            const auto* bytes = static_cast<const unsigned char*>(p);
            for (size_t i = 0; i < n; ++i) {
                h ^= bytes[i];
                h *= 1099511628211ull;
            }
        };
        for (const auto& id : ids) mix(id.data(), id.size());
        mix(vectors.data.data(), vectors.data.size() * sizeof(double));
        return h;
    }
};

// `item_id<TAB>v1,v2,...,vd`
inline EmbeddingTable load_semantic_embeddings(const std::string& path, int expected_dim) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open embedding file: " + path);
    EmbeddingTable table;
    table.dim = expected_dim;
    table.channel = Channel::semantic;
    std::vector<double> flat;
    std::string line;
    std::int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected item_id<TAB>values");
        const std::string id = line.substr(0, tab);
        std::stringstream ss(line.substr(tab + 1));
        std::string tok;
        int got = 0;
        while (std::getline(ss, tok, ',')) {
            try {
                flat.push_back(std::stod(tok));
            } catch (const std::exception&) {
                throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad value '" + tok + "'");
            }
            ++got;
        }
        if (got != expected_dim)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": item '" + id + "' has " +
                                     std::to_string(got) + " values, expected " + std::to_string(expected_dim));
        if (!table.index.emplace(id, static_cast<int>(table.ids.size())).second)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": duplicate item '" + id + "'");
        table.ids.push_back(id);
    }
    if (table.ids.empty()) throw std::runtime_error(path + ": no embedding rows");
    table.vectors = Tensor({static_cast<int>(table.ids.size()), expected_dim}, std::move(flat));
    if (!table.vectors.all_finite()) throw std::runtime_error(path + ": non-finite embedding values");
    return table;
}

struct CfConfig {
    int dim = 64;
    int layers = 2;
    int heads = 2;
    int mlp_mult = 2;
    int max_len = 32;
    int epochs = 12;
    int batch = 32;
    double lr = 2e-3;
    double init_std = 0.05;
};

struct CfEncoder {
    CfConfig cfg;
    int num_items = 0;
    ParamStore params;
};

namespace detail {

// logits for every position of one training sequence; targets are the next
// items inside the train prefix
inline Tape::Id cf_sequence_loss(Tape& tape, ParamStore& store, const CfConfig& cfg,
                                 const std::vector<int>& prefix, Tape::Id* out_hidden = nullptr) {
    const int usable = std::min<int>(static_cast<int>(prefix.size()), cfg.max_len + 1);
    const std::vector<int> window(prefix.end() - usable, prefix.end());
    const std::vector<int> inputs(window.begin(), window.end() - 1);
    std::vector<int> targets(window.begin() + 1, window.end());
    std::vector<int> positions(inputs.size());
    std::iota(positions.begin(), positions.end(), 0);

    auto item_table = tape.param(store, "cf.item_emb");
    auto pos_table = tape.param(store, "cf.pos_emb");
    auto x = tape.add(tape.gather_rows(item_table, inputs), tape.gather_rows(pos_table, positions));
    TransformerConfig tcfg{cfg.dim, cfg.layers, cfg.heads, cfg.mlp_mult};
    auto h = transformer_stack(tape, store, "cf.", tcfg, x);
    if (out_hidden != nullptr) *out_hidden = h;
    auto logits = tape.matmul_nt(h, item_table);
    return tape.cross_entropy_rows(logits, std::move(targets),
                                   std::vector<double>(inputs.size(), 1.0));
}

}  // namespace detail

struct CfTrainResult {
    CfEncoder encoder;
    EmbeddingTable table;
    EmbeddingHistory history;
    std::vector<double> epoch_losses;
};

// score over all items for the next-item continuation of `prefix`
inline std::vector<double> cf_next_item_scores(CfEncoder& enc, const std::vector<int>& prefix) {
    if (prefix.empty()) throw std::invalid_argument("cf_next_item_scores: empty prefix");
    const int usable = std::min<int>(static_cast<int>(prefix.size()), enc.cfg.max_len);
    const std::vector<int> inputs(prefix.end() - usable, prefix.end());
    std::vector<int> positions(inputs.size());
    std::iota(positions.begin(), positions.end(), 0);
    Tape tape;
    auto item_table = tape.param(enc.params, "cf.item_emb");
    auto x = tape.add(tape.gather_rows(item_table, inputs),
                      tape.gather_rows(tape.param(enc.params, "cf.pos_emb"), positions));
    TransformerConfig tcfg{enc.cfg.dim, enc.cfg.layers, enc.cfg.heads, enc.cfg.mlp_mult};
    auto h = transformer_stack(tape, enc.params, "cf.", tcfg, x);
    auto logits = tape.matmul_nt(h, item_table);
    const auto& lv = tape.val(logits);
    const int last = lv.rows() - 1;
    return std::vector<double>(lv.row_ptr(last), lv.row_ptr(last) + lv.cols());
}

// Next-item training on the train prefixes. The per-item collaborative
// embedding is the encoder's input embedding row; history keeps one snapshot
// per epoch for the uncertainty feature.
inline CfTrainResult train_cf_encoder(const SequenceDataset& ds, const CfConfig& cfg, std::uint64_t seed) {
    if (!ds.split_done) throw std::logic_error("train_cf_encoder: dataset not split");
    CfTrainResult res;
    res.encoder.cfg = cfg;
    res.encoder.num_items = ds.num_items();
    auto& store = res.encoder.params;

    Rng rng(Rng::stream_seed(seed, "cf_encoder"));
    store.create("cf.item_emb", randn(rng, {ds.num_items(), cfg.dim}, cfg.init_std));
    store.create("cf.pos_emb", randn(rng, {cfg.max_len, cfg.dim}, cfg.init_std));
    TransformerConfig tcfg{cfg.dim, cfg.layers, cfg.heads, cfg.mlp_mult};
    init_transformer_params(store, "cf.", tcfg, rng, cfg.init_std);

    std::vector<int> train_users;
    for (int u = 0; u < ds.num_users(); ++u)
        if (ds.n_train[static_cast<size_t>(u)] >= 2) train_users.push_back(u);
    if (train_users.empty()) throw std::runtime_error("train_cf_encoder: no user has a train prefix of length >= 2");

    Adam adam;
    adam.lr = cfg.lr;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(train_users);
        double epoch_loss = 0.0;
        int batches = 0;
        for (size_t start = 0; start < train_users.size(); start += static_cast<size_t>(cfg.batch)) {
            const size_t end = std::min(train_users.size(), start + static_cast<size_t>(cfg.batch));
            Tape tape;
            std::vector<Tape::Id> losses;
            for (size_t b = start; b < end; ++b)
                losses.push_back(detail::cf_sequence_loss(tape, store, cfg, ds.train_prefix(train_users[b])));
            auto total = tape.mean(tape.stack_rows(losses));
            store.zero_grads();
            const double loss = tape.backward(total);
            if (!std::isfinite(loss))
                throw std::runtime_error("train_cf_encoder: loss diverged at epoch " + std::to_string(epoch));
            adam.step(store);
            epoch_loss += loss;
            ++batches;
        }
        res.epoch_losses.push_back(epoch_loss / std::max(1, batches));
        res.history.push_back(store.value("cf.item_emb"));
    }

    res.table.dim = cfg.dim;
    res.table.channel = Channel::collaborative;
    res.table.ids = ds.item_ids;
    for (int i = 0; i < ds.num_items(); ++i) res.table.index.emplace(ds.item_ids[static_cast<size_t>(i)], i);
    res.table.vectors = store.value("cf.item_emb");
    return res;
}

}  // namespace dualrec
