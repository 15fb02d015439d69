#pragma once

// Autoregressive generator over combined dual-codebook token sequences, plus
// the prefix trie and the constrained beam decoder that maps generated code
// tuples back to ranked items.

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dualrec/autograd.hpp"
#include "dualrec/route.hpp"
#include "dualrec/tensor.hpp"
#include "dualrec/transformer.hpp"

namespace dualrec {

// Disjoint id ranges per (channel, level) block plus the special tokens.
struct TokenVocab {
    int codebook_size = 0;  // K
    int budget = 0;         // L_total

    static constexpr int kBos = 0;
    static constexpr int kEos = 1;
    static constexpr int kPad = 2;
    static constexpr int kNull = 3;
    static constexpr int kBase = 4;

    int size() const { return 2 * budget * codebook_size + kBase; }

    int id(Channel channel, int level, int index) const {
        if (level < 0 || level >= budget) throw std::out_of_range("token vocab: bad level");
        if (index < 0 || index >= codebook_size) throw std::out_of_range("token vocab: bad code index");
        const int block = (channel == Channel::collaborative ? 0 : budget) + level;
        return kBase + block * codebook_size + index;
    }

    struct Decoded {
        bool special = false;
        Channel channel = Channel::collaborative;
        int level = 0;
        int index = 0;
    };

    Decoded decode(int token) const {
        if (token < 0 || token >= size()) throw std::out_of_range("token vocab: bad token id");
        Decoded d;
        if (token < kBase) {
            d.special = true;
            return d;
        }
        const int rel = token - kBase;
        const int block = rel / codebook_size;
        d.index = rel % codebook_size;
        d.channel = block < budget ? Channel::collaborative : Channel::semantic;
        d.level = block % budget;
        return d;
    }

    // segment ids: 0 special, 1 collaborative, 2 semantic, 3 null
    int segment(int token) const {
        if (token == kNull) return 3;
        if (token < kBase) return 0;
        return decode(token).channel == Channel::collaborative ? 1 : 2;
    }
};

// Fixed layout: collaborative sub-block left-aligned, semantic sub-block
// right-aligned, NULL tokens in between. Slot count is always L_total.
struct ItemTokenLayout {
    std::vector<int> tokens;

    // slot -> (channel, level) for masked slots; NULL slots map to nullopt
    struct SlotRole {
        bool is_null = true;
        Channel channel = Channel::collaborative;
        int level = 0;
    };
    std::vector<SlotRole> roles;
};

inline ItemTokenLayout tokenize_item(const std::vector<int>& codes_col, const std::vector<int>& codes_sem,
                                     int l_col, int l_sem, const TokenVocab& vocab) {
    const int total = vocab.budget;
    if (l_col < 0 || l_sem < 0 || l_col + l_sem > total)
        throw std::invalid_argument("tokenize_item: allocation exceeds the budget");
    if (static_cast<int>(codes_col.size()) < l_col || static_cast<int>(codes_sem.size()) < l_sem)
        throw std::invalid_argument("tokenize_item: code lists shorter than the allocation");
    ItemTokenLayout layout;
    layout.tokens.assign(static_cast<size_t>(total), TokenVocab::kNull);
    layout.roles.assign(static_cast<size_t>(total), {});
    for (int k = 0; k < l_col; ++k) {
        layout.tokens[static_cast<size_t>(k)] = vocab.id(Channel::collaborative, k, codes_col[static_cast<size_t>(k)]);
        layout.roles[static_cast<size_t>(k)] = {false, Channel::collaborative, k};
    }
    for (int j = 0; j < l_sem; ++j) {
        const int slot = total - l_sem + j;
        layout.tokens[static_cast<size_t>(slot)] = vocab.id(Channel::semantic, j, codes_sem[static_cast<size_t>(j)]);
        layout.roles[static_cast<size_t>(slot)] = {false, Channel::semantic, j};
    }
    return layout;
}

// ---- prefix trie ----

struct CodeTrie {
    struct Node {
        std::map<int, int> children;  // token -> node index (ordered: deterministic)
        std::vector<int> items;       // leaf payload, ranked most popular first
    };
    std::vector<Node> nodes;
    int depth = 0;
    std::int64_t collisions = 0;                  // sum of (leaf size - 1)
    std::map<int, std::int64_t> leaf_histogram;   // items-per-leaf -> count

    const Node& root() const { return nodes[0]; }

    // walks a full tuple; returns leaf node index or -1
    int walk(const std::vector<int>& tokens) const {
        int at = 0;
        for (int t : tokens) {
            const auto it = nodes[static_cast<size_t>(at)].children.find(t);
            if (it == nodes[static_cast<size_t>(at)].children.end()) return -1;
            at = it->second;
        }
        return at;
    }
};

inline CodeTrie build_trie(const std::vector<ItemTokenLayout>& layouts, const std::vector<std::int64_t>& counts) {
    CodeTrie trie;
    trie.nodes.emplace_back();
    if (layouts.empty()) return trie;
    trie.depth = static_cast<int>(layouts[0].tokens.size());
    for (size_t item = 0; item < layouts.size(); ++item) {
        if (static_cast<int>(layouts[item].tokens.size()) != trie.depth)
            throw std::invalid_argument("build_trie: inconsistent layout length");
        int at = 0;
        for (int token : layouts[item].tokens) {
            auto [it, inserted] = trie.nodes[static_cast<size_t>(at)].children.emplace(
                token, static_cast<int>(trie.nodes.size()));
            if (inserted) trie.nodes.emplace_back();
            at = it->second;
        }
        trie.nodes[static_cast<size_t>(at)].items.push_back(static_cast<int>(item));
    }
    for (auto& node : trie.nodes) {
        if (node.items.empty()) continue;
        std::sort(node.items.begin(), node.items.end(), [&counts](int a, int b) {
            const auto ca = counts[static_cast<size_t>(a)], cb = counts[static_cast<size_t>(b)];
            return ca != cb ? ca > cb : a < b;
        });
        trie.collisions += static_cast<std::int64_t>(node.items.size()) - 1;
        ++trie.leaf_histogram[static_cast<int>(node.items.size())];
    }
    return trie;
}

// ---- generator model ----

struct GenConfig {
    int dim = 128;
    int layers = 2;
    int heads = 4;
    int mlp_mult = 4;
    int max_items = 20;  // context window in items
    double lr = 2e-3;
    double init_std = 0.05;

    int max_positions(int budget) const { return max_items * budget + 1; }
};

struct Generator {
    GenConfig cfg;
    TokenVocab vocab;

    void init_params(ParamStore& store, Rng& rng) const {
        store.create("gen.tok_emb", randn(rng, {vocab.size(), cfg.dim}, cfg.init_std));
        store.create("gen.pos_emb", randn(rng, {cfg.max_positions(vocab.budget), cfg.dim}, cfg.init_std));
        store.create("gen.seg_emb", randn(rng, {4, cfg.dim}, cfg.init_std));
        TransformerConfig tcfg{cfg.dim, cfg.layers, cfg.heads, cfg.mlp_mult};
        init_transformer_params(store, "gen.", tcfg, rng, cfg.init_std);
    }
};

// Per-item soft masks as tape nodes; absent items fall back to hard inputs.
struct SoftMaskNodes {
    Tape::Id mask_col = -1;  // (L_total) values from the routing ratio
    Tape::Id mask_sem = -1;
};
using MaskMap = std::unordered_map<int, SoftMaskNodes>;

// Teacher-forced token sequence loss for one user. Targets cover every slot
// of every item after the first; inputs are mask-blended when masks are
// given: slot embedding = m * code_embedding + (1-m) * NULL embedding.
inline Tape::Id generator_sequence_loss(Tape& tape, ParamStore& store, const Generator& gen,
                                        const std::vector<int>& item_seq,
                                        const std::vector<ItemTokenLayout>& layouts, const MaskMap* masks) {
    if (item_seq.size() < 2) throw std::invalid_argument("generator_sequence_loss: need at least 2 items");
    const int budget = gen.vocab.budget;
    const int keep = std::min<int>(static_cast<int>(item_seq.size()), gen.cfg.max_items);
    const std::vector<int> items(item_seq.end() - keep, item_seq.end());

    std::vector<int> full_tokens;
    std::vector<int> owner_item;  // position in `items`, -1 for BOS
    full_tokens.push_back(TokenVocab::kBos);
    owner_item.push_back(-1);
    for (size_t t = 0; t < items.size(); ++t) {
        const auto& layout = layouts[static_cast<size_t>(items[t])];
        for (int k = 0; k < budget; ++k) {
            full_tokens.push_back(layout.tokens[static_cast<size_t>(k)]);
            owner_item.push_back(static_cast<int>(t));
        }
    }
    const int n_in = static_cast<int>(full_tokens.size()) - 1;
    const std::vector<int> inputs(full_tokens.begin(), full_tokens.end() - 1);
    std::vector<int> targets(full_tokens.begin() + 1, full_tokens.end());
    std::vector<double> weights(static_cast<size_t>(n_in));
    for (int p = 0; p < n_in; ++p)
        weights[static_cast<size_t>(p)] = owner_item[static_cast<size_t>(p) + 1] >= 1 ? 1.0 : 0.0;

    std::vector<int> positions(static_cast<size_t>(n_in));
    std::iota(positions.begin(), positions.end(), 0);
    std::vector<int> segments(static_cast<size_t>(n_in));
    for (int p = 0; p < n_in; ++p) segments[static_cast<size_t>(p)] = gen.vocab.segment(inputs[static_cast<size_t>(p)]);

    auto tok_table = tape.param(store, "gen.tok_emb");
    auto tok_rows = tape.gather_rows(tok_table, inputs);

    Tape::Id x;
    if (masks != nullptr) {
        // per-position blend factor: 1 for BOS and NULL slots, m_k for codes
        std::vector<Tape::Id> blend(static_cast<size_t>(n_in));
        auto one = tape.constant(1.0);
        for (int p = 0; p < n_in; ++p) {
            const int owner = owner_item[static_cast<size_t>(p)];
            Tape::Id b = one;
            if (owner >= 0) {
                const auto& layout = layouts[static_cast<size_t>(items[static_cast<size_t>(owner)])];
                const int slot = (p - 1) % budget;
                const auto& role = layout.roles[static_cast<size_t>(slot)];
                if (!role.is_null) {
                    auto found = masks->find(items[static_cast<size_t>(owner)]);
                    if (found != masks->end())
                        b = tape.select(role.channel == Channel::collaborative ? found->second.mask_col
                                                                               : found->second.mask_sem,
                                        role.level);
                }
            }
            blend[static_cast<size_t>(p)] = b;
        }
        auto blend_vec = tape.stack_rows(blend);
        std::vector<int> null_ids(static_cast<size_t>(n_in), TokenVocab::kNull);
        auto null_rows = tape.gather_rows(tok_table, null_ids);
        // null + m * (tok - null)
        x = tape.add(null_rows, tape.scale_rows(tape.sub(tok_rows, null_rows), blend_vec));
    } else {
        x = tok_rows;
    }

    x = tape.add(x, tape.gather_rows(tape.param(store, "gen.pos_emb"), positions));
    x = tape.add(x, tape.gather_rows(tape.param(store, "gen.seg_emb"), segments));

    TransformerConfig tcfg{gen.cfg.dim, gen.cfg.layers, gen.cfg.heads, gen.cfg.mlp_mult};
    auto h = transformer_stack(tape, store, "gen.", tcfg, x);
    auto logits = tape.matmul_nt(h, tok_table);
    return tape.cross_entropy_rows(logits, std::move(targets), std::move(weights));
}

// ---- constrained decoding ----

struct ScoredItem {
    int item = 0;
    double score = 0.0;  // total log-probability of the code tuple
};

// Inference-path scorer: parameter snapshot + KV-cached stepping.
class GeneratorScorer {
public:
    GeneratorScorer(const ParamStore& store, const Generator& gen)
        : gen_(gen),
          weights_(TransformerWeights::from_store(store, "gen.",
                                                  TransformerConfig{gen.cfg.dim, gen.cfg.layers, gen.cfg.heads,
                                                                    gen.cfg.mlp_mult})),
          tok_emb_(store.value("gen.tok_emb")),
          pos_emb_(store.value("gen.pos_emb")),
          seg_emb_(store.value("gen.seg_emb")) {}

    // next-token distribution support: hidden state h -> log-prob of token v
    // under the tied output head
    double token_logprob(const std::vector<double>& h, int token, double logsumexp) const {
        return dot_span(h.data(), tok_emb_.row_ptr(token), gen_.cfg.dim) - logsumexp;
    }

    const TransformerWeights& weights() const { return weights_; }

    double full_logsumexp(const std::vector<double>& h) const {
        const int vocab = tok_emb_.rows();
        double mx = -1e300;
        std::vector<double> logits(static_cast<size_t>(vocab));
        for (int v = 0; v < vocab; ++v) {
            logits[static_cast<size_t>(v)] = dot_span(h.data(), tok_emb_.row_ptr(v), gen_.cfg.dim);
            mx = std::max(mx, logits[static_cast<size_t>(v)]);
        }
        double s = 0.0;
        for (int v = 0; v < vocab; ++v) s += std::exp(logits[static_cast<size_t>(v)] - mx);
        return mx + std::log(s);
    }

    std::vector<double> token_input(int token, int position) const {
        std::vector<double> e(tok_emb_.row_ptr(token), tok_emb_.row_ptr(token) + gen_.cfg.dim);
        const int seg = gen_.vocab.segment(token);
        for (int j = 0; j < gen_.cfg.dim; ++j)
            e[static_cast<size_t>(j)] += pos_emb_.at(position, j) + seg_emb_.at(seg, j);
        return e;
    }

    // Beam search over the trie: at each slot candidates are restricted to
    // children of the current trie node; completed beams are scored by total
    // log-probability; multi-item leaves rank by train popularity.
    std::vector<ScoredItem> generate_items(const std::vector<int>& history,
                                           const std::vector<ItemTokenLayout>& layouts, const CodeTrie& trie,
                                           int beam_width, int top_k) const {
        if (history.empty()) throw std::invalid_argument("generate_items: empty history");
        if (beam_width < top_k) throw std::invalid_argument("generate_items: beam width must be >= K");
        const int budget = gen_.vocab.budget;
        const int keep = std::min<int>(static_cast<int>(history.size()), gen_.cfg.max_items - 1);
        std::vector<int> prefix_tokens{TokenVocab::kBos};
        for (auto it = history.end() - keep; it != history.end(); ++it)
            for (int k = 0; k < budget; ++k)
                prefix_tokens.push_back(layouts[static_cast<size_t>(*it)].tokens[static_cast<size_t>(k)]);

        struct Beam {
            DecoderCache cache;
            std::vector<double> hidden;
            double logp = 0.0;
            int node = 0;  // trie node
        };

        Beam root;
        root.cache = DecoderCache(gen_.cfg.layers);
        for (size_t p = 0; p < prefix_tokens.size(); ++p)
            root.hidden = transformer_step(weights_, root.cache, token_input(prefix_tokens[p], static_cast<int>(p)));
        const int base_pos = static_cast<int>(prefix_tokens.size());

        std::vector<Beam> beams{std::move(root)};
        for (int slot = 0; slot < budget; ++slot) {
            struct Cand {
                int beam = 0;
                int token = 0;
                int node = 0;
                double logp = 0.0;
            };
            std::vector<Cand> cands;
            for (size_t b = 0; b < beams.size(); ++b) {
                const double lse = full_logsumexp(beams[b].hidden);
                for (const auto& [token, child] : trie.nodes[static_cast<size_t>(beams[b].node)].children)
                    cands.push_back({static_cast<int>(b), token, child,
                                     beams[b].logp + token_logprob(beams[b].hidden, token, lse)});
            }
            if (cands.empty()) throw std::logic_error("generate_items: beam exhausted (trie must prevent this)");
            const size_t keep_n = std::min(cands.size(), static_cast<size_t>(beam_width));
            std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep_n), cands.end(),
                              [](const Cand& a, const Cand& b) {
                                  if (a.logp != b.logp) return a.logp > b.logp;
                                  if (a.beam != b.beam) return a.beam < b.beam;
                                  return a.token < b.token;
                              });
            std::vector<Beam> next;
            next.reserve(keep_n);
            for (size_t c = 0; c < keep_n; ++c) {
                const auto& cand = cands[c];
                Beam nb;
                nb.cache = beams[static_cast<size_t>(cand.beam)].cache;  // copy: parent may fork
                nb.logp = cand.logp;
                nb.node = cand.node;
                nb.hidden = transformer_step(weights_, nb.cache, token_input(cand.token, base_pos + slot));
                next.push_back(std::move(nb));
            }
            beams = std::move(next);
        }

        std::vector<ScoredItem> out;
        for (const auto& beam : beams) {
            for (int item : trie.nodes[static_cast<size_t>(beam.node)].items) {
                out.push_back({item, beam.logp});
                if (static_cast<int>(out.size()) >= top_k) return out;
            }
        }
        return out;
    }

private:
    Generator gen_;
    TransformerWeights weights_;
    Tensor tok_emb_;
    Tensor pos_emb_;
    Tensor seg_emb_;
};

}  // namespace dualrec
