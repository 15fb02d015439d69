#pragma once

// Pre-LN causal transformer used by both the collaborative sequence encoder
// and the code generator. The tape path builds the training graph; the
// incremental path is a tape-free re-implementation with per-layer key/value
// caches for beam decoding. Both read the same parameter names, and a unit
// test pins them to each other numerically.

#include <cmath>
#include <string>
#include <vector>

#include "dualrec/autograd.hpp"
#include "dualrec/tensor.hpp"

namespace dualrec {

struct TransformerConfig {
    int dim = 128;
    int layers = 2;
    int heads = 4;
    int mlp_mult = 4;
};

inline void init_transformer_params(ParamStore& store, const std::string& prefix, const TransformerConfig& cfg,
                                    Rng& rng, double init_std = 0.05) {
    const int d = cfg.dim;
    const int m = cfg.mlp_mult * d;
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = prefix + "blk" + std::to_string(l) + ".";
        store.create(p + "ln1.g", Tensor::full({d}, 1.0));
        store.create(p + "ln1.b", Tensor::zeros({d}));
        store.create(p + "wq", randn(rng, {d, d}, init_std));
        store.create(p + "bq", Tensor::zeros({d}));
        store.create(p + "wk", randn(rng, {d, d}, init_std));
        store.create(p + "bk", Tensor::zeros({d}));
        store.create(p + "wv", randn(rng, {d, d}, init_std));
        store.create(p + "bv", Tensor::zeros({d}));
        store.create(p + "wo", randn(rng, {d, d}, init_std));
        store.create(p + "bo", Tensor::zeros({d}));
        store.create(p + "ln2.g", Tensor::full({d}, 1.0));
        store.create(p + "ln2.b", Tensor::zeros({d}));
        store.create(p + "w1", randn(rng, {d, m}, init_std));
        store.create(p + "b1", Tensor::zeros({m}));
        store.create(p + "w2", randn(rng, {m, d}, init_std));
        store.create(p + "b2", Tensor::zeros({d}));
    }
    store.create(prefix + "ln_f.g", Tensor::full({d}, 1.0));
    store.create(prefix + "ln_f.b", Tensor::zeros({d}));
}

// x: (n, dim) token embeddings; returns (n, dim) final hidden states
inline Tape::Id transformer_stack(Tape& tape, ParamStore& store, const std::string& prefix,
                                  const TransformerConfig& cfg, Tape::Id x) {
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = prefix + "blk" + std::to_string(l) + ".";
        auto h = tape.layer_norm_rows(x, tape.param(store, p + "ln1.g"), tape.param(store, p + "ln1.b"));
        auto q = tape.affine(h, tape.param(store, p + "wq"), tape.param(store, p + "bq"));
        auto k = tape.affine(h, tape.param(store, p + "wk"), tape.param(store, p + "bk"));
        auto v = tape.affine(h, tape.param(store, p + "wv"), tape.param(store, p + "bv"));
        auto a = tape.multi_head_attention(q, k, v, cfg.heads, true);
        x = tape.add(x, tape.affine(a, tape.param(store, p + "wo"), tape.param(store, p + "bo")));
        auto h2 = tape.layer_norm_rows(x, tape.param(store, p + "ln2.g"), tape.param(store, p + "ln2.b"));
        auto up = tape.gelu(tape.affine(h2, tape.param(store, p + "w1"), tape.param(store, p + "b1")));
        x = tape.add(x, tape.affine(up, tape.param(store, p + "w2"), tape.param(store, p + "b2")));
    }
    return tape.layer_norm_rows(x, tape.param(store, prefix + "ln_f.g"), tape.param(store, prefix + "ln_f.b"));
}

// ---- tape-free incremental forward ----

namespace nnops {

inline void layer_norm_row(const double* x, const double* g, const double* b, double* out, int d,
                           double eps = 1e-5) {
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += x[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
        const double dv = x[j] - mu;
        var += dv * dv;
    }
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) out[j] = (x[j] - mu) * is * g[j] + b[j];
}

inline void affine_row(const double* x, const Tensor& w, const Tensor& bias, double* out) {
    const int d = w.rows(), m = w.cols();
    for (int j = 0; j < m; ++j) out[j] = bias.at(j);
    for (int p = 0; p < d; ++p) {
        const double xv = x[p];
        if (xv == 0.0) continue;
        const double* wrow = w.row_ptr(p);
        for (int j = 0; j < m; ++j) out[j] += xv * wrow[j];
    }
}

inline void gelu_row(double* x, int n) {
    for (int j = 0; j < n; ++j) x[j] = 0.5 * x[j] * (1.0 + std::erf(x[j] * 0.70710678118654752440));
}

inline void softmax_inplace(double* x, int n) {
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
        x[j] = std::exp(x[j] - mx);
        s += x[j];
    }
    const double inv = 1.0 / s;
    for (int j = 0; j < n; ++j) x[j] *= inv;
}

}  // namespace nnops

// Parameter snapshot in plain tensors, detached from the store.
struct TransformerWeights {
    TransformerConfig cfg;
    struct Block {
        Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };
    std::vector<Block> blocks;
    Tensor ln_f_g, ln_f_b;

    static TransformerWeights from_store(const ParamStore& store, const std::string& prefix,
                                         const TransformerConfig& cfg) {
        TransformerWeights w;
        w.cfg = cfg;
        for (int l = 0; l < cfg.layers; ++l) {
            const std::string p = prefix + "blk" + std::to_string(l) + ".";
            Block b;
            b.ln1_g = store.value(p + "ln1.g");
            b.ln1_b = store.value(p + "ln1.b");
            b.wq = store.value(p + "wq");
            b.bq = store.value(p + "bq");
            b.wk = store.value(p + "wk");
            b.bk = store.value(p + "bk");
            b.wv = store.value(p + "wv");
            b.bv = store.value(p + "bv");
            b.wo = store.value(p + "wo");
            b.bo = store.value(p + "bo");
            b.ln2_g = store.value(p + "ln2.g");
            b.ln2_b = store.value(p + "ln2.b");
            b.w1 = store.value(p + "w1");
            b.b1 = store.value(p + "b1");
            b.w2 = store.value(p + "w2");
            b.b2 = store.value(p + "b2");
            w.blocks.push_back(std::move(b));
        }
        w.ln_f_g = store.value(prefix + "ln_f.g");
        w.ln_f_b = store.value(prefix + "ln_f.b");
        return w;
    }
};

// Key/value cache per layer; rows append as tokens are consumed.
struct DecoderCache {
    int len = 0;
    std::vector<std::vector<double>> keys;    // per layer, len * dim flattened
    std::vector<std::vector<double>> values;

    explicit DecoderCache(int layers = 0) : keys(static_cast<size_t>(layers)), values(static_cast<size_t>(layers)) {}
};

// Feeds one token embedding (length dim) through the stack, appending to the
// cache; returns the final hidden state for this position.
inline std::vector<double> transformer_step(const TransformerWeights& w, DecoderCache& cache,
                                            const std::vector<double>& token_emb) {
    const int d = w.cfg.dim;
    const int heads = w.cfg.heads;
    const int dh = d / heads;
    const double iscale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> x = token_emb;
    std::vector<double> h(static_cast<size_t>(d)), q(static_cast<size_t>(d)), k(static_cast<size_t>(d)),
        v(static_cast<size_t>(d)), attn_out(static_cast<size_t>(d)), tmp;
    for (int l = 0; l < w.cfg.layers; ++l) {
        const auto& blk = w.blocks[static_cast<size_t>(l)];
        nnops::layer_norm_row(x.data(), blk.ln1_g.data.data(), blk.ln1_b.data.data(), h.data(), d);
        nnops::affine_row(h.data(), blk.wq, blk.bq, q.data());
        nnops::affine_row(h.data(), blk.wk, blk.bk, k.data());
        nnops::affine_row(h.data(), blk.wv, blk.bv, v.data());
        auto& kc = cache.keys[static_cast<size_t>(l)];
        auto& vc = cache.values[static_cast<size_t>(l)];
        kc.insert(kc.end(), k.begin(), k.end());
        vc.insert(vc.end(), v.begin(), v.end());
        const int n = cache.len + 1;
        std::vector<double> scores(static_cast<size_t>(n));
        for (int hd = 0; hd < heads; ++hd) {
            const int off = hd * dh;
            for (int j = 0; j < n; ++j)
                scores[static_cast<size_t>(j)] = iscale * dot_span(q.data() + off, kc.data() + static_cast<size_t>(j) * d + off, dh);
            nnops::softmax_inplace(scores.data(), n);
            for (int c = 0; c < dh; ++c) attn_out[static_cast<size_t>(off + c)] = 0.0;
            for (int j = 0; j < n; ++j) {
                const double aw = scores[static_cast<size_t>(j)];
                const double* vrow = vc.data() + static_cast<size_t>(j) * d + off;
                for (int c = 0; c < dh; ++c) attn_out[static_cast<size_t>(off + c)] += aw * vrow[c];
            }
        }
        tmp.assign(static_cast<size_t>(d), 0.0);
        nnops::affine_row(attn_out.data(), blk.wo, blk.bo, tmp.data());
        for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] += tmp[static_cast<size_t>(j)];
        nnops::layer_norm_row(x.data(), blk.ln2_g.data.data(), blk.ln2_b.data.data(), h.data(), d);
        std::vector<double> up(static_cast<size_t>(blk.w1.cols()));
        nnops::affine_row(h.data(), blk.w1, blk.b1, up.data());
        nnops::gelu_row(up.data(), static_cast<int>(up.size()));
        nnops::affine_row(up.data(), blk.w2, blk.b2, tmp.data());
        for (int j = 0; j < d; ++j) x[static_cast<size_t>(j)] += tmp[static_cast<size_t>(j)];
    }
    ++cache.len;
    nnops::layer_norm_row(x.data(), w.ln_f_g.data.data(), w.ln_f_b.data.data(), h.data(), d);
    return h;
}

}  // namespace dualrec
