#pragma once

// Residual-quantization VAE: a 2-layer MLP encoder/decoder around a stack of
// per-level codebooks. One instance per representation channel. Quantization
// gradients follow the straight-through convention; codebooks learn from the
// vector-quantization term only.

#include <cmath>
#include <string>
#include <vector>

#include "dualrec/autograd.hpp"
#include "dualrec/embed.hpp"
#include "dualrec/optim.hpp"
#include "dualrec/tensor.hpp"

namespace dualrec {

struct RqVaeConfig {
    int input_dim = 64;
    int code_dim = 32;
    int hidden = 64;
    int codebook_size = 512;  // K
    int levels = 3;           // L_ch
    double beta = 0.25;       // commitment weight
    int epochs = 40;
    int batch = 128;
    double lr = 2e-3;
    double init_std = 0.08;
    double reinit_noise = 0.01;
};

struct ResidualTrace {
    std::vector<std::vector<double>> residuals;  // z_0 .. z_L
    double final_norm = 0.0;
};

struct ItemCodes {
    std::vector<int> indices;  // one per level
    Channel channel = Channel::semantic;
};

struct RqVae {
    RqVaeConfig cfg;
    std::string prefix;  // parameter namespace, e.g. "sem."
    Channel channel = Channel::semantic;

    std::string cb_name(int level) const { return prefix + "cb" + std::to_string(level); }

    void init_params(ParamStore& store, Rng& rng, const Tensor& embeddings) const {
        const auto& c = cfg;
        store.create(prefix + "enc.w1", randn(rng, {c.input_dim, c.hidden}, c.init_std));
        store.create(prefix + "enc.b1", Tensor::zeros({c.hidden}));
        store.create(prefix + "enc.w2", randn(rng, {c.hidden, c.code_dim}, c.init_std));
        store.create(prefix + "enc.b2", Tensor::zeros({c.code_dim}));
        store.create(prefix + "dec.w1", randn(rng, {c.code_dim, c.hidden}, c.init_std));
        store.create(prefix + "dec.b1", Tensor::zeros({c.hidden}));
        store.create(prefix + "dec.w2", randn(rng, {c.hidden, c.input_dim}, c.init_std));
        store.create(prefix + "dec.b2", Tensor::zeros({c.input_dim}));

        // greedy residual init: each level's entries are sampled residuals
        // left over after quantizing against the shallower levels
        const int n = embeddings.rows();
        std::vector<std::vector<double>> residuals(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) residuals[static_cast<size_t>(i)] = encode_vec(store, embeddings.row_ptr(i));
        for (int level = 0; level < c.levels; ++level) {
            Tensor cb({c.codebook_size, c.code_dim});
            for (int k = 0; k < c.codebook_size; ++k) {
                const auto& src = residuals[static_cast<size_t>(rng.index(n))];
                for (int j = 0; j < c.code_dim; ++j)
                    cb.at(k, j) = src[static_cast<size_t>(j)] + c.reinit_noise * rng.normal();
            }
            auto& created = store.create(cb_name(level), std::move(cb));
            for (auto& r : residuals) {
                const int idx = nearest_code(created, r.data());
                for (int j = 0; j < c.code_dim; ++j) r[static_cast<size_t>(j)] -= created.at(idx, j);
            }
        }
    }

    // encoder forward without the tape
    std::vector<double> encode_vec(const ParamStore& store, const double* emb) const {
        std::vector<double> h(static_cast<size_t>(cfg.hidden));
        nnops::affine_row(emb, store.value(prefix + "enc.w1"), store.value(prefix + "enc.b1"), h.data());
        for (auto& v : h) v = std::max(v, 0.0);
        std::vector<double> z(static_cast<size_t>(cfg.code_dim));
        nnops::affine_row(h.data(), store.value(prefix + "enc.w2"), store.value(prefix + "enc.b2"), z.data());
        return z;
    }

    std::vector<double> decode_vec(const ParamStore& store, const double* code_sum) const {
        std::vector<double> h(static_cast<size_t>(cfg.hidden));
        nnops::affine_row(code_sum, store.value(prefix + "dec.w1"), store.value(prefix + "dec.b1"), h.data());
        for (auto& v : h) v = std::max(v, 0.0);
        std::vector<double> out(static_cast<size_t>(cfg.input_dim));
        nnops::affine_row(h.data(), store.value(prefix + "dec.w2"), store.value(prefix + "dec.b2"), out.data());
        return out;
    }

    // lowest index wins ties, which keeps assignments deterministic
    static int nearest_code(const Tensor& codebook, const double* v) {
        int best = 0;
        double best_d = sq_dist(codebook.row_ptr(0), v, codebook.cols());
        for (int k = 1; k < codebook.rows(); ++k) {
            const double d = sq_dist(codebook.row_ptr(k), v, codebook.cols());
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        return best;
    }

    // greedy per-level assignment; returns indices plus the residual chain
    std::pair<ItemCodes, ResidualTrace> encode(const ParamStore& store, const double* emb) const {
        ItemCodes codes;
        codes.channel = channel;
        ResidualTrace trace;
        std::vector<double> z = encode_vec(store, emb);
        trace.residuals.push_back(z);
        for (int level = 0; level < cfg.levels; ++level) {
            const auto& cb = store.value(cb_name(level));
            const int idx = nearest_code(cb, z.data());
            codes.indices.push_back(idx);
            for (int j = 0; j < cfg.code_dim; ++j) z[static_cast<size_t>(j)] -= cb.at(idx, j);
            trace.residuals.push_back(z);
        }
        trace.final_norm = std::sqrt(dot_span(z.data(), z.data(), cfg.code_dim));
        return {std::move(codes), std::move(trace)};
    }

    std::vector<std::vector<int>> encode_all(const ParamStore& store, const Tensor& embeddings) const {
        std::vector<std::vector<int>> out(static_cast<size_t>(embeddings.rows()));
        for (int i = 0; i < embeddings.rows(); ++i)
            out[static_cast<size_t>(i)] = encode(store, embeddings.row_ptr(i)).first.indices;
        return out;
    }

    std::vector<double> code_sum(const ParamStore& store, const std::vector<int>& indices) const {
        if (static_cast<int>(indices.size()) != cfg.levels)
            throw std::invalid_argument("rq_decode: expected " + std::to_string(cfg.levels) + " code levels");
        std::vector<double> s(static_cast<size_t>(cfg.code_dim), 0.0);
        for (int level = 0; level < cfg.levels; ++level) {
            const auto& cb = store.value(cb_name(level));
            const int idx = indices[static_cast<size_t>(level)];
            if (idx < 0 || idx >= cfg.codebook_size) throw std::out_of_range("rq_decode: code index out of range");
            for (int j = 0; j < cfg.code_dim; ++j) s[static_cast<size_t>(j)] += cb.at(idx, j);
        }
        return s;
    }

    std::vector<double> decode(const ParamStore& store, const std::vector<int>& indices) const {
        const auto s = code_sum(store, indices);
        return decode_vec(store, s.data());
    }
};

struct RqLossParts {
    double reconstruction = 0.0;
    double vq = 0.0;
    double commitment = 0.0;
    double total = 0.0;
};

struct RqLossNodes {
    Tape::Id loss;
    Tape::Id reconstructed;  // (batch, input_dim), for the alignment objective
    RqLossParts parts;
};

// Tape loss for a batch with frozen code assignments. Straight-through:
// the decoder input is z0 + sg(sum(C) - z0), so reconstruction gradients
// reach the encoder as if quantization were the identity.
inline RqLossNodes rqvae_loss(Tape& tape, ParamStore& store, const RqVae& model, const Tensor& emb_batch,
                              const std::vector<std::vector<int>>& codes) {
    const auto& c = model.cfg;
    const int b = emb_batch.rows();
    if (static_cast<int>(codes.size()) != b) throw std::invalid_argument("rqvae_loss: codes/batch size mismatch");

    auto emb = tape.input(emb_batch);
    auto h = tape.relu(tape.affine(emb, tape.param(store, model.prefix + "enc.w1"),
                                   tape.param(store, model.prefix + "enc.b1")));
    auto z0 = tape.affine(h, tape.param(store, model.prefix + "enc.w2"), tape.param(store, model.prefix + "enc.b2"));

    Tape::Id z_prev = z0;
    Tape::Id vq_total = tape.constant(0.0);
    Tape::Id commit_total = tape.constant(0.0);
    Tape::Id cw_sum = -1;
    for (int level = 0; level < c.levels; ++level) {
        std::vector<int> idx(static_cast<size_t>(b));
        for (int i = 0; i < b; ++i) idx[static_cast<size_t>(i)] = codes[static_cast<size_t>(i)][static_cast<size_t>(level)];
        auto cw = tape.gather_rows(tape.param(store, model.cb_name(level)), idx);
        vq_total = tape.add(vq_total, tape.scale(tape.sum_sq(tape.sub(tape.detach(z_prev), cw)),
                                                 1.0 / static_cast<double>(b)));
        commit_total = tape.add(commit_total, tape.scale(tape.sum_sq(tape.sub(z_prev, tape.detach(cw))),
                                                         1.0 / static_cast<double>(b)));
        cw_sum = level == 0 ? cw : tape.add(cw_sum, cw);
        z_prev = tape.sub(z_prev, tape.detach(cw));
    }

    auto zq = tape.add(z0, tape.detach(tape.sub(tape.detach(cw_sum), z0)));  // values of cw_sum, grads of z0
    auto hq = tape.relu(tape.affine(zq, tape.param(store, model.prefix + "dec.w1"),
                                    tape.param(store, model.prefix + "dec.b1")));
    auto recon = tape.affine(hq, tape.param(store, model.prefix + "dec.w2"),
                             tape.param(store, model.prefix + "dec.b2"));
    auto recon_mse = tape.scale(tape.sum_sq(tape.sub(emb, recon)), 1.0 / static_cast<double>(b));

    auto loss = tape.add(recon_mse, tape.add(vq_total, tape.scale(commit_total, c.beta)));
    RqLossNodes out;
    out.loss = loss;
    out.reconstructed = recon;
    out.parts.reconstruction = tape.val(recon_mse).item();
    out.parts.vq = tape.val(vq_total).item();
    out.parts.commitment = tape.val(commit_total).item();
    out.parts.total = tape.val(loss).item();
    return out;
}

struct CodebookUsage {
    std::vector<std::vector<std::int64_t>> histogram;  // per level, per code
    std::vector<double> perplexity;                    // per level
};

inline CodebookUsage codebook_usage(const ParamStore& store, const RqVae& model, const Tensor& embeddings) {
    CodebookUsage usage;
    usage.histogram.assign(static_cast<size_t>(model.cfg.levels),
                           std::vector<std::int64_t>(static_cast<size_t>(model.cfg.codebook_size), 0));
    for (int i = 0; i < embeddings.rows(); ++i) {
        const auto codes = model.encode(store, embeddings.row_ptr(i)).first;
        for (int level = 0; level < model.cfg.levels; ++level)
            ++usage.histogram[static_cast<size_t>(level)][static_cast<size_t>(codes.indices[static_cast<size_t>(level)])];
    }
    const double total = static_cast<double>(embeddings.rows());
    for (int level = 0; level < model.cfg.levels; ++level) {
        double entropy = 0.0;
        for (const auto count : usage.histogram[static_cast<size_t>(level)]) {
            if (count == 0) continue;
            const double p = static_cast<double>(count) / total;
            entropy -= p * std::log(p);
        }
        usage.perplexity.push_back(std::exp(entropy));
    }
    return usage;
}

struct RqTrainReport {
    std::vector<double> epoch_losses;
    std::vector<double> perplexity;  // per level, after training
    double final_mse = 0.0;
    int dead_code_resets = 0;
};

inline double rq_reconstruction_mse(const ParamStore& store, const RqVae& model, const Tensor& embeddings) {
    double total = 0.0;
    for (int i = 0; i < embeddings.rows(); ++i) {
        const auto codes = model.encode(store, embeddings.row_ptr(i)).first;
        const auto rec = model.decode(store, codes.indices);
        total += sq_dist(rec.data(), embeddings.row_ptr(i), model.cfg.input_dim);
    }
    return total / static_cast<double>(embeddings.rows());
}

// Gradient training with per-epoch dead-code reinitialization: a code unused
// for a full epoch is reset to a random encoder output plus small noise.
inline RqTrainReport train_rqvae(ParamStore& store, RqVae& model, const Tensor& embeddings, std::uint64_t seed) {
    const auto& c = model.cfg;
    const int n = embeddings.rows();
    Rng rng(Rng::stream_seed(seed, "rqvae." + model.prefix));
    if (!store.has(model.prefix + "enc.w1")) model.init_params(store, rng, embeddings);

    RqTrainReport report;
    Adam adam;
    adam.lr = c.lr;
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < c.epochs; ++epoch) {
        rng.shuffle(order);
        std::vector<std::vector<std::int64_t>> usage(static_cast<size_t>(c.levels),
                                                     std::vector<std::int64_t>(static_cast<size_t>(c.codebook_size), 0));
        double epoch_loss = 0.0;
        int batches = 0;
        for (int start = 0; start < n; start += c.batch) {
            const int end = std::min(n, start + c.batch);
            Tensor batch({end - start, c.input_dim});
            for (int i = start; i < end; ++i)
                std::copy(embeddings.row_ptr(order[static_cast<size_t>(i)]),
                          embeddings.row_ptr(order[static_cast<size_t>(i)]) + c.input_dim,
                          batch.row_ptr(i - start));
            std::vector<std::vector<int>> codes(static_cast<size_t>(end - start));
            for (int i = 0; i < end - start; ++i) {
                codes[static_cast<size_t>(i)] = model.encode(store, batch.row_ptr(i)).first.indices;
                for (int level = 0; level < c.levels; ++level)
                    ++usage[static_cast<size_t>(level)][static_cast<size_t>(codes[static_cast<size_t>(i)][static_cast<size_t>(level)])];
            }
            Tape tape;
            auto nodes = rqvae_loss(tape, store, model, batch, codes);
            store.zero_grads();
            const double loss = tape.backward(nodes.loss);
            if (!std::isfinite(loss))
                throw std::runtime_error("train_rqvae(" + model.prefix + "): loss diverged at epoch " +
                                         std::to_string(epoch));
            adam.step(store);
            epoch_loss += loss;
            ++batches;
        }
        report.epoch_losses.push_back(epoch_loss / std::max(1, batches));

        // dead-code reinitialization
        for (int level = 0; level < c.levels; ++level) {
            auto& cb = store.value(model.cb_name(level));
            for (int k = 0; k < c.codebook_size; ++k) {
                if (usage[static_cast<size_t>(level)][static_cast<size_t>(k)] != 0) continue;
                const auto z = model.encode_vec(store, embeddings.row_ptr(rng.index(n)));
                for (int j = 0; j < c.code_dim; ++j)
                    cb.at(k, j) = z[static_cast<size_t>(j)] + c.reinit_noise * rng.normal();
                ++report.dead_code_resets;
            }
        }
    }

    const auto usage = codebook_usage(store, model, embeddings);
    report.perplexity = usage.perplexity;
    report.final_mse = rq_reconstruction_mse(store, model, embeddings);
    return report;
}

// `item_id<TAB>channel<TAB>idx1,idx2,...`
inline void write_code_assignments(const std::string& path, const std::vector<std::string>& item_ids,
                                   const std::vector<std::vector<int>>& codes, Channel channel, bool append = false) {
    std::ofstream out(path, append ? std::ios::app : std::ios::out);
    if (!out) throw std::runtime_error("cannot write code assignments: " + path);
    for (size_t i = 0; i < item_ids.size(); ++i) {
        out << item_ids[i] << '\t' << channel_name(channel) << '\t';
        const auto& c = codes[i];
        for (size_t j = 0; j < c.size(); ++j) out << (j ? "," : "") << c[j];
        out << '\n';
    }
}

}  // namespace dualrec
