#pragma once

// Cross-channel alignment: projection heads over reconstructed embeddings
// and an InfoNCE objective with in-batch negatives and cosine similarity.

#include <string>

#include "dualrec/autograd.hpp"
#include "dualrec/tensor.hpp"

namespace dualrec {

struct AlignConfig {
    int sem_dim = 64;   // semantic reconstruction width
    int col_dim = 64;   // collaborative reconstruction width
    int shared_dim = 64;
    double tau = 0.1;
    bool symmetric = false;
    double init_std = 0.08;
};

// b1 slightly positive and b2 random so a fully clipped ReLU row cannot
// produce the zero vector cosine similarity rejects
inline void init_projection_params(ParamStore& store, const AlignConfig& cfg, Rng& rng) {
    store.create("proj.sem.w1", randn(rng, {cfg.sem_dim, cfg.shared_dim}, cfg.init_std));
    store.create("proj.sem.b1", Tensor::full({cfg.shared_dim}, 0.01));
    store.create("proj.sem.w2", randn(rng, {cfg.shared_dim, cfg.shared_dim}, cfg.init_std));
    store.create("proj.sem.b2", randn(rng, {cfg.shared_dim}, 0.01));
    store.create("proj.col.w1", randn(rng, {cfg.col_dim, cfg.shared_dim}, cfg.init_std));
    store.create("proj.col.b1", Tensor::full({cfg.shared_dim}, 0.01));
    store.create("proj.col.w2", randn(rng, {cfg.shared_dim, cfg.shared_dim}, cfg.init_std));
    store.create("proj.col.b2", randn(rng, {cfg.shared_dim}, 0.01));
}

inline Tape::Id projection_head(Tape& tape, ParamStore& store, const std::string& prefix, Tape::Id x) {
    auto h = tape.relu(tape.affine(x, tape.param(store, prefix + "w1"), tape.param(store, prefix + "b1")));
    return tape.affine(h, tape.param(store, prefix + "w2"), tape.param(store, prefix + "b2"));
}

// InfoNCE over already-projected rows: anchors row i against positives on the
// diagonal of the cosine similarity matrix.
inline Tape::Id cca_loss_from_projected(Tape& tape, Tape::Id anchors, Tape::Id positives, double tau,
                                        bool symmetric) {
    const int n = tape.val(anchors).rows();
    if (n < 2) throw std::invalid_argument("cca_loss: batch size must be >= 2");
    if (tau <= 0.0) throw std::invalid_argument("cca_loss: temperature must be positive");
    auto a = tape.l2_normalize_rows(anchors);
    auto b = tape.l2_normalize_rows(positives);
    std::vector<int> diag(static_cast<size_t>(n));
    std::iota(diag.begin(), diag.end(), 0);
    const std::vector<double> ones(static_cast<size_t>(n), 1.0);
    auto sim_ab = tape.scale(tape.matmul_nt(a, b), 1.0 / tau);
    auto loss = tape.cross_entropy_rows(sim_ab, diag, ones);
    if (symmetric) {
        auto sim_ba = tape.scale(tape.matmul_nt(b, a), 1.0 / tau);
        loss = tape.scale(tape.add(loss, tape.cross_entropy_rows(sim_ba, diag, ones)), 0.5);
    }
    return loss;
}

// Full objective: anchors are projected semantic reconstructions, positives
// and in-batch negatives are projected collaborative reconstructions.
inline Tape::Id cca_loss(Tape& tape, ParamStore& store, const AlignConfig& cfg, Tape::Id sem_recon,
                         Tape::Id col_recon) {
    auto pa = projection_head(tape, store, "proj.sem.", sem_recon);
    auto pb = projection_head(tape, store, "proj.col.", col_recon);
    return cca_loss_from_projected(tape, pa, pb, cfg.tau, cfg.symmetric);
}

}  // namespace dualrec
