#pragma once

#include <stdexcept>
#include <vector>

#include "realign/autodiff.hpp"

namespace realign::losses {

/// The five scalars of the composite training objective:
///   total = classification + beta * generation
///   generation = mse + contrastive (subject to ablation flags)
struct AlignmentLossTerms {
    double classification = 0.0;
    double mse = 0.0;
    double contrastive = 0.0;
    double generation = 0.0;
    double total = 0.0;
    double beta = 0.0;
};

struct AblationFlags {
    bool no_contrastive = false;  // generation = mse only
    bool no_mse = false;          // generation = contrastive only
};

/// Graph node ids of every term, so callers can log all scalars after the
/// forward pass and run backward on `total`.
struct AlignmentLossNodes {
    int classification = -1;
    int mse = -1;
    int contrastive = -1;
    int generation = -1;
    int total = -1;
    double beta = 0.0;

    AlignmentLossTerms terms(const ad::Graph& g) const {
        AlignmentLossTerms t;
        t.classification = g.value(classification)[0];
        t.mse = g.value(mse)[0];
        t.contrastive = g.value(contrastive)[0];
        t.generation = g.value(generation)[0];
        t.total = g.value(total)[0];
        t.beta = beta;
        return t;
    }
};

/// Mean categorical cross entropy of logits (N x K) against integer labels.
inline int classification_loss(ad::Graph& g, int logits, const std::vector<std::size_t>& labels) {
    return g.softmax_cross_entropy(logits, labels);
}

/// Mean over batch and vector entries of the squared error; D-invariant so
/// the generation weight has the same effective scale at any EEG dimension.
inline int mse_loss(ad::Graph& g, int generated, int real) {
    return g.mse(generated, real);
}

inline int pearson_r(ad::Graph& g, int x, int y) { return g.pearson(x, y); }

/// Pearson contrastive loss over a batch of generated/real signal rows:
///
///   1 + (1/N) sum_i [1 - r(G_i, R_i)]
///     - (1/(N(N-1))) sum_i sum_{j != i} [1 - r(G_i, R_j)]
///
/// which reduces to 1 - P/N + Q/(N(N-1)) for P = sum of positive-pair r and
/// Q = sum of the N(N-1) ordered negative-pair r. Negative pairs correlate a
/// generated row against every other row's real signal.
inline int contrastive_loss(ad::Graph& g, int generated, int real) {
    const Tensor& vg = g.value(generated);
    const Tensor& vr = g.value(real);
    if (vg.rank() != 2 || vr.rank() != 2)
        throw ShapeError("contrastive_loss: want rank-2 inputs, got " + shape_str(vg.shape) +
                         " and " + shape_str(vr.shape));
    require_same_shape(vg, vr, "contrastive_loss");
    const std::size_t N = vg.extent(0);
    if (N < 2)
        throw std::invalid_argument(
            "contrastive_loss: batch of " + std::to_string(N) +
            "; need at least 2 samples to form negative pairs");
    std::vector<int> gen_rows(N), real_rows(N);
    for (std::size_t i = 0; i < N; ++i) {
        gen_rows[i] = g.row(generated, i);
        real_rows[i] = g.row(real, i);
    }
    int pos_sum = -1;
    for (std::size_t i = 0; i < N; ++i) {
        int r = g.pearson(gen_rows[i], real_rows[i]);
        pos_sum = (pos_sum < 0) ? r : g.add(pos_sum, r);
    }
    int neg_sum = -1;
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) {
            if (j == i) continue;
            int r = g.pearson(gen_rows[i], real_rows[j]);
            neg_sum = (neg_sum < 0) ? r : g.add(neg_sum, r);
        }
    const double n = static_cast<double>(N);
    int loss = g.add(g.scale(pos_sum, -1.0 / n), g.scale(neg_sum, 1.0 / (n * (n - 1.0))));
    return g.add_const(loss, 1.0);
}

/// Full composite objective. Every term is computed and logged even when an
/// ablation flag removes it from the generation loss, so ablation runs still
/// report the excluded scalar.
inline AlignmentLossNodes alignment_loss(ad::Graph& g, int logits,
                                         const std::vector<std::size_t>& labels, int generated,
                                         int real, double beta, AblationFlags flags = {}) {
    if (beta < 0.0)
        throw std::invalid_argument("alignment_loss: beta must be nonnegative, got " +
                                    std::to_string(beta));
    if (flags.no_contrastive && flags.no_mse)
        throw std::invalid_argument("alignment_loss: cannot ablate both generation terms");
    const Tensor& vlogits = g.value(logits);
    const Tensor& vg = g.value(generated);
    if (vlogits.rank() != 2 || vg.rank() != 2 || vlogits.extent(0) != vg.extent(0))
        throw ShapeError("alignment_loss: batch size mismatch between logits " +
                         shape_str(vlogits.shape) + " and generated " + shape_str(vg.shape));
    AlignmentLossNodes nodes;
    nodes.beta = beta;
    nodes.classification = classification_loss(g, logits, labels);
    nodes.mse = mse_loss(g, generated, real);
    nodes.contrastive = contrastive_loss(g, generated, real);
    if (flags.no_contrastive)
        nodes.generation = nodes.mse;
    else if (flags.no_mse)
        nodes.generation = nodes.contrastive;
    else
        nodes.generation = g.add(nodes.mse, nodes.contrastive);
    nodes.total = g.add(nodes.classification, g.scale(nodes.generation, beta));
    return nodes;
}

}  // namespace realign::losses
