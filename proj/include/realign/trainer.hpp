#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "realign/adam.hpp"
#include "realign/autodiff.hpp"
#include "realign/dataset.hpp"
#include "realign/losses.hpp"
#include "realign/model.hpp"
#include "realign/rng.hpp"

namespace realign {

enum class ControlMode { none, no_cont, no_mse, unpaired, scrambled };
enum class PoolingMode { per_subject, across_subject };

inline const char* to_string(ControlMode m) {
    switch (m) {
        case ControlMode::none: return "none";
        case ControlMode::no_cont: return "no_cont";
        case ControlMode::no_mse: return "no_mse";
        case ControlMode::unpaired: return "unpaired";
        default: return "scrambled";
    }
}

inline ControlMode control_mode_from(const std::string& s) {
    if (s == "none") return ControlMode::none;
    if (s == "no_cont") return ControlMode::no_cont;
    if (s == "no_mse") return ControlMode::no_mse;
    if (s == "unpaired") return ControlMode::unpaired;
    if (s == "scrambled") return ControlMode::scrambled;
    throw UsageError("unknown control mode \"" + s +
                     "\" (want none|no_cont|no_mse|unpaired|scrambled)");
}

struct AlignmentConfig {
    double beta = 100.0;
    double lr = 2e-5;
    std::size_t epochs = 30;
    std::size_t batch = 16;
    std::uint64_t seed = 0;
    ControlMode control = ControlMode::none;
    std::vector<long> exclude_labels;
    PoolingMode pooling = PoolingMode::per_subject;
    bool zscore = false;  // optional per-channel z-score of EEG targets

    void validate() const {
        if (beta < 0.0) throw UsageError("config: beta must be nonnegative");
        if (epochs < 1) throw UsageError("config: epochs must be >= 1");
        if (batch < 2) throw UsageError("config: batch must be >= 2 (contrastive pairs)");
        if (lr <= 0.0) throw UsageError("config: learning rate must be positive");
    }
};

struct TrainReport {
    struct EpochLoss {
        double total = 0.0, classification = 0.0, mse = 0.0, contrastive = 0.0, generation = 0.0;
    };
    std::vector<EpochLoss> epochs;
    AlignmentConfig config;
    double wall_seconds = 0.0;
    std::string checkpoint_path;
};

/// Argmax of the frozen teacher's logits per image. The teacher is the
/// seed-initialized backbone before any alignment step.
inline std::vector<std::size_t> pseudo_labels(const Backbone& teacher, const Tensor& images) {
    FeatureMaps fm = eval_features(teacher, images);
    const std::size_t n = fm.logits.shape[0], k = fm.logits.shape[1];
    std::vector<std::size_t> labels(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
            if (fm.logits[i * k + c] > fm.logits[i * k + best]) best = c;
        labels[i] = best;
    }
    return labels;
}

/// Control-experiment dataset transforms.
///  - unpaired: seeded cyclic permutation of the image->EEG assignment; no
///    image keeps its own recordings, temporal structure intact.
///  - scrambled: per-image seeded permutation of the timepoint axis applied
///    to every repetition, pairing intact, per-recording value multiset
///    preserved.
inline EegDataset apply_control(const EegDataset& in, ControlMode mode, std::uint64_t seed) {
    in.validate();
    if (mode != ControlMode::unpaired && mode != ControlMode::scrambled)
        throw UsageError(std::string("apply_control: mode must be unpaired or scrambled, got ") +
                         to_string(mode));
    EegDataset out = in;
    const std::size_t n = in.n_images(), R = in.reps(), C = in.channels(), T = in.timepoints();
    const std::size_t d = C * T;
    if (mode == ControlMode::unpaired) {
        Rng rng(derive_seed(seed, 0x0cba17));
        std::vector<std::size_t> assign = rng.derangement(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t src = assign[i];
            for (std::size_t k = 0; k < R * d; ++k)
                out.eeg[i * R * d + k] = in.eeg[src * R * d + k];
        }
        out.provenance.push_back("control(unpaired,seed=" + std::to_string(seed) + ")");
    } else {
        Rng rng(derive_seed(seed, 0x5c7a3b));
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<std::size_t> perm = rng.permutation(T);
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t t = 0; t < T; ++t)
                        out.eeg[((i * R + r) * C + c) * T + t] =
                            in.eeg[((i * R + r) * C + c) * T + perm[t]];
        }
        out.provenance.push_back("control(scrambled,seed=" + std::to_string(seed) + ")");
    }
    return out;
}

namespace detail {

/// Flat list of (image index, repetition index) samples; repetitions beyond
/// one only occur for super-subject pooled data.
inline std::vector<std::pair<std::size_t, std::size_t>> training_pairs(const EegDataset& ds) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    pairs.reserve(ds.n_images() * ds.reps());
    for (std::size_t i = 0; i < ds.n_images(); ++i)
        for (std::size_t r = 0; r < ds.reps(); ++r) pairs.emplace_back(i, r);
    return pairs;
}

inline EegDataset zscore_per_channel(const EegDataset& in) {
    EegDataset out = in;
    const std::size_t n = in.n_images(), R = in.reps(), C = in.channels(), T = in.timepoints();
    for (std::size_t c = 0; c < C; ++c) {
        double mean = 0.0, var = 0.0;
        const std::size_t count = n * R * T;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t t = 0; t < T; ++t)
                    mean += in.eeg[((i * R + r) * C + c) * T + t];
        mean /= static_cast<double>(count);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t t = 0; t < T; ++t) {
                    double dd = in.eeg[((i * R + r) * C + c) * T + t] - mean;
                    var += dd * dd;
                }
        double sd = std::sqrt(var / static_cast<double>(count));
        if (sd < 1e-12) sd = 1.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t t = 0; t < T; ++t) {
                    double& v = out.eeg[((i * R + r) * C + c) * T + t];
                    v = (v - mean) / sd;
                }
    }
    out.provenance.push_back("zscore_per_channel");
    return out;
}

}  // namespace detail

/// Alignment training: Adam over seeded shuffled batches of (image, EEG)
/// pairs, minimizing classification + beta * generation loss. Pseudo-labels
/// come from the model's own pre-training state (the frozen teacher).
/// Unpaired/scrambled control modes transform the dataset before training;
/// ablation modes drop one generation term from the objective while still
/// logging it. Fully deterministic given config.seed.
inline TrainReport train_alignment(Backbone& model, EncodingHead& head, const EegDataset& data,
                                   const AlignmentConfig& config) {
    config.validate();
    data.validate();
    if (head.spec.eeg_dim != data.eeg_dim())
        throw DataError("train: head EEG dimension " + std::to_string(head.spec.eeg_dim) +
                        " vs dataset " + std::to_string(data.eeg_dim()));
    const auto t0 = std::chrono::steady_clock::now();

    EegDataset working = data;
    if (config.control == ControlMode::unpaired || config.control == ControlMode::scrambled)
        working = apply_control(working, config.control, config.seed);
    if (config.zscore) working = detail::zscore_per_channel(working);

    losses::AblationFlags flags;
    flags.no_contrastive = config.control == ControlMode::no_cont;
    flags.no_mse = config.control == ControlMode::no_mse;

    std::vector<std::size_t> labels = pseudo_labels(model, working.images);

    auto pairs = detail::training_pairs(working);
    if (config.batch > pairs.size())
        throw DataError("train: batch size " + std::to_string(config.batch) + " exceeds " +
                        std::to_string(pairs.size()) + " training pairs");

    std::vector<Tensor*> param_ptrs;
    for (auto& [name, t] : model.params.items) param_ptrs.push_back(&t);
    for (auto& [name, t] : head.params.items) param_ptrs.push_back(&t);
    Adam opt(config.lr);
    Rng shuffle_rng(derive_seed(config.seed, 0x51f3));

    TrainReport report;
    report.config = config;

    const std::size_t C = working.images.shape[1], H = working.images.shape[2],
                      W = working.images.shape[3];
    const std::size_t img_sz = C * H * W;
    const std::size_t D = working.eeg_dim();
    const std::size_t batches = pairs.size() / config.batch;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_rng.shuffle(pairs);
        TrainReport::EpochLoss acc;
        for (std::size_t b = 0; b < batches; ++b) {
            const std::size_t N = config.batch;
            Tensor batch_images(Shape{N, C, H, W});
            Tensor batch_eeg(Shape{N, D});
            std::vector<std::size_t> batch_labels(N);
            for (std::size_t k = 0; k < N; ++k) {
                auto [img, rep] = pairs[b * N + k];
                std::copy_n(&working.images.data[img * img_sz], img_sz,
                            &batch_images.data[k * img_sz]);
                const std::size_t base = (img * working.reps() + rep) * D;
                std::copy_n(&working.eeg.data[base], D, &batch_eeg.data[k * D]);
                batch_labels[k] = labels[img];
            }
            ad::Graph g;
            BoundParams bp = bind_params(g, model.params, true);
            BoundParams hp = bind_params(g, head.params, true);
            for (const auto& [name, node] : hp.nodes) bp.nodes[name] = node;
            int img_node = g.leaf(batch_images, false);
            int eeg_node = g.leaf(batch_eeg, false);
            StageTaps taps = forward_features(g, model, bp, img_node);
            int generated = encoding_forward(g, head, bp, taps);
            losses::AlignmentLossNodes ln =
                losses::alignment_loss(g, taps.logits, batch_labels, generated, eeg_node,
                                       config.beta, flags);
            g.backward(ln.total);
            std::vector<const Tensor*> grads;
            grads.reserve(param_ptrs.size());
            for (auto& [name, t] : model.params.items) grads.push_back(&g.grad(bp.at(name)));
            for (auto& [name, t] : head.params.items) grads.push_back(&g.grad(hp.at(name)));
            opt.step(param_ptrs, grads);
            losses::AlignmentLossTerms terms = ln.terms(g);
            acc.total += terms.total;
            acc.classification += terms.classification;
            acc.mse += terms.mse;
            acc.contrastive += terms.contrastive;
            acc.generation += terms.generation;
        }
        const double inv = 1.0 / static_cast<double>(batches);
        acc.total *= inv;
        acc.classification *= inv;
        acc.mse *= inv;
        acc.contrastive *= inv;
        acc.generation *= inv;
        report.epochs.push_back(acc);
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace realign
