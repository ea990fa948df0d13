#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "realign/dataset.hpp"
#include "realign/rng.hpp"
#include "realign/rsa.hpp"
#include "realign/tensor.hpp"

namespace realign::synth {

/// Synthetic world with known ground truth. Every image is rendered from a
/// latent code; EEG is a per-subject linear mixture of the neural latents
/// plus trial noise; fMRI ROIs read disjoint latent subsets; distractor
/// dimensions shape the images but never the neural signals, so a model must
/// selectively encode the neural latents to gain brain similarity.
struct SynthConfig {
    std::size_t train_images = 32;
    std::size_t test_images = 16;
    std::size_t subjects = 4;
    std::size_t latent_dim = 4;       // neural latents (drive EEG and fMRI)
    std::size_t distractor_dims = 4;  // image-only nuisance dimensions
    std::size_t images_per_concept = 2;       // train split
    std::size_t test_images_per_concept = 1;  // test mirrors one-image-per-concept
    std::size_t train_reps = 8;
    std::size_t test_reps = 80;
    std::size_t channels = 17;
    std::size_t timepoints = 20;
    std::size_t image_channels = 3;
    std::size_t image_size = 32;
    double noise_sigma = 0.1;         // per-entry EEG trial noise (std)
    double signal_scale = 0.05;       // per-entry EEG signal std over latents
    double concept_jitter = 0.35;     // within-concept latent spread
    double subject_gain_spread = 0.5; // per-subject latent gains in [1-s, 1+s]
    double image_contrast = 0.35;
    std::size_t fmri_voxels = 40;
    std::size_t fmri_rois = 2;
    double fmri_noise = 0.05;
    std::vector<double> smoothing{0.25, 0.5, 0.25};  // temporal kernel
    std::uint64_t seed = 1;

    void validate() const {
        if (train_images < 8) throw UsageError("synth: need at least 8 training images");
        if (latent_dim < 2) throw UsageError("synth: need at least 2 latent dimensions");
        if (test_images < 4) throw UsageError("synth: need at least 4 test images");
        if (subjects < 1) throw UsageError("synth: need at least 1 subject");
        if (images_per_concept < 1 || train_images % images_per_concept != 0)
            throw UsageError("synth: train_images must be a multiple of images_per_concept");
        if (test_images_per_concept < 1 || test_images % test_images_per_concept != 0)
            throw UsageError("synth: test_images must be a multiple of test_images_per_concept");
        if (fmri_rois < 1 || fmri_rois > latent_dim)
            throw UsageError("synth: fmri_rois must be in [1, latent_dim]");
        if (smoothing.empty()) throw UsageError("synth: smoothing kernel must be non-empty");
        if (noise_sigma < 0.0 || signal_scale <= 0.0)
            throw UsageError("synth: noise_sigma must be >= 0 and signal_scale > 0");
    }
};

struct SynthWorld {
    Tensor basis;                            // (L + Dd) x C x H x W render patterns
    Tensor train_latents, test_latents;      // n x L
    Tensor train_distractors, test_distractors;  // n x Dd
    std::vector<Tensor> mixing;              // per subject: L x (channels*timepoints)
    std::vector<std::vector<double>> gains;  // per subject: L latent gains
};

struct SynthData {
    SynthConfig config;
    SynthWorld world;
    std::vector<EegDataset> train;  // one per subject
    std::vector<EegDataset> test;
    std::vector<FmriDataset> fmri;  // per subject, over the test images
    rsa::FeatureEmbedding features;  // test images x (latents + distractors)
};

inline SynthData synth_generate(const SynthConfig& cfg) {
    cfg.validate();
    const std::size_t L = cfg.latent_dim, Dd = cfg.distractor_dims;
    const std::size_t P = L + Dd;
    const std::size_t C = cfg.image_channels, S = cfg.image_size;
    const std::size_t EC = cfg.channels, ET = cfg.timepoints, ED = EC * ET;

    SynthData out;
    out.config = cfg;
    SynthWorld& w = out.world;

    // Render bases: sinusoidal gratings with random orientation, frequency,
    // phase, and channel color, RMS-normalized over pixels.
    {
        Rng rng(derive_seed(cfg.seed, 0xba515));
        w.basis = Tensor(Shape{P, C, S, S});
        for (std::size_t p = 0; p < P; ++p) {
            const double theta = rng.uniform(0.0, 3.14159265358979323846);
            const double freq = 1.0 + static_cast<double>(rng.below(3));
            const double phase = rng.uniform(0.0, 6.28318530717958647692);
            std::vector<double> color(C);
            double cn = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                color[c] = rng.normal();
                cn += color[c] * color[c];
            }
            cn = std::sqrt(cn);
            for (double& v : color) v /= cn > 0.0 ? cn : 1.0;
            double ss = 0.0;
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t x = 0; x < S; ++x)
                    for (std::size_t y = 0; y < S; ++y) {
                        double u = (std::cos(theta) * static_cast<double>(x) +
                                    std::sin(theta) * static_cast<double>(y)) /
                                   static_cast<double>(S);
                        double v = color[c] * std::cos(6.28318530717958647692 * freq * u + phase);
                        w.basis[idx4(p, c, x, y, C, S, S)] = v;
                        ss += v * v;
                    }
            const double rms = std::sqrt(ss / static_cast<double>(C * S * S));
            for (std::size_t k = 0; k < C * S * S; ++k)
                w.basis[p * C * S * S + k] /= rms > 0.0 ? rms : 1.0;
        }
    }

    // Latent codes: concept prototypes plus within-concept jitter. Train and
    // test concepts are disjoint by construction.
    auto draw_latents = [&](std::size_t n, std::size_t per_concept, std::uint64_t tag,
                            Tensor& latents, Tensor& distract) {
        Rng rng(derive_seed(cfg.seed, tag));
        const std::size_t concepts = n / per_concept;
        latents = Tensor(Shape{n, L});
        distract = Tensor(Shape{n, Dd > 0 ? Dd : 1});
        std::vector<double> proto(concepts * L);
        for (double& v : proto) v = rng.normal();
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t cpt = i / per_concept;
            for (std::size_t l = 0; l < L; ++l)
                latents[i * L + l] = proto[cpt * L + l] + cfg.concept_jitter * rng.normal();
        }
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < Dd; ++k) distract[i * distract.shape[1] + k] = rng.normal();
    };
    draw_latents(cfg.train_images, cfg.images_per_concept, 0x1a7e27, w.train_latents,
                 w.train_distractors);
    draw_latents(cfg.test_images, cfg.test_images_per_concept, 0x1a7e28, w.test_latents,
                 w.test_distractors);

    // Images: 0.5 + contrast-scaled sum of latent- and distractor-weighted
    // bases, clamped to [0, 1].
    auto render = [&](const Tensor& latents, const Tensor& distract) {
        const std::size_t n = latents.shape[0];
        Tensor images(Shape{n, C, S, S});
        const double amp = cfg.image_contrast / std::sqrt(static_cast<double>(P));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < C * S * S; ++k) {
                double acc = 0.0;
                for (std::size_t l = 0; l < L; ++l)
                    acc += latents[i * L + l] * w.basis[l * C * S * S + k];
                for (std::size_t dd = 0; dd < Dd; ++dd)
                    acc += distract[i * distract.shape[1] + dd] *
                           w.basis[(L + dd) * C * S * S + k];
                double v = 0.5 + amp * acc;
                images[i * C * S * S + k] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
            }
        return images;
    };
    Tensor train_images = render(w.train_latents, w.train_distractors);
    Tensor test_images = render(w.test_latents, w.test_distractors);

    const std::size_t train_concepts = cfg.train_images / cfg.images_per_concept;
    std::vector<long> train_labels(cfg.train_images), test_labels(cfg.test_images);
    for (std::size_t i = 0; i < cfg.train_images; ++i)
        train_labels[i] = static_cast<long>(i / cfg.images_per_concept);
    for (std::size_t i = 0; i < cfg.test_images; ++i)
        test_labels[i] =
            static_cast<long>(train_concepts + i / cfg.test_images_per_concept);

    // Per-subject mixing: smooth a random latent->channel-time pattern along
    // time, remove each channel's temporal mean (so time scrambling destroys
    // the readout), apply subject latent gains, then scale the whole map so
    // the per-entry signal std over unit-variance latents is signal_scale.
    w.mixing.resize(cfg.subjects);
    w.gains.resize(cfg.subjects);
    for (std::size_t s = 0; s < cfg.subjects; ++s) {
        Rng rng(derive_seed(cfg.seed, 0x317f00d, s));
        std::vector<double>& g = w.gains[s];
        g.resize(L);
        for (std::size_t l = 0; l < L; ++l)
            g[l] = rng.uniform(1.0 - cfg.subject_gain_spread, 1.0 + cfg.subject_gain_spread);
        Tensor m(Shape{L, ED});
        for (double& v : m.data) v = rng.normal();
        // temporal smoothing per (latent, channel)
        const std::size_t K = cfg.smoothing.size();
        const std::size_t half = K / 2;
        Tensor sm(Shape{L, ED});
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t c = 0; c < EC; ++c)
                for (std::size_t t = 0; t < ET; ++t) {
                    double acc = 0.0, wsum = 0.0;
                    for (std::size_t k = 0; k < K; ++k) {
                        std::ptrdiff_t tt = static_cast<std::ptrdiff_t>(t + k) -
                                            static_cast<std::ptrdiff_t>(half);
                        if (tt < 0 || tt >= static_cast<std::ptrdiff_t>(ET)) continue;
                        acc += cfg.smoothing[k] *
                               m[l * ED + c * ET + static_cast<std::size_t>(tt)];
                        wsum += cfg.smoothing[k];
                    }
                    sm[l * ED + c * ET + t] = wsum > 0.0 ? acc / wsum : 0.0;
                }
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t c = 0; c < EC; ++c) {
                double mean = 0.0;
                for (std::size_t t = 0; t < ET; ++t) mean += sm[l * ED + c * ET + t];
                mean /= static_cast<double>(ET);
                for (std::size_t t = 0; t < ET; ++t) sm[l * ED + c * ET + t] -= mean;
            }
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t k = 0; k < ED; ++k) sm[l * ED + k] *= g[l];
        double var = 0.0;
        for (std::size_t k = 0; k < ED; ++k) {
            double s2 = 0.0;
            for (std::size_t l = 0; l < L; ++l) s2 += sm[l * ED + k] * sm[l * ED + k];
            var += s2;
        }
        var /= static_cast<double>(ED);
        const double scale = cfg.signal_scale / std::sqrt(var > 0.0 ? var : 1.0);
        for (double& v : sm.data) v *= scale;
        w.mixing[s] = std::move(sm);
    }

    // EEG epochs: signal + per-trial noise.
    auto make_eeg = [&](const Tensor& latents, const Tensor& images,
                        const std::vector<long>& labels, std::size_t reps, std::size_t s,
                        std::uint64_t split_tag, const char* split_name) {
        const std::size_t n = latents.shape[0];
        EegDataset ds;
        ds.subject = "sub" + std::string(s < 10 ? "0" : "") + std::to_string(s);
        ds.images = images;
        ds.labels = labels;
        ds.split = split_name;
        ds.eeg = Tensor(Shape{n, reps, EC, ET});
        Rng noise(derive_seed(cfg.seed, 0x2013e ^ split_tag, s));
        const Tensor& mix = w.mixing[s];
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> signal(ED, 0.0);
            for (std::size_t l = 0; l < L; ++l) {
                const double z = latents[i * L + l];
                for (std::size_t k = 0; k < ED; ++k) signal[k] += z * mix[l * ED + k];
            }
            for (std::size_t r = 0; r < reps; ++r)
                for (std::size_t k = 0; k < ED; ++k)
                    ds.eeg[(i * reps + r) * ED + k] =
                        signal[k] + cfg.noise_sigma * noise.normal();
        }
        ds.provenance.push_back("synth(seed=" + std::to_string(cfg.seed) + ")");
        return ds;
    };
    for (std::size_t s = 0; s < cfg.subjects; ++s) {
        out.train.push_back(
            make_eeg(w.train_latents, train_images, train_labels, cfg.train_reps, s, 0x11, "train"));
        out.test.push_back(
            make_eeg(w.test_latents, test_images, test_labels, cfg.test_reps, s, 0x22, "test"));
    }

    // fMRI: each ROI reads a disjoint latent subset of the test images.
    for (std::size_t s = 0; s < cfg.subjects; ++s) {
        Rng rng(derive_seed(cfg.seed, 0xf321, s));
        FmriDataset f;
        f.subject = out.test[s].subject;
        f.category = "natural";
        const std::size_t n = cfg.test_images;
        const std::size_t per = L / cfg.fmri_rois;
        for (std::size_t r = 0; r < cfg.fmri_rois; ++r) {
            const std::size_t lo = r * per;
            const std::size_t hi = (r + 1 == cfg.fmri_rois) ? L : lo + per;
            const std::size_t sub = hi - lo;
            std::vector<double> readout(cfg.fmri_voxels * sub);
            for (double& v : readout) v = rng.normal();
            Tensor pat(Shape{n, cfg.fmri_voxels});
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t vx = 0; vx < cfg.fmri_voxels; ++vx) {
                    double acc = 0.0;
                    for (std::size_t l = 0; l < sub; ++l)
                        acc += readout[vx * sub + l] * w.test_latents[i * L + lo + l];
                    pat[i * cfg.fmri_voxels + vx] = acc + cfg.fmri_noise * rng.normal();
                }
            f.rois.emplace_back("roi" + std::to_string(r), std::move(pat));
        }
        out.fmri.push_back(std::move(f));
    }

    // Feature embedding over the test images: true latents then distractors.
    out.features.values = Tensor(Shape{cfg.test_images, P});
    for (std::size_t i = 0; i < cfg.test_images; ++i) {
        for (std::size_t l = 0; l < L; ++l)
            out.features.values[i * P + l] = w.test_latents[i * L + l];
        for (std::size_t dd = 0; dd < Dd; ++dd)
            out.features.values[i * P + L + dd] =
                w.test_distractors[i * w.test_distractors.shape[1] + dd];
    }
    for (std::size_t l = 0; l < L; ++l) out.features.names.push_back("lat" + std::to_string(l));
    for (std::size_t dd = 0; dd < Dd; ++dd)
        out.features.names.push_back("dist" + std::to_string(dd));

    split_integrity(train_labels, test_labels);
    return out;
}

}  // namespace realign::synth
