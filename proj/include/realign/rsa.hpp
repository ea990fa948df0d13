#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "realign/rng.hpp"
#include "realign/stats.hpp"
#include "realign/tensor.hpp"

namespace realign::rsa {

enum class RdmSource { model, eeg, fmri, feature };
enum class RdmKind { correlation, decoding, absdiff };

inline const char* to_string(RdmSource s) {
    switch (s) {
        case RdmSource::model: return "model";
        case RdmSource::eeg: return "eeg";
        case RdmSource::fmri: return "fmri";
        default: return "feature";
    }
}

struct Provenance {
    RdmSource source = RdmSource::model;
    RdmKind kind = RdmKind::correlation;
    std::string tag;      // layer, timepoint, ROI, or dimension id
    std::string subject;  // empty for models
    std::vector<std::size_t> degenerate_rows;
    bool degenerate = false;
};

/// Square symmetric dissimilarity matrix over one stimulus set. Invariants
/// (symmetry, zero diagonal, range by kind) are checked on construction.
class Rdm {
public:
    Rdm(std::size_t n, std::vector<double> values, Provenance prov)
        : n_(n), values_(std::move(values)), prov_(std::move(prov)) {
        if (n_ < 2) throw ShapeError("rdm: need at least 2 stimuli");
        if (values_.size() != n_ * n_)
            throw ShapeError("rdm: " + std::to_string(values_.size()) + " values for n=" +
                             std::to_string(n_));
        const double range_max = prov_.kind == RdmKind::decoding ? 1.0
                                 : prov_.kind == RdmKind::correlation
                                     ? 2.0
                                     : std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n_; ++i) {
            if (values_[i * n_ + i] != 0.0)
                throw ShapeError("rdm: nonzero diagonal at " + std::to_string(i));
            for (std::size_t j = 0; j < n_; ++j) {
                double v = values_[i * n_ + j];
                if (!std::isfinite(v)) throw ShapeError("rdm: non-finite entry");
                if (v < -1e-9 || v > range_max + 1e-9)
                    throw ShapeError("rdm: entry " + std::to_string(v) + " outside [0," +
                                     std::to_string(range_max) + "]");
                if (std::fabs(v - values_[j * n_ + i]) > 1e-12)
                    throw ShapeError("rdm: asymmetry at (" + std::to_string(i) + "," +
                                     std::to_string(j) + ")");
            }
        }
    }

    std::size_t n() const { return n_; }
    double at(std::size_t i, std::size_t j) const { return values_[i * n_ + j]; }
    const std::vector<double>& values() const { return values_; }
    const Provenance& provenance() const { return prov_; }

    /// Strict upper triangle, row-major order.
    std::vector<double> upper_triangle() const {
        std::vector<double> ut;
        ut.reserve(n_ * (n_ - 1) / 2);
        for (std::size_t i = 0; i < n_; ++i)
            for (std::size_t j = i + 1; j < n_; ++j) ut.push_back(values_[i * n_ + j]);
        return ut;
    }

private:
    std::size_t n_;
    std::vector<double> values_;
    Provenance prov_;
};

// ---- correlation kernels ----

/// Pearson r for RDM kernels: exact for non-constant rows, with the norm
/// product floored at 1e-8 so constant rows yield r = 0 instead of NaN.
/// Clamped to [-1,1] for reporting (this path is never differentiated).
inline double pearson_guarded(std::span<const double> x, std::span<const double> y) {
    const std::size_t d = x.size();
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(d);
    my /= static_cast<double>(d);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        double xc = x[i] - mx, yc = y[i] - my;
        sxy += xc * yc;
        sxx += xc * xc;
        syy += yc * yc;
    }
    double r = sxy / std::max(std::sqrt(sxx * syy), 1e-8);
    return std::clamp(r, -1.0, 1.0);
}

/// 1 - Pearson over rows of an n x P feature matrix. Constant rows are
/// epsilon-guarded (their correlations fall to ~0) and flagged.
inline Rdm correlation_rdm(const Tensor& features, Provenance prov) {
    if (features.rank() != 2)
        throw ShapeError("correlation_rdm: features have shape " + shape_str(features.shape) +
                         ", want n x P");
    const std::size_t n = features.shape[0], p = features.shape[1];
    if (n < 3) throw ShapeError("correlation_rdm: need at least 3 stimuli");
    if (p < 2) throw ShapeError("correlation_rdm: need at least 2 feature dimensions");
    prov.kind = RdmKind::correlation;
    for (std::size_t i = 0; i < n; ++i) {
        const double first = features[i * p];
        bool constant = true;
        for (std::size_t k = 1; k < p && constant; ++k)
            constant = features[i * p + k] == first;
        if (constant) prov.degenerate_rows.push_back(i);
    }
    std::vector<double> values(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double r = pearson_guarded({&features.data[i * p], p}, {&features.data[j * p], p});
            values[i * n + j] = values[j * n + i] = 1.0 - r;
        }
    return Rdm(n, std::move(values), std::move(prov));
}

inline Rdm model_rdm(const Tensor& features, std::string tag = {}, std::string subject = {}) {
    Provenance prov;
    prov.source = RdmSource::model;
    prov.tag = std::move(tag);
    prov.subject = std::move(subject);
    return correlation_rdm(features, std::move(prov));
}

/// Same kernel as model_rdm over voxel-wise activation patterns.
inline Rdm fmri_rdm(const Tensor& patterns, std::string roi = {}, std::string subject = {}) {
    Provenance prov;
    prov.source = RdmSource::fmri;
    prov.tag = std::move(roi);
    prov.subject = std::move(subject);
    return correlation_rdm(patterns, std::move(prov));
}

// ---- rank statistics ----

/// Average fractional ranks, 1-based; ties share the mean of their positions.
inline std::vector<double> ranks(std::span<const double> xs) {
    const std::size_t n = xs.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> rk(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rk[order[k]] = r;
        i = j + 1;
    }
    return rk;
}

/// Spearman rank correlation with tie-aware average ranks. A constant input
/// yields rho = 0 with the degenerate flag set.
inline double spearman(std::span<const double> x, std::span<const double> y,
                       bool* degenerate = nullptr) {
    if (x.size() != y.size()) throw ShapeError("spearman: length mismatch");
    if (x.size() < 3) throw ShapeError("spearman: need at least 3 values");
    std::vector<double> rx = ranks(x), ry = ranks(y);
    const std::size_t n = rx.size();
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double xc = rx[i] - mx, yc = ry[i] - my;
        sxy += xc * yc;
        sxx += xc * xc;
        syy += yc * yc;
    }
    if (sxx <= 0.0 || syy <= 0.0) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    if (degenerate) *degenerate = false;
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Spearman over the strict upper triangles of two same-size RDMs.
inline double rsa_compare(const Rdm& a, const Rdm& b, bool* degenerate = nullptr) {
    if (a.n() != b.n())
        throw ShapeError("rsa_compare: RDM sizes differ: " + std::to_string(a.n()) + " vs " +
                         std::to_string(b.n()));
    std::vector<double> ua = a.upper_triangle(), ub = b.upper_triangle();
    return spearman(ua, ub, degenerate);
}

// ---- pairwise decoding RDMs ----

struct DecodingParams {
    std::size_t folds = 5;
    double l2 = 1e-2;           // hinge-loss L2 regularization strength
    std::size_t epochs = 200;   // subgradient passes over the training fold
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
};

struct LinearSvm {
    std::vector<double> w;
    double b = 0.0;

    double decision(const double* x) const {
        double s = b;
        for (std::size_t k = 0; k < w.size(); ++k) s += w[k] * x[k];
        return s;
    }
};

/// Pegasos-style subgradient training of a hinge-loss linear classifier.
/// X is m x d row-major, y holds +1/-1. Sample order reshuffles per epoch
/// from the given seed, so training is fully deterministic.
inline LinearSvm train_linear_svm(const std::vector<double>& X, std::size_t m, std::size_t d,
                                  const std::vector<int>& y, double lambda, std::size_t epochs,
                                  std::uint64_t seed) {
    if (X.size() != m * d) throw ShapeError("svm: sample matrix size mismatch");
    if (y.size() != m) throw ShapeError("svm: label count mismatch");
    LinearSvm svm;
    svm.w.assign(d, 0.0);
    Rng rng(seed);
    std::size_t t = 0;
    for (std::size_t e = 0; e < epochs; ++e) {
        std::vector<std::size_t> order = rng.permutation(m);
        for (std::size_t idx : order) {
            ++t;
            const double eta = 1.0 / (lambda * static_cast<double>(t));
            const double* x = &X[idx * d];
            const double margin = y[idx] * svm.decision(x);
            const double shrink = 1.0 - eta * lambda;
            for (double& wk : svm.w) wk *= shrink;
            if (margin < 1.0) {
                const double step = eta * y[idx];
                for (std::size_t k = 0; k < d; ++k) svm.w[k] += step * x[k];
                svm.b += step;
            }
        }
    }
    return svm;
}

namespace detail {

/// Deterministic seed for one unordered stimulus pair.
inline std::uint64_t pair_seed(std::uint64_t seed, std::size_t i, std::size_t j) {
    if (i > j) std::swap(i, j);
    return derive_seed(seed, i, j);
}

/// 5-fold CV decoding accuracy between the trial sets of stimuli i and j at
/// one timepoint. Fold assignment: each class's trial order is shuffled once
/// (seeded by the pair), then trial k of the shuffled order goes to fold
/// k % folds. Features are z-scored with training-fold statistics only.
inline double pair_decoding_accuracy(const Tensor& epochs, std::size_t i, std::size_t j,
                                     std::size_t t, const DecodingParams& p) {
    if (i > j) std::swap(i, j);
    const std::size_t trials = epochs.shape[1], C = epochs.shape[2], T = epochs.shape[3];
    auto feature = [&](std::size_t stim, std::size_t trial, std::size_t ch) {
        return epochs[((stim * trials + trial) * C + ch) * T + t];
    };
    const std::uint64_t base = pair_seed(p.seed, i, j);
    Rng perm_rng(base);
    std::vector<std::size_t> order_i = perm_rng.permutation(trials);
    std::vector<std::size_t> order_j = perm_rng.permutation(trials);

    double acc_sum = 0.0;
    for (std::size_t f = 0; f < p.folds; ++f) {
        std::vector<double> train_x, test_x;
        std::vector<int> train_y, test_y;
        for (std::size_t cls = 0; cls < 2; ++cls) {
            const std::size_t stim = cls == 0 ? i : j;
            const std::vector<std::size_t>& order = cls == 0 ? order_i : order_j;
            const int label = cls == 0 ? -1 : +1;
            for (std::size_t k = 0; k < trials; ++k) {
                const bool in_test = (k % p.folds) == f;
                std::vector<double>& dst = in_test ? test_x : train_x;
                for (std::size_t ch = 0; ch < C; ++ch) dst.push_back(feature(stim, order[k], ch));
                (in_test ? test_y : train_y).push_back(label);
            }
        }
        const std::size_t m = train_y.size();
        std::vector<double> mu(C, 0.0), sd(C, 0.0);
        for (std::size_t s = 0; s < m; ++s)
            for (std::size_t ch = 0; ch < C; ++ch) mu[ch] += train_x[s * C + ch];
        for (double& v : mu) v /= static_cast<double>(m);
        for (std::size_t s = 0; s < m; ++s)
            for (std::size_t ch = 0; ch < C; ++ch) {
                double dd = train_x[s * C + ch] - mu[ch];
                sd[ch] += dd * dd;
            }
        for (double& v : sd) {
            v = std::sqrt(v / static_cast<double>(m));
            if (v < 1e-12) v = 1.0;
        }
        for (std::size_t s = 0; s < m; ++s)
            for (std::size_t ch = 0; ch < C; ++ch)
                train_x[s * C + ch] = (train_x[s * C + ch] - mu[ch]) / sd[ch];
        for (std::size_t s = 0; s < test_y.size(); ++s)
            for (std::size_t ch = 0; ch < C; ++ch)
                test_x[s * C + ch] = (test_x[s * C + ch] - mu[ch]) / sd[ch];

        LinearSvm svm =
            train_linear_svm(train_x, m, C, train_y, p.l2, p.epochs, derive_seed(base, f + 1));
        std::size_t correct = 0;
        for (std::size_t s = 0; s < test_y.size(); ++s) {
            int pred = svm.decision(&test_x[s * C]) > 0.0 ? +1 : -1;
            if (pred == test_y[s]) ++correct;
        }
        acc_sum += static_cast<double>(correct) / static_cast<double>(test_y.size());
    }
    return acc_sum / static_cast<double>(p.folds);
}

template <class Fn>
inline void parallel_for(std::size_t count, std::size_t jobs, Fn&& fn) {
    if (jobs <= 1 || count <= 1) {
        for (std::size_t k = 0; k < count; ++k) fn(k);
        return;
    }
    const std::size_t workers = std::min(jobs, count);
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
        threads.emplace_back([&, w]() {
            for (std::size_t k = w; k < count; k += workers) fn(k);
        });
    for (auto& th : threads) th.join();
}

}  // namespace detail

/// Pairwise-decoding EEG RDM at one timepoint. Each unordered image pair is
/// decoded once with a pair-derived seed, so entries are bit-exactly
/// symmetric and the result is identical under any job count.
inline Rdm eeg_decoding_rdm(const Tensor& epochs, std::size_t timepoint, const DecodingParams& p,
                            std::string subject = {}) {
    if (epochs.rank() != 4)
        throw ShapeError("eeg_decoding_rdm: epochs have shape " + shape_str(epochs.shape) +
                         ", want images x trials x channels x timepoints");
    const std::size_t n = epochs.shape[0], trials = epochs.shape[1], T = epochs.shape[3];
    if (n < 2) throw ShapeError("eeg_decoding_rdm: need at least 2 images");
    if (timepoint >= T)
        throw ShapeError("eeg_decoding_rdm: timepoint " + std::to_string(timepoint) +
                         " out of range [0," + std::to_string(T) + ")");
    if (trials < p.folds)
        throw ShapeError("eeg_decoding_rdm: trial count " + std::to_string(trials) +
                         " < folds " + std::to_string(p.folds));
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    pairs.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
    std::vector<double> acc(pairs.size(), 0.0);
    detail::parallel_for(pairs.size(), p.jobs, [&](std::size_t k) {
        acc[k] = detail::pair_decoding_accuracy(epochs, pairs[k].first, pairs[k].second,
                                                timepoint, p);
    });
    std::vector<double> values(n * n, 0.0);
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        auto [i, j] = pairs[k];
        values[i * n + j] = values[j * n + i] = acc[k];
    }
    Provenance prov;
    prov.source = RdmSource::eeg;
    prov.kind = RdmKind::decoding;
    prov.tag = "t" + std::to_string(timepoint);
    prov.subject = std::move(subject);
    return Rdm(n, std::move(values), std::move(prov));
}

// ---- similarity analyses ----

/// Per-layer, per-timepoint Spearman RSA values for one model vs one subject.
struct SimilarityCurve {
    std::string layer;
    std::vector<double> rho;
    std::string subject;
    std::string model;
};

/// Per-layer curves against a timepoint series of neural RDMs, plus a "max"
/// curve holding the pointwise maximum across layers.
inline std::vector<SimilarityCurve> similarity_timecourses(
    const std::vector<std::pair<std::string, Rdm>>& layer_rdms, const std::vector<Rdm>& neural,
    std::string subject = {}, std::string model = {}) {
    if (layer_rdms.empty()) throw ShapeError("similarity_timecourses: no layer RDMs");
    if (neural.empty()) throw ShapeError("similarity_timecourses: no neural RDMs");
    std::vector<SimilarityCurve> curves;
    for (const auto& [name, rdm] : layer_rdms) {
        SimilarityCurve c;
        c.layer = name;
        c.subject = subject;
        c.model = model;
        c.rho.reserve(neural.size());
        for (const Rdm& nr : neural) c.rho.push_back(rsa_compare(rdm, nr));
        curves.push_back(std::move(c));
    }
    SimilarityCurve mx;
    mx.layer = "max";
    mx.subject = subject;
    mx.model = model;
    mx.rho.assign(neural.size(), -std::numeric_limits<double>::infinity());
    for (const auto& c : curves)
        for (std::size_t t = 0; t < c.rho.size(); ++t) mx.rho[t] = std::max(mx.rho[t], c.rho[t]);
    curves.push_back(std::move(mx));
    return curves;
}

/// Improvement at the baseline's peak timepoint (argmax, earliest on ties).
struct ImprovementStats {
    std::string layer;
    std::size_t peak_timepoint = 0;
    double baseline_rho = 0.0;
    double delta = 0.0;
    double ratio = 0.0;
    bool ratio_defined = true;
};

inline std::vector<ImprovementStats> improvement_stats(
    const std::vector<SimilarityCurve>& aligned, const std::vector<SimilarityCurve>& baseline) {
    if (aligned.size() != baseline.size())
        throw ShapeError("improvement_stats: curve sets differ in layer count");
    std::vector<ImprovementStats> out;
    for (std::size_t k = 0; k < aligned.size(); ++k) {
        const SimilarityCurve& a = aligned[k];
        const SimilarityCurve& b = baseline[k];
        if (a.layer != b.layer || a.rho.size() != b.rho.size())
            throw ShapeError("improvement_stats: layer/timepoint grid mismatch at " + a.layer);
        ImprovementStats st;
        st.layer = a.layer;
        for (std::size_t t = 1; t < b.rho.size(); ++t)
            if (b.rho[t] > b.rho[st.peak_timepoint]) st.peak_timepoint = t;
        st.baseline_rho = b.rho[st.peak_timepoint];
        st.delta = a.rho[st.peak_timepoint] - st.baseline_rho;
        if (st.baseline_rho > 0.0) {
            st.ratio = st.delta / st.baseline_rho;
        } else {
            st.ratio = std::numeric_limits<double>::quiet_NaN();
            st.ratio_defined = false;
        }
        out.push_back(std::move(st));
    }
    return out;
}

/// Mean rho over all layers and a timepoint window; the summary statistic
/// behind cross-subject cells and end-to-end comparisons. The "max" curve is
/// excluded.
inline double window_mean(const std::vector<SimilarityCurve>& curves, std::size_t t_begin,
                          std::size_t t_end) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& c : curves) {
        if (c.layer == "max") continue;
        if (t_begin >= t_end || t_end > c.rho.size())
            throw ShapeError("window_mean: empty or out-of-range window [" +
                             std::to_string(t_begin) + "," + std::to_string(t_end) + ")");
        for (std::size_t t = t_begin; t < t_end; ++t) {
            sum += c.rho[t];
            ++count;
        }
    }
    if (count == 0) throw ShapeError("window_mean: no layer curves");
    return sum / static_cast<double>(count);
}

/// Cross-subject similarity matrix over matched model/subject sets.
struct CrossSubjectResult {
    std::size_t m = 0;                        // models == subjects
    std::vector<double> matrix;               // [model * m + subject]
    std::vector<double> baseline_subtracted;  // cell - baseline of that subject
    std::vector<double> normalized;           // each column scaled to max 1
    stats::TestResult matched_vs_mismatched;  // paired over subjects
};

inline CrossSubjectResult cross_subject_matrix(
    const std::vector<std::vector<std::vector<SimilarityCurve>>>& model_subject_curves,
    const std::vector<std::vector<SimilarityCurve>>& baseline_subject_curves,
    std::size_t t_begin, std::size_t t_end) {
    const std::size_t m = model_subject_curves.size();
    if (m < 2) throw ShapeError("cross_subject_matrix: need at least 2 models");
    for (const auto& row : model_subject_curves)
        if (row.size() != m)
            throw ShapeError("cross_subject_matrix: models x subjects must be square");
    if (baseline_subject_curves.size() != m)
        throw ShapeError("cross_subject_matrix: baseline must cover every subject");
    CrossSubjectResult res;
    res.m = m;
    res.matrix.assign(m * m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j)
            res.matrix[i * m + j] = window_mean(model_subject_curves[i][j], t_begin, t_end);
    res.baseline_subtracted.assign(m * m, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
        const double base = window_mean(baseline_subject_curves[j], t_begin, t_end);
        for (std::size_t i = 0; i < m; ++i)
            res.baseline_subtracted[i * m + j] = res.matrix[i * m + j] - base;
    }
    res.normalized = res.matrix;
    for (std::size_t j = 0; j < m; ++j) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < m; ++i) mx = std::max(mx, res.matrix[i * m + j]);
        if (mx != 0.0)
            for (std::size_t i = 0; i < m; ++i) res.normalized[i * m + j] /= mx;
    }
    std::vector<double> matched(m), mismatched(m);
    for (std::size_t j = 0; j < m; ++j) {
        matched[j] = res.matrix[j * m + j];
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i)
            if (i != j) s += res.matrix[i * m + j];
        mismatched[j] = s / static_cast<double>(m - 1);
    }
    res.matched_vs_mismatched = stats::paired_t(matched, mismatched);
    return res;
}

/// Pairwise 1 - Spearman between instance RDMs; the mean over unordered
/// pairs is the individual-variability index.
struct VariabilityMatrix {
    std::size_t m = 0;
    std::vector<double> values;
    std::string tag;
    double mean_index = 0.0;
};

inline VariabilityMatrix variability(const std::vector<Rdm>& instances, std::string tag = {}) {
    const std::size_t m = instances.size();
    if (m < 2) throw ShapeError("variability: need at least 2 instances");
    VariabilityMatrix vm;
    vm.m = m;
    vm.tag = std::move(tag);
    vm.values.assign(m * m, 0.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = i + 1; j < m; ++j) {
            double v = 1.0 - rsa_compare(instances[i], instances[j]);
            vm.values[i * m + j] = vm.values[j * m + i] = v;
            sum += v;
        }
    vm.mean_index = sum / (static_cast<double>(m) * (static_cast<double>(m) - 1.0) / 2.0);
    return vm;
}

// ---- feature-dimension profiling ----

/// Per-stimulus embedding over named feature dimensions.
struct FeatureEmbedding {
    std::vector<std::string> names;
    Tensor values;  // n x F

    void validate() const {
        if (values.rank() != 2)
            throw ShapeError("feature embedding: values have shape " + shape_str(values.shape));
        if (names.size() != values.shape[1])
            throw ShapeError("feature embedding: " + std::to_string(names.size()) +
                             " names for " + std::to_string(values.shape[1]) + " dimensions");
        if (values.shape[1] < 2) throw ShapeError("feature embedding: need at least 2 dimensions");
        for (double v : values.data)
            if (!std::isfinite(v)) throw DataError("feature embedding: missing/non-finite value");
    }
};

/// One RDM per dimension: entry (i,j) = |e_if - e_jf|. Constant dimensions
/// yield a zero RDM flagged as degenerate.
inline std::vector<Rdm> feature_rdms(const FeatureEmbedding& emb) {
    emb.validate();
    const std::size_t n = emb.values.shape[0], F = emb.values.shape[1];
    if (n < 3) throw ShapeError("feature_rdms: need at least 3 stimuli");
    std::vector<Rdm> out;
    out.reserve(F);
    for (std::size_t f = 0; f < F; ++f) {
        std::vector<double> values(n * n, 0.0);
        bool any = false;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                double v = std::fabs(emb.values[i * F + f] - emb.values[j * F + f]);
                values[i * n + j] = values[j * n + i] = v;
                any = any || v != 0.0;
            }
        Provenance prov;
        prov.source = RdmSource::feature;
        prov.kind = RdmKind::absdiff;
        prov.tag = emb.names[f];
        prov.degenerate = !any;
        out.emplace_back(n, std::move(values), std::move(prov));
    }
    return out;
}

namespace detail {

/// Least-squares solve of (X^T X) beta = X^T y via Cholesky, with a ridge
/// retry (lambda = 1e-8) when the normal matrix is not positive definite.
/// Returns the residual y - X beta.
inline std::vector<double> residualize(const std::vector<std::vector<double>>& cols,
                                       const std::vector<double>& y, bool* used_ridge) {
    const std::size_t m = y.size();
    const std::size_t p = cols.size() + 1;  // intercept first
    std::vector<double> xtx(p * p, 0.0), xty(p, 0.0);
    auto col = [&](std::size_t k, std::size_t row) -> double {
        return k == 0 ? 1.0 : cols[k - 1][row];
    };
    for (std::size_t a = 0; a < p; ++a) {
        for (std::size_t b = a; b < p; ++b) {
            double s = 0.0;
            for (std::size_t r = 0; r < m; ++r) s += col(a, r) * col(b, r);
            xtx[a * p + b] = xtx[b * p + a] = s;
        }
        double s = 0.0;
        for (std::size_t r = 0; r < m; ++r) s += col(a, r) * y[r];
        xty[a] = s;
    }
    auto try_cholesky = [&](double ridge, std::vector<double>& beta) -> bool {
        std::vector<double> L(p * p, 0.0);
        for (std::size_t a = 0; a < p; ++a) {
            for (std::size_t b = 0; b <= a; ++b) {
                double s = xtx[a * p + b] + (a == b ? ridge : 0.0);
                for (std::size_t k = 0; k < b; ++k) s -= L[a * p + k] * L[b * p + k];
                if (a == b) {
                    if (s <= 1e-12) return false;
                    L[a * p + a] = std::sqrt(s);
                } else {
                    L[a * p + b] = s / L[b * p + b];
                }
            }
        }
        std::vector<double> z(p, 0.0);
        for (std::size_t a = 0; a < p; ++a) {
            double s = xty[a];
            for (std::size_t k = 0; k < a; ++k) s -= L[a * p + k] * z[k];
            z[a] = s / L[a * p + a];
        }
        beta.assign(p, 0.0);
        for (std::size_t a = p; a-- > 0;) {
            double s = z[a];
            for (std::size_t k = a + 1; k < p; ++k) s -= L[k * p + a] * beta[k];
            beta[a] = s / L[a * p + a];
        }
        return true;
    };
    std::vector<double> beta;
    if (try_cholesky(0.0, beta)) {
        if (used_ridge) *used_ridge = false;
    } else {
        if (!try_cholesky(1e-8, beta))
            throw DegeneracyError("partial correlation: control matrix is singular");
        if (used_ridge) *used_ridge = true;
    }
    std::vector<double> res(m, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        double fit = 0.0;
        for (std::size_t a = 0; a < p; ++a) fit += beta[a] * col(a, r);
        res[r] = y[r] - fit;
    }
    return res;
}

}  // namespace detail

struct PartialCorr {
    double r = 0.0;
    double r2 = 0.0;
    bool ridge_fallback = false;
    bool degenerate = false;
};

/// Partial Spearman correlation between a model RDM and one target feature
/// RDM controlling for the remaining feature RDMs: rank-transform every
/// upper triangle, residualize model and target ranks on the control ranks
/// (least squares with intercept), then correlate the residuals.
inline PartialCorr partial_spearman_r2(const Rdm& model, const Rdm& target,
                                       const std::vector<const Rdm*>& controls) {
    for (const Rdm* c : controls)
        if (c->n() != model.n())
            throw ShapeError("partial_spearman_r2: control RDM size mismatch");
    if (target.n() != model.n())
        throw ShapeError("partial_spearman_r2: target RDM size mismatch");
    std::vector<double> mu = model.upper_triangle(), tu = target.upper_triangle();
    std::vector<double> mr = ranks(mu), tr = ranks(tu);
    PartialCorr pc;
    if (controls.empty()) {
        bool deg = false;
        double rho = spearman(mu, tu, &deg);
        pc.r = rho;
        pc.r2 = rho * rho;
        pc.degenerate = deg;
        return pc;
    }
    std::vector<std::vector<double>> control_ranks;
    control_ranks.reserve(controls.size());
    for (const Rdm* c : controls) {
        std::vector<double> cu = c->upper_triangle();
        control_ranks.push_back(ranks(cu));
    }
    bool ridge_m = false, ridge_t = false;
    std::vector<double> res_m = detail::residualize(control_ranks, mr, &ridge_m);
    std::vector<double> res_t = detail::residualize(control_ranks, tr, &ridge_t);
    pc.ridge_fallback = ridge_m || ridge_t;
    auto sumsq = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x * x;
        return s;
    };
    auto centered_sumsq = [](const std::vector<double>& v) {
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double s = 0.0;
        for (double x : v) s += (x - mean) * (x - mean);
        return s;
    };
    // Residuals explained to numerical noise mean the target is fully
    // captured by the controls; report r = 0 rather than noise correlation.
    const double scale_m = centered_sumsq(mr), scale_t = centered_sumsq(tr);
    if (sumsq(res_m) < 1e-16 * std::max(1.0, scale_m) ||
        sumsq(res_t) < 1e-16 * std::max(1.0, scale_t)) {
        pc.degenerate = true;
        return pc;
    }
    const std::size_t m = res_m.size();
    double mm = 0.0, mt = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
        mm += res_m[k];
        mt += res_t[k];
    }
    mm /= static_cast<double>(m);
    mt /= static_cast<double>(m);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
        double xc = res_m[k] - mm, yc = res_t[k] - mt;
        sxy += xc * yc;
        sxx += xc * xc;
        syy += yc * yc;
    }
    if (sxx <= 0.0 || syy <= 0.0) {
        pc.degenerate = true;
        return pc;
    }
    pc.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
    pc.r2 = pc.r * pc.r;
    return pc;
}

}  // namespace realign::rsa
