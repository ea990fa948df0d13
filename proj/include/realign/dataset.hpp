#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "realign/tensor.hpp"

namespace realign {

/// Per-subject stimulus-locked EEG epochs with the images that evoked them.
/// eeg is images x repetitions x channels x timepoints; transforms never
/// mutate their input and append a provenance string to their output.
struct EegDataset {
    std::string subject;
    Tensor images;             // n x C x H x W
    Tensor eeg;                // n x reps x channels x timepoints
    std::vector<long> labels;  // concept label per image
    std::string split;         // "train" or "test"
    std::vector<std::string> provenance;

    std::size_t n_images() const { return eeg.shape.empty() ? 0 : eeg.shape[0]; }
    std::size_t reps() const { return eeg.shape[1]; }
    std::size_t channels() const { return eeg.shape[2]; }
    std::size_t timepoints() const { return eeg.shape[3]; }
    std::size_t eeg_dim() const { return channels() * timepoints(); }

    void validate() const {
        if (eeg.rank() != 4)
            throw DataError("eeg dataset: epochs have shape " + shape_str(eeg.shape) +
                            ", want images x reps x channels x timepoints");
        if (images.rank() != 4)
            throw DataError("eeg dataset: images have shape " + shape_str(images.shape));
        if (images.shape[0] != eeg.shape[0])
            throw DataError("eeg dataset: " + std::to_string(images.shape[0]) + " images vs " +
                            std::to_string(eeg.shape[0]) + " epoch groups");
        if (labels.size() != eeg.shape[0])
            throw DataError("eeg dataset: label count mismatch");
    }

    /// One EEG vector (channels*timepoints) for image i, repetition r.
    std::vector<double> eeg_vector(std::size_t i, std::size_t r) const {
        const std::size_t d = eeg_dim();
        std::vector<double> v(d);
        const std::size_t base = (i * reps() + r) * d;
        for (std::size_t k = 0; k < d; ++k) v[k] = eeg.data[base + k];
        return v;
    }
};

/// Per-subject fMRI beta patterns, one matrix per region of interest.
struct FmriDataset {
    std::string subject;
    std::vector<std::pair<std::string, Tensor>> rois;  // roi name -> n_images x voxels
    std::string category = "natural";                  // natural | shape | letter

    void validate() const {
        if (rois.empty()) throw DataError("fmri dataset: no ROIs");
        const std::size_t n = rois.front().second.shape[0];
        for (const auto& [name, t] : rois) {
            if (t.rank() != 2)
                throw DataError("fmri dataset: ROI " + name + " has shape " +
                                shape_str(t.shape));
            if (t.shape[0] != n)
                throw DataError("fmri dataset: ROI " + name + " image count mismatch");
        }
    }
};

/// Arithmetic mean over the repetition axis, reps -> 1.
inline EegDataset average_repetitions(const EegDataset& in) {
    in.validate();
    EegDataset out = in;
    const std::size_t n = in.n_images(), R = in.reps(), d = in.eeg_dim();
    out.eeg = Tensor(Shape{n, 1, in.channels(), in.timepoints()});
    const double inv = 1.0 / static_cast<double>(R);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) {
            double s = 0.0;
            for (std::size_t r = 0; r < R; ++r) s += in.eeg.data[(i * R + r) * d + k];
            out.eeg.data[i * d + k] = s * inv;
        }
    out.provenance.push_back("average_repetitions(" + std::to_string(R) + ")");
    return out;
}

/// Super-subject pooling: concatenate all subjects' trials along the
/// repetition axis. Image sets must match; no subject identifiers survive.
inline EegDataset pool_across_subjects(const std::vector<EegDataset>& subjects) {
    if (subjects.empty()) throw DataError("pool_across_subjects: no datasets");
    const EegDataset& first = subjects.front();
    first.validate();
    std::size_t total_reps = 0;
    for (const EegDataset& s : subjects) {
        s.validate();
        if (s.images.shape != first.images.shape || s.images.data != first.images.data ||
            s.labels != first.labels || s.channels() != first.channels() ||
            s.timepoints() != first.timepoints())
            throw DataError("pool_across_subjects: subject " + s.subject +
                            " does not match the first dataset's images/labels/shape");
        total_reps += s.reps();
    }
    EegDataset out;
    out.subject = "across";
    out.images = first.images;
    out.labels = first.labels;
    out.split = first.split;
    out.provenance = first.provenance;
    const std::size_t n = first.n_images(), d = first.eeg_dim();
    out.eeg = Tensor(Shape{n, total_reps, first.channels(), first.timepoints()});
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t r_out = 0;
        for (const EegDataset& s : subjects)
            for (std::size_t r = 0; r < s.reps(); ++r, ++r_out)
                for (std::size_t k = 0; k < d; ++k)
                    out.eeg.data[(i * total_reps + r_out) * d + k] =
                        s.eeg.data[(i * s.reps() + r) * d + k];
    }
    out.provenance.push_back("pool_across_subjects(" + std::to_string(subjects.size()) + ")");
    return out;
}

/// Remove every image whose concept label is in the exclusion list.
inline EegDataset filter_by_label(const EegDataset& in, const std::vector<long>& excluded) {
    in.validate();
    if (excluded.empty()) {
        EegDataset out = in;
        out.provenance.push_back("filter_by_label(none)");
        return out;
    }
    std::set<long> drop(excluded.begin(), excluded.end());
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < in.n_images(); ++i)
        if (!drop.count(in.labels[i])) keep.push_back(i);
    if (keep.empty())
        throw DataError("filter_by_label: exclusion list removes every image");
    EegDataset out;
    out.subject = in.subject;
    out.split = in.split;
    out.provenance = in.provenance;
    const std::size_t C = in.images.shape[1], H = in.images.shape[2], W = in.images.shape[3];
    const std::size_t img_sz = C * H * W;
    const std::size_t R = in.reps(), d = in.eeg_dim();
    out.images = Tensor(Shape{keep.size(), C, H, W});
    out.eeg = Tensor(Shape{keep.size(), R, in.channels(), in.timepoints()});
    out.labels.reserve(keep.size());
    for (std::size_t k = 0; k < keep.size(); ++k) {
        const std::size_t i = keep[k];
        std::copy_n(&in.images.data[i * img_sz], img_sz, &out.images.data[k * img_sz]);
        std::copy_n(&in.eeg.data[i * R * d], R * d, &out.eeg.data[k * R * d]);
        out.labels.push_back(in.labels[i]);
    }
    out.provenance.push_back("filter_by_label(removed " +
                             std::to_string(in.n_images() - keep.size()) + " of " +
                             std::to_string(in.n_images()) + ")");
    return out;
}

/// Concept-disjointness report for a train/test split.
struct SplitReport {
    std::size_t train_concepts = 0;
    std::size_t test_concepts = 0;
    bool disjoint = true;
};

/// Label-level check; throws listing the overlapping concepts.
inline SplitReport split_integrity(const std::vector<long>& train_labels,
                                   const std::vector<long>& test_labels) {
    std::set<long> train_set(train_labels.begin(), train_labels.end());
    std::set<long> test_set(test_labels.begin(), test_labels.end());
    std::vector<long> overlap;
    for (long c : train_set)
        if (test_set.count(c)) overlap.push_back(c);
    if (!overlap.empty()) {
        std::string msg = "split integrity: train and test share concepts:";
        for (std::size_t k = 0; k < overlap.size() && k < 16; ++k)
            msg += " " + std::to_string(overlap[k]);
        if (overlap.size() > 16) msg += " ...";
        throw DataError(msg);
    }
    return SplitReport{train_set.size(), test_set.size(), true};
}

inline SplitReport split_integrity(const EegDataset& train, const EegDataset& test) {
    return split_integrity(train.labels, test.labels);
}

}  // namespace realign
