#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "realign/csv.hpp"
#include "realign/dataset.hpp"
#include "realign/manifest.hpp"
#include "realign/model.hpp"
#include "realign/rsa.hpp"
#include "realign/rtf.hpp"
#include "realign/stats.hpp"
#include "realign/synth.hpp"
#include "realign/trainer.hpp"

namespace realign::pipeline {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// dataset directory format
//
//   manifest.txt      run manifest (only file with wall-clock content)
//   dataset.txt       dataset manifest, key=value
//   images.rtf        images/train, images/test, labels/train, labels/test
//   features.rtf      features/test
//   world.rtf         generator ground truth (latents, bases, mixing)
//   subjects/subNN.rtf  eeg/train, eeg/test, fmri/<roi> per subject
// ---------------------------------------------------------------------------

inline std::string subject_name(std::size_t s) {
    return "sub" + std::string(s < 10 ? "0" : "") + std::to_string(s);
}

inline Tensor labels_to_tensor(const std::vector<long>& labels) {
    Tensor t(Shape{labels.size()});
    for (std::size_t i = 0; i < labels.size(); ++i) t[i] = static_cast<double>(labels[i]);
    return t;
}

inline std::vector<long> labels_from_tensor(const Tensor& t) {
    std::vector<long> out(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<long>(t[i]);
    return out;
}

struct SynthCommand {
    synth::SynthConfig config;
    std::string out;
    bool force = false;
};

inline void write_dataset(const synth::SynthData& data, const fs::path& dir) {
    const synth::SynthConfig& cfg = data.config;
    fs::create_directories(dir / "subjects");

    std::vector<rtf::NamedTensor> images;
    images.push_back({"images/train", data.train.at(0).images});
    images.push_back({"images/test", data.test.at(0).images});
    images.push_back({"labels/train", labels_to_tensor(data.train.at(0).labels)});
    images.push_back({"labels/test", labels_to_tensor(data.test.at(0).labels)});
    rtf::write((dir / "images.rtf").string(), images);

    rtf::write((dir / "features.rtf").string(), {{"features/test", data.features.values}});

    std::vector<rtf::NamedTensor> world;
    world.push_back({"basis", data.world.basis});
    world.push_back({"latents/train", data.world.train_latents});
    world.push_back({"latents/test", data.world.test_latents});
    world.push_back({"distractors/train", data.world.train_distractors});
    world.push_back({"distractors/test", data.world.test_distractors});
    for (std::size_t s = 0; s < cfg.subjects; ++s) {
        world.push_back({"mixing/" + subject_name(s), data.world.mixing[s]});
        Tensor g(Shape{cfg.latent_dim});
        for (std::size_t l = 0; l < cfg.latent_dim; ++l) g[l] = data.world.gains[s][l];
        world.push_back({"gains/" + subject_name(s), std::move(g)});
    }
    rtf::write((dir / "world.rtf").string(), world);

    for (std::size_t s = 0; s < cfg.subjects; ++s) {
        std::vector<rtf::NamedTensor> sub;
        sub.push_back({"eeg/train", data.train[s].eeg});
        sub.push_back({"eeg/test", data.test[s].eeg});
        for (const auto& [roi, pat] : data.fmri[s].rois) sub.push_back({"fmri/" + roi, pat});
        rtf::write((dir / "subjects" / (subject_name(s) + ".rtf")).string(), sub);
    }

    std::ofstream mf(dir / "dataset.txt", std::ios::trunc);
    if (!mf) throw DataError("synth: cannot write dataset manifest in " + dir.string());
    mf << "format=realign-dataset\n";
    mf << "seed=" << cfg.seed << "\n";
    mf << "subjects=" << cfg.subjects << "\n";
    mf << "train_images=" << cfg.train_images << "\n";
    mf << "test_images=" << cfg.test_images << "\n";
    mf << "latents=" << cfg.latent_dim << "\n";
    mf << "distractors=" << cfg.distractor_dims << "\n";
    mf << "images_per_concept=" << cfg.images_per_concept << "\n";
    mf << "train_reps=" << cfg.train_reps << "\n";
    mf << "test_reps=" << cfg.test_reps << "\n";
    mf << "channels=" << cfg.channels << "\n";
    mf << "timepoints=" << cfg.timepoints << "\n";
    mf << "ms_per_timepoint=10\n";
    mf << "noise_sigma=" << csv::num(cfg.noise_sigma) << "\n";
    mf << "signal_scale=" << csv::num(cfg.signal_scale) << "\n";
    mf << "fmri_rois=" << cfg.fmri_rois << "\n";
    mf << "fmri_voxels=" << cfg.fmri_voxels << "\n";
    std::string names;
    for (std::size_t i = 0; i < data.features.names.size(); ++i) {
        if (i) names += ",";
        names += data.features.names[i];
    }
    mf << "feature_names=" << names << "\n";
}

inline fs::path run_synth(const SynthCommand& cmd) {
    const auto t0 = std::chrono::steady_clock::now();
    prepare_out_dir(cmd.out, cmd.force);
    synth::SynthData data = synth::synth_generate(cmd.config);
    write_dataset(data, cmd.out);
    RunManifest rm;
    rm.set("command", "synth");
    rm.set("seed", std::to_string(cmd.config.seed));
    rm.set("subjects", std::to_string(cmd.config.subjects));
    rm.set("train_images", std::to_string(cmd.config.train_images));
    rm.set("test_images", std::to_string(cmd.config.test_images));
    rm.set("latents", std::to_string(cmd.config.latent_dim));
    rm.set("out", cmd.out);
    rm.set("wall_seconds",
           csv::num(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()));
    rm.write(cmd.out);
    return cmd.out;
}

// ---- loading ----

struct LoadedData {
    std::map<std::string, std::string> meta;
    std::vector<EegDataset> train;  // per subject
    std::vector<EegDataset> test;
    std::vector<FmriDataset> fmri;
    rsa::FeatureEmbedding features;
    std::size_t ms_per_timepoint = 10;

    std::size_t subjects() const { return train.size(); }
};

inline LoadedData load_dataset(const fs::path& dir) {
    LoadedData out;
    out.meta = read_kv(dir / "dataset.txt");
    if (out.meta["format"] != "realign-dataset")
        throw DataError("load: " + (dir / "dataset.txt").string() +
                        " is not a realign dataset manifest");
    const std::size_t subjects = std::stoull(out.meta.at("subjects"));
    out.ms_per_timepoint = std::stoull(out.meta.at("ms_per_timepoint"));

    auto images = rtf::read((dir / "images.rtf").string());
    const Tensor& train_images = rtf::find(images, "images/train");
    const Tensor& test_images = rtf::find(images, "images/test");
    std::vector<long> train_labels = labels_from_tensor(rtf::find(images, "labels/train"));
    std::vector<long> test_labels = labels_from_tensor(rtf::find(images, "labels/test"));

    auto features = rtf::read((dir / "features.rtf").string());
    out.features.values = rtf::find(features, "features/test");
    {
        std::stringstream ss(out.meta.at("feature_names"));
        std::string item;
        while (std::getline(ss, item, ','))
            if (!item.empty()) out.features.names.push_back(item);
    }

    for (std::size_t s = 0; s < subjects; ++s) {
        auto sub = rtf::read((dir / "subjects" / (subject_name(s) + ".rtf")).string());
        EegDataset train;
        train.subject = subject_name(s);
        train.images = train_images;
        train.labels = train_labels;
        train.split = "train";
        train.eeg = rtf::find(sub, "eeg/train");
        train.validate();
        EegDataset test;
        test.subject = subject_name(s);
        test.images = test_images;
        test.labels = test_labels;
        test.split = "test";
        test.eeg = rtf::find(sub, "eeg/test");
        test.validate();
        FmriDataset fm;
        fm.subject = subject_name(s);
        for (const auto& nt : sub)
            if (nt.name.rfind("fmri/", 0) == 0)
                fm.rois.emplace_back(nt.name.substr(5), nt.tensor);
        out.train.push_back(std::move(train));
        out.test.push_back(std::move(test));
        out.fmri.push_back(std::move(fm));
    }
    // loud failure on concept leakage between splits
    split_integrity(train_labels, test_labels);
    return out;
}

// ---- training command ----

struct TrainCommand {
    std::string data;
    long subject = 0;  // -1 = across-subject pooling
    AlignmentConfig config;
    BackboneSpec backbone;  // input dims are overwritten from the data
    EncodingHeadSpec head;  // eeg_dim overwritten from the data
    std::string out;
    bool force = false;
};

struct TrainOutcome {
    TrainReport report;
    std::string checkpoint_prefix;
    std::string baseline_prefix;
};

inline void write_report_csv(const TrainReport& report, const fs::path& path) {
    csv::Writer w(path.string(), {"epoch", "loss_total", "loss_classification", "loss_mse",
                                  "loss_contrastive", "loss_generation"});
    for (std::size_t e = 0; e < report.epochs.size(); ++e) {
        const auto& ep = report.epochs[e];
        w.row({std::to_string(e + 1), csv::num(ep.total), csv::num(ep.classification),
               csv::num(ep.mse), csv::num(ep.contrastive), csv::num(ep.generation)});
    }
}

inline TrainOutcome run_train(const TrainCommand& cmd) {
    const auto t0 = std::chrono::steady_clock::now();
    prepare_out_dir(cmd.out, cmd.force);
    LoadedData data = load_dataset(cmd.data);

    EegDataset training;
    if (cmd.subject < 0) {
        std::vector<EegDataset> filtered;
        for (const EegDataset& ds : data.train)
            filtered.push_back(filter_by_label(ds, cmd.config.exclude_labels));
        training = pool_across_subjects(filtered);  // super-subject: trials kept, no averaging
    } else {
        if (static_cast<std::size_t>(cmd.subject) >= data.subjects())
            throw DataError("train: subject " + std::to_string(cmd.subject) + " out of range [0," +
                            std::to_string(data.subjects()) + ")");
        training = filter_by_label(data.train[static_cast<std::size_t>(cmd.subject)],
                                   cmd.config.exclude_labels);
        training = average_repetitions(training);
    }

    BackboneSpec spec = cmd.backbone;
    spec.in_channels = training.images.shape[1];
    spec.in_h = training.images.shape[2];
    spec.in_w = training.images.shape[3];
    EncodingHeadSpec head_spec = cmd.head;
    head_spec.eeg_dim = training.eeg_dim();

    Backbone model = build_backbone(spec, cmd.config.seed);
    EncodingHead head = build_encoding_head(spec, head_spec, cmd.config.seed);

    TrainOutcome out;
    out.baseline_prefix = (fs::path(cmd.out) / "baseline").string();
    save_checkpoint({model, head}, out.baseline_prefix);

    out.report = train_alignment(model, head, training, cmd.config);
    out.checkpoint_prefix = (fs::path(cmd.out) / "checkpoint").string();
    out.report.checkpoint_path = out.checkpoint_prefix + ".rtf";
    save_checkpoint({model, head}, out.checkpoint_prefix);
    write_report_csv(out.report, fs::path(cmd.out) / "report.csv");

    RunManifest rm;
    rm.set("command", "train");
    rm.set("data", cmd.data);
    rm.set("subject", cmd.subject < 0 ? std::string("across") : std::to_string(cmd.subject));
    rm.set("beta", csv::num(cmd.config.beta));
    rm.set("lr", csv::num(cmd.config.lr));
    rm.set("epochs", std::to_string(cmd.config.epochs));
    rm.set("batch", std::to_string(cmd.config.batch));
    rm.set("control", to_string(cmd.config.control));
    rm.set("seed", std::to_string(cmd.config.seed));
    if (cmd.config.control == ControlMode::unpaired || cmd.config.control == ControlMode::scrambled)
        rm.set("control_permutation_seed", std::to_string(cmd.config.seed));
    std::string excl;
    for (std::size_t i = 0; i < cmd.config.exclude_labels.size(); ++i) {
        if (i) excl += ",";
        excl += std::to_string(cmd.config.exclude_labels[i]);
    }
    rm.set("exclude_labels", excl);
    rm.set("zscore", cmd.config.zscore ? "1" : "0");
    rm.set("out", cmd.out);
    rm.set("wall_seconds",
           csv::num(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()));
    rm.write(cmd.out);
    return out;
}

// ---- shared evaluation helpers ----

/// Model RDMs for the four visual stages plus the output layer, computed
/// from flattened feature maps of the given image set.
inline std::vector<std::pair<std::string, rsa::Rdm>> model_layer_rdms(const Checkpoint& ck,
                                                                      const Tensor& images,
                                                                      bool include_output = true) {
    FeatureMaps fm = eval_features(ck.backbone, images);
    std::vector<std::pair<std::string, rsa::Rdm>> out;
    const std::size_t n = images.shape[0];
    for (std::size_t s = 0; s < 4; ++s) {
        const Tensor& f = fm.stages[s];
        Tensor flat = Tensor::from(Shape{n, f.size() / n}, f.data);
        out.emplace_back(kStageNames[s], rsa::model_rdm(flat, kStageNames[s]));
    }
    if (include_output) {
        Tensor flat = Tensor::from(Shape{n, fm.logits.size() / n}, fm.logits.data);
        out.emplace_back("output", rsa::model_rdm(flat, "output"));
    }
    return out;
}

/// Decoding RDM for every timepoint of a test split.
inline std::vector<rsa::Rdm> eeg_rdm_series(const EegDataset& test, std::uint64_t seed,
                                            std::size_t jobs) {
    std::vector<rsa::Rdm> out;
    out.reserve(test.timepoints());
    for (std::size_t t = 0; t < test.timepoints(); ++t) {
        rsa::DecodingParams p;
        p.seed = derive_seed(seed, 0xdec0de, t);
        p.jobs = jobs;
        out.push_back(rsa::eeg_decoding_rdm(test.eeg, t, p, test.subject));
    }
    return out;
}

/// Millisecond window -> [begin, end) timepoint indices.
inline std::pair<std::size_t, std::size_t> window_indices(std::size_t lo_ms, std::size_t hi_ms,
                                                          std::size_t ms_per, std::size_t T) {
    std::size_t b = T, e = 0;
    for (std::size_t t = 0; t < T; ++t) {
        const std::size_t ms = t * ms_per;
        if (ms >= lo_ms && ms < hi_ms) {
            b = std::min(b, t);
            e = std::max(e, t + 1);
        }
    }
    if (b >= e) throw UsageError("window [" + std::to_string(lo_ms) + "," + std::to_string(hi_ms) +
                                 ") ms selects no timepoints");
    return {b, e};
}

// ---- eval eeg ----

struct EvalEegCommand {
    std::string data;
    std::string checkpoint;          // checkpoint prefix (without .rtf)
    std::string baseline;            // optional baseline prefix
    std::size_t subject = 0;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
    std::size_t window_lo_ms = 50, window_hi_ms = 200;
    std::string out;
    bool force = false;
};

struct EvalEegResult {
    std::vector<rsa::SimilarityCurve> curves;            // incl. "max"
    std::vector<rsa::SimilarityCurve> baseline_curves;   // empty without baseline
    std::vector<rsa::ImprovementStats> improvement;
    double window_mean = 0.0;           // mean over the four visual layers
    double baseline_window_mean = 0.0;
};

inline void write_curves_csv(const std::vector<rsa::SimilarityCurve>& curves, std::size_t ms_per,
                             const fs::path& path) {
    csv::Writer w(path.string(), {"layer", "timepoint_ms", "rho"});
    for (const auto& c : curves)
        for (std::size_t t = 0; t < c.rho.size(); ++t)
            w.row({c.layer, std::to_string(t * ms_per), csv::num(c.rho[t])});
}

inline EvalEegResult run_eval_eeg(const EvalEegCommand& cmd) {
    const auto t0 = std::chrono::steady_clock::now();
    prepare_out_dir(cmd.out, cmd.force);
    LoadedData data = load_dataset(cmd.data);
    if (cmd.subject >= data.subjects())
        throw DataError("eval eeg: subject index out of range");
    const EegDataset& test = data.test[cmd.subject];
    Checkpoint ck = load_checkpoint(cmd.checkpoint);
    if (ck.backbone.spec.in_h != test.images.shape[2])
        throw DataError("eval eeg: checkpoint input size does not match dataset images");

    std::vector<rsa::Rdm> neural = eeg_rdm_series(test, cmd.seed, cmd.jobs);
    auto layers = model_layer_rdms(ck, test.images);
    EvalEegResult res;
    res.curves = rsa::similarity_timecourses(layers, neural, test.subject, "model");
    auto [wb, we] =
        window_indices(cmd.window_lo_ms, cmd.window_hi_ms, data.ms_per_timepoint,
                       test.timepoints());
    // visual layers only: drop output and max from the summary metric
    std::vector<rsa::SimilarityCurve> visual(res.curves.begin(), res.curves.begin() + 4);
    res.window_mean = rsa::window_mean(visual, wb, we);

    write_curves_csv(res.curves, data.ms_per_timepoint, fs::path(cmd.out) / "curves.csv");
    {
        csv::Writer w((fs::path(cmd.out) / "summary.csv").string(),
                      {"metric", "window_lo_ms", "window_hi_ms", "value"});
        w.row({"visual_window_mean_rho", std::to_string(cmd.window_lo_ms),
               std::to_string(cmd.window_hi_ms), csv::num(res.window_mean)});
    }

    if (!cmd.baseline.empty()) {
        Checkpoint base = load_checkpoint(cmd.baseline);
        auto base_layers = model_layer_rdms(base, test.images);
        res.baseline_curves =
            rsa::similarity_timecourses(base_layers, neural, test.subject, "baseline");
        std::vector<rsa::SimilarityCurve> base_visual(res.baseline_curves.begin(),
                                                      res.baseline_curves.begin() + 4);
        res.baseline_window_mean = rsa::window_mean(base_visual, wb, we);
        res.improvement = rsa::improvement_stats(res.curves, res.baseline_curves);
        write_curves_csv(res.baseline_curves, data.ms_per_timepoint,
                         fs::path(cmd.out) / "baseline_curves.csv");
        csv::Writer dw((fs::path(cmd.out) / "delta.csv").string(),
                       {"layer", "timepoint_ms", "rho", "rho_baseline", "delta"});
        for (std::size_t k = 0; k < res.curves.size(); ++k)
            for (std::size_t t = 0; t < res.curves[k].rho.size(); ++t)
                dw.row({res.curves[k].layer, std::to_string(t * data.ms_per_timepoint),
                        csv::num(res.curves[k].rho[t]), csv::num(res.baseline_curves[k].rho[t]),
                        csv::num(res.curves[k].rho[t] - res.baseline_curves[k].rho[t])});
        csv::Writer iw((fs::path(cmd.out) / "improvement.csv").string(),
                       {"layer", "peak_timepoint_ms", "baseline_rho", "delta", "ratio",
                        "ratio_defined"});
        for (const auto& st : res.improvement)
            iw.row({st.layer, std::to_string(st.peak_timepoint * data.ms_per_timepoint),
                    csv::num(st.baseline_rho), csv::num(st.delta),
                    st.ratio_defined ? csv::num(st.ratio) : "nan",
                    st.ratio_defined ? "1" : "0"});
    }

    RunManifest rm;
    rm.set("command", "eval-eeg");
    rm.set("data", cmd.data);
    rm.set("checkpoint", cmd.checkpoint);
    rm.set("baseline", cmd.baseline);
    rm.set("subject", std::to_string(cmd.subject));
    rm.set("seed", std::to_string(cmd.seed));
    rm.set("window_ms", std::to_string(cmd.window_lo_ms) + "-" + std::to_string(cmd.window_hi_ms));
    rm.set("wall_seconds",
           csv::num(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()));
    rm.write(cmd.out);
    return res;
}

// ---- eval fmri ----

struct EvalFmriCommand {
    std::string data;
    std::string checkpoint;
    std::size_t subject = 0;
    std::string out;
    bool force = false;
};

struct EvalFmriResult {
    // (roi, layer, rho); layer "max" rows carry the per-ROI reduction
    std::vector<std::tuple<std::string, std::string, double>> rows;
    double mean_max = 0.0;  // mean over ROIs of the max-over-layers similarity
};

inline EvalFmriResult run_eval_fmri(const EvalFmriCommand& cmd) {
    prepare_out_dir(cmd.out, cmd.force);
    LoadedData data = load_dataset(cmd.data);
    if (cmd.subject >= data.subjects()) throw DataError("eval fmri: subject index out of range");
    const FmriDataset& fm = data.fmri[cmd.subject];
    fm.validate();
    Checkpoint ck = load_checkpoint(cmd.checkpoint);
    auto layers = model_layer_rdms(ck, data.test[cmd.subject].images);

    EvalFmriResult res;
    double max_sum = 0.0;
    for (const auto& [roi, patterns] : fm.rois) {
        rsa::Rdm roi_rdm = rsa::fmri_rdm(patterns, roi, fm.subject);
        double best = -2.0;
        for (const auto& [layer, rdm] : layers) {
            double rho = rsa::rsa_compare(rdm, roi_rdm);
            res.rows.emplace_back(roi, layer, rho);
            best = std::max(best, rho);
        }
        res.rows.emplace_back(roi, "max", best);
        max_sum += best;
    }
    res.mean_max = max_sum / static_cast<double>(fm.rois.size());

    csv::Writer w((fs::path(cmd.out) / "similarity.csv").string(), {"roi", "layer", "rho"});
    for (const auto& [roi, layer, rho] : res.rows) w.row({roi, layer, csv::num(rho)});
    RunManifest rm;
    rm.set("command", "eval-fmri");
    rm.set("data", cmd.data);
    rm.set("checkpoint", cmd.checkpoint);
    rm.set("subject", std::to_string(cmd.subject));
    rm.write(cmd.out);
    return res;
}

// ---- eval variability ----

struct EvalVariabilityCommand {
    std::string data;
    std::vector<std::string> checkpoints;
    std::string out;
    bool force = false;
};

inline std::vector<rsa::VariabilityMatrix> run_eval_variability(
    const EvalVariabilityCommand& cmd) {
    prepare_out_dir(cmd.out, cmd.force);
    if (cmd.checkpoints.size() < 2)
        throw UsageError("eval variability: need at least 2 checkpoints");
    LoadedData data = load_dataset(cmd.data);
    const Tensor& images = data.test.at(0).images;
    std::vector<std::vector<std::pair<std::string, rsa::Rdm>>> all;
    for (const std::string& ckp : cmd.checkpoints)
        all.push_back(model_layer_rdms(load_checkpoint(ckp), images));

    std::vector<rsa::VariabilityMatrix> out;
    csv::Writer mw((fs::path(cmd.out) / "variability_matrix.csv").string(),
                   {"layer", "i", "j", "value"});
    csv::Writer sw((fs::path(cmd.out) / "variability_summary.csv").string(),
                   {"layer", "mean_index"});
    const std::size_t layers = all.front().size();
    for (std::size_t l = 0; l < layers; ++l) {
        std::vector<rsa::Rdm> instances;
        for (const auto& model_rdms : all) instances.push_back(model_rdms[l].second);
        rsa::VariabilityMatrix vm = rsa::variability(instances, all.front()[l].first);
        for (std::size_t i = 0; i < vm.m; ++i)
            for (std::size_t j = 0; j < vm.m; ++j)
                mw.row({vm.tag, std::to_string(i), std::to_string(j),
                        csv::num(vm.values[i * vm.m + j])});
        sw.row({vm.tag, csv::num(vm.mean_index)});
        out.push_back(std::move(vm));
    }
    RunManifest rm;
    rm.set("command", "eval-variability");
    rm.set("data", cmd.data);
    rm.set("checkpoints", std::to_string(cmd.checkpoints.size()));
    rm.write(cmd.out);
    return out;
}

// ---- eval cross-subject ----

struct EvalCrossSubjectCommand {
    std::string data;
    std::vector<std::string> checkpoints;  // checkpoint s trained on subject s
    std::string baseline;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
    std::size_t window_lo_ms = 50, window_hi_ms = 200;
    std::string out;
    bool force = false;
};

inline rsa::CrossSubjectResult run_eval_cross_subject(const EvalCrossSubjectCommand& cmd) {
    prepare_out_dir(cmd.out, cmd.force);
    LoadedData data = load_dataset(cmd.data);
    if (cmd.checkpoints.size() != data.subjects())
        throw UsageError("eval cross-subject: need one checkpoint per subject (" +
                         std::to_string(data.subjects()) + ")");
    Checkpoint base = load_checkpoint(cmd.baseline);

    std::vector<std::vector<rsa::Rdm>> neural;  // per subject, per timepoint
    for (std::size_t s = 0; s < data.subjects(); ++s)
        neural.push_back(eeg_rdm_series(data.test[s], cmd.seed, cmd.jobs));
    auto [wb, we] = window_indices(cmd.window_lo_ms, cmd.window_hi_ms, data.ms_per_timepoint,
                                   data.test.at(0).timepoints());

    auto visual_curves = [&](const Checkpoint& ck, std::size_t subject) {
        auto layers = model_layer_rdms(ck, data.test[subject].images, false);
        return rsa::similarity_timecourses(layers, neural[subject], subject_name(subject), "");
    };

    std::vector<std::vector<std::vector<rsa::SimilarityCurve>>> model_subject(
        cmd.checkpoints.size());
    for (std::size_t m = 0; m < cmd.checkpoints.size(); ++m) {
        Checkpoint ck = load_checkpoint(cmd.checkpoints[m]);
        for (std::size_t s = 0; s < data.subjects(); ++s)
            model_subject[m].push_back(visual_curves(ck, s));
    }
    std::vector<std::vector<rsa::SimilarityCurve>> baseline_curves;
    for (std::size_t s = 0; s < data.subjects(); ++s)
        baseline_curves.push_back(visual_curves(base, s));

    rsa::CrossSubjectResult res =
        rsa::cross_subject_matrix(model_subject, baseline_curves, wb, we);

    auto write_matrix = [&](const std::vector<double>& mat, const std::string& name) {
        csv::Writer w((fs::path(cmd.out) / name).string(), {"model", "subject", "value"});
        for (std::size_t i = 0; i < res.m; ++i)
            for (std::size_t j = 0; j < res.m; ++j)
                w.row({std::to_string(i), std::to_string(j), csv::num(mat[i * res.m + j])});
    };
    write_matrix(res.matrix, "matrix.csv");
    write_matrix(res.baseline_subtracted, "delta_matrix.csv");
    write_matrix(res.normalized, "normalized.csv");
    {
        csv::Writer w((fs::path(cmd.out) / "matched_test.csv").string(),
                      {"n", "t", "p", "cohens_d", "degenerate"});
        const auto& tr = res.matched_vs_mismatched;
        w.row({std::to_string(tr.n), csv::num(tr.t), csv::num(tr.p), csv::num(tr.d),
               tr.degenerate ? "1" : "0"});
    }
    RunManifest rm;
    rm.set("command", "eval-cross-subject");
    rm.set("data", cmd.data);
    rm.set("seed", std::to_string(cmd.seed));
    rm.write(cmd.out);
    return res;
}

// ---- eval features ----

struct EvalFeaturesCommand {
    std::string data;
    std::string checkpoint;
    std::string baseline;  // optional; deltas need it
    std::string layer = "it";
    std::size_t top = 3;
    std::string out;
    bool force = false;
};

struct FeatureRow {
    std::string dimension;
    double partial_r2 = 0.0;
    double baseline_partial_r2 = 0.0;
    double delta = 0.0;
};

inline std::vector<FeatureRow> run_eval_features(const EvalFeaturesCommand& cmd) {
    prepare_out_dir(cmd.out, cmd.force);
    LoadedData data = load_dataset(cmd.data);
    data.features.validate();
    std::vector<rsa::Rdm> frdms = rsa::feature_rdms(data.features);

    auto layer_rdm = [&](const std::string& prefix) {
        Checkpoint ck = load_checkpoint(prefix);
        auto layers = model_layer_rdms(ck, data.test.at(0).images);
        for (auto& [name, rdm] : layers)
            if (name == cmd.layer) return rdm;
        throw UsageError("eval features: unknown layer \"" + cmd.layer + "\"");
    };
    rsa::Rdm model = layer_rdm(cmd.checkpoint);
    const bool have_baseline = !cmd.baseline.empty();
    std::vector<FeatureRow> rows;
    for (std::size_t f = 0; f < frdms.size(); ++f) {
        std::vector<const rsa::Rdm*> controls;
        for (std::size_t k = 0; k < frdms.size(); ++k)
            if (k != f) controls.push_back(&frdms[k]);
        FeatureRow row;
        row.dimension = data.features.names[f];
        row.partial_r2 = rsa::partial_spearman_r2(model, frdms[f], controls).r2;
        rows.push_back(row);
    }
    if (have_baseline) {
        rsa::Rdm base = layer_rdm(cmd.baseline);
        for (std::size_t f = 0; f < frdms.size(); ++f) {
            std::vector<const rsa::Rdm*> controls;
            for (std::size_t k = 0; k < frdms.size(); ++k)
                if (k != f) controls.push_back(&frdms[k]);
            rows[f].baseline_partial_r2 = rsa::partial_spearman_r2(base, frdms[f], controls).r2;
            rows[f].delta = rows[f].partial_r2 - rows[f].baseline_partial_r2;
        }
    }

    csv::Writer w((fs::path(cmd.out) / "features.csv").string(),
                  {"dimension", "partial_r2", "partial_r2_baseline", "delta"});
    for (const auto& r : rows)
        w.row({r.dimension, csv::num(r.partial_r2), csv::num(r.baseline_partial_r2),
               csv::num(r.delta)});

    std::vector<FeatureRow> ranked = rows;
    std::stable_sort(ranked.begin(), ranked.end(), [&](const FeatureRow& a, const FeatureRow& b) {
        return have_baseline ? a.delta > b.delta : a.partial_r2 > b.partial_r2;
    });
    csv::Writer tw((fs::path(cmd.out) / "top_features.csv").string(),
                   {"dimension", "partial_r2", "partial_r2_baseline", "delta"});
    for (std::size_t k = 0; k < std::min(cmd.top, ranked.size()); ++k)
        tw.row({ranked[k].dimension, csv::num(ranked[k].partial_r2),
                csv::num(ranked[k].baseline_partial_r2), csv::num(ranked[k].delta)});

    RunManifest rm;
    rm.set("command", "eval-features");
    rm.set("data", cmd.data);
    rm.set("checkpoint", cmd.checkpoint);
    rm.set("layer", cmd.layer);
    rm.set("top", std::to_string(cmd.top));
    rm.write(cmd.out);
    return rows;
}

// ---- eval stats ----

struct EvalStatsCommand {
    std::string a_path;
    std::string b_path;  // empty -> one-sample against mu0
    double mu0 = 0.0;
    bool paired = true;
    std::string out;
    bool force = false;
};

inline std::vector<double> read_values(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("stats: cannot open " + path);
    std::vector<double> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        try {
            out.push_back(std::stod(line));
        } catch (const std::exception&) {
            throw DataError("stats: bad numeric line in " + path + ": \"" + line + "\"");
        }
    }
    if (out.empty()) throw DataError("stats: no values in " + path);
    return out;
}

inline stats::TestResult run_eval_stats(const EvalStatsCommand& cmd) {
    prepare_out_dir(cmd.out, cmd.force);
    std::vector<double> a = read_values(cmd.a_path);
    stats::TestResult r;
    std::string kind;
    if (cmd.b_path.empty()) {
        r = stats::one_sample_t(a, cmd.mu0);
        kind = "one_sample";
    } else {
        std::vector<double> b = read_values(cmd.b_path);
        if (cmd.paired) {
            r = stats::paired_t(a, b);
            kind = "paired";
        } else {
            throw UsageError("stats: only one-sample and paired tests are supported");
        }
    }
    csv::Writer w((fs::path(cmd.out) / "stats.csv").string(),
                  {"test", "n", "mean", "t", "p", "cohens_d", "degenerate"});
    w.row({kind, std::to_string(r.n), csv::num(r.mean), csv::num(r.t), csv::num(r.p),
           csv::num(r.d), r.degenerate ? "1" : "0"});
    RunManifest rm;
    rm.set("command", "eval-stats");
    rm.set("a", cmd.a_path);
    rm.set("b", cmd.b_path);
    rm.set("test", kind);
    rm.write(cmd.out);
    return r;
}

}  // namespace realign::pipeline
