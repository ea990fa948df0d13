// Command-line surface for the alignment pipeline: synthetic dataset
// generation, alignment training with controls, and the evaluation bundle
// (EEG/fMRI similarity, variability, cross-subject, features, stats).

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "realign/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitDegenerate = 4;

void add_config_file(CLI::App* app) {
    app->set_config("--config", "", "key=value config file (flags take precedence)");
}

}  // namespace

int main(int argc, char** argv) {
    using namespace realign;

    CLI::App app{"realign: EEG representational-alignment training and RSA evaluation"};
    app.require_subcommand(1);

    // ---- synth ----
    pipeline::SynthCommand synth_cmd;
    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset directory");
    add_config_file(synth);
    synth->add_option("--images", synth_cmd.config.train_images, "training images")
        ->capture_default_str();
    synth->add_option("--test-images", synth_cmd.config.test_images, "held-out test images")
        ->capture_default_str();
    synth->add_option("--subjects", synth_cmd.config.subjects, "synthetic subjects")
        ->capture_default_str();
    synth->add_option("--latents", synth_cmd.config.latent_dim, "neural latent dimensions")
        ->capture_default_str();
    synth->add_option("--distractors", synth_cmd.config.distractor_dims,
                      "image-only nuisance dimensions")
        ->capture_default_str();
    synth->add_option("--reps", synth_cmd.config.train_reps, "training repetitions per image")
        ->capture_default_str();
    synth->add_option("--test-reps", synth_cmd.config.test_reps, "test repetitions per image")
        ->capture_default_str();
    synth->add_option("--sigma", synth_cmd.config.noise_sigma, "EEG trial noise std")
        ->capture_default_str();
    synth->add_option("--signal-scale", synth_cmd.config.signal_scale, "EEG signal std")
        ->capture_default_str();
    synth->add_option("--channels", synth_cmd.config.channels, "EEG channels")
        ->capture_default_str();
    synth->add_option("--timepoints", synth_cmd.config.timepoints, "EEG timepoints")
        ->capture_default_str();
    synth->add_option("--seed", synth_cmd.config.seed, "generator seed")->capture_default_str();
    synth->add_option("--out", synth_cmd.out, "output directory")->required();
    synth->add_flag("--force", synth_cmd.force, "overwrite a non-empty output directory");

    // ---- train ----
    pipeline::TrainCommand train_cmd;
    bool across_subjects = false;
    std::vector<long> exclude;
    CLI::App* train = app.add_subcommand("train", "train an aligned model on one subject");
    add_config_file(train);
    train->add_option("--data", train_cmd.data, "dataset directory (from synth)")->required();
    train->add_option("--subject", train_cmd.subject, "subject index")->capture_default_str();
    train->add_flag("--across-subjects", across_subjects,
                    "pool all subjects' trials as one super-subject");
    train->add_option("--beta", train_cmd.config.beta, "generation loss weight")
        ->capture_default_str();
    train->add_option("--lr", train_cmd.config.lr, "learning rate")->capture_default_str();
    train->add_option("--epochs", train_cmd.config.epochs, "training epochs")
        ->capture_default_str();
    train->add_option("--batch", train_cmd.config.batch, "batch size")->capture_default_str();
    std::string control = "none";
    train->add_option("--control", control,
                      "control mode: none|no_cont|no_mse|unpaired|scrambled")
        ->capture_default_str();
    train->add_option("--exclude-label", exclude, "concept labels to drop from training");
    train->add_flag("--zscore", train_cmd.config.zscore, "z-score EEG targets per channel");
    train->add_option("--seed", train_cmd.config.seed, "training seed")->capture_default_str();
    train->add_option("--classes", train_cmd.backbone.num_classes, "classifier classes")
        ->capture_default_str();
    train->add_option("--out", train_cmd.out, "output directory")->required();
    train->add_flag("--force", train_cmd.force, "overwrite a non-empty output directory");

    // ---- eval ----
    CLI::App* eval = app.add_subcommand("eval", "similarity analyses and statistics");
    eval->require_subcommand(1);

    pipeline::EvalEegCommand eeg_cmd;
    CLI::App* eeg = eval->add_subcommand("eeg", "model-EEG similarity time courses");
    add_config_file(eeg);
    eeg->add_option("--data", eeg_cmd.data, "dataset directory")->required();
    eeg->add_option("--checkpoint", eeg_cmd.checkpoint, "checkpoint prefix")->required();
    eeg->add_option("--baseline", eeg_cmd.baseline, "baseline checkpoint prefix");
    eeg->add_option("--subject", eeg_cmd.subject, "subject index")->capture_default_str();
    eeg->add_option("--seed", eeg_cmd.seed, "decoding seed")->capture_default_str();
    eeg->add_option("--jobs", eeg_cmd.jobs, "parallel decoding workers")->capture_default_str();
    eeg->add_option("--window-lo", eeg_cmd.window_lo_ms, "window start (ms)")
        ->capture_default_str();
    eeg->add_option("--window-hi", eeg_cmd.window_hi_ms, "window end (ms)")
        ->capture_default_str();
    eeg->add_option("--out", eeg_cmd.out, "output directory")->required();
    eeg->add_flag("--force", eeg_cmd.force, "overwrite a non-empty output directory");

    pipeline::EvalFmriCommand fmri_cmd;
    CLI::App* fmri = eval->add_subcommand("fmri", "model-fMRI similarity per ROI");
    add_config_file(fmri);
    fmri->add_option("--data", fmri_cmd.data, "dataset directory")->required();
    fmri->add_option("--checkpoint", fmri_cmd.checkpoint, "checkpoint prefix")->required();
    fmri->add_option("--subject", fmri_cmd.subject, "subject index")->capture_default_str();
    fmri->add_option("--out", fmri_cmd.out, "output directory")->required();
    fmri->add_flag("--force", fmri_cmd.force, "overwrite a non-empty output directory");

    pipeline::EvalVariabilityCommand var_cmd;
    CLI::App* var = eval->add_subcommand("variability", "between-model variability per layer");
    add_config_file(var);
    var->add_option("--data", var_cmd.data, "dataset directory")->required();
    var->add_option("--checkpoints", var_cmd.checkpoints, "checkpoint prefixes")
        ->required()
        ->expected(-2);
    var->add_option("--out", var_cmd.out, "output directory")->required();
    var->add_flag("--force", var_cmd.force, "overwrite a non-empty output directory");

    pipeline::EvalCrossSubjectCommand cross_cmd;
    CLI::App* cross = eval->add_subcommand("cross-subject", "model x subject similarity matrix");
    add_config_file(cross);
    cross->add_option("--data", cross_cmd.data, "dataset directory")->required();
    cross->add_option("--checkpoints", cross_cmd.checkpoints,
                      "checkpoint prefixes, one per subject, in subject order")
        ->required()
        ->expected(-2);
    cross->add_option("--baseline", cross_cmd.baseline, "baseline checkpoint prefix")->required();
    cross->add_option("--seed", cross_cmd.seed, "decoding seed")->capture_default_str();
    cross->add_option("--jobs", cross_cmd.jobs, "parallel decoding workers")
        ->capture_default_str();
    cross->add_option("--window-lo", cross_cmd.window_lo_ms, "window start (ms)")
        ->capture_default_str();
    cross->add_option("--window-hi", cross_cmd.window_hi_ms, "window end (ms)")
        ->capture_default_str();
    cross->add_option("--out", cross_cmd.out, "output directory")->required();
    cross->add_flag("--force", cross_cmd.force, "overwrite a non-empty output directory");

    pipeline::EvalFeaturesCommand feat_cmd;
    CLI::App* feat = eval->add_subcommand("features", "partial-correlation feature profile");
    add_config_file(feat);
    feat->add_option("--data", feat_cmd.data, "dataset directory")->required();
    feat->add_option("--checkpoint", feat_cmd.checkpoint, "checkpoint prefix")->required();
    feat->add_option("--baseline", feat_cmd.baseline, "baseline checkpoint prefix");
    feat->add_option("--layer", feat_cmd.layer, "model layer for the profile")
        ->capture_default_str();
    feat->add_option("--top", feat_cmd.top, "rows in top_features.csv")->capture_default_str();
    feat->add_option("--out", feat_cmd.out, "output directory")->required();
    feat->add_flag("--force", feat_cmd.force, "overwrite a non-empty output directory");

    pipeline::EvalStatsCommand stats_cmd;
    CLI::App* st = eval->add_subcommand("stats", "t-test between run metric files");
    add_config_file(st);
    st->add_option("--a", stats_cmd.a_path, "first sample file (one value per line)")->required();
    st->add_option("--b", stats_cmd.b_path, "second sample file (paired)");
    st->add_option("--mu0", stats_cmd.mu0, "reference mean for the one-sample test")
        ->capture_default_str();
    st->add_option("--out", stats_cmd.out, "output directory")->required();
    st->add_flag("--force", stats_cmd.force, "overwrite a non-empty output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (synth->parsed()) {
            pipeline::run_synth(synth_cmd);
            std::printf("synth: wrote dataset to %s\n", synth_cmd.out.c_str());
        } else if (train->parsed()) {
            train_cmd.config.control = control_mode_from(control);
            train_cmd.config.exclude_labels = exclude;
            if (across_subjects) {
                train_cmd.subject = -1;
                train_cmd.config.pooling = PoolingMode::across_subject;
            }
            pipeline::TrainOutcome out = pipeline::run_train(train_cmd);
            std::printf("train: %zu epochs, final loss %.6g, checkpoint %s\n",
                        out.report.epochs.size(),
                        out.report.epochs.empty() ? 0.0 : out.report.epochs.back().total,
                        out.report.checkpoint_path.c_str());
        } else if (eeg->parsed()) {
            pipeline::EvalEegResult res = pipeline::run_eval_eeg(eeg_cmd);
            std::printf("eval eeg: window mean rho %.6g%s\n", res.window_mean,
                        eeg_cmd.baseline.empty()
                            ? ""
                            : (" (baseline " + csv::num(res.baseline_window_mean) + ")").c_str());
        } else if (fmri->parsed()) {
            pipeline::EvalFmriResult res = pipeline::run_eval_fmri(fmri_cmd);
            std::printf("eval fmri: mean max-over-layers rho %.6g\n", res.mean_max);
        } else if (var->parsed()) {
            auto res = pipeline::run_eval_variability(var_cmd);
            std::printf("eval variability: %zu layers\n", res.size());
        } else if (cross->parsed()) {
            rsa::CrossSubjectResult res = pipeline::run_eval_cross_subject(cross_cmd);
            std::printf("eval cross-subject: matched vs mismatched t=%.4f p=%.4g%s\n",
                        res.matched_vs_mismatched.t, res.matched_vs_mismatched.p,
                        res.matched_vs_mismatched.degenerate ? " (degenerate)" : "");
            if (res.matched_vs_mismatched.degenerate) return kExitDegenerate;
        } else if (feat->parsed()) {
            auto rows = pipeline::run_eval_features(feat_cmd);
            std::printf("eval features: %zu dimensions\n", rows.size());
        } else if (st->parsed()) {
            stats::TestResult res = pipeline::run_eval_stats(stats_cmd);
            std::printf("eval stats: n=%zu t=%.4f p=%.4g d=%.4f%s\n", res.n, res.t, res.p, res.d,
                        res.degenerate ? " (degenerate)" : "");
            if (res.degenerate) return kExitDegenerate;
        }
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const DegeneracyError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitDegenerate;
    } catch (const DataError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitData;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitData;
    }
    return kExitOk;
}
