#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "realign/pipeline.hpp"

using namespace realign;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "realign_pipeline" / name;
    fs::remove_all(dir);
    fs::create_directories(dir.parent_path());
    return dir;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream f(p);
    REQUIRE(f.good());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) lines.push_back(line);
    return lines;
}

pipeline::SynthCommand tiny_synth(const fs::path& out, std::uint64_t seed = 1) {
    pipeline::SynthCommand cmd;
    cmd.config.train_images = 8;
    cmd.config.test_images = 4;
    cmd.config.subjects = 2;
    cmd.config.latent_dim = 2;
    cmd.config.distractor_dims = 2;
    cmd.config.train_reps = 2;
    cmd.config.test_reps = 10;
    cmd.config.channels = 4;
    cmd.config.timepoints = 5;
    cmd.config.image_size = 16;
    cmd.config.seed = seed;
    cmd.out = out.string();
    return cmd;
}

pipeline::TrainCommand tiny_train(const fs::path& data, const fs::path& out) {
    pipeline::TrainCommand cmd;
    cmd.data = data.string();
    cmd.subject = 0;
    cmd.config.beta = 100.0;
    cmd.config.lr = 1e-3;
    cmd.config.epochs = 2;
    cmd.config.batch = 4;
    cmd.config.seed = 5;
    cmd.backbone.in_h = 16;
    cmd.backbone.in_w = 16;
    cmd.backbone.stage_channels = {8, 8, 16, 16};
    cmd.backbone.num_classes = 4;
    cmd.out = out.string();
    return cmd;
}

}  // namespace

TEST_CASE("synth command writes a complete, reproducible dataset directory") {
    fs::path out = fresh_dir("synth_a");
    pipeline::run_synth(tiny_synth(out));
    for (const char* f : {"manifest.txt", "dataset.txt", "images.rtf", "features.rtf",
                          "world.rtf", "subjects/sub00.rtf", "subjects/sub01.rtf"})
        REQUIRE(fs::exists(out / f));

    SECTION("same seed regenerates byte-identical rtf files") {
        fs::path out2 = fresh_dir("synth_b");
        pipeline::run_synth(tiny_synth(out2));
        for (const char* f : {"images.rtf", "features.rtf", "world.rtf", "subjects/sub00.rtf",
                              "subjects/sub01.rtf", "dataset.txt"})
            REQUIRE(slurp(out / f) == slurp(out2 / f));
    }
    SECTION("subject count controls the subject file count") {
        fs::path out3 = fresh_dir("synth_c");
        pipeline::SynthCommand cmd = tiny_synth(out3);
        cmd.config.subjects = 3;
        pipeline::run_synth(cmd);
        int count = 0;
        for (auto& e : fs::directory_iterator(out3 / "subjects")) {
            (void)e;
            ++count;
        }
        CHECK(count == 3);
    }
    SECTION("non-empty output requires force") {
        CHECK_THROWS_AS(pipeline::run_synth(tiny_synth(out)), DataError);
        pipeline::SynthCommand cmd = tiny_synth(out);
        cmd.force = true;
        CHECK_NOTHROW(pipeline::run_synth(cmd));
    }
    SECTION("load round-trips the generated tensors") {
        pipeline::LoadedData data = pipeline::load_dataset(out);
        synth::SynthData gen = synth::synth_generate(tiny_synth(out).config);
        CHECK(data.subjects() == 2);
        CHECK(data.train[0].eeg.data == gen.train[0].eeg.data);
        CHECK(data.test[1].eeg.data == gen.test[1].eeg.data);
        CHECK(data.train[0].images.data == gen.train[0].images.data);
        CHECK(data.fmri[0].rois[0].second.data == gen.fmri[0].rois[0].second.data);
        CHECK(data.features.names == gen.features.names);
        CHECK(data.train[0].labels == gen.train[0].labels);
    }
}

TEST_CASE("train command writes checkpoint, baseline, and report") {
    fs::path data = fresh_dir("train_data");
    pipeline::run_synth(tiny_synth(data));
    fs::path out = fresh_dir("train_out");
    pipeline::TrainOutcome res = pipeline::run_train(tiny_train(data, out));

    for (const char* f : {"checkpoint.rtf", "checkpoint.manifest.txt", "baseline.rtf",
                          "baseline.manifest.txt", "report.csv", "manifest.txt"})
        REQUIRE(fs::exists(out / f));
    auto lines = read_lines(out / "report.csv");
    REQUIRE(lines.size() == 3);  // header + 2 epochs
    CHECK(lines[0] ==
          "epoch,loss_total,loss_classification,loss_mse,loss_contrastive,loss_generation");

    SECTION("baseline equals the seed-initialized model") {
        Checkpoint base = load_checkpoint((out / "baseline").string());
        Backbone fresh = build_backbone(base.backbone.spec, 5);
        for (std::size_t k = 0; k < fresh.params.items.size(); ++k)
            REQUIRE(base.backbone.params.items[k].second.data ==
                    fresh.params.items[k].second.data);
    }
    SECTION("rerun with identical flags is bit-identical apart from the manifest") {
        fs::path out2 = fresh_dir("train_out2");
        pipeline::run_train(tiny_train(data, out2));
        CHECK(slurp(out / "checkpoint.rtf") == slurp(out2 / "checkpoint.rtf"));
        CHECK(slurp(out / "report.csv") == slurp(out2 / "report.csv"));
    }
    SECTION("beta 0 reports equal total and classification columns") {
        fs::path out3 = fresh_dir("train_beta0");
        pipeline::TrainCommand cmd = tiny_train(data, out3);
        cmd.config.beta = 0.0;
        pipeline::TrainOutcome r = pipeline::run_train(cmd);
        for (const auto& ep : r.report.epochs) {
            CHECK(ep.total == ep.classification);
            CHECK(ep.generation != 0.0);  // still logged
        }
    }
    SECTION("across-subject pooling and label exclusion compose") {
        fs::path out4 = fresh_dir("train_across");
        pipeline::TrainCommand cmd = tiny_train(data, out4);
        cmd.subject = -1;
        cmd.config.exclude_labels = {0};
        cmd.config.batch = 4;
        pipeline::TrainOutcome r = pipeline::run_train(cmd);
        CHECK(r.report.epochs.size() == 2);
    }
    SECTION("bad subject index is a data error") {
        pipeline::TrainCommand cmd = tiny_train(data, fresh_dir("train_bad"));
        cmd.subject = 9;
        CHECK_THROWS_AS(pipeline::run_train(cmd), DataError);
    }
}

TEST_CASE("eval commands") {
    fs::path data = fresh_dir("eval_data");
    pipeline::run_synth(tiny_synth(data));
    fs::path trained = fresh_dir("eval_train");
    pipeline::run_train(tiny_train(data, trained));
    const std::string ck = (trained / "checkpoint").string();
    const std::string base = (trained / "baseline").string();

    SECTION("eeg: curves, summary, baseline deltas, improvement") {
        fs::path out = fresh_dir("eval_eeg");
        pipeline::EvalEegCommand cmd;
        cmd.data = data.string();
        cmd.checkpoint = ck;
        cmd.baseline = base;
        cmd.subject = 0;
        cmd.jobs = 2;
        cmd.window_lo_ms = 10;
        cmd.window_hi_ms = 50;
        cmd.out = out.string();
        pipeline::EvalEegResult res = pipeline::run_eval_eeg(cmd);
        REQUIRE(res.curves.size() == 6);  // v1,v2,v4,it,output,max
        CHECK(res.curves.back().layer == "max");
        CHECK(std::isfinite(res.window_mean));
        auto lines = read_lines(out / "curves.csv");
        CHECK(lines[0] == "layer,timepoint_ms,rho");
        CHECK(lines.size() == 1 + 6 * 5);  // 6 curves x 5 timepoints
        REQUIRE(fs::exists(out / "delta.csv"));
        auto imp = read_lines(out / "improvement.csv");
        CHECK(imp[0] == "layer,peak_timepoint_ms,baseline_rho,delta,ratio,ratio_defined");
        CHECK(imp.size() == 7);
        // rerun into a second directory: identical CSV bytes
        fs::path out2 = fresh_dir("eval_eeg2");
        cmd.out = out2.string();
        pipeline::run_eval_eeg(cmd);
        CHECK(slurp(out / "curves.csv") == slurp(out2 / "curves.csv"));
    }
    SECTION("fmri: per-roi rows with a max reduction") {
        fs::path out = fresh_dir("eval_fmri");
        pipeline::EvalFmriCommand cmd;
        cmd.data = data.string();
        cmd.checkpoint = ck;
        cmd.subject = 0;
        cmd.out = out.string();
        pipeline::EvalFmriResult res = pipeline::run_eval_fmri(cmd);
        CHECK(res.rows.size() == 2 * 6);  // 2 ROIs x (5 layers + max)
        auto lines = read_lines(out / "similarity.csv");
        CHECK(lines[0] == "roi,layer,rho");
    }
    SECTION("variability over two checkpoints") {
        fs::path out = fresh_dir("eval_var");
        pipeline::EvalVariabilityCommand cmd;
        cmd.data = data.string();
        cmd.checkpoints = {ck, base};
        cmd.out = out.string();
        auto res = pipeline::run_eval_variability(cmd);
        REQUIRE(res.size() == 5);
        for (const auto& vm : res) CHECK(vm.m == 2);
        auto lines = read_lines(out / "variability_summary.csv");
        CHECK(lines[0] == "layer,mean_index");
        CHECK(lines.size() == 6);
    }
    SECTION("cross-subject matrix with matched test") {
        fs::path t2 = fresh_dir("eval_train2");
        pipeline::TrainCommand tc = tiny_train(data, t2);
        tc.subject = 1;
        pipeline::run_train(tc);
        fs::path out = fresh_dir("eval_cross");
        pipeline::EvalCrossSubjectCommand cmd;
        cmd.data = data.string();
        cmd.checkpoints = {ck, (t2 / "checkpoint").string()};
        cmd.baseline = base;
        cmd.jobs = 2;
        cmd.window_lo_ms = 10;
        cmd.window_hi_ms = 50;
        cmd.out = out.string();
        rsa::CrossSubjectResult res = pipeline::run_eval_cross_subject(cmd);
        CHECK(res.m == 2);
        for (const char* f : {"matrix.csv", "delta_matrix.csv", "normalized.csv",
                              "matched_test.csv"})
            REQUIRE(fs::exists(out / f));
    }
    SECTION("features: full table plus top-k") {
        fs::path out = fresh_dir("eval_feat");
        pipeline::EvalFeaturesCommand cmd;
        cmd.data = data.string();
        cmd.checkpoint = ck;
        cmd.baseline = base;
        cmd.top = 3;
        cmd.out = out.string();
        auto rows = pipeline::run_eval_features(cmd);
        CHECK(rows.size() == 4);  // 2 latents + 2 distractors
        auto top = read_lines(out / "top_features.csv");
        CHECK(top.size() == 4);  // header + 3
        CHECK(top[0] == "dimension,partial_r2,partial_r2_baseline,delta");
    }
    SECTION("unknown layer is a usage error") {
        pipeline::EvalFeaturesCommand cmd;
        cmd.data = data.string();
        cmd.checkpoint = ck;
        cmd.layer = "hippocampus";
        cmd.out = fresh_dir("eval_feat_bad").string();
        CHECK_THROWS_AS(pipeline::run_eval_features(cmd), UsageError);
    }
}

TEST_CASE("stats command") {
    fs::path dir = fresh_dir("stats_cmd");
    fs::create_directories(dir);
    auto write_values = [&](const char* name, std::vector<double> vs) {
        std::ofstream f(dir / name);
        f << "# metric values\n";
        for (double v : vs) f << v << "\n";
        return (dir / name).string();
    };
    SECTION("paired test over two files") {
        pipeline::EvalStatsCommand cmd;
        cmd.a_path = write_values("a.txt", {0.30, 0.28, 0.35, 0.31, 0.33});
        cmd.b_path = write_values("b.txt", {0.20, 0.22, 0.25, 0.21, 0.24});
        cmd.out = fresh_dir("stats_out").string();
        stats::TestResult r = pipeline::run_eval_stats(cmd);
        CHECK(r.n == 5);
        CHECK(r.t > 0.0);
        CHECK(r.p < 0.01);
        auto lines = read_lines(fs::path(cmd.out) / "stats.csv");
        CHECK(lines[0] == "test,n,mean,t,p,cohens_d,degenerate");
    }
    SECTION("one-sample against mu0") {
        pipeline::EvalStatsCommand cmd;
        cmd.a_path = write_values("c.txt", {1.0, 2.0, 3.0, 4.0, 5.0});
        cmd.mu0 = 0.0;
        cmd.out = fresh_dir("stats_out2").string();
        stats::TestResult r = pipeline::run_eval_stats(cmd);
        CHECK(r.t == Catch::Approx(4.2426).margin(5e-5));
    }
    SECTION("degenerate samples are flagged") {
        pipeline::EvalStatsCommand cmd;
        cmd.a_path = write_values("d.txt", {2.0, 2.0, 2.0});
        cmd.out = fresh_dir("stats_out3").string();
        stats::TestResult r = pipeline::run_eval_stats(cmd);
        CHECK(r.degenerate);
    }
    SECTION("bad numeric input is a data error") {
        pipeline::EvalStatsCommand cmd;
        std::ofstream f(dir / "bad.txt");
        f << "not-a-number\n";
        f.close();
        cmd.a_path = (dir / "bad.txt").string();
        cmd.out = fresh_dir("stats_out4").string();
        CHECK_THROWS_AS(pipeline::run_eval_stats(cmd), DataError);
    }
}

TEST_CASE("window mapping and split integrity on load") {
    SECTION("window indices map milliseconds to timepoints") {
        auto [b, e] = pipeline::window_indices(50, 200, 10, 20);
        CHECK(b == 5);
        CHECK(e == 20);
        CHECK_THROWS_AS(pipeline::window_indices(300, 400, 10, 20), UsageError);
    }
    SECTION("corrupted split labels fail loudly on load") {
        fs::path data = fresh_dir("bad_split");
        pipeline::run_synth(tiny_synth(data));
        // overwrite labels so train and test overlap
        auto tensors = rtf::read((data / "images.rtf").string());
        for (auto& nt : tensors)
            if (nt.name == "labels/test")
                for (double& v : nt.tensor.data) v = 0.0;
        rtf::write((data / "images.rtf").string(), tensors);
        CHECK_THROWS_AS(pipeline::load_dataset(data), DataError);
    }
}
