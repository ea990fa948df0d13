#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "realign/model.hpp"
#include "realign/losses.hpp"
#include "test_util.hpp"

using namespace realign;
using test_util::max_abs_diff;
using test_util::random_tensor;

namespace {

double grad_norm(const Tensor& g) {
    double s = 0.0;
    for (double v : g.data) s += v * v;
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("backbone construction") {
    BackboneSpec spec;
    SECTION("same seed twice gives identical parameters") {
        Backbone a = build_backbone(spec, 42);
        Backbone b = build_backbone(spec, 42);
        REQUIRE(a.params.items.size() == b.params.items.size());
        for (std::size_t k = 0; k < a.params.items.size(); ++k) {
            CHECK(a.params.items[k].first == b.params.items[k].first);
            CHECK(a.params.items[k].second.data == b.params.items[k].second.data);
        }
        Backbone c = build_backbone(spec, 43);
        CHECK(max_abs_diff(a.params.items[0].second, c.params.items[0].second) > 0.0);
    }
    SECTION("parameter count is independent of recurrence counts") {
        Backbone a = build_backbone(spec, 1);
        BackboneSpec deep = spec;
        deep.recurrence = {1, 5, 8, 3};
        Backbone b = build_backbone(deep, 1);
        CHECK(a.params.count() == b.params.count());
    }
    SECTION("spec validation") {
        BackboneSpec bad = spec;
        bad.num_classes = 1;
        CHECK_THROWS_AS(build_backbone(bad, 1), std::invalid_argument);
        bad = spec;
        bad.recurrence = {1, 0, 4, 2};
        CHECK_THROWS_AS(build_backbone(bad, 1), std::invalid_argument);
        bad = spec;
        bad.stage_channels = {16, 32, 64};
        CHECK_THROWS_AS(build_backbone(bad, 1), std::invalid_argument);
    }
}

TEST_CASE("forward features") {
    BackboneSpec spec;
    Backbone model = build_backbone(spec, 7);
    Rng rng(3);
    Tensor batch = random_tensor(rng, {4, 3, 32, 32}, 0.0, 1.0);

    SECTION("stage maps shrink monotonically and logits have K entries") {
        ad::Graph g;
        BoundParams bp = bind_params(g, model.params, false);
        StageTaps taps = forward_features(g, model, bp, g.leaf(batch));
        std::size_t prev = 1000;
        for (int s = 0; s < 4; ++s) {
            const Tensor& f = g.value(taps.stages[s]);
            REQUIRE(f.rank() == 4);
            CHECK(f.shape[0] == 4);
            CHECK(f.shape[1] == spec.stage_channels[s]);
            CHECK(f.shape[2] <= prev);
            prev = f.shape[2];
        }
        CHECK(g.value(taps.logits).shape == Shape{4, spec.num_classes});
    }
    SECTION("batch independence: N=1 equals the matching row of N=4") {
        ad::Graph g4;
        BoundParams bp4 = bind_params(g4, model.params, false);
        StageTaps t4 = forward_features(g4, model, bp4, g4.leaf(batch));
        Tensor one(Shape{1, 3, 32, 32});
        std::copy_n(&batch.data[2 * 3 * 32 * 32], 3 * 32 * 32, one.data.begin());
        ad::Graph g1;
        BoundParams bp1 = bind_params(g1, model.params, false);
        StageTaps t1 = forward_features(g1, model, bp1, g1.leaf(one));
        const Tensor& l4 = g4.value(t4.logits);
        const Tensor& l1 = g1.value(t1.logits);
        for (std::size_t c = 0; c < spec.num_classes; ++c)
            CHECK(std::fabs(l1[c] - l4[2 * spec.num_classes + c]) < 1e-10);
        const Tensor& f4 = g4.value(t4.stages[3]);
        const Tensor& f1 = g1.value(t1.stages[3]);
        const std::size_t per = f1.size();
        for (std::size_t k = 0; k < per; ++k) CHECK(std::fabs(f1[k] - f4[2 * per + k]) < 1e-10);
    }
    SECTION("all-zero image with zero biases gives all-zero features") {
        ad::Graph g;
        BoundParams bp = bind_params(g, model.params, false);
        StageTaps taps = forward_features(g, model, bp, g.leaf(Tensor(Shape{2, 3, 32, 32})));
        for (int s = 0; s < 4; ++s)
            for (double v : g.value(taps.stages[s]).data) REQUIRE(v == 0.0);
        for (double v : g.value(taps.logits).data) REQUIRE(v == 0.0);
    }
    SECTION("recurrence count changes the output") {
        BackboneSpec shallow = spec;
        shallow.recurrence = {1, 2, 1, 2};
        Backbone m2 = build_backbone(shallow, 7);  // same seed, same parameters
        ad::Graph ga, gb;
        BoundParams bpa = bind_params(ga, model.params, false);
        BoundParams bpb = bind_params(gb, m2.params, false);
        Tensor fa = ga.value(forward_features(ga, model, bpa, ga.leaf(batch)).stages[3]);
        Tensor fb = gb.value(forward_features(gb, m2, bpb, gb.leaf(batch)).stages[3]);
        CHECK(max_abs_diff(fa, fb) > 1e-8);
    }
    SECTION("wrong input shape rejected") {
        ad::Graph g;
        BoundParams bp = bind_params(g, model.params, false);
        CHECK_THROWS_AS(forward_features(g, model, bp, g.leaf(Tensor(Shape{1, 3, 16, 16}))),
                        ShapeError);
    }
    SECTION("teacher logits reproducible across runs with the same seed") {
        Backbone again = build_backbone(spec, 7);
        ad::Graph ga, gb;
        BoundParams bpa = bind_params(ga, model.params, false);
        BoundParams bpb = bind_params(gb, again.params, false);
        Tensor la = ga.value(forward_features(ga, model, bpa, ga.leaf(batch)).logits);
        Tensor lb = gb.value(forward_features(gb, again, bpb, gb.leaf(batch)).logits);
        CHECK(la.data == lb.data);
    }
}

TEST_CASE("encoding head") {
    BackboneSpec spec;
    EncodingHeadSpec hs;  // 128 per stage, 340 out
    Backbone model = build_backbone(spec, 9);
    EncodingHead head = build_encoding_head(spec, hs, 9);

    SECTION("widths are pinned at construction") {
        CHECK(head.spec.per_stage_width == 128);
        CHECK(head.spec.concat_width() == 512);
        CHECK(head.params.find("enc_v1/w")->shape == Shape{16, 128});
        CHECK(head.params.find("enc_out/w")->shape == Shape{512, 340});
    }
    SECTION("output is N x 340 for the default config") {
        Rng rng(5);
        Tensor batch = random_tensor(rng, {3, 3, 32, 32}, 0.0, 1.0);
        ad::Graph g;
        BoundParams bp = bind_params(g, model.params, false);
        BoundParams hp = bind_params(g, head.params, false);
        for (const auto& [n, id] : hp.nodes) bp.nodes[n] = id;
        StageTaps taps = forward_features(g, model, bp, g.leaf(batch));
        int eeg = encoding_forward(g, head, bp, taps);
        CHECK(g.value(eeg).shape == Shape{3, 340});
    }
    SECTION("zero features with zero biases give a zero EEG vector") {
        ad::Graph g;
        BoundParams bp = bind_params(g, model.params, false);
        BoundParams hp = bind_params(g, head.params, false);
        for (const auto& [n, id] : hp.nodes) bp.nodes[n] = id;
        StageTaps taps = forward_features(g, model, bp, g.leaf(Tensor(Shape{2, 3, 32, 32})));
        int eeg = encoding_forward(g, head, bp, taps);
        for (double v : g.value(eeg).data) REQUIRE(v == 0.0);
    }
    SECTION("EEG gradient reaches the parameters of every stage") {
        Rng rng(6);
        Tensor batch = random_tensor(rng, {2, 3, 32, 32}, 0.0, 1.0);
        Tensor target = random_tensor(rng, {2, 340});
        ad::Graph g;
        BoundParams bp = bind_params(g, model.params, true);
        BoundParams hp = bind_params(g, head.params, true);
        for (const auto& [n, id] : hp.nodes) bp.nodes[n] = id;
        StageTaps taps = forward_features(g, model, bp, g.leaf(batch));
        int eeg = encoding_forward(g, head, bp, taps);
        g.backward(g.mse(eeg, g.leaf(target)));
        for (const char* name : {"v1/conv1/w", "v2/conv2/w", "v4/conv2/w", "it/conv2/w"}) {
            INFO(name);
            CHECK(grad_norm(g.grad(bp.at(name))) > 0.0);
        }
    }
    SECTION("missing stage tap rejected") {
        ad::Graph g;
        BoundParams hp = bind_params(g, head.params, false);
        StageTaps taps;  // all -1
        CHECK_THROWS_AS(encoding_forward(g, head, hp, taps), ShapeError);
    }
}

TEST_CASE("checkpoint round trip") {
    namespace fs = std::filesystem;
    BackboneSpec spec;
    spec.recurrence = {1, 2, 4, 2};
    Checkpoint ck{build_backbone(spec, 77), build_encoding_head(spec, {}, 77)};
    fs::path dir = fs::temp_directory_path() / "realign_ck_test";
    fs::create_directories(dir);
    const std::string prefix = (dir / "model").string();
    save_checkpoint(ck, prefix);
    Checkpoint loaded = load_checkpoint(prefix);
    CHECK(loaded.backbone.spec.stage_channels == spec.stage_channels);
    CHECK(loaded.backbone.spec.recurrence == spec.recurrence);
    CHECK(loaded.head.spec.eeg_dim == 340);
    REQUIRE(loaded.backbone.params.items.size() == ck.backbone.params.items.size());
    for (std::size_t k = 0; k < ck.backbone.params.items.size(); ++k)
        CHECK(loaded.backbone.params.items[k].second.data ==
              ck.backbone.params.items[k].second.data);
    for (std::size_t k = 0; k < ck.head.params.items.size(); ++k)
        CHECK(loaded.head.params.items[k].second.data == ck.head.params.items[k].second.data);
    fs::remove_all(dir);
}
