#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "realign/autodiff.hpp"
#include "realign/rng.hpp"
#include "realign/rtf.hpp"
#include "realign/tensor.hpp"

namespace realign {

/// Four-stage recurrent convolutional backbone ("MiniCor"). The stage motifs
/// follow the recurrent bottleneck pattern: a strided bottleneck block whose
/// weights are shared across within-stage iterations, so a stage's parameter
/// count is independent of how many times it recurs. The full-scale
/// reference uses a 7x7 stem at 224x224 input; this miniature uses 3x3
/// convolutions throughout, sized for 32x32 inputs.
struct BackboneSpec {
    std::size_t in_channels = 3;
    std::size_t in_h = 32;
    std::size_t in_w = 32;
    std::vector<std::size_t> stage_channels{16, 32, 64, 128};
    std::vector<std::size_t> recurrence{1, 2, 4, 2};
    std::size_t num_classes = 16;

    void validate() const {
        if (stage_channels.size() != 4 || recurrence.size() != 4)
            throw std::invalid_argument("backbone: exactly 4 visual stages required");
        for (std::size_t r : recurrence)
            if (r < 1) throw std::invalid_argument("backbone: recurrence counts must be >= 1");
        if (num_classes < 2) throw std::invalid_argument("backbone: need at least 2 classes");
        if (in_channels == 0 || in_h < 8 || in_w < 8)
            throw std::invalid_argument("backbone: input must be at least 8x8");
        for (std::size_t c : stage_channels)
            if (c < 4) throw std::invalid_argument("backbone: stage widths must be >= 4");
    }
};

inline const std::array<const char*, 4> kStageNames{"v1", "v2", "v4", "it"};

/// Ordered, named parameter tensors. Order is fixed at construction and is
/// the contract for optimizer state and checkpoints.
struct ParamSet {
    std::vector<std::pair<std::string, Tensor>> items;

    Tensor& add(const std::string& name, Tensor t) {
        items.emplace_back(name, std::move(t));
        return items.back().second;
    }

    Tensor* find(const std::string& name) {
        for (auto& [n, t] : items)
            if (n == name) return &t;
        return nullptr;
    }

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : items)
            if (n == name) return &t;
        return nullptr;
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : items) n += t.size();
        return n;
    }
};

namespace detail {

inline Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor t(shape);
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& v : t.data) v = rng.uniform(-limit, limit);
    return t;
}

inline void add_conv(ParamSet& ps, const std::string& name, std::size_t out_c, std::size_t in_c,
                     std::size_t k, Rng& rng) {
    ps.add(name + "/w", he_uniform(Shape{out_c, in_c, k, k}, in_c * k * k, rng));
    ps.add(name + "/b", Tensor(Shape{out_c}));
}

inline void add_dense(ParamSet& ps, const std::string& name, std::size_t in_w, std::size_t out_w,
                      Rng& rng) {
    ps.add(name + "/w", he_uniform(Shape{in_w, out_w}, in_w, rng));
    ps.add(name + "/b", Tensor(Shape{out_w}));
}

}  // namespace detail

struct Backbone {
    BackboneSpec spec;
    ParamSet params;

    static std::size_t bottleneck_width(std::size_t stage_channels) {
        return stage_channels / 2 < 4 ? 4 : stage_channels / 2;
    }
};

/// Seeded construction; the same seed always yields identical parameters.
inline Backbone build_backbone(const BackboneSpec& spec, std::uint64_t seed) {
    spec.validate();
    Backbone m;
    m.spec = spec;
    Rng rng(derive_seed(seed, 0xbacb0e));
    // V1: conv -> maxpool -> conv
    detail::add_conv(m.params, "v1/conv1", spec.stage_channels[0], spec.in_channels, 3, rng);
    detail::add_conv(m.params, "v1/conv2", spec.stage_channels[0], spec.stage_channels[0], 3, rng);
    // V2/V4/IT: recurrent bottleneck blocks, weights shared across iterations
    for (std::size_t s = 1; s < 4; ++s) {
        const std::string sn = kStageNames[s];
        const std::size_t cin = spec.stage_channels[s - 1];
        const std::size_t c = spec.stage_channels[s];
        const std::size_t b = Backbone::bottleneck_width(c);
        detail::add_conv(m.params, sn + "/conv_in", c, cin, 1, rng);
        detail::add_conv(m.params, sn + "/conv1", b, c, 1, rng);
        detail::add_conv(m.params, sn + "/conv2", b, b, 3, rng);
        detail::add_conv(m.params, sn + "/conv3", c, b, 1, rng);
        detail::add_conv(m.params, sn + "/skip", c, c, 1, rng);
    }
    detail::add_dense(m.params, "classifier", spec.stage_channels[3], spec.num_classes, rng);
    return m;
}

/// Multi-layer EEG encoding head: each stage's globally pooled features feed
/// a 128-wide nonlinear encoder; the four encoders concatenate to 512 and a
/// final linear layer maps to the EEG dimension.
struct EncodingHeadSpec {
    std::size_t per_stage_width = 128;
    std::size_t eeg_dim = 340;

    std::size_t concat_width() const { return 4 * per_stage_width; }
};

struct EncodingHead {
    EncodingHeadSpec spec;
    std::vector<std::size_t> stage_channels;
    ParamSet params;
};

inline EncodingHead build_encoding_head(const BackboneSpec& backbone_spec,
                                        const EncodingHeadSpec& spec, std::uint64_t seed) {
    backbone_spec.validate();
    if (spec.per_stage_width == 0 || spec.eeg_dim == 0)
        throw std::invalid_argument("encoding head: widths must be positive");
    EncodingHead h;
    h.spec = spec;
    h.stage_channels = backbone_spec.stage_channels;
    Rng rng(derive_seed(seed, 0xe9c0de));
    for (std::size_t s = 0; s < 4; ++s)
        detail::add_dense(h.params, std::string("enc_") + kStageNames[s],
                          backbone_spec.stage_channels[s], spec.per_stage_width, rng);
    detail::add_dense(h.params, "enc_out", spec.concat_width(), spec.eeg_dim, rng);
    return h;
}

/// Parameters placed on a graph as leaves; maps parameter names to node ids.
struct BoundParams {
    std::map<std::string, int> nodes;

    int at(const std::string& name) const {
        auto it = nodes.find(name);
        if (it == nodes.end()) throw ShapeError("model: unknown parameter \"" + name + "\"");
        return it->second;
    }
};

inline BoundParams bind_params(ad::Graph& g, const ParamSet& ps, bool trainable) {
    BoundParams bp;
    for (const auto& [name, t] : ps.items) bp.nodes[name] = g.leaf(t, trainable);
    return bp;
}

/// Graph node ids of the four stage outputs and the logits, all sharing one
/// forward pass so classification and generation losses backprop together.
struct StageTaps {
    std::array<int, 4> stages{-1, -1, -1, -1};
    int logits = -1;
};

namespace detail {

inline int conv_block(ad::Graph& g, const BoundParams& bp, const std::string& name, int x,
                      std::size_t stride, std::size_t pad) {
    return g.conv2d(x, bp.at(name + "/w"), bp.at(name + "/b"), stride, pad);
}

/// One recurrent bottleneck stage. The first iteration halves the spatial
/// extent (strided 3x3 and a strided 1x1 skip); later iterations keep the
/// extent and use an identity skip. Weights are identical across iterations.
inline int recurrent_stage(ad::Graph& g, const BoundParams& bp, const std::string& sn, int x,
                           std::size_t times) {
    int state = g.relu(conv_block(g, bp, sn + "/conv_in", x, 1, 0));
    for (std::size_t t = 0; t < times; ++t) {
        const std::size_t stride = (t == 0) ? 2 : 1;
        int skip = (t == 0) ? conv_block(g, bp, sn + "/skip", state, 2, 0) : state;
        int h = g.relu(conv_block(g, bp, sn + "/conv1", state, 1, 0));
        h = g.relu(conv_block(g, bp, sn + "/conv2", h, stride, 1));
        h = conv_block(g, bp, sn + "/conv3", h, 1, 0);
        state = g.relu(g.add(h, skip));
    }
    return state;
}

}  // namespace detail

inline StageTaps forward_features(ad::Graph& g, const Backbone& m, const BoundParams& bp,
                                  int image_batch) {
    const Tensor& x = g.value(image_batch);
    if (x.rank() != 4 || x.shape[1] != m.spec.in_channels || x.shape[2] != m.spec.in_h ||
        x.shape[3] != m.spec.in_w)
        throw ShapeError("forward_features: batch shape " + shape_str(x.shape) +
                         " does not match backbone input " +
                         shape_str({0, m.spec.in_channels, m.spec.in_h, m.spec.in_w}));
    StageTaps taps;
    int h = g.relu(detail::conv_block(g, bp, "v1/conv1", image_batch, 1, 1));
    h = g.maxpool2d(h, 2, 2);
    h = g.relu(detail::conv_block(g, bp, "v1/conv2", h, 1, 1));
    taps.stages[0] = h;
    for (std::size_t s = 1; s < 4; ++s) {
        h = detail::recurrent_stage(g, bp, kStageNames[s], h, m.spec.recurrence[s]);
        taps.stages[s] = h;
    }
    int pooled = g.global_avg_pool(taps.stages[3]);
    taps.logits = g.dense(pooled, bp.at("classifier/w"), bp.at("classifier/b"));
    return taps;
}

/// Stage features -> predicted EEG batch (N x eeg_dim). Stages are pooled,
/// encoded to 128 each, concatenated in V1,V2,V4,IT order, then linearly
/// mapped to the EEG dimension.
inline int encoding_forward(ad::Graph& g, const EncodingHead& head, const BoundParams& bp,
                            const StageTaps& taps) {
    std::vector<int> encoded;
    for (std::size_t s = 0; s < 4; ++s) {
        if (taps.stages[s] < 0) throw ShapeError("encoding_forward: missing stage tap");
        int pooled = g.global_avg_pool(taps.stages[s]);
        int e = g.relu(g.dense(pooled, bp.at(std::string("enc_") + kStageNames[s] + "/w"),
                               bp.at(std::string("enc_") + kStageNames[s] + "/b")));
        if (g.value(e).extent(1) != head.spec.per_stage_width)
            throw ShapeError("encoding_forward: stage encoder width mismatch");
        encoded.push_back(e);
    }
    int cat = g.concat(encoded);
    if (g.value(cat).extent(1) != head.spec.concat_width())
        throw ShapeError("encoding_forward: concatenated width mismatch");
    return g.dense(cat, bp.at("enc_out/w"), bp.at("enc_out/b"));
}

/// Plain forward pass outside any training loop.
struct FeatureMaps {
    std::array<Tensor, 4> stages;
    Tensor logits;
};

inline FeatureMaps eval_features(const Backbone& m, const Tensor& images) {
    ad::Graph g;
    BoundParams bp = bind_params(g, m.params, false);
    StageTaps taps = forward_features(g, m, bp, g.leaf(images, false));
    FeatureMaps out;
    for (std::size_t s = 0; s < 4; ++s) out.stages[s] = g.value(taps.stages[s]);
    out.logits = g.value(taps.logits);
    return out;
}

/// Predicted EEG batch for an image set, no gradients.
inline Tensor eval_generated_eeg(const Backbone& m, const EncodingHead& head,
                                 const Tensor& images) {
    ad::Graph g;
    BoundParams bp = bind_params(g, m.params, false);
    BoundParams hp = bind_params(g, head.params, false);
    for (const auto& [name, id] : hp.nodes) bp.nodes[name] = id;
    StageTaps taps = forward_features(g, m, bp, g.leaf(images, false));
    return g.value(encoding_forward(g, head, bp, taps));
}

// ---- checkpoints ----

struct Checkpoint {
    Backbone backbone;
    EncodingHead head;
};

namespace detail {

inline std::string join_sizes(const std::vector<std::size_t>& v, char sep) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) os << sep;
        os << v[i];
    }
    return os.str();
}

inline std::vector<std::size_t> parse_sizes(const std::string& s, char sep) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep))
        if (!item.empty()) out.push_back(static_cast<std::size_t>(std::stoull(item)));
    return out;
}

inline std::string stage_of(const std::string& param_name) {
    auto slash = param_name.find('/');
    std::string head = param_name.substr(0, slash);
    if (head == "enc_out") return "head";
    if (head.rfind("enc_", 0) == 0) return head.substr(4);
    if (head == "classifier") return "output";
    return head;
}

}  // namespace detail

/// Checkpoint = one RTF tensor file plus a text manifest describing the
/// architecture and every parameter (name, shape, stage).
inline void save_checkpoint(const Checkpoint& ck, const std::string& path_prefix) {
    std::vector<rtf::NamedTensor> tensors;
    for (const auto& [name, t] : ck.backbone.params.items)
        tensors.push_back({"backbone/" + name, t});
    for (const auto& [name, t] : ck.head.params.items) tensors.push_back({"head/" + name, t});
    rtf::write(path_prefix + ".rtf", tensors);

    std::ofstream mf(path_prefix + ".manifest.txt", std::ios::trunc);
    if (!mf) throw DataError("checkpoint: cannot write manifest for " + path_prefix);
    const BackboneSpec& sp = ck.backbone.spec;
    mf << "format=realign-checkpoint\n";
    mf << "input=" << sp.in_channels << "x" << sp.in_h << "x" << sp.in_w << "\n";
    mf << "stage_channels=" << detail::join_sizes(sp.stage_channels, ',') << "\n";
    mf << "recurrence=" << detail::join_sizes(sp.recurrence, ',') << "\n";
    mf << "classes=" << sp.num_classes << "\n";
    mf << "encoder_width=" << ck.head.spec.per_stage_width << "\n";
    mf << "eeg_dim=" << ck.head.spec.eeg_dim << "\n";
    for (const auto& [name, t] : ck.backbone.params.items)
        mf << "param=backbone/" << name << " shape=" << detail::join_sizes(t.shape, 'x')
           << " stage=" << detail::stage_of(name) << "\n";
    for (const auto& [name, t] : ck.head.params.items)
        mf << "param=head/" << name << " shape=" << detail::join_sizes(t.shape, 'x')
           << " stage=" << detail::stage_of(name) << "\n";
}

inline Checkpoint load_checkpoint(const std::string& path_prefix) {
    std::ifstream mf(path_prefix + ".manifest.txt");
    if (!mf) throw DataError("checkpoint: missing manifest " + path_prefix + ".manifest.txt");
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(mf, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos || line.rfind("param=", 0) == 0) continue;
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    if (kv["format"] != "realign-checkpoint")
        throw DataError("checkpoint: bad manifest format tag in " + path_prefix);
    BackboneSpec sp;
    auto in = detail::parse_sizes(kv.at("input"), 'x');
    if (in.size() != 3) throw DataError("checkpoint: bad input spec");
    sp.in_channels = in[0];
    sp.in_h = in[1];
    sp.in_w = in[2];
    sp.stage_channels = detail::parse_sizes(kv.at("stage_channels"), ',');
    sp.recurrence = detail::parse_sizes(kv.at("recurrence"), ',');
    sp.num_classes = static_cast<std::size_t>(std::stoull(kv.at("classes")));
    EncodingHeadSpec hs;
    hs.per_stage_width = static_cast<std::size_t>(std::stoull(kv.at("encoder_width")));
    hs.eeg_dim = static_cast<std::size_t>(std::stoull(kv.at("eeg_dim")));

    Checkpoint ck{build_backbone(sp, 0), build_encoding_head(sp, hs, 0)};
    auto tensors = rtf::read(path_prefix + ".rtf");
    auto fill = [&](ParamSet& ps, const std::string& prefix) {
        for (auto& [name, t] : ps.items) {
            const Tensor& loaded = rtf::find(tensors, prefix + name);
            if (loaded.shape != t.shape)
                throw DataError("checkpoint: tensor \"" + prefix + name + "\" has shape " +
                                shape_str(loaded.shape) + ", expected " + shape_str(t.shape));
            t = loaded;
        }
    };
    fill(ck.backbone.params, "backbone/");
    fill(ck.head.params, "head/");
    return ck;
}

}  // namespace realign
