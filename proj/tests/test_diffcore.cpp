#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "realign/adam.hpp"
#include "realign/autodiff.hpp"
#include "test_util.hpp"

using namespace realign;
using test_util::central_difference;
using test_util::random_tensor;
using test_util::random_tensor_off_zero;
using test_util::rel_err;

namespace {

// Independent nested-loop convolution, the forward oracle for conv2d.
Tensor conv2d_oracle(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                     std::size_t pad) {
    const std::size_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const std::size_t O = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
    Tensor out(Shape{N, O, Ho, Wo});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t oh = 0; oh < Ho; ++oh)
                for (std::size_t ow = 0; ow < Wo; ++ow) {
                    double acc = b[o];
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t i = 0; i < kh; ++i)
                            for (std::size_t j = 0; j < kw; ++j) {
                                const long ih = static_cast<long>(oh * stride + i) -
                                                static_cast<long>(pad);
                                const long iw = static_cast<long>(ow * stride + j) -
                                                static_cast<long>(pad);
                                if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) ||
                                    iw >= static_cast<long>(W))
                                    continue;
                                acc += x[idx4(n, c, ih, iw, C, H, W)] *
                                       w[idx4(o, c, i, j, C, kh, kw)];
                            }
                    out[idx4(n, o, oh, ow, O, Ho, Wo)] = acc;
                }
    return out;
}

struct OpCase {
    const char* name;
    std::vector<Tensor> inputs;
    std::function<int(ad::Graph&, const std::vector<int>&)> build;
};

// Analytic gradients vs central finite differences for every input element.
void check_gradients(const OpCase& c, double tol = 1e-4, double h = 1e-5) {
    auto eval = [&](const std::vector<Tensor>& inputs) {
        ad::Graph g;
        std::vector<int> ids;
        for (const Tensor& t : inputs) ids.push_back(g.leaf(t, false));
        int out = c.build(g, ids);
        int loss = g.value(out).is_scalar() ? out : g.mean(out);
        return g.value(loss)[0];
    };
    ad::Graph g;
    std::vector<int> ids;
    for (const Tensor& t : c.inputs) ids.push_back(g.leaf(t, true));
    int out = c.build(g, ids);
    int loss = g.value(out).is_scalar() ? out : g.mean(out);
    g.backward(loss);
    for (std::size_t k = 0; k < c.inputs.size(); ++k) {
        const Tensor& analytic = g.grad(ids[k]);
        REQUIRE(analytic.shape == c.inputs[k].shape);
        for (std::size_t i = 0; i < c.inputs[k].size(); ++i) {
            const double fd = central_difference(eval, c.inputs, k, i, h);
            INFO(c.name << " input " << k << " index " << i << " analytic " << analytic[i]
                        << " fd " << fd);
            REQUIRE(rel_err(analytic[i], fd) < tol);
        }
    }
}

std::vector<OpCase> make_op_cases(std::uint64_t seed) {
    Rng rng(seed);
    std::vector<OpCase> cases;
    cases.push_back({"add", {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})},
                     [](ad::Graph& g, const std::vector<int>& in) { return g.add(in[0], in[1]); }});
    cases.push_back({"sub", {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})},
                     [](ad::Graph& g, const std::vector<int>& in) { return g.sub(in[0], in[1]); }});
    cases.push_back({"mul", {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})},
                     [](ad::Graph& g, const std::vector<int>& in) { return g.mul(in[0], in[1]); }});
    cases.push_back({"scale", {random_tensor(rng, {4})},
                     [](ad::Graph& g, const std::vector<int>& in) { return g.scale(in[0], -2.5); }});
    cases.push_back(
        {"add_const", {random_tensor(rng, {4})},
         [](ad::Graph& g, const std::vector<int>& in) { return g.add_const(in[0], 1.75); }});
    cases.push_back({"relu", {random_tensor_off_zero(rng, {3, 4})},
                     [](ad::Graph& g, const std::vector<int>& in) { return g.relu(in[0]); }});
    cases.push_back({"sum", {random_tensor(rng, {5})},
                     [](ad::Graph& g, const std::vector<int>& in) { return g.sum(in[0]); }});
    cases.push_back({"mean", {random_tensor(rng, {2, 4})},
                     [](ad::Graph& g, const std::vector<int>& in) { return g.mean(in[0]); }});
    cases.push_back({"reshape", {random_tensor(rng, {2, 6})},
                     [](ad::Graph& g, const std::vector<int>& in) {
                         return g.reshape(in[0], Shape{3, 4});
                     }});
    cases.push_back({"concat",
                     {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 2}),
                      random_tensor(rng, {2, 4})},
                     [](ad::Graph& g, const std::vector<int>& in) {
                         return g.concat({in[0], in[1], in[2]});
                     }});
    cases.push_back({"row", {random_tensor(rng, {3, 5})},
                     [](ad::Graph& g, const std::vector<int>& in) { return g.row(in[0], 1); }});
    cases.push_back({"dense",
                     {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 2}),
                      random_tensor(rng, {2})},
                     [](ad::Graph& g, const std::vector<int>& in) {
                         return g.dense(in[0], in[1], in[2]);
                     }});
    cases.push_back({"conv2d_s1p1",
                     {random_tensor(rng, {2, 2, 5, 5}), random_tensor(rng, {3, 2, 3, 3}),
                      random_tensor(rng, {3})},
                     [](ad::Graph& g, const std::vector<int>& in) {
                         return g.conv2d(in[0], in[1], in[2], 1, 1);
                     }});
    cases.push_back({"conv2d_s2p0",
                     {random_tensor(rng, {1, 3, 6, 6}), random_tensor(rng, {2, 3, 3, 3}),
                      random_tensor(rng, {2})},
                     [](ad::Graph& g, const std::vector<int>& in) {
                         return g.conv2d(in[0], in[1], in[2], 2, 0);
                     }});
    cases.push_back({"conv2d_1x1s2",
                     {random_tensor(rng, {2, 3, 4, 4}), random_tensor(rng, {4, 3, 1, 1}),
                      random_tensor(rng, {4})},
                     [](ad::Graph& g, const std::vector<int>& in) {
                         return g.conv2d(in[0], in[1], in[2], 2, 0);
                     }});
    cases.push_back({"maxpool2d", {random_tensor_off_zero(rng, {2, 2, 4, 4})},
                     [](ad::Graph& g, const std::vector<int>& in) {
                         return g.maxpool2d(in[0], 2, 2);
                     }});
    cases.push_back({"global_avg_pool", {random_tensor(rng, {2, 3, 4, 4})},
                     [](ad::Graph& g, const std::vector<int>& in) {
                         return g.global_avg_pool(in[0]);
                     }});
    cases.push_back({"softmax_cross_entropy", {random_tensor(rng, {3, 5})},
                     [](ad::Graph& g, const std::vector<int>& in) {
                         return g.softmax_cross_entropy(in[0], {0, 3, 2});
                     }});
    cases.push_back({"mse", {random_tensor(rng, {2, 4}), random_tensor(rng, {2, 4})},
                     [](ad::Graph& g, const std::vector<int>& in) { return g.mse(in[0], in[1]); }});
    cases.push_back({"pearson", {random_tensor(rng, {20}), random_tensor(rng, {20})},
                     [](ad::Graph& g, const std::vector<int>& in) {
                         return g.pearson(in[0], in[1]);
                     }});
    // composite: mixes several ops into one graph
    cases.push_back({"composite",
                     {random_tensor_off_zero(rng, {2, 6}), random_tensor(rng, {6, 3}),
                      random_tensor(rng, {3})},
                     [](ad::Graph& g, const std::vector<int>& in) {
                         int h = g.relu(g.dense(in[0], in[1], in[2]));
                         int s = g.scale(g.mul(h, h), 0.5);
                         return g.mean(s);
                     }});
    return cases;
}

}  // namespace

TEST_CASE("forward: trivial identities") {
    ad::Graph g;
    SECTION("relu") {
        int x = g.leaf(Tensor::from({3}, {-1.0, 0.0, 2.0}));
        int y = g.relu(x);
        CHECK(g.value(y).data == std::vector<double>{0.0, 0.0, 2.0});
    }
    SECTION("conv2d with identity 1x1 kernel") {
        Rng rng(7);
        Tensor x = random_tensor(rng, {1, 1, 4, 4});
        int xn = g.leaf(x);
        int w = g.leaf(Tensor::from({1, 1, 1, 1}, {1.0}));
        int b = g.leaf(Tensor(Shape{1}));
        int y = g.conv2d(xn, w, b, 1, 0);
        CHECK(test_util::max_abs_diff(g.value(y), x) == 0.0);
    }
    SECTION("maxpool tie routes to first element") {
        Tensor x(Shape{1, 1, 2, 2}, 3.0);
        int xn = g.leaf(x, true);
        int y = g.maxpool2d(xn, 2, 2);
        CHECK(g.value(y)[0] == 3.0);
        g.backward(g.sum(y));
        CHECK(g.grad(xn).data == std::vector<double>{1.0, 0.0, 0.0, 0.0});
    }
}

TEST_CASE("conv2d matches the nested-loop oracle") {
    Rng rng(11);
    for (int rep = 0; rep < 5; ++rep) {
        Tensor x = random_tensor(rng, {1, 1, 4, 4});
        Tensor w = random_tensor(rng, {1, 1, 3, 3});
        Tensor b = random_tensor(rng, {1});
        ad::Graph g;
        int y = g.conv2d(g.leaf(x), g.leaf(w), g.leaf(b), 1, 1);
        Tensor expect = conv2d_oracle(x, w, b, 1, 1);
        REQUIRE(g.value(y).shape == expect.shape);
        CHECK(test_util::max_abs_diff(g.value(y), expect) < 1e-12);
    }
    // strided + padded + multi-channel
    Tensor x = random_tensor(rng, {2, 3, 7, 6});
    Tensor w = random_tensor(rng, {4, 3, 3, 3});
    Tensor b = random_tensor(rng, {4});
    ad::Graph g;
    int y = g.conv2d(g.leaf(x), g.leaf(w), g.leaf(b), 2, 1);
    Tensor expect = conv2d_oracle(x, w, b, 2, 1);
    REQUIRE(g.value(y).shape == expect.shape);
    CHECK(test_util::max_abs_diff(g.value(y), expect) < 1e-12);
}

TEST_CASE("backward: trivial gradients") {
    SECTION("sum gradient is ones") {
        ad::Graph g;
        int x = g.leaf(Tensor::from({3}, {5.0, -1.0, 2.0}), true);
        g.backward(g.sum(x));
        CHECK(g.grad(x).data == std::vector<double>{1.0, 1.0, 1.0});
    }
    SECTION("mse against zero: d mean((x-0)^2) / dx = 2x") {
        ad::Graph g;
        int x = g.leaf(Tensor::from({1}, {2.0}), true);
        int zero = g.leaf(Tensor(Shape{1}));
        g.backward(g.mse(x, zero));
        CHECK(g.grad(x)[0] == Catch::Approx(4.0));
    }
    SECTION("non-scalar loss rejected") {
        ad::Graph g;
        int x = g.leaf(Tensor(Shape{2}, 1.0), true);
        CHECK_THROWS_AS(g.backward(x), ShapeError);
    }
    SECTION("repeated backward gives identical gradients") {
        Rng rng(3);
        ad::Graph g;
        int x = g.leaf(random_tensor(rng, {4}), true);
        int loss = g.mean(g.mul(x, x));
        g.backward(loss);
        Tensor first = g.grad(x);
        g.backward(loss);
        CHECK(test_util::max_abs_diff(first, g.grad(x)) == 0.0);
    }
}

TEST_CASE("gradient check: every op kind over 20 seeds") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed)
        for (const OpCase& c : make_op_cases(seed)) check_gradients(c);
}

TEST_CASE("shape errors name the op and offending dims") {
    ad::Graph g;
    int a = g.leaf(Tensor(Shape{2, 3}));
    int b = g.leaf(Tensor(Shape{3, 2}));
    CHECK_THROWS_WITH(g.add(a, b), Catch::Matchers::ContainsSubstring("add") &&
                                       Catch::Matchers::ContainsSubstring("(2,3)"));
    int w = g.leaf(Tensor(Shape{4, 2}));
    int bias = g.leaf(Tensor(Shape{2}));
    CHECK_THROWS_AS(g.dense(a, w, bias), ShapeError);
    int x4 = g.leaf(Tensor(Shape{1, 2, 4, 4}));
    int k4 = g.leaf(Tensor(Shape{3, 3, 3, 3}));
    int b4 = g.leaf(Tensor(Shape{3}));
    CHECK_THROWS_WITH(g.conv2d(x4, k4, b4, 1, 1),
                      Catch::Matchers::ContainsSubstring("conv2d"));
    CHECK_THROWS_AS(g.concat({a, g.leaf(Tensor(Shape{3, 3}))}), ShapeError);
    CHECK_THROWS_AS(g.reshape(a, Shape{5}), ShapeError);
    CHECK_THROWS_AS(g.pearson(g.leaf(Tensor(Shape{3})), g.leaf(Tensor(Shape{4}))), ShapeError);
}

TEST_CASE("determinism: identical seeds give bit-identical values and gradients") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Tensor x = random_tensor(rng, {2, 3, 6, 6});
        Tensor w = random_tensor(rng, {2, 3, 3, 3});
        Tensor b = random_tensor(rng, {2});
        ad::Graph g;
        int xn = g.leaf(x, true);
        int loss = g.mean(g.relu(g.conv2d(xn, g.leaf(w, true), g.leaf(b, true), 1, 1)));
        g.backward(loss);
        return std::pair<Tensor, Tensor>(g.value(loss), g.grad(xn));
    };
    auto [v1, g1] = run(99);
    auto [v2, g2] = run(99);
    CHECK(v1.data == v2.data);
    CHECK(g1.data == g2.data);
}

TEST_CASE("adam") {
    SECTION("zero gradient leaves parameters unchanged") {
        Tensor p = Tensor::from({3}, {1.0, -2.0, 0.5});
        Tensor g(Shape{3});
        Adam opt(0.1);
        Tensor before = p;
        opt.step({&p}, {&g});
        CHECK(p.data == before.data);
    }
    SECTION("single step matches the hand-evaluated recurrence") {
        // p=1, grad=1, lr=0.1: m=0.1, v=0.001, mhat=1, vhat=1,
        // p <- 1 - 0.1 * 1/(1 + 1e-8)
        Tensor p = Tensor::from({1}, {1.0});
        Tensor g = Tensor::from({1}, {1.0});
        Adam opt(0.1);
        opt.step({&p}, {&g});
        const double expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        CHECK(p[0] == Catch::Approx(expect).epsilon(1e-12));
        CHECK(p[0] == Catch::Approx(0.9).margin(1e-8));
    }
    SECTION("matches a scalar reference for several steps") {
        // independent scalar recurrence as oracle
        double m = 0.0, v = 0.0, ref = 0.2;
        const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
        Tensor p = Tensor::from({1}, {0.2});
        Adam opt(lr);
        for (int t = 1; t <= 25; ++t) {
            const double grad = 2.0 * (ref - 3.0);
            m = b1 * m + (1 - b1) * grad;
            v = b2 * v + (1 - b2) * grad * grad;
            ref -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
            Tensor g = Tensor::from({1}, {2.0 * (p[0] - 3.0)});
            opt.step({&p}, {&g});
            REQUIRE(p[0] == Catch::Approx(ref).epsilon(1e-12));
        }
    }
    SECTION("100 steps converge on (p-3)^2 with lr=0.1") {
        Tensor p = Tensor::from({1}, {0.0});
        Adam opt(0.1);
        for (int t = 0; t < 100; ++t) {
            Tensor g = Tensor::from({1}, {2.0 * (p[0] - 3.0)});
            opt.step({&p}, {&g});
        }
        CHECK(std::fabs(p[0] - 3.0) < 0.1);
    }
    SECTION("nonpositive learning rate rejected") {
        CHECK_THROWS_AS(Adam(0.0), std::invalid_argument);
        CHECK_THROWS_AS(Adam(-1.0), std::invalid_argument);
    }
}
