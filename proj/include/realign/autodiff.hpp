#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "realign/tensor.hpp"

namespace realign::ad {

/// Tape-style reverse-mode differentiation graph.
///
/// Nodes are appended in execution order, so node ids form a topological
/// order by construction. Each op stores a backward closure that reads the
/// incoming gradient and accumulates into its inputs' gradients. Graphs are
/// single-use per training step and must not be shared across threads.
class Graph {
public:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated by backward() for reachable nodes
        std::vector<int> inputs;
        std::function<void(Graph&, int)> backward;
        const char* op = "leaf";
        bool requires_grad = false;
    };

    int leaf(Tensor value, bool requires_grad = false) {
        nodes_.push_back(Node{std::move(value), Tensor{}, {}, nullptr, "leaf", requires_grad});
        return static_cast<int>(nodes_.size()) - 1;
    }

    const Tensor& value(int id) const { return nodes_[check(id)].value; }
    const Tensor& grad(int id) const { return nodes_[check(id)].grad; }
    const char* op_kind(int id) const { return nodes_[check(id)].op; }
    std::size_t size() const { return nodes_.size(); }

    // ---- elementwise and arithmetic ----

    int add(int a, int b) {
        require_same_shape(value(a), value(b), "add");
        Tensor out = value(a);
        const Tensor& vb = value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
        return push(std::move(out), {a, b}, "add", [](Graph& g, int self) {
            const Tensor& go = g.nodes_[self].grad;
            g.accumulate(g.nodes_[self].inputs[0], go, 1.0);
            g.accumulate(g.nodes_[self].inputs[1], go, 1.0);
        });
    }

    int sub(int a, int b) {
        require_same_shape(value(a), value(b), "sub");
        Tensor out = value(a);
        const Tensor& vb = value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
        return push(std::move(out), {a, b}, "sub", [](Graph& g, int self) {
            const Tensor& go = g.nodes_[self].grad;
            g.accumulate(g.nodes_[self].inputs[0], go, 1.0);
            g.accumulate(g.nodes_[self].inputs[1], go, -1.0);
        });
    }

    int mul(int a, int b) {
        require_same_shape(value(a), value(b), "mul");
        Tensor out = value(a);
        const Tensor& vb = value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
        return push(std::move(out), {a, b}, "mul", [](Graph& g, int self) {
            const std::vector<int>& in = g.nodes_[self].inputs;
            const Tensor& go = g.nodes_[self].grad;
            const Tensor& va = g.value(in[0]);
            const Tensor& vb2 = g.value(in[1]);
            if (Tensor* ga = g.grad_slot(in[0]))
                for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * vb2[i];
            if (Tensor* gb = g.grad_slot(in[1]))
                for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i] += go[i] * va[i];
        });
    }

    int scale(int a, double c) {
        Tensor out = value(a);
        for (double& v : out.data) v *= c;
        return push(std::move(out), {a}, "scale", [c](Graph& g, int self) {
            g.accumulate(g.nodes_[self].inputs[0], g.nodes_[self].grad, c);
        });
    }

    int add_const(int a, double c) {
        Tensor out = value(a);
        for (double& v : out.data) v += c;
        return push(std::move(out), {a}, "add_const", [](Graph& g, int self) {
            g.accumulate(g.nodes_[self].inputs[0], g.nodes_[self].grad, 1.0);
        });
    }

    int relu(int a) {
        Tensor out = value(a);
        for (double& v : out.data) v = v > 0.0 ? v : 0.0;
        return push(std::move(out), {a}, "relu", [](Graph& g, int self) {
            int in = g.nodes_[self].inputs[0];
            const Tensor& go = g.nodes_[self].grad;
            const Tensor& x = g.value(in);
            if (Tensor* gx = g.grad_slot(in))
                for (std::size_t i = 0; i < go.size(); ++i)
                    if (x[i] > 0.0) (*gx)[i] += go[i];
        });
    }

    // ---- reductions and shape ----

    int sum(int a) {
        double s = 0.0;
        for (double v : value(a).data) s += v;
        return push(Tensor::scalar(s), {a}, "sum", [](Graph& g, int self) {
            int in = g.nodes_[self].inputs[0];
            double go = g.nodes_[self].grad[0];
            if (Tensor* gx = g.grad_slot(in))
                for (double& v : gx->data) v += go;
        });
    }

    int mean(int a) {
        const Tensor& x = value(a);
        if (x.size() == 0) throw ShapeError("mean: empty tensor");
        double s = 0.0;
        for (double v : x.data) s += v;
        double inv = 1.0 / static_cast<double>(x.size());
        return push(Tensor::scalar(s * inv), {a}, "mean", [inv](Graph& g, int self) {
            int in = g.nodes_[self].inputs[0];
            double go = g.nodes_[self].grad[0] * inv;
            if (Tensor* gx = g.grad_slot(in))
                for (double& v : gx->data) v += go;
        });
    }

    int reshape(int a, Shape s) {
        const Tensor& x = value(a);
        if (numel(s) != x.size())
            throw ShapeError("reshape: cannot view " + shape_str(x.shape) + " as " +
                             shape_str(s) + " (element counts differ)");
        Tensor out;
        out.shape = std::move(s);
        out.data = x.data;
        return push(std::move(out), {a}, "reshape", [](Graph& g, int self) {
            int in = g.nodes_[self].inputs[0];
            const Tensor& go = g.nodes_[self].grad;
            if (Tensor* gx = g.grad_slot(in))
                for (std::size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i];
        });
    }

    /// Concatenate 2-D tensors with equal row counts along axis 1.
    int concat(const std::vector<int>& xs) {
        if (xs.empty()) throw ShapeError("concat: no inputs");
        std::size_t rows = value(xs[0]).extent(0);
        std::size_t total_cols = 0;
        std::vector<std::size_t> cols(xs.size());
        for (std::size_t k = 0; k < xs.size(); ++k) {
            const Tensor& t = value(xs[k]);
            if (t.rank() != 2)
                throw ShapeError("concat: input " + std::to_string(k) + " has shape " +
                                 shape_str(t.shape) + ", want rank 2");
            if (t.extent(0) != rows)
                throw ShapeError("concat: row count mismatch " + std::to_string(t.extent(0)) +
                                 " vs " + std::to_string(rows));
            cols[k] = t.extent(1);
            total_cols += cols[k];
        }
        Tensor out(Shape{rows, total_cols});
        std::size_t col0 = 0;
        for (std::size_t k = 0; k < xs.size(); ++k) {
            const Tensor& t = value(xs[k]);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols[k]; ++c)
                    out[idx2(r, col0 + c, total_cols)] = t[idx2(r, c, cols[k])];
            col0 += cols[k];
        }
        return push(std::move(out), xs, "concat", [cols, rows, total_cols](Graph& g, int self) {
            const Tensor& go = g.nodes_[self].grad;
            std::size_t col0 = 0;
            for (std::size_t k = 0; k < g.nodes_[self].inputs.size(); ++k) {
                if (Tensor* gx = g.grad_slot(g.nodes_[self].inputs[k])) {
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols[k]; ++c)
                            (*gx)[idx2(r, c, cols[k])] += go[idx2(r, col0 + c, total_cols)];
                }
                col0 += cols[k];
            }
        });
    }

    /// Row i of a 2-D tensor as a 1-D vector.
    int row(int a, std::size_t i) {
        const Tensor& x = value(a);
        if (x.rank() != 2)
            throw ShapeError("row: input has shape " + shape_str(x.shape) + ", want rank 2");
        if (i >= x.extent(0)) throw ShapeError("row: index out of range");
        std::size_t cols = x.extent(1);
        Tensor out(Shape{cols});
        for (std::size_t c = 0; c < cols; ++c) out[c] = x[idx2(i, c, cols)];
        return push(std::move(out), {a}, "row", [i, cols](Graph& g, int self) {
            int in = g.nodes_[self].inputs[0];
            const Tensor& go = g.nodes_[self].grad;
            if (Tensor* gx = g.grad_slot(in))
                for (std::size_t c = 0; c < cols; ++c) (*gx)[idx2(i, c, cols)] += go[c];
        });
    }

    // ---- neural network ops ----

    /// Affine map: x (N x I) * w (I x O) + b (O).
    int dense(int x, int w, int b) {
        const Tensor& vx = value(x);
        const Tensor& vw = value(w);
        const Tensor& vb = value(b);
        if (vx.rank() != 2 || vw.rank() != 2 || vb.rank() != 1)
            throw ShapeError("dense: want x rank 2, w rank 2, b rank 1; got " +
                             shape_str(vx.shape) + ", " + shape_str(vw.shape) + ", " +
                             shape_str(vb.shape));
        std::size_t N = vx.extent(0), I = vx.extent(1);
        std::size_t O = vw.extent(1);
        if (vw.extent(0) != I || vb.extent(0) != O)
            throw ShapeError("dense: x " + shape_str(vx.shape) + " incompatible with w " +
                             shape_str(vw.shape) + ", b " + shape_str(vb.shape));
        Tensor out(Shape{N, O});
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < I; ++i) {
                double xv = vx[idx2(n, i, I)];
                if (xv == 0.0) continue;
                for (std::size_t o = 0; o < O; ++o)
                    out[idx2(n, o, O)] += xv * vw[idx2(i, o, O)];
            }
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < O; ++o) out[idx2(n, o, O)] += vb[o];
        return push(std::move(out), {x, w, b}, "dense", [N, I, O](Graph& g, int self) {
            const std::vector<int>& in = g.nodes_[self].inputs;
            const Tensor& go = g.nodes_[self].grad;
            const Tensor& vx2 = g.value(in[0]);
            const Tensor& vw2 = g.value(in[1]);
            if (Tensor* gx = g.grad_slot(in[0]))
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t o = 0; o < O; ++o) {
                        double gv = go[idx2(n, o, O)];
                        if (gv == 0.0) continue;
                        for (std::size_t i = 0; i < I; ++i)
                            (*gx)[idx2(n, i, I)] += gv * vw2[idx2(i, o, O)];
                    }
            if (Tensor* gw = g.grad_slot(in[1]))
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < I; ++i) {
                        double xv = vx2[idx2(n, i, I)];
                        if (xv == 0.0) continue;
                        for (std::size_t o = 0; o < O; ++o)
                            (*gw)[idx2(i, o, O)] += xv * go[idx2(n, o, O)];
                    }
            if (Tensor* gb = g.grad_slot(in[2]))
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t o = 0; o < O; ++o) (*gb)[o] += go[idx2(n, o, O)];
        });
    }

    /// 2-D convolution: x (N x C x H x W), w (O x C x kh x kw), b (O).
    int conv2d(int x, int w, int b, std::size_t stride, std::size_t pad) {
        const Tensor& vx = value(x);
        const Tensor& vw = value(w);
        const Tensor& vb = value(b);
        if (vx.rank() != 4 || vw.rank() != 4 || vb.rank() != 1)
            throw ShapeError("conv2d: want x rank 4, w rank 4, b rank 1; got " +
                             shape_str(vx.shape) + ", " + shape_str(vw.shape) + ", " +
                             shape_str(vb.shape));
        if (stride == 0) throw ShapeError("conv2d: stride must be positive");
        const std::size_t N = vx.shape[0], C = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
        const std::size_t O = vw.shape[0], kh = vw.shape[2], kw = vw.shape[3];
        if (vw.shape[1] != C)
            throw ShapeError("conv2d: input channels " + std::to_string(C) +
                             " vs kernel channels " + std::to_string(vw.shape[1]));
        if (vb.extent(0) != O)
            throw ShapeError("conv2d: bias extent " + std::to_string(vb.extent(0)) +
                             " vs output channels " + std::to_string(O));
        if (H + 2 * pad < kh || W + 2 * pad < kw)
            throw ShapeError("conv2d: kernel " + shape_str(vw.shape) +
                             " larger than padded input " + shape_str(vx.shape));
        const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
        const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
        Tensor out(Shape{N, O, Ho, Wo});
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < O; ++o)
                for (std::size_t oh = 0; oh < Ho; ++oh)
                    for (std::size_t ow = 0; ow < Wo; ++ow) {
                        double acc = vb[o];
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t i = 0; i < kh; ++i) {
                                std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) -
                                                    static_cast<std::ptrdiff_t>(pad);
                                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                                for (std::size_t j = 0; j < kw; ++j) {
                                    std::ptrdiff_t iw =
                                        static_cast<std::ptrdiff_t>(ow * stride + j) -
                                        static_cast<std::ptrdiff_t>(pad);
                                    if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                                    acc += vx[idx4(n, c, static_cast<std::size_t>(ih),
                                                   static_cast<std::size_t>(iw), C, H, W)] *
                                           vw[idx4(o, c, i, j, C, kh, kw)];
                                }
                            }
                        out[idx4(n, o, oh, ow, O, Ho, Wo)] = acc;
                    }
        return push(std::move(out), {x, w, b}, "conv2d",
                    [N, C, H, W, O, kh, kw, Ho, Wo, stride, pad](Graph& g, int self) {
                        const std::vector<int>& in = g.nodes_[self].inputs;
                        const Tensor& go = g.nodes_[self].grad;
                        const Tensor& vx2 = g.value(in[0]);
                        const Tensor& vw2 = g.value(in[1]);
                        Tensor* gx = g.grad_slot(in[0]);
                        Tensor* gw = g.grad_slot(in[1]);
                        Tensor* gb = g.grad_slot(in[2]);
                        for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t o = 0; o < O; ++o)
                                for (std::size_t oh = 0; oh < Ho; ++oh)
                                    for (std::size_t ow = 0; ow < Wo; ++ow) {
                                        double gv = go[idx4(n, o, oh, ow, O, Ho, Wo)];
                                        if (gv == 0.0) continue;
                                        if (gb) (*gb)[o] += gv;
                                        for (std::size_t c = 0; c < C; ++c)
                                            for (std::size_t i = 0; i < kh; ++i) {
                                                std::ptrdiff_t ih =
                                                    static_cast<std::ptrdiff_t>(oh * stride + i) -
                                                    static_cast<std::ptrdiff_t>(pad);
                                                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H))
                                                    continue;
                                                for (std::size_t j = 0; j < kw; ++j) {
                                                    std::ptrdiff_t iw =
                                                        static_cast<std::ptrdiff_t>(ow * stride +
                                                                                    j) -
                                                        static_cast<std::ptrdiff_t>(pad);
                                                    if (iw < 0 ||
                                                        iw >= static_cast<std::ptrdiff_t>(W))
                                                        continue;
                                                    std::size_t xi = idx4(
                                                        n, c, static_cast<std::size_t>(ih),
                                                        static_cast<std::size_t>(iw), C, H, W);
                                                    std::size_t wi = idx4(o, c, i, j, C, kh, kw);
                                                    if (gx) (*gx)[xi] += gv * vw2[wi];
                                                    if (gw) (*gw)[wi] += gv * vx2[xi];
                                                }
                                            }
                                    }
                    });
    }

    /// Max pooling, window k x k, no padding. Ties route the gradient to the
    /// first (lowest flat index) element of the window.
    int maxpool2d(int x, std::size_t k, std::size_t stride) {
        const Tensor& vx = value(x);
        if (vx.rank() != 4)
            throw ShapeError("maxpool2d: input has shape " + shape_str(vx.shape) +
                             ", want rank 4");
        if (k == 0 || stride == 0) throw ShapeError("maxpool2d: window and stride must be positive");
        const std::size_t N = vx.shape[0], C = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
        if (H < k || W < k)
            throw ShapeError("maxpool2d: window " + std::to_string(k) + " larger than input " +
                             shape_str(vx.shape));
        const std::size_t Ho = (H - k) / stride + 1;
        const std::size_t Wo = (W - k) / stride + 1;
        Tensor out(Shape{N, C, Ho, Wo});
        std::vector<std::size_t> argmax(out.size());
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t oh = 0; oh < Ho; ++oh)
                    for (std::size_t ow = 0; ow < Wo; ++ow) {
                        double best = -1e308;
                        std::size_t best_idx = 0;
                        for (std::size_t i = 0; i < k; ++i)
                            for (std::size_t j = 0; j < k; ++j) {
                                std::size_t xi = idx4(n, c, oh * stride + i, ow * stride + j, C, H, W);
                                if (vx[xi] > best) {
                                    best = vx[xi];
                                    best_idx = xi;
                                }
                            }
                        std::size_t oi = idx4(n, c, oh, ow, C, Ho, Wo);
                        out[oi] = best;
                        argmax[oi] = best_idx;
                    }
        return push(std::move(out), {x}, "maxpool2d",
                    [argmax = std::move(argmax)](Graph& g, int self) {
                        int in = g.nodes_[self].inputs[0];
                        const Tensor& go = g.nodes_[self].grad;
                        if (Tensor* gx = g.grad_slot(in))
                            for (std::size_t i = 0; i < go.size(); ++i)
                                (*gx)[argmax[i]] += go[i];
                    });
    }

    /// Global average pool: N x C x H x W -> N x C.
    int global_avg_pool(int x) {
        const Tensor& vx = value(x);
        if (vx.rank() != 4)
            throw ShapeError("global_avg_pool: input has shape " + shape_str(vx.shape) +
                             ", want rank 4");
        const std::size_t N = vx.shape[0], C = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
        const double inv = 1.0 / static_cast<double>(H * W);
        Tensor out(Shape{N, C});
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                double s = 0.0;
                for (std::size_t h = 0; h < H; ++h)
                    for (std::size_t w = 0; w < W; ++w) s += vx[idx4(n, c, h, w, C, H, W)];
                out[idx2(n, c, C)] = s * inv;
            }
        return push(std::move(out), {x}, "global_avg_pool",
                    [N, C, H, W, inv](Graph& g, int self) {
                        int in = g.nodes_[self].inputs[0];
                        const Tensor& go = g.nodes_[self].grad;
                        if (Tensor* gx = g.grad_slot(in))
                            for (std::size_t n = 0; n < N; ++n)
                                for (std::size_t c = 0; c < C; ++c) {
                                    double gv = go[idx2(n, c, C)] * inv;
                                    for (std::size_t h = 0; h < H; ++h)
                                        for (std::size_t w = 0; w < W; ++w)
                                            (*gx)[idx4(n, c, h, w, C, H, W)] += gv;
                                }
                    });
    }

    /// Mean over the batch of -log softmax(logits)[label]. Stable via
    /// log-sum-exp; labels must lie in [0, K).
    int softmax_cross_entropy(int logits, const std::vector<std::size_t>& labels) {
        const Tensor& vx = value(logits);
        if (vx.rank() != 2)
            throw ShapeError("softmax_cross_entropy: logits have shape " + shape_str(vx.shape) +
                             ", want rank 2");
        const std::size_t N = vx.shape[0], K = vx.shape[1];
        if (labels.size() != N)
            throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                             " labels for batch of " + std::to_string(N));
        for (std::size_t n = 0; n < N; ++n)
            if (labels[n] >= K)
                throw std::invalid_argument("softmax_cross_entropy: label " +
                                            std::to_string(labels[n]) + " out of range [0," +
                                            std::to_string(K) + ")");
        double loss = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
            double mx = vx[idx2(n, 0, K)];
            for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, vx[idx2(n, k, K)]);
            double lse = 0.0;
            for (std::size_t k = 0; k < K; ++k) lse += std::exp(vx[idx2(n, k, K)] - mx);
            lse = mx + std::log(lse);
            loss += lse - vx[idx2(n, labels[n], K)];
        }
        loss /= static_cast<double>(N);
        return push(Tensor::scalar(loss), {logits}, "softmax_cross_entropy",
                    [labels, N, K](Graph& g, int self) {
                        int in = g.nodes_[self].inputs[0];
                        double go = g.nodes_[self].grad[0] / static_cast<double>(N);
                        const Tensor& vx2 = g.value(in);
                        if (Tensor* gx = g.grad_slot(in))
                            for (std::size_t n = 0; n < N; ++n) {
                                double mx = vx2[idx2(n, 0, K)];
                                for (std::size_t k = 1; k < K; ++k)
                                    mx = std::max(mx, vx2[idx2(n, k, K)]);
                                double z = 0.0;
                                for (std::size_t k = 0; k < K; ++k)
                                    z += std::exp(vx2[idx2(n, k, K)] - mx);
                                for (std::size_t k = 0; k < K; ++k) {
                                    double p = std::exp(vx2[idx2(n, k, K)] - mx) / z;
                                    (*gx)[idx2(n, k, K)] +=
                                        go * (p - (k == labels[n] ? 1.0 : 0.0));
                                }
                            }
                    });
    }

    /// Mean squared error over all entries.
    int mse(int a, int b) {
        require_same_shape(value(a), value(b), "mse");
        const Tensor& va = value(a);
        const Tensor& vb = value(b);
        if (va.size() == 0) throw ShapeError("mse: empty tensors");
        double s = 0.0;
        for (std::size_t i = 0; i < va.size(); ++i) {
            double d = va[i] - vb[i];
            s += d * d;
        }
        const double inv = 1.0 / static_cast<double>(va.size());
        return push(Tensor::scalar(s * inv), {a, b}, "mse", [inv](Graph& g, int self) {
            const std::vector<int>& in = g.nodes_[self].inputs;
            double go = g.nodes_[self].grad[0];
            const Tensor& va2 = g.value(in[0]);
            const Tensor& vb2 = g.value(in[1]);
            Tensor* ga = g.grad_slot(in[0]);
            Tensor* gb = g.grad_slot(in[1]);
            for (std::size_t i = 0; i < va2.size(); ++i) {
                double d = 2.0 * inv * (va2[i] - vb2[i]) * go;
                if (ga) (*ga)[i] += d;
                if (gb) (*gb)[i] -= d;
            }
        });
    }

    static constexpr double kPearsonEps = 1e-8;

    /// Pearson correlation of two 1-D vectors with kPearsonEps added to each
    /// centered norm. Never clamped here; callers clamp for reporting only.
    int pearson(int x, int y) {
        const Tensor& vx = value(x);
        const Tensor& vy = value(y);
        if (vx.rank() != 1 || vy.rank() != 1)
            throw ShapeError("pearson: want two rank-1 tensors, got " + shape_str(vx.shape) +
                             " and " + shape_str(vy.shape));
        require_same_shape(vx, vy, "pearson");
        const std::size_t D = vx.size();
        if (D < 2) throw ShapeError("pearson: need at least 2 elements");
        double mx = 0.0, my = 0.0;
        for (std::size_t i = 0; i < D; ++i) {
            mx += vx[i];
            my += vy[i];
        }
        mx /= static_cast<double>(D);
        my /= static_cast<double>(D);
        double sxy = 0.0, sxx = 0.0, syy = 0.0;
        for (std::size_t i = 0; i < D; ++i) {
            double xc = vx[i] - mx;
            double yc = vy[i] - my;
            sxy += xc * yc;
            sxx += xc * xc;
            syy += yc * yc;
        }
        const double nx = std::sqrt(sxx) + kPearsonEps;
        const double ny = std::sqrt(syy) + kPearsonEps;
        const double r = sxy / (nx * ny);
        return push(Tensor::scalar(r), {x, y}, "pearson",
                    [mx, my, sxy, sxx, syy, nx, ny, D](Graph& g, int self) {
                        const std::vector<int>& in = g.nodes_[self].inputs;
                        double go = g.nodes_[self].grad[0];
                        const Tensor& vx2 = g.value(in[0]);
                        const Tensor& vy2 = g.value(in[1]);
                        Tensor* gx = g.grad_slot(in[0]);
                        Tensor* gy = g.grad_slot(in[1]);
                        const double inv_nxny = 1.0 / (nx * ny);
                        // d r / d x_j = yc_j/(nx ny) - sxy * xc_j/(sqrt(sxx) nx^2 ny)
                        const double cx = sxx > 0.0 ? sxy / (std::sqrt(sxx) * nx * nx * ny) : 0.0;
                        const double cy = syy > 0.0 ? sxy / (std::sqrt(syy) * ny * ny * nx) : 0.0;
                        for (std::size_t i = 0; i < D; ++i) {
                            double xc = vx2[i] - mx;
                            double yc = vy2[i] - my;
                            if (gx) (*gx)[i] += go * (yc * inv_nxny - cx * xc);
                            if (gy) (*gy)[i] += go * (xc * inv_nxny - cy * yc);
                        }
                    });
    }

    /// Reverse sweep from a scalar loss node. Gradients of all reachable
    /// nodes that require them are zeroed and repopulated, so repeated calls
    /// with unchanged values produce identical gradients.
    void backward(int loss) {
        check(loss);
        if (!value(loss).is_scalar())
            throw ShapeError("backward: loss node has shape " + shape_str(value(loss).shape) +
                             ", want a scalar");
        // Mark nodes reachable from the loss.
        std::vector<char> needed(nodes_.size(), 0);
        std::vector<int> stack{loss};
        needed[static_cast<std::size_t>(loss)] = 1;
        while (!stack.empty()) {
            int id = stack.back();
            stack.pop_back();
            for (int in : nodes_[static_cast<std::size_t>(id)].inputs)
                if (!needed[static_cast<std::size_t>(in)]) {
                    needed[static_cast<std::size_t>(in)] = 1;
                    stack.push_back(in);
                }
        }
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            Node& n = nodes_[i];
            if (needed[i] && n.requires_grad) {
                n.grad = Tensor(n.value.shape);
            } else {
                n.grad = Tensor{};
            }
        }
        Node& ln = nodes_[static_cast<std::size_t>(loss)];
        if (!ln.requires_grad) return;  // loss does not depend on any parameter
        ln.grad[0] = 1.0;
        for (int id = loss; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!needed[static_cast<std::size_t>(id)] || !n.requires_grad || !n.backward) continue;
            n.backward(*this, id);
        }
    }

private:
    std::vector<Node> nodes_;

    int check(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
            throw ShapeError("graph: bad node id " + std::to_string(id));
        return id;
    }

    int push(Tensor value, std::vector<int> inputs, const char* op,
             std::function<void(Graph&, int)> backward) {
        bool rg = false;
        for (int in : inputs) rg = rg || nodes_[static_cast<std::size_t>(check(in))].requires_grad;
        nodes_.push_back(Node{std::move(value), Tensor{}, std::move(inputs), std::move(backward),
                              op, rg});
        return static_cast<int>(nodes_.size()) - 1;
    }

    /// Gradient buffer of a node, or nullptr when it does not participate.
    Tensor* grad_slot(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad || n.grad.data.empty()) return nullptr;
        return &n.grad;
    }

    void accumulate(int id, const Tensor& g, double factor) {
        if (Tensor* dst = grad_slot(id))
            for (std::size_t i = 0; i < g.size(); ++i) (*dst)[i] += factor * g[i];
    }
};

}  // namespace realign::ad
