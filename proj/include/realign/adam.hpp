#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "realign/tensor.hpp"

namespace realign {

/// Adam with bias correction, canonical constants by default.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (lr <= 0.0) throw std::invalid_argument("adam: learning rate must be positive");
    }

    std::size_t step_count() const { return step_; }

    /// One update over a fixed parameter list. Moment tensors are allocated
    /// on first use and keyed by position, so the list must be stable.
    void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
        if (params.size() != grads.size())
            throw ShapeError("adam: " + std::to_string(params.size()) + " params vs " +
                             std::to_string(grads.size()) + " grads");
        if (m_.empty()) {
            m_.reserve(params.size());
            v_.reserve(params.size());
            for (const Tensor* p : params) {
                m_.emplace_back(p->shape);
                v_.emplace_back(p->shape);
            }
        }
        if (m_.size() != params.size())
            throw ShapeError("adam: parameter list size changed between steps");
        ++step_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
        for (std::size_t k = 0; k < params.size(); ++k) {
            Tensor& p = *params[k];
            const Tensor& g = *grads[k];
            require_same_shape(p, g, "adam");
            require_same_shape(p, m_[k], "adam state");
            Tensor& m = m_[k];
            Tensor& v = v_[k];
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    std::size_t step_ = 0;
    std::vector<Tensor> m_, v_;
};

}  // namespace realign
