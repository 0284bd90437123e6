#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "tensor.hpp"

namespace ctta {

/// Classical momentum SGD: buffer <- m * buffer + grad; param <- param - lr * buffer.
class SgdMomentum {
public:
    SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {
        if (!(lr > 0.0)) throw std::invalid_argument("SgdMomentum: learning rate must be positive");
        if (momentum < 0.0) throw std::invalid_argument("SgdMomentum: momentum must be nonnegative");
    }

    double learning_rate() const noexcept { return lr_; }
    double momentum() const noexcept { return momentum_; }
    const std::vector<Tensor>& buffers() const noexcept { return buffers_; }

    /// Applies one update; `params[i]` is paired with `grads[i]` on every call.
    void step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
        if (params.size() != grads.size()) throw std::invalid_argument("SgdMomentum::step: params/grads mismatch");
        if (buffers_.empty()) {
            for (const Tensor* p : params) buffers_.emplace_back(p->shape(), 0.0);
        } else if (buffers_.size() != params.size()) {
            throw std::invalid_argument("SgdMomentum::step: parameter set changed between steps");
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i];
            Tensor& buf = buffers_[i];
            const Tensor& g = grads[i];
            if (g.size() != p.size() || buf.size() != p.size())
                throw std::invalid_argument("SgdMomentum::step: gradient shape mismatch");
            for (std::size_t k = 0; k < p.size(); ++k) {
                buf[k] = momentum_ * buf[k] + g[k];
                p[k] -= lr_ * buf[k];
            }
        }
    }

private:
    double lr_;
    double momentum_;
    std::vector<Tensor> buffers_;
};

}  // namespace ctta
