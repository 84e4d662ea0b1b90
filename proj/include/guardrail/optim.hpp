#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "guardrail/tensor.hpp"

namespace guardrail {

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

// Adam with bias correction. Parameters that received no gradient in a step
// are still decayed through their moment estimates, matching the usual
// full-parameter update.
class Adam {
public:
    explicit Adam(std::vector<Tensor> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].numel(), 0.0f);
            v_[i].assign(params_[i].numel(), 0.0f);
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        ++t_;
        const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t_));
        const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            p.ensure_grad();
            const auto& g = p.grad();
            for (std::size_t j = 0; j < p.numel(); ++j) {
                m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0f - cfg_.beta1) * g[j];
                v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0f - cfg_.beta2) * g[j] * g[j];
                const float mhat = m_[i][j] / bc1;
                const float vhat = v_[i][j] / bc2;
                p.data()[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    long steps_taken() const { return t_; }
    const std::vector<Tensor>& params() const { return params_; }

private:
    std::vector<Tensor> params_;
    AdamConfig cfg_;
    std::vector<std::vector<float>> m_, v_;
    long t_ = 0;
};

}  // namespace guardrail
