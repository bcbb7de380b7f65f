#pragma once

#include "negopt/common.hpp"

namespace negopt {

/// Adam with decoupled weight decay (AdamW). weight_decay = 0 gives plain Adam.
class AdamW {
  public:
    struct Options {
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;
    };

    AdamW() = default;
    AdamW(std::size_t n, Options opt) : opt_(opt), m_(n, 0.0), v_(n, 0.0) {}

    void step(Vector& params, const Vector& grad, double lr) {
        if (params.size() != m_.size() || grad.size() != m_.size()) throw ShapeError("AdamW: size mismatch");
        ++t_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * grad[i];
            v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * grad[i] * grad[i];
            const double mhat = m_[i] / bc1, vhat = v_[i] / bc2;
            params[i] -= lr * (mhat / (std::sqrt(vhat) + opt_.eps) + opt_.weight_decay * params[i]);
        }
    }

    std::size_t steps() const { return t_; }

  private:
    Options opt_;
    Vector m_, v_;
    std::size_t t_ = 0;
};

/// Linear warmup to `base` over `warmup` steps, constant afterwards. `step` is 1-based.
inline double warmup_lr(double base, std::size_t warmup, std::size_t step) {
    if (warmup == 0 || step >= warmup) return base;
    return base * static_cast<double>(step) / static_cast<double>(warmup);
}

} // namespace negopt
