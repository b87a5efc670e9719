// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <unordered_map>
#include <vector>

#include "soq/nn.hpp"

namespace soq::nn {

inline double cosine_decay_lr(double base_lr, int64_t step, int64_t total_steps,
                              double min_lr = 0.0) {
    if (total_steps <= 0) return base_lr;
    const double s = std::min<double>(static_cast<double>(step), static_cast<double>(total_steps));
    const double f = 0.5 * (1.0 + std::cos(M_PI * s / static_cast<double>(total_steps)));
    return min_lr + (base_lr - min_lr) * f;
}

// decoupled weight decay; moments keyed by parameter name so checkpoints
// survive construction-order changes
class AdamW {
  public:
    struct Moments {
        std::vector<double> m, v;
    };

    explicit AdamW(double lr = 2e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                   double weight_decay = 0.01)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    // applies one update to every trainable parameter; frozen parameters are
    // untouched (their moments are also left alone)
    void step(ParamStore& store, double lr_override = -1.0) {
        ++t_;
        const double lr = lr_override >= 0.0 ? lr_override : lr_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto& [name, p] : store.params()) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            auto& mom = moments_[name];
            if (mom.m.size() != p->val.size()) {
                mom.m.assign(p->val.size(), 0.0);
                mom.v.assign(p->val.size(), 0.0);
            }
            for (size_t i = 0; i < p->val.size(); ++i) {
                const double g = p->grad[i];
                mom.m[i] = beta1_ * mom.m[i] + (1.0 - beta1_) * g;
                mom.v[i] = beta2_ * mom.v[i] + (1.0 - beta2_) * g * g;
                const double mhat = mom.m[i] / bc1;
                const double vhat = mom.v[i] / bc2;
                p->val[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * p->val[i]);
            }
        }
    }

    int64_t step_count() const { return t_; }
    double base_lr() const { return lr_; }

    std::unordered_map<std::string, Moments>& moments() { return moments_; }
    const std::unordered_map<std::string, Moments>& moments() const { return moments_; }
    void set_step_count(int64_t t) { t_ = t; }

  private:
    double lr_, beta1_, beta2_, eps_, weight_decay_;
    int64_t t_ = 0;
    std::unordered_map<std::string, Moments> moments_;
};

}  // namespace soq::nn
