#pragma once

#include <cmath>
#include <vector>

#include "ditlab/numkit/autodiff.hpp"

namespace ditlab {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Plain Adam over a fixed parameter list. Step order follows the list,
/// which follows the model walkers, so updates are deterministic.
class Adam {
public:
    Adam(std::vector<Var> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) {
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
        }
    }

    void zero_grad() {
        for (auto& p : params_) {
            p->ensure_grad();
            p->zero_grad();
        }
    }

    void step(double lr_override = -1.0) {
        double lr = lr_override > 0.0 ? lr_override : cfg_.lr;
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            Var& p = params_[i];
            if (p->grad.numel() != p->value.numel()) continue;
            for (size_t j = 0; j < p->value.numel(); ++j) {
                double g = p->grad.at(j);
                m_[i].at(j) = cfg_.beta1 * m_[i].at(j) + (1.0 - cfg_.beta1) * g;
                v_[i].at(j) = cfg_.beta2 * v_[i].at(j) + (1.0 - cfg_.beta2) * g * g;
                double mh = m_[i].at(j) / bc1;
                double vh = v_[i].at(j) / bc2;
                p->value.at(j) -= lr * mh / (std::sqrt(vh) + cfg_.eps);
            }
            p->value.require_finite("adam_step");
        }
    }

    const std::vector<Var>& params() const { return params_; }

private:
    std::vector<Var> params_;
    std::vector<Tensor> m_, v_;
    AdamConfig cfg_;
    size_t t_ = 0;
};

/// Cosine decay from lr down to lr * floor_frac across n_total steps.
inline double cosine_lr(double lr, size_t step, size_t n_total, double floor_frac = 0.1) {
    if (n_total <= 1) return lr;
    double p = static_cast<double>(step) / static_cast<double>(n_total - 1);
    double lo = lr * floor_frac;
    return lo + 0.5 * (lr - lo) * (1.0 + std::cos(M_PI * p));
}

}  // namespace ditlab
