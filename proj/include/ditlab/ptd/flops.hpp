#pragma once

#include "ditlab/ptd/routing.hpp"

namespace ditlab {

// Analytic joint-attention cost accounting. Per block the cost splits into
// the quadratic attention term (T_img_eff + T_txt)^2 * d and the linear
// projection term (T_img_eff + T_txt) * d^2; routing shrinks T_img by 4x
// inside B_D on routed steps.

struct AttnCost {
    double quadratic = 0.0;
    double linear = 0.0;
    double total() const { return quadratic + linear; }
};

inline AttnCost attn_block_cost(size_t t_img, size_t t_txt, size_t d) {
    double tokens = static_cast<double>(t_img + t_txt);
    double dd = static_cast<double>(d);
    return {tokens * tokens * dd, tokens * dd * dd};
}

struct FlopsReport {
    double total = 0.0;
    double base_total = 0.0;      // same schedule with routing disabled
    double ratio = 1.0;           // total / base_total
    double quad_total = 0.0;
    double quad_base = 0.0;
    double quad_ratio = 1.0;
    std::vector<RoutedStep> log;  // per-step routing decisions
};

inline FlopsReport attention_flops(const ModelConfig& cfg, const PtdConfig& ptd, const Schedule& sched) {
    sched.validate();
    size_t n_blocks = cfg.n_ds + cfg.n_ss;
    size_t n_bd = ptd.bd_size();
    size_t t_img = cfg.img_tokens();

    AttnCost full = attn_block_cost(t_img, cfg.txt_len, cfg.d);
    AttnCost quarter = attn_block_cost(t_img / 4, cfg.txt_len, cfg.d);

    FlopsReport rep;
    rep.log = routing_log(sched, ptd);
    for (const auto& step : rep.log) {
        rep.base_total += static_cast<double>(n_blocks) * full.total();
        rep.quad_base += static_cast<double>(n_blocks) * full.quadratic;
        if (step.low_res) {
            rep.total += static_cast<double>(n_blocks - n_bd) * full.total() +
                         static_cast<double>(n_bd) * quarter.total();
            rep.quad_total += static_cast<double>(n_blocks - n_bd) * full.quadratic +
                              static_cast<double>(n_bd) * quarter.quadratic;
        } else {
            rep.total += static_cast<double>(n_blocks) * full.total();
            rep.quad_total += static_cast<double>(n_blocks) * full.quadratic;
        }
    }
    rep.ratio = rep.total / rep.base_total;
    rep.quad_ratio = rep.quad_total / rep.quad_base;
    return rep;
}

}  // namespace ditlab
