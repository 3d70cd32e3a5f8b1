#pragma once

#include "ditlab/flow/sampler.hpp"
#include "ditlab/ptd/downup.hpp"

namespace ditlab {

/// Progressive-token-downsampling placement: the designated SS block range
/// B_D runs on quarter-resolution tokens whenever t <= t_thresh. D sits
/// immediately after the first SS block, U after the final one.
struct PtdConfig {
    double t_thresh = 0.5;
    size_t bd_begin = 1;  // SS-local index of the first block in B_D
    size_t bd_end = 0;    // exclusive; fixed to n_ss by validate()

    void validate(const ModelConfig& cfg) const {
        if (t_thresh < 0.0 || t_thresh > 1.0) throw ShapeError("ptd: t_thresh must lie in [0, 1]");
        if (bd_begin < 1) throw ShapeError("ptd: B_D starts after the first SS block");
        if (bd_end != cfg.n_ss) throw ShapeError("ptd: B_D must extend through the final SS block");
        if (bd_begin >= bd_end) throw ShapeError("ptd: B_D is empty");
        if (cfg.img_grid % 2 != 0) throw ShapeError("ptd: image grid side must be even");
    }

    size_t bd_size() const { return bd_end - bd_begin; }
    bool routed_at(double t) const { return t <= t_thresh; }
};

/// Per-step routing decision, logged into stage reports.
struct RoutedStep {
    size_t index;  // schedule index j (t_j)
    double t;
    bool low_res;
};

inline std::vector<RoutedStep> routing_log(const Schedule& sched, const PtdConfig& cfg) {
    std::vector<RoutedStep> log;
    for (size_t j = sched.steps(); j >= 1; --j) {
        log.push_back({j, sched.t[j], cfg.routed_at(sched.t[j])});
    }
    return log;
}

/// Forward with D/U inserted around B_D. On bypassed steps (t > t_thresh)
/// the arithmetic is identical to the base model, so outputs are bit-equal.
/// `span` restricts the routed range during progressive training; the
/// default covers all of B_D.
inline Var routed_forward(MMDiTParams& p, PtdParams& ptd, const PtdConfig& cfg,
                          const Var& x, const Var& prompt, double t, const Var& pooled,
                          std::optional<std::pair<size_t, size_t>> span = std::nullopt,
                          bool force_low = false) {
    cfg.validate(p.cfg);
    const ModelConfig& mc = p.cfg;
    size_t begin = span ? span->first : cfg.bd_begin;
    size_t end = span ? span->second : cfg.bd_end;
    if (begin < cfg.bd_begin || end > cfg.bd_end || begin >= end) throw ShapeError("ptd: bad routed span");

    CondState cond = compute_cond(p, t, pooled);
    Rope2D rope_full = rope_table(mc.img_grid, mc.d_H, mc.txt_len, static_cast<double>(mc.img_grid));
    Tensor angles_full = rope_full.sequence_angles();

    Var img = fwd_linear(p.img_in, x);
    Var txt = fwd_linear(p.txt_in, prompt);
    for (size_t i = 0; i < mc.n_ds; ++i) {
        std::vector<Var> ci = block_coeffs(p, cond, t, true, i, 0);
        std::vector<Var> ct = block_coeffs(p, cond, t, true, i, 1);
        StreamPair sp = run_ds_block(p, i, img, txt, ci, ct, angles_full, nullptr, i, nullptr);
        img = sp.img;
        txt = sp.txt;
    }

    bool low = force_low || cfg.routed_at(t);
    if (!low) {
        for (size_t i = 0; i < mc.n_ss; ++i) {
            std::vector<Var> c = block_coeffs(p, cond, t, false, i, 0);
            StreamPair sp = run_ss_block(p, i, img, txt, c, angles_full, nullptr, mc.n_ds + i, nullptr);
            img = sp.img;
            txt = sp.txt;
        }
        return fwd_linear(p.out_proj, layer_norm(img));
    }

    Rope2D rope_low = rope_table(mc.img_grid / 2, mc.d_H, mc.txt_len, static_cast<double>(mc.img_grid));
    Tensor angles_low = rope_low.sequence_angles();

    auto run_ss = [&](size_t i, const Tensor& angles) {
        std::vector<Var> c = block_coeffs(p, cond, t, false, i, 0);
        StreamPair sp = run_ss_block(p, i, img, txt, c, angles, nullptr, mc.n_ds + i, nullptr);
        img = sp.img;
        txt = sp.txt;
    };
    for (size_t i = 0; i < begin; ++i) run_ss(i, angles_full);
    img = ptd_downsample(ptd.down, img, mc.img_grid, cond.time);
    for (size_t i = begin; i < end; ++i) run_ss(i, angles_low);
    img = ptd_upsample(ptd.up, img, mc.img_grid / 2, cond.time);
    for (size_t i = end; i < mc.n_ss; ++i) run_ss(i, angles_full);
    return ptd_out_mlp(ptd.out_mlp, layer_norm(img));
}

inline VelocityFn routed_velocity(MMDiTParams& p, PtdParams& ptd, const PtdConfig& cfg,
                                  Tensor prompt, Tensor pooled) {
    return [&p, &ptd, cfg, prompt = std::move(prompt), pooled = std::move(pooled)](const Tensor& x, double t) {
        return routed_forward(p, ptd, cfg, constant(x), constant(prompt), t, constant(pooled))->value;
    };
}

}  // namespace ditlab
