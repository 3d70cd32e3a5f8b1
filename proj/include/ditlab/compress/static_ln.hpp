#pragma once

#include "ditlab/analysis/adaln_stats.hpp"

namespace ditlab {

/// Precomputes per-timestep modulation coefficients by averaging the dynamic
/// AdaLN outputs over the first n_samples calibration prompts. The anchored
/// mean makes the table bit-equal to the dynamic path when the calibration
/// conditioning is constant.
inline StaticLnTable calibrate_static_ln(MMDiTParams& model, const std::vector<Tensor>& pooled_set,
                                         const Schedule& sched, size_t n_samples) {
    if (n_samples < 1) throw ShapeError("calibrate_static_ln: n_samples must be >= 1");
    if (pooled_set.size() < n_samples) throw ShapeError("calibrate_static_ln: calibration set too small");
    if (model.uses_static_ln()) throw ShapeError("calibrate_static_ln: model already static");
    sched.validate();

    std::vector<Tensor> calib(pooled_set.begin(), pooled_set.begin() + static_cast<long>(n_samples));
    size_t n_t = sched.steps();
    size_t d = model.cfg.d;

    StaticLnTable tab;
    for (size_t j = 1; j <= n_t; ++j) tab.timesteps.push_back(sched.t[j]);
    tab.ds.assign(model.cfg.n_ds, std::vector<Tensor>(12, Tensor({n_t, d})));
    tab.ss.assign(model.cfg.n_ss, std::vector<Tensor>(3, Tensor({n_t, d})));

    for (size_t ti = 0; ti < n_t; ++ti) {
        double t = tab.timesteps[ti];
        std::vector<std::vector<std::vector<Tensor>>> coeffs;  // [sample][block][slot]
        for (const auto& pooled : calib) coeffs.push_back(detail::collect_coeffs(model, t, pooled));
        size_t n_blocks = model.cfg.n_ds + model.cfg.n_ss;
        for (size_t b = 0; b < n_blocks; ++b) {
            size_t slots = b < model.cfg.n_ds ? 12 : 3;
            for (size_t s = 0; s < slots; ++s) {
                std::vector<Tensor> samples;
                for (const auto& cs : coeffs) samples.push_back(cs[b][s]);
                Tensor mean = detail::anchored_mean(samples);
                Tensor& dst = b < model.cfg.n_ds ? tab.ds[b][s] : tab.ss[b - model.cfg.n_ds][s];
                for (size_t i = 0; i < d; ++i) dst.at(ti, i) = mean.at(i);
            }
        }
    }
    return tab;
}

/// Installs the table and removes the now-redundant AdaLN projections
/// (12 d^2 weights per DS block, 3 d^2 per SS block).
inline MMDiTParams apply_static_ln(const MMDiTParams& model, StaticLnTable table) {
    MMDiTParams s = clone(model);
    for (auto& b : s.ds) {
        b.adaln[0].reset();
        b.adaln[1].reset();
    }
    for (auto& b : s.ss) b.adaln.reset();
    s.static_ln = std::move(table);
    return s;
}

}  // namespace ditlab
