#pragma once

#include <vector>

#include "ditlab/flow/schedule.hpp"
#include "ditlab/mmdit/model.hpp"

namespace ditlab {

// Per block, per coefficient slot: the mean modulation vector over the
// calibration set and the variance-to-squared-norm ratio, bucketed by the
// sampler's discrete timesteps. DS blocks expose 12 slots (img 6, txt 6),
// SS blocks 3, matching the Static-LN layout.
struct AdaLnStats {
    std::vector<double> timesteps;                       // evaluated grid, t_1..t_N
    // means[block][slot] is [n_timesteps x d]
    std::vector<std::vector<Tensor>> means;
    // ratios[block][slot][t_index] = var / ||mean||^2
    std::vector<std::vector<std::vector<double>>> ratios;
    size_t n_ds = 0, n_ss = 0;
};

namespace detail {
// coefficient vectors of every block at one (t, pooled): values only
inline std::vector<std::vector<Tensor>> collect_coeffs(MMDiTParams& p, double t, const Tensor& pooled) {
    CondState cond = compute_cond(p, t, constant(pooled));
    std::vector<std::vector<Tensor>> out;
    for (size_t i = 0; i < p.cfg.n_ds; ++i) {
        std::vector<Tensor> slots;
        for (int m = 0; m < 2; ++m) {
            for (const auto& c : block_coeffs(p, cond, t, true, i, m)) slots.push_back(c->value);
        }
        out.push_back(std::move(slots));
    }
    for (size_t i = 0; i < p.cfg.n_ss; ++i) {
        std::vector<Tensor> slots;
        for (const auto& c : block_coeffs(p, cond, t, false, i, 0)) slots.push_back(c->value);
        out.push_back(std::move(slots));
    }
    return out;
}

// anchored mean over sample vectors: exact when all samples are identical
inline Tensor anchored_mean(const std::vector<Tensor>& xs) {
    Tensor mean = xs[0];
    Tensor acc(xs[0].shape());
    for (size_t s = 1; s < xs.size(); ++s) {
        for (size_t i = 0; i < acc.numel(); ++i) acc.at(i) += xs[s].at(i) - xs[0].at(i);
    }
    for (size_t i = 0; i < mean.numel(); ++i) mean.at(i) = xs[0].at(i) + acc.at(i) / static_cast<double>(xs.size());
    return mean;
}
}  // namespace detail

/// AdaLN coefficients depend only on (t, pooled); the calibration set is a
/// list of pooled conditioning vectors (one per prompt).
inline AdaLnStats adaln_stats(MMDiTParams& model, const std::vector<Tensor>& pooled_set, const Schedule& sched) {
    if (pooled_set.empty()) throw ShapeError("adaln_stats: calibration set must not be empty");
    if (model.uses_static_ln()) throw ShapeError("adaln_stats: model already uses Static-LN");
    sched.validate();

    AdaLnStats st;
    st.n_ds = model.cfg.n_ds;
    st.n_ss = model.cfg.n_ss;
    size_t n_blocks = st.n_ds + st.n_ss;
    for (size_t j = 1; j <= sched.steps(); ++j) st.timesteps.push_back(sched.t[j]);

    size_t d = model.cfg.d;
    st.means.resize(n_blocks);
    st.ratios.resize(n_blocks);
    for (size_t b = 0; b < n_blocks; ++b) {
        size_t slots = b < st.n_ds ? 12 : 3;
        st.means[b].assign(slots, Tensor({st.timesteps.size(), d}));
        st.ratios[b].assign(slots, std::vector<double>(st.timesteps.size(), 0.0));
    }

    for (size_t ti = 0; ti < st.timesteps.size(); ++ti) {
        double t = st.timesteps[ti];
        // coeffs[sample][block][slot]
        std::vector<std::vector<std::vector<Tensor>>> coeffs;
        for (const auto& pooled : pooled_set) coeffs.push_back(detail::collect_coeffs(model, t, pooled));
        for (size_t b = 0; b < n_blocks; ++b) {
            size_t slots = st.means[b].size();
            for (size_t s = 0; s < slots; ++s) {
                std::vector<Tensor> samples;
                samples.reserve(coeffs.size());
                for (const auto& cs : coeffs) samples.push_back(cs[b][s]);
                Tensor mean = detail::anchored_mean(samples);
                double var = 0.0;
                for (const auto& x : samples) {
                    for (size_t i = 0; i < d; ++i) {
                        double dv = x.at(i) - mean.at(i);
                        var += dv * dv;
                    }
                }
                var /= static_cast<double>(samples.size());
                double norm2 = 0.0;
                for (size_t i = 0; i < d; ++i) norm2 += mean.at(i) * mean.at(i);
                st.ratios[b][s][ti] = var == 0.0 ? 0.0 : var / norm2;
                for (size_t i = 0; i < d; ++i) st.means[b][s].at(ti, i) = mean.at(i);
            }
        }
    }
    return st;
}

}  // namespace ditlab
