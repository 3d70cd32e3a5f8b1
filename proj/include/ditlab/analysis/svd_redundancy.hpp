#pragma once

#include <map>
#include <vector>

#include "ditlab/numkit/svd.hpp"
#include "ditlab/mmdit/model.hpp"

namespace ditlab {

struct SvdProbeItem {
    Tensor x_t;
    double t = 0.5;
    Tensor prompt;
    Tensor pooled;
};

// Attention-output redundancy diagnostics. "joint" analyzes the per-token
// stacked softmax(QK^T)V features across heads (T x H*d_H per block);
// "per_head" analyzes each head's T x d_H feature matrix on its own.
struct SvdReport {
    // spectra over probe-stacked features, one vector per block (joint) or
    // per (block, head) flattened head-major (per_head)
    std::vector<std::vector<double>> joint_spectra;
    std::vector<std::vector<std::vector<double>>> per_head_spectra;
    // rank -> velocity-output MSE against the unmodified forward
    std::map<size_t, double> joint_proxy;
    std::map<size_t, double> per_head_proxy;
};

namespace detail {
inline Tensor stack_heads(const std::vector<Tensor>& feats) {
    size_t h = feats.size(), t = feats[0].rows(), dh = feats[0].cols();
    Tensor m({t, h * dh});
    for (size_t hh = 0; hh < h; ++hh)
        for (size_t i = 0; i < t; ++i)
            for (size_t j = 0; j < dh; ++j) m.at(i, hh * dh + j) = feats[hh].at(i, j);
    return m;
}

inline std::vector<Tensor> split_heads(const Tensor& m, size_t h) {
    size_t t = m.rows(), dh = m.cols() / h;
    std::vector<Tensor> feats(h, Tensor({t, dh}));
    for (size_t hh = 0; hh < h; ++hh)
        for (size_t i = 0; i < t; ++i)
            for (size_t j = 0; j < dh; ++j) feats[hh].at(i, j) = m.at(i, hh * dh + j);
    return feats;
}

inline double velocity_mse(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) {
        double d = a.at(i) - b.at(i);
        s += d * d;
    }
    return s / static_cast<double>(a.numel());
}
}  // namespace detail

inline SvdReport svd_redundancy(MMDiTParams& model, const std::vector<SvdProbeItem>& probe,
                                const std::vector<size_t>& ranks) {
    if (probe.empty()) throw ShapeError("svd_redundancy: empty probe set");
    size_t n_blocks = model.cfg.n_ds + model.cfg.n_ss;
    size_t h = model.cfg.H, dh = model.cfg.d_H;
    for (size_t r : ranks) {
        if (r < 1 || r > h * dh) throw ShapeError("svd_redundancy: rank exceeds feature dims");
    }

    SvdReport rep;

    // spectra over probe-stacked features
    std::vector<Tensor> joint_stacks;   // per block: (items*T) x (H*d_H)
    {
        std::vector<std::vector<Tensor>> per_item_feats(n_blocks);
        for (const auto& item : probe) {
            ForwardTrace tr;
            velocity(model, item.x_t, item.prompt, item.t, item.pooled, &tr);
            for (size_t b = 0; b < n_blocks; ++b) {
                std::vector<Tensor> feats;
                for (const auto& f : tr.blocks[b].head_feats) feats.push_back(f->value);
                per_item_feats[b].push_back(detail::stack_heads(feats));
            }
        }
        for (size_t b = 0; b < n_blocks; ++b) {
            size_t t_tok = per_item_feats[b][0].rows();
            Tensor stack({probe.size() * t_tok, h * dh});
            for (size_t it = 0; it < probe.size(); ++it) {
                for (size_t i = 0; i < t_tok; ++i)
                    for (size_t j = 0; j < h * dh; ++j) stack.at(it * t_tok + i, j) = per_item_feats[b][it].at(i, j);
            }
            joint_stacks.push_back(std::move(stack));
        }
    }
    for (size_t b = 0; b < n_blocks; ++b) {
        SvdResult f = svd(joint_stacks[b]);
        rep.joint_spectra.emplace_back(f.s.vec());
        std::vector<std::vector<double>> heads;
        for (size_t hh = 0; hh < h; ++hh) {
            size_t t_tok = joint_stacks[b].rows();
            Tensor hm({t_tok, dh});
            for (size_t i = 0; i < t_tok; ++i)
                for (size_t j = 0; j < dh; ++j) hm.at(i, j) = joint_stacks[b].at(i, hh * dh + j);
            heads.push_back(svd(hm).s.vec());
        }
        rep.per_head_spectra.push_back(std::move(heads));
    }

    // reconstruction proxy: velocity MSE with features replaced by their
    // rank-r reconstruction at inference, averaged over the probe set
    auto run_with_rank = [&](size_t rank, bool joint) {
        double total = 0.0;
        for (const auto& item : probe) {
            Tensor base = velocity(model, item.x_t, item.prompt, item.t, item.pooled);
            ForwardHooks hooks;
            hooks.feats_surgeon = [&](size_t, const std::vector<Tensor>& feats) {
                if (joint) {
                    Tensor m = detail::stack_heads(feats);
                    size_t full = std::min(m.rows(), m.cols());
                    Tensor rec = low_rank_reconstruct(m, std::min(rank, full));
                    return detail::split_heads(rec, feats.size());
                }
                std::vector<Tensor> out;
                out.reserve(feats.size());
                for (const auto& f : feats) {
                    size_t full = std::min(f.rows(), f.cols());
                    out.push_back(low_rank_reconstruct(f, std::min(rank, full)));
                }
                return out;
            };
            Tensor mod = velocity(model, item.x_t, item.prompt, item.t, item.pooled, nullptr, &hooks);
            total += detail::velocity_mse(base, mod);
        }
        return total / static_cast<double>(probe.size());
    };
    for (size_t r : ranks) {
        rep.joint_proxy[r] = run_with_rank(r, true);
        rep.per_head_proxy[r] = run_with_rank(std::min(r, dh), false);
    }
    return rep;
}

}  // namespace ditlab
