#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ditlab/numkit/autodiff.hpp"
#include "ditlab/numkit/rng.hpp"
#include "ditlab/mmdit/config.hpp"

namespace ditlab {

struct Linear {
    Var w;  // [in x out]
    Var b;  // [out]
};

inline Linear make_linear(size_t in, size_t out, Rng& rng, double gain = 1.0) {
    double std = gain / std::sqrt(static_cast<double>(in));
    return Linear{param(rng.normal_tensor({in, out}, 0.0, std)), param(Tensor({out}))};
}

inline Linear zero_linear(size_t in, size_t out) {
    return Linear{param(Tensor({in, out})), param(Tensor({out}))};
}

inline Var fwd_linear(const Linear& l, const Var& x) { return linear(x, l.w, l.b); }

// Precomputed per-timestep modulation coefficients replacing the AdaLN
// projections. Slot order mirrors the dynamic layout: DS blocks carry
// 12 slots (img shift1,scale1,gate1,shift2,scale2,gate2 then txt likewise),
// SS blocks carry 3 (shift,scale,gate). One [n_timesteps x d] table per slot.
struct StaticLnTable {
    std::vector<double> timesteps;                 // ascending sampler grid
    std::vector<std::vector<Tensor>> ds;           // [n_ds][12]
    std::vector<std::vector<Tensor>> ss;           // [n_ss][3]

    size_t nearest(double t) const {
        if (timesteps.empty()) throw ShapeError("static_ln: empty table");
        size_t best = 0;
        double bd = std::fabs(timesteps[0] - t);
        for (size_t i = 1; i < timesteps.size(); ++i) {
            double d = std::fabs(timesteps[i] - t);
            if (d < bd) {
                bd = d;
                best = i;
            }
        }
        return best;
    }
};

struct DsBlockParams {
    // modality index: 0 = img, 1 = txt
    Linear attn_q[2], attn_k[2], attn_v[2], attn_o[2];
    Linear ffn1[2], ffn2[2];
    std::optional<Linear> adaln[2];  // d -> 6d; removed once Static-LN is active
};

struct SsBlockParams {
    Linear fused_in;                 // d -> 3d + ffn_mult*d  (q,k,v,mlp)
    Linear fused_out;                // d + ffn_mult*d -> d   (attn,mlp)
    std::optional<Linear> adaln;     // d -> 3d
};

struct MMDiTParams {
    ModelConfig cfg;
    Linear img_in;                   // latent_channels -> d
    Linear txt_in;                   // txt_in_dim -> d
    Linear time_mlp1, time_mlp2;     // t_emb_dim -> d -> d
    Linear pooled_mlp1, pooled_mlp2; // pooled_dim -> d -> d
    std::vector<DsBlockParams> ds;
    std::vector<SsBlockParams> ss;
    Linear out_proj;                 // d -> latent_channels
    std::optional<StaticLnTable> static_ln;

    bool uses_static_ln() const { return static_ln.has_value(); }
};

inline MMDiTParams init_mmdit(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    MMDiTParams p;
    p.cfg = cfg;
    size_t d = cfg.d, f = cfg.ffn_mult;
    p.img_in = make_linear(cfg.latent_channels, d, rng);
    p.txt_in = make_linear(cfg.txt_in_dim, d, rng);
    p.time_mlp1 = make_linear(cfg.t_emb_dim, d, rng);
    p.time_mlp2 = make_linear(d, d, rng);
    p.pooled_mlp1 = make_linear(cfg.pooled_dim, d, rng);
    p.pooled_mlp2 = make_linear(d, d, rng);
    for (size_t i = 0; i < cfg.n_ds; ++i) {
        DsBlockParams b;
        for (int m = 0; m < 2; ++m) {
            b.attn_q[m] = make_linear(d, d, rng);
            b.attn_k[m] = make_linear(d, d, rng);
            b.attn_v[m] = make_linear(d, d, rng);
            b.attn_o[m] = make_linear(d, d, rng);
            b.ffn1[m] = make_linear(d, f * d, rng);
            b.ffn2[m] = make_linear(f * d, d, rng);
            b.adaln[m] = make_linear(d, 6 * d, rng, 0.1);
        }
        p.ds.push_back(std::move(b));
    }
    for (size_t i = 0; i < cfg.n_ss; ++i) {
        SsBlockParams b;
        b.fused_in = make_linear(d, 3 * d + f * d, rng);
        b.fused_out = make_linear(d + f * d, d, rng);
        b.adaln = make_linear(d, 3 * d, rng, 0.1);
        p.ss.push_back(std::move(b));
    }
    p.out_proj = make_linear(d, cfg.latent_channels, rng);
    return p;
}

// Fixed-order walk over every learnable tensor; the one ordering used by the
// optimizer, the checkpoint writer and the brute-force parameter counter.
inline void for_each_param(MMDiTParams& p, const std::function<void(const std::string&, Var&)>& fn) {
    auto lin = [&](const std::string& name, Linear& l) {
        fn(name + ".w", l.w);
        fn(name + ".b", l.b);
    };
    lin("img_in", p.img_in);
    lin("txt_in", p.txt_in);
    lin("time_mlp1", p.time_mlp1);
    lin("time_mlp2", p.time_mlp2);
    lin("pooled_mlp1", p.pooled_mlp1);
    lin("pooled_mlp2", p.pooled_mlp2);
    const char* mod[2] = {"img", "txt"};
    for (size_t i = 0; i < p.ds.size(); ++i) {
        std::string base = "ds." + std::to_string(i) + ".";
        for (int m = 0; m < 2; ++m) {
            lin(base + mod[m] + ".q", p.ds[i].attn_q[m]);
            lin(base + mod[m] + ".k", p.ds[i].attn_k[m]);
            lin(base + mod[m] + ".v", p.ds[i].attn_v[m]);
            lin(base + mod[m] + ".o", p.ds[i].attn_o[m]);
            lin(base + mod[m] + ".ffn1", p.ds[i].ffn1[m]);
            lin(base + mod[m] + ".ffn2", p.ds[i].ffn2[m]);
            if (p.ds[i].adaln[m]) lin(base + mod[m] + ".adaln", *p.ds[i].adaln[m]);
        }
    }
    for (size_t i = 0; i < p.ss.size(); ++i) {
        std::string base = "ss." + std::to_string(i) + ".";
        lin(base + "fused_in", p.ss[i].fused_in);
        lin(base + "fused_out", p.ss[i].fused_out);
        if (p.ss[i].adaln) lin(base + "adaln", *p.ss[i].adaln);
    }
    lin("out_proj", p.out_proj);
}

inline void set_requires_grad(MMDiTParams& p, bool rg) {
    for_each_param(p, [rg](const std::string&, Var& v) { v->requires_grad = rg; });
}

/// Deep copy (fresh leaf nodes, same values).
inline MMDiTParams clone(const MMDiTParams& src_in) {
    MMDiTParams& src = const_cast<MMDiTParams&>(src_in);
    MMDiTParams dst = src;  // copies shared_ptrs and table
    std::vector<Var*> slots;
    for_each_param(dst, [&](const std::string&, Var& v) { slots.push_back(&v); });
    for (Var* s : slots) {
        Var fresh = param((*s)->value);
        fresh->requires_grad = (*s)->requires_grad;
        *s = fresh;
    }
    return dst;
}

}  // namespace ditlab
