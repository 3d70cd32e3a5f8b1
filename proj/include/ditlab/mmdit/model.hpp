#pragma once

#include <functional>
#include <vector>

#include "ditlab/mmdit/params.hpp"
#include "ditlab/mmdit/rope.hpp"

namespace ditlab {

// Per-block forward record: stream hidden states around the block and the
// per-head pre-projection attention outputs softmax(QK^T)V. The analysis and
// distillation modules both feed on this.
struct BlockTraceEntry {
    Var img_in, img_out;
    Var txt_in, txt_out;
    std::vector<Var> head_feats;   // H entries, each [T_total x d_H]
    std::vector<Tensor> coeffs;    // modulation vectors; DS: 12 (img 6, txt 6), SS: 3
};

struct ForwardTrace {
    std::vector<BlockTraceEntry> blocks;
};

struct ForwardHooks {
    // replaces a block's pre-projection head features at inference (SVD proxy);
    // receives and returns H tensors of identical shapes
    std::function<std::vector<Tensor>(size_t block, const std::vector<Tensor>&)> feats_surgeon;
    // test hook: force joint attention to degrade to per-modality attention
    bool mask_cross_modality = false;
    // image-token slot -> grid position index (permutation tests, default identity)
    const std::vector<size_t>* img_position_ids = nullptr;
};

inline Tensor timestep_embedding(double t, size_t dim) {
    if (dim % 2 != 0) throw ShapeError("timestep_embedding: dim must be even");
    size_t half = dim / 2;
    Tensor e({1, dim});
    double ts = 1000.0 * t;
    for (size_t i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        e.at(0, i) = std::cos(ts * freq);
        e.at(0, half + i) = std::sin(ts * freq);
    }
    return e;
}

// ---------------------------------------------------------------------------
// AdaLN modulation
// ---------------------------------------------------------------------------

/// gate * sublayer((1 + scale) * LN(x) + shift). Arity 3 applies one
/// sublayer and returns the gated branch (residual added by the caller);
/// arity 6 runs the double-stream wiring: two gated sublayers with residuals.
inline Var adaln_modulate(const Var& x, const std::vector<Var>& coeffs,
                          const std::function<Var(const Var&)>& sub1,
                          const std::function<Var(const Var&)>& sub2 = nullptr) {
    auto premod = [](const Var& h, const Var& shift, const Var& scale) {
        return add(mul(layer_norm(h), add_scalar(scale, 1.0)), shift);
    };
    if (coeffs.size() == 3) {
        return mul(sub1(premod(x, coeffs[0], coeffs[1])), coeffs[2]);
    }
    if (coeffs.size() == 6) {
        if (!sub2) throw ShapeError("adaln_modulate: arity 6 needs two sublayers");
        Var h = add(x, mul(sub1(premod(x, coeffs[0], coeffs[1])), coeffs[2]));
        return add(h, mul(sub2(premod(h, coeffs[3], coeffs[4])), coeffs[5]));
    }
    throw ShapeError("adaln_modulate: expected 3 or 6 coefficient vectors");
}

// ---------------------------------------------------------------------------
// Joint attention
// ---------------------------------------------------------------------------

struct JointAttnOut {
    Var txt, img;                 // pre-projection outputs per modality
    std::vector<Var> head_feats;  // per head [T_total x d_H]
};

/// Text and image tokens attend jointly over the concatenated sequence
/// [txt ; img]. Returns per-modality slices plus per-head features.
using BlockFeatsSurgeon = std::function<std::vector<Tensor>(const std::vector<Tensor>&)>;

inline JointAttnOut joint_attention(const Var& q_txt, const Var& k_txt, const Var& v_txt,
                                    const Var& q_img, const Var& k_img, const Var& v_img,
                                    size_t H, size_t d_H, const Tensor& angles,
                                    bool mask_cross = false,
                                    const BlockFeatsSurgeon& surgeon = nullptr) {
    if (q_txt->value.cols() != H * d_H || q_img->value.cols() != H * d_H) {
        throw ShapeError("joint_attention: head dims inconsistent with H * d_H");
    }
    size_t t_txt = q_txt->value.rows();
    size_t t_img = q_img->value.rows();
    size_t t_all = t_txt + t_img;
    if (angles.rows() != t_all || angles.cols() != d_H / 2) {
        throw ShapeError("joint_attention: rope table does not match sequence");
    }

    Var q = concat_rows({q_txt, q_img});
    Var k = concat_rows({k_txt, k_img});
    Var v = concat_rows({v_txt, v_img});

    Var mask;
    if (mask_cross) {
        Tensor m({t_all, t_all});
        for (size_t i = 0; i < t_all; ++i) {
            for (size_t j = 0; j < t_all; ++j) {
                bool itxt = i < t_txt, jtxt = j < t_txt;
                if (itxt != jtxt) m.at(i, j) = -1e30;
            }
        }
        mask = constant(m);
    }

    double scl = 1.0 / std::sqrt(static_cast<double>(d_H));
    JointAttnOut out;
    out.head_feats.reserve(H);
    for (size_t h = 0; h < H; ++h) {
        Var qh = rope_rotate(slice_cols(q, h * d_H, (h + 1) * d_H), angles);
        Var kh = rope_rotate(slice_cols(k, h * d_H, (h + 1) * d_H), angles);
        Var vh = slice_cols(v, h * d_H, (h + 1) * d_H);
        Var scores = scale(matmul(qh, transpose(kh)), scl);
        if (mask) scores = add(scores, mask);
        Var oh = matmul(softmax_rows(scores), vh);  // [T_all x d_H]
        out.head_feats.push_back(oh);
    }
    if (surgeon) {
        std::vector<Tensor> feats;
        feats.reserve(H);
        for (const auto& f : out.head_feats) feats.push_back(f->value);
        std::vector<Tensor> replaced = surgeon(feats);
        if (replaced.size() != H) throw ShapeError("feats surgeon changed head count");
        for (size_t h = 0; h < H; ++h) {
            if (!replaced[h].same_shape(out.head_feats[h]->value)) {
                throw ShapeError("feats surgeon changed feature shape");
            }
            out.head_feats[h] = constant(replaced[h]);
        }
    }
    Var joined = concat_cols(out.head_feats);  // [T_all x d]
    out.txt = slice_rows(joined, 0, t_txt);
    out.img = slice_rows(joined, t_txt, t_all);
    return out;
}

// ---------------------------------------------------------------------------
// Conditioning
// ---------------------------------------------------------------------------

struct CondState {
    Var raw;  // time_mlp(t) + pooled_mlp(pooled), [1 x d]
    Var act;  // silu(raw), input to every AdaLN projection
    Var time; // time_mlp(t) alone, [1 x d]; PTD conditioning heads feed on it
};

inline Var mlp2(const Linear& l1, const Linear& l2, const Var& x) {
    return fwd_linear(l2, silu(fwd_linear(l1, x)));
}

inline CondState compute_cond(MMDiTParams& p, double t, const Var& pooled) {
    if (t < 0.0 || t > 1.0) throw ShapeError("forward: t must lie in [0, 1]");
    Var temb = constant(timestep_embedding(t, p.cfg.t_emb_dim));
    Var pool2d = reshape(pooled, {1, p.cfg.pooled_dim});
    CondState c;
    c.time = mlp2(p.time_mlp1, p.time_mlp2, temb);
    c.raw = add(c.time, mlp2(p.pooled_mlp1, p.pooled_mlp2, pool2d));
    c.act = silu(c.raw);
    return c;
}

namespace detail {
inline Var coeff_slice(const Var& row, size_t d, size_t slot) {
    return reshape(slice_cols(row, slot * d, (slot + 1) * d), {d});
}
}  // namespace detail

/// Modulation vectors for one block: dynamic AdaLN projection or Static-LN
/// table lookup. DS blocks: 6 per modality. SS blocks: 3.
inline std::vector<Var> block_coeffs(MMDiTParams& p, const CondState& cond, double t,
                                     bool is_ds, size_t idx, int modality) {
    size_t d = p.cfg.d;
    size_t count = is_ds ? 6 : 3;
    std::vector<Var> out;
    out.reserve(count);
    if (p.static_ln) {
        const StaticLnTable& tab = *p.static_ln;
        size_t row = tab.nearest(t);
        const auto& slots = is_ds ? tab.ds[idx] : tab.ss[idx];
        size_t base = is_ds ? static_cast<size_t>(modality) * 6 : 0;
        for (size_t s = 0; s < count; ++s) {
            const Tensor& table = slots[base + s];
            Tensor vec({d});
            for (size_t j = 0; j < d; ++j) vec.at(j) = table.at(row, j);
            out.push_back(constant(vec));
        }
        return out;
    }
    const Linear& proj = is_ds ? *p.ds[idx].adaln[modality] : *p.ss[idx].adaln;
    Var all = fwd_linear(proj, cond.act);  // [1 x count*d]
    for (size_t s = 0; s < count; ++s) out.push_back(detail::coeff_slice(all, d, s));
    return out;
}

// ---------------------------------------------------------------------------
// Block runners
// ---------------------------------------------------------------------------

struct StreamPair {
    Var img, txt;
};

inline StreamPair run_ds_block(MMDiTParams& p, size_t i, Var img, Var txt,
                               const std::vector<Var>& ci, const std::vector<Var>& ct,
                               const Tensor& angles, const ForwardHooks* hooks,
                               size_t global_idx, BlockTraceEntry* te) {
    DsBlockParams& b = p.ds[i];
    auto premod = [](const Var& h, const Var& shift, const Var& scale) {
        return add(mul(layer_norm(h), add_scalar(scale, 1.0)), shift);
    };
    Var mi = premod(img, ci[0], ci[1]);
    Var mt = premod(txt, ct[0], ct[1]);

    Var qt = fwd_linear(b.attn_q[1], mt), kt = fwd_linear(b.attn_k[1], mt), vt = fwd_linear(b.attn_v[1], mt);
    Var qi = fwd_linear(b.attn_q[0], mi), ki = fwd_linear(b.attn_k[0], mi), vi = fwd_linear(b.attn_v[0], mi);

    BlockFeatsSurgeon surgeon;
    if (hooks && hooks->feats_surgeon) {
        surgeon = [hooks, global_idx](const std::vector<Tensor>& f) { return hooks->feats_surgeon(global_idx, f); };
    }
    JointAttnOut att = joint_attention(qt, kt, vt, qi, ki, vi, p.cfg.H, p.cfg.d_H, angles,
                                       hooks && hooks->mask_cross_modality, surgeon);
    img = add(img, mul(fwd_linear(b.attn_o[0], att.img), ci[2]));
    txt = add(txt, mul(fwd_linear(b.attn_o[1], att.txt), ct[2]));

    auto ffn = [&](int m, const Var& h) { return fwd_linear(b.ffn2[m], gelu(fwd_linear(b.ffn1[m], h))); };
    img = add(img, mul(ffn(0, premod(img, ci[3], ci[4])), ci[5]));
    txt = add(txt, mul(ffn(1, premod(txt, ct[3], ct[4])), ct[5]));

    if (te) te->head_feats = std::move(att.head_feats);
    return {img, txt};
}

inline StreamPair run_ss_block(MMDiTParams& p, size_t i, Var img, Var txt,
                               const std::vector<Var>& c, const Tensor& angles,
                               const ForwardHooks* hooks, size_t global_idx, BlockTraceEntry* te) {
    SsBlockParams& b = p.ss[i];
    size_t d = p.cfg.d, fd = p.cfg.ffn_mult * p.cfg.d;
    size_t t_txt = txt->value.rows();

    Var x = concat_rows({txt, img});
    Var m = add(mul(layer_norm(x), add_scalar(c[1], 1.0)), c[0]);
    Var fused = fwd_linear(b.fused_in, m);  // [T x (3d + fd)]
    Var q = slice_cols(fused, 0, d);
    Var k = slice_cols(fused, d, 2 * d);
    Var v = slice_cols(fused, 2 * d, 3 * d);
    Var h_mlp = slice_cols(fused, 3 * d, 3 * d + fd);

    BlockFeatsSurgeon surgeon;
    if (hooks && hooks->feats_surgeon) {
        surgeon = [hooks, global_idx](const std::vector<Tensor>& f) { return hooks->feats_surgeon(global_idx, f); };
    }
    size_t t_all = x->value.rows();
    JointAttnOut att = joint_attention(slice_rows(q, 0, t_txt), slice_rows(k, 0, t_txt), slice_rows(v, 0, t_txt),
                                       slice_rows(q, t_txt, t_all), slice_rows(k, t_txt, t_all), slice_rows(v, t_txt, t_all),
                                       p.cfg.H, p.cfg.d_H, angles,
                                       hooks && hooks->mask_cross_modality, surgeon);
    Var attn_full = concat_rows({att.txt, att.img});
    Var out = fwd_linear(b.fused_out, concat_cols({attn_full, gelu(h_mlp)}));
    x = add(x, mul(out, c[2]));

    if (te) te->head_feats = std::move(att.head_feats);
    return {slice_rows(x, t_txt, t_all), slice_rows(x, 0, t_txt)};
}

// ---------------------------------------------------------------------------
// Full forward
// ---------------------------------------------------------------------------

/// Predicted velocity for latent tokens x [T_img x c] under prompt
/// conditioning. Fills `trace` (one entry per block, DS then SS) when given.
inline Var mmdit_forward(MMDiTParams& p, const Var& x, const Var& prompt, double t, const Var& pooled,
                         ForwardTrace* trace = nullptr, const ForwardHooks* hooks = nullptr) {
    const ModelConfig& cfg = p.cfg;
    if (x->value.ndim() != 2 || x->value.rows() != cfg.img_tokens() || x->value.cols() != cfg.latent_channels) {
        throw ShapeError("forward: latent tokens expected " + std::to_string(cfg.img_tokens()) + "x" +
                         std::to_string(cfg.latent_channels) + ", got " + x->value.shape_str());
    }
    if (prompt->value.ndim() != 2 || prompt->value.rows() != cfg.txt_len || prompt->value.cols() != cfg.txt_in_dim) {
        throw ShapeError("forward: prompt embedding shape mismatch " + prompt->value.shape_str());
    }
    if (pooled->value.numel() != cfg.pooled_dim) throw ShapeError("forward: pooled dim mismatch");

    CondState cond = compute_cond(p, t, pooled);
    Rope2D rope = rope_table(cfg.img_grid, cfg.d_H, cfg.txt_len, static_cast<double>(cfg.img_grid));
    Tensor angles = rope.sequence_angles(hooks ? hooks->img_position_ids : nullptr);

    Var img = fwd_linear(p.img_in, x);
    Var txt = fwd_linear(p.txt_in, prompt);

    if (trace) trace->blocks.clear();
    auto begin_entry = [&](Var& i_in, Var& t_in) -> BlockTraceEntry* {
        if (!trace) return nullptr;
        trace->blocks.emplace_back();
        trace->blocks.back().img_in = i_in;
        trace->blocks.back().txt_in = t_in;
        return &trace->blocks.back();
    };

    for (size_t i = 0; i < cfg.n_ds; ++i) {
        BlockTraceEntry* te = begin_entry(img, txt);
        std::vector<Var> ci = block_coeffs(p, cond, t, true, i, 0);
        std::vector<Var> ct = block_coeffs(p, cond, t, true, i, 1);
        if (te) {
            for (const auto& cvar : ci) te->coeffs.push_back(cvar->value);
            for (const auto& cvar : ct) te->coeffs.push_back(cvar->value);
        }
        StreamPair sp = run_ds_block(p, i, img, txt, ci, ct, angles, hooks, i, te);
        img = sp.img;
        txt = sp.txt;
        if (te) {
            te->img_out = img;
            te->txt_out = txt;
        }
    }
    for (size_t i = 0; i < cfg.n_ss; ++i) {
        BlockTraceEntry* te = begin_entry(img, txt);
        std::vector<Var> c = block_coeffs(p, cond, t, false, i, 0);
        if (te) {
            for (const auto& cvar : c) te->coeffs.push_back(cvar->value);
        }
        StreamPair sp = run_ss_block(p, i, img, txt, c, angles, hooks, cfg.n_ds + i, te);
        img = sp.img;
        txt = sp.txt;
        if (te) {
            te->img_out = img;
            te->txt_out = txt;
        }
    }
    return fwd_linear(p.out_proj, layer_norm(img));
}

/// Value-level convenience for inference paths.
inline Tensor velocity(MMDiTParams& p, const Tensor& x, const Tensor& prompt, double t, const Tensor& pooled,
                       ForwardTrace* trace = nullptr, const ForwardHooks* hooks = nullptr) {
    return mmdit_forward(p, constant(x), constant(prompt), t, constant(pooled), trace, hooks)->value;
}

}  // namespace ditlab
