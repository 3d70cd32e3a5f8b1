#pragma once

#include <vector>

#include "ditlab/mmdit/params.hpp"

namespace ditlab {

namespace detail {
using Keep = std::vector<size_t>;

inline Keep keep_leading(size_t n) {
    Keep k(n);
    for (size_t i = 0; i < n; ++i) k[i] = i;
    return k;
}

// per-head leading coordinates: {h * d_H + j : h < H, j < keep_per_head}
inline Keep keep_head_dims(size_t H, size_t d_H, size_t keep_per_head) {
    Keep k;
    k.reserve(H * keep_per_head);
    for (size_t h = 0; h < H; ++h)
        for (size_t j = 0; j < keep_per_head; ++j) k.push_back(h * d_H + j);
    return k;
}

// concatenated segments of equal old length, each sliced by `inner`
inline Keep keep_segments(size_t n_seg, size_t seg_len, const Keep& inner) {
    Keep k;
    k.reserve(n_seg * inner.size());
    for (size_t s = 0; s < n_seg; ++s)
        for (size_t i : inner) k.push_back(s * seg_len + i);
    return k;
}

inline Keep keep_concat(const Keep& a, size_t a_extent, const Keep& b) {
    Keep k = a;
    for (size_t i : b) k.push_back(a_extent + i);
    return k;
}

inline Tensor gather2d(const Tensor& w, const Keep& rows, const Keep& cols) {
    Tensor out({rows.size(), cols.size()});
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = 0; j < cols.size(); ++j) out.at(i, j) = w.at(rows[i], cols[j]);
    return out;
}

inline Tensor gather1d(const Tensor& b, const Keep& idx) {
    Tensor out({idx.size()});
    for (size_t i = 0; i < idx.size(); ++i) out.at(i) = b.at(idx[i]);
    return out;
}

inline Linear slice_linear(const Linear& l, const Keep& rows, const Keep& cols) {
    return Linear{param(gather2d(l.w->value, rows, cols)), param(gather1d(l.b->value, cols))};
}
}  // namespace detail

/// Step C1: uniformly reduce the head count, keeping d_H fixed. The student
/// is initialized from the leading target_H heads, i.e. the top-left
/// d' x d' submatrices (d' = target_H * d_H) plus the matching rows of the
/// FFNs; AdaLN and fused projections slice each coefficient segment.
inline MMDiTParams prune_heads(const MMDiTParams& teacher_in, size_t target_H) {
    MMDiTParams& teacher = const_cast<MMDiTParams&>(teacher_in);
    const ModelConfig& tc = teacher.cfg;
    if (target_H < 1 || target_H > tc.H) throw ShapeError("prune_heads: target_H out of range");
    if (teacher.uses_static_ln()) throw ShapeError("prune_heads: run before Static-LN");
    if (target_H == tc.H) return clone(teacher);

    using namespace detail;
    size_t d = tc.d, f = tc.ffn_mult;
    size_t nd = target_H * tc.d_H;
    Keep hid = keep_leading(nd);           // hidden coords = leading heads
    Keep ffn = keep_leading(f * nd);
    Keep full_in[2] = {keep_leading(tc.latent_channels), keep_leading(tc.txt_in_dim)};
    (void)full_in;

    ModelConfig cfg = tc;
    cfg.H = target_H;
    cfg.d = nd;
    MMDiTParams s;
    s.cfg = cfg;
    s.img_in = slice_linear(teacher.img_in, keep_leading(tc.latent_channels), hid);
    s.txt_in = slice_linear(teacher.txt_in, keep_leading(tc.txt_in_dim), hid);
    s.time_mlp1 = slice_linear(teacher.time_mlp1, keep_leading(tc.t_emb_dim), hid);
    s.time_mlp2 = slice_linear(teacher.time_mlp2, hid, hid);
    s.pooled_mlp1 = slice_linear(teacher.pooled_mlp1, keep_leading(tc.pooled_dim), hid);
    s.pooled_mlp2 = slice_linear(teacher.pooled_mlp2, hid, hid);
    for (const auto& b : teacher.ds) {
        DsBlockParams nb;
        for (int m = 0; m < 2; ++m) {
            nb.attn_q[m] = slice_linear(b.attn_q[m], hid, hid);
            nb.attn_k[m] = slice_linear(b.attn_k[m], hid, hid);
            nb.attn_v[m] = slice_linear(b.attn_v[m], hid, hid);
            nb.attn_o[m] = slice_linear(b.attn_o[m], hid, hid);
            nb.ffn1[m] = slice_linear(b.ffn1[m], hid, ffn);
            nb.ffn2[m] = slice_linear(b.ffn2[m], ffn, hid);
            nb.adaln[m] = slice_linear(*b.adaln[m], hid, keep_segments(6, d, hid));
        }
        s.ds.push_back(std::move(nb));
    }
    for (const auto& b : teacher.ss) {
        SsBlockParams nb;
        Keep in_cols = keep_concat(keep_segments(3, d, hid), 3 * d, ffn);
        nb.fused_in = slice_linear(b.fused_in, hid, in_cols);
        Keep out_rows = keep_concat(hid, d, ffn);
        nb.fused_out = slice_linear(b.fused_out, out_rows, hid);
        nb.adaln = slice_linear(*b.adaln, hid, keep_segments(3, d, hid));
        s.ss.push_back(std::move(nb));
    }
    s.out_proj = slice_linear(teacher.out_proj, hid, keep_leading(tc.latent_channels));
    return s;
}

/// Step C2: reduce the per-head dim, keeping H fixed. Head-structured axes
/// keep the leading target_dH coordinates of every head; plain hidden axes
/// keep the leading H * target_dH coordinates.
inline MMDiTParams reduce_head_dim(const MMDiTParams& teacher_in, size_t target_dH) {
    MMDiTParams& teacher = const_cast<MMDiTParams&>(teacher_in);
    const ModelConfig& tc = teacher.cfg;
    if (target_dH < 1 || target_dH > tc.d_H) throw ShapeError("reduce_head_dim: target_dH out of range");
    if (teacher.uses_static_ln()) throw ShapeError("reduce_head_dim: run before Static-LN");
    if (target_dH == tc.d_H) return clone(teacher);

    using namespace detail;
    size_t d = tc.d, f = tc.ffn_mult;
    size_t nd = tc.H * target_dH;
    Keep hid = keep_leading(nd);
    Keep heads = keep_head_dims(tc.H, tc.d_H, target_dH);
    Keep ffn = keep_leading(f * nd);

    ModelConfig cfg = tc;
    cfg.d_H = target_dH;
    cfg.d = nd;
    MMDiTParams s;
    s.cfg = cfg;
    s.img_in = slice_linear(teacher.img_in, keep_leading(tc.latent_channels), hid);
    s.txt_in = slice_linear(teacher.txt_in, keep_leading(tc.txt_in_dim), hid);
    s.time_mlp1 = slice_linear(teacher.time_mlp1, keep_leading(tc.t_emb_dim), hid);
    s.time_mlp2 = slice_linear(teacher.time_mlp2, hid, hid);
    s.pooled_mlp1 = slice_linear(teacher.pooled_mlp1, keep_leading(tc.pooled_dim), hid);
    s.pooled_mlp2 = slice_linear(teacher.pooled_mlp2, hid, hid);
    for (const auto& b : teacher.ds) {
        DsBlockParams nb;
        for (int m = 0; m < 2; ++m) {
            nb.attn_q[m] = slice_linear(b.attn_q[m], hid, heads);
            nb.attn_k[m] = slice_linear(b.attn_k[m], hid, heads);
            nb.attn_v[m] = slice_linear(b.attn_v[m], hid, heads);
            nb.attn_o[m] = slice_linear(b.attn_o[m], heads, hid);
            nb.ffn1[m] = slice_linear(b.ffn1[m], hid, ffn);
            nb.ffn2[m] = slice_linear(b.ffn2[m], ffn, hid);
            nb.adaln[m] = slice_linear(*b.adaln[m], hid, keep_segments(6, d, hid));
        }
        s.ds.push_back(std::move(nb));
    }
    for (const auto& b : teacher.ss) {
        SsBlockParams nb;
        Keep in_cols = keep_concat(keep_segments(3, d, heads), 3 * d, ffn);
        nb.fused_in = slice_linear(b.fused_in, hid, in_cols);
        Keep out_rows = keep_concat(heads, d, ffn);
        nb.fused_out = slice_linear(b.fused_out, out_rows, hid);
        nb.adaln = slice_linear(*b.adaln, hid, keep_segments(3, d, hid));
        s.ss.push_back(std::move(nb));
    }
    s.out_proj = slice_linear(teacher.out_proj, hid, keep_leading(tc.latent_channels));
    return s;
}

/// Step C3: replace a contiguous run of SS blocks [begin, end) with one
/// block holding the arithmetic mean of their parameters.
inline MMDiTParams merge_blocks(const MMDiTParams& model_in, size_t begin, size_t end) {
    MMDiTParams& model = const_cast<MMDiTParams&>(model_in);
    if (model.uses_static_ln()) throw ShapeError("merge_blocks: run before Static-LN");
    if (!(begin < end && end <= model.cfg.n_ss)) throw ShapeError("merge_blocks: range outside SS blocks");
    if (end - begin < 2) throw ShapeError("merge_blocks: range must cover at least 2 blocks");

    MMDiTParams s = clone(model);
    size_t len = end - begin;
    // anchored arithmetic mean: exact when the blocks are identical
    auto mean_tensor = [&](const std::function<const Tensor&(SsBlockParams&)>& get) {
        const Tensor& first = get(s.ss[begin]);
        Tensor acc(first.shape());
        for (size_t i = begin + 1; i < end; ++i) {
            const Tensor& x = get(s.ss[i]);
            for (size_t j = 0; j < acc.numel(); ++j) acc.at(j) += x.at(j) - first.at(j);
        }
        Tensor out = first;
        for (size_t j = 0; j < out.numel(); ++j) out.at(j) = first.at(j) + acc.at(j) / static_cast<double>(len);
        return out;
    };
    auto mean_linear = [&](const std::function<Linear&(SsBlockParams&)>& get) {
        Tensor w = mean_tensor([&](SsBlockParams& b) -> const Tensor& { return get(b).w->value; });
        Tensor b = mean_tensor([&](SsBlockParams& bb) -> const Tensor& { return get(bb).b->value; });
        return Linear{param(std::move(w)), param(std::move(b))};
    };

    SsBlockParams merged;
    merged.fused_in = mean_linear([](SsBlockParams& b) -> Linear& { return b.fused_in; });
    merged.fused_out = mean_linear([](SsBlockParams& b) -> Linear& { return b.fused_out; });
    merged.adaln = mean_linear([](SsBlockParams& b) -> Linear& { return *b.adaln; });

    std::vector<SsBlockParams> out;
    for (size_t i = 0; i < begin; ++i) out.push_back(std::move(s.ss[i]));
    out.push_back(std::move(merged));
    for (size_t i = end; i < s.ss.size(); ++i) out.push_back(std::move(s.ss[i]));
    s.ss = std::move(out);
    s.cfg.n_ss -= len - 1;
    return s;
}

/// Comparison mode for the merge-vs-prune ablation: drop the range entirely.
inline MMDiTParams drop_blocks(const MMDiTParams& model_in, size_t begin, size_t end) {
    MMDiTParams& model = const_cast<MMDiTParams&>(model_in);
    if (!(begin < end && end <= model.cfg.n_ss)) throw ShapeError("drop_blocks: range outside SS blocks");
    if (end - begin >= model.cfg.n_ss) throw ShapeError("drop_blocks: cannot drop every SS block");
    MMDiTParams s = clone(model);
    std::vector<SsBlockParams> out;
    for (size_t i = 0; i < s.ss.size(); ++i) {
        if (i < begin || i >= end) out.push_back(std::move(s.ss[i]));
    }
    s.ss = std::move(out);
    s.cfg.n_ss -= end - begin;
    return s;
}

}  // namespace ditlab
