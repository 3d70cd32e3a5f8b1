#pragma once

#include "ditlab/mmdit/params.hpp"

namespace ditlab {

// Convolutional token down/upsamplers. Grids are [side, side, d] with the
// channel axis last so per-channel scale/shift broadcasts directly.

struct ResBlock {
    Var conv1_w, conv1_b;  // 3x3 stride 1
    Var conv2_w, conv2_b;  // 3x3 stride 1, zero-init so the block starts as identity
    Linear cond_head;      // time vector d -> 2d (scale, shift), zero-init
};

struct DownsamplerParams {
    ResBlock res;
    Var down_w, down_b;  // 3x3 stride 2; initialized as 2x2 average pooling
};

struct UpsamplerParams {
    ResBlock res1;
    Var conv_w, conv_b;  // 3x3 stride 1 after bilinear; initialized as identity
    ResBlock res2;
};

// Residual 4-layer output MLP replacing the base projection on routed steps:
// lin4(r3(r2(r1(x)))) with r_i(x) = x + B_i silu(A_i x). Zero-init B_i and
// lin4 copied from the base projection keep it bit-equal to the base at init.
struct OutMlpParams {
    Linear a1, b1, a2, b2, a3, b3;
    Linear lin4;  // d -> latent_channels
};

struct PtdParams {
    DownsamplerParams down;
    UpsamplerParams up;
    OutMlpParams out_mlp;
};

namespace detail {
inline Var conv_kernel_zero(size_t c) { return param(Tensor({3, 3, c, c})); }

inline Var conv_kernel_random(size_t c, Rng& rng, double gain) {
    double std = gain / std::sqrt(9.0 * static_cast<double>(c));
    return param(rng.normal_tensor({3, 3, c, c}, 0.0, std));
}

// center-tap channel identity
inline Var conv_kernel_identity(size_t c) {
    Tensor w({3, 3, c, c});
    for (size_t ch = 0; ch < c; ++ch) w.at((1 * 3 + 1) * c * c + ch * c + ch) = 1.0;
    return param(std::move(w));
}

// taps (0,0),(0,1),(1,0),(1,1) at 0.25: exact 2x2 average pooling at stride 2
inline Var conv_kernel_avgpool(size_t c) {
    Tensor w({3, 3, c, c});
    for (int ki = 1; ki <= 2; ++ki)
        for (int kj = 1; kj <= 2; ++kj)
            for (size_t ch = 0; ch < c; ++ch)
                w.at((static_cast<size_t>(ki) * 3 + static_cast<size_t>(kj)) * c * c + ch * c + ch) = 0.25;
    return param(std::move(w));
}

inline ResBlock init_res_block(size_t c, Rng& rng) {
    ResBlock r;
    r.conv1_w = conv_kernel_random(c, rng, 0.5);
    r.conv1_b = param(Tensor({c}));
    r.conv2_w = conv_kernel_zero(c);
    r.conv2_b = param(Tensor({c}));
    r.cond_head = zero_linear(c, 2 * c);
    return r;
}

/// x + conv2(silu(modulate(conv1(silu(x))))), scale/shift from the timestep.
inline Var run_res_block(ResBlock& r, const Var& x, const Var& time_d) {
    size_t c = x->value.dim(2);
    Var h = conv3x3(silu(x), r.conv1_w, r.conv1_b, 1);
    Var ss = fwd_linear(r.cond_head, time_d);  // [1 x 2c]
    Var sc = reshape(slice_cols(ss, 0, c), {c});
    Var sh = reshape(slice_cols(ss, c, 2 * c), {c});
    h = add(mul(h, add_scalar(sc, 1.0)), sh);
    h = conv3x3(silu(h), r.conv2_w, r.conv2_b, 1);
    return add(x, h);
}
}  // namespace detail

inline PtdParams init_ptd(const ModelConfig& cfg, const Linear& base_out_proj, Rng& rng) {
    size_t c = cfg.d;
    PtdParams p;
    p.down.res = detail::init_res_block(c, rng);
    p.down.down_w = detail::conv_kernel_avgpool(c);
    p.down.down_b = param(Tensor({c}));
    p.up.res1 = detail::init_res_block(c, rng);
    p.up.conv_w = detail::conv_kernel_identity(c);
    p.up.conv_b = param(Tensor({c}));
    p.up.res2 = detail::init_res_block(c, rng);
    p.out_mlp.a1 = make_linear(c, c, rng, 0.5);
    p.out_mlp.b1 = zero_linear(c, c);
    p.out_mlp.a2 = make_linear(c, c, rng, 0.5);
    p.out_mlp.b2 = zero_linear(c, c);
    p.out_mlp.a3 = make_linear(c, c, rng, 0.5);
    p.out_mlp.b3 = zero_linear(c, c);
    p.out_mlp.lin4 = Linear{param(base_out_proj.w->value), param(base_out_proj.b->value)};
    return p;
}

/// Token grid sqrt(T) x sqrt(T) x d -> quarter-token grid, channels unchanged.
inline Var ptd_downsample(DownsamplerParams& d, const Var& tokens, size_t grid, const Var& time_d) {
    if (grid % 2 != 0) throw ShapeError("ptd_downsample: grid side must be even");
    size_t c = tokens->value.cols();
    if (tokens->value.rows() != grid * grid) throw ShapeError("ptd_downsample: token count mismatch");
    Var x = reshape(tokens, {grid, grid, c});
    x = detail::run_res_block(d.res, x, time_d);
    x = conv3x3(x, d.down_w, d.down_b, 2);
    return reshape(x, {(grid / 2) * (grid / 2), c});
}

/// Quarter grid -> full grid (inverse shape contract of the downsampler).
inline Var ptd_upsample(UpsamplerParams& u, const Var& tokens, size_t half_grid, const Var& time_d) {
    size_t c = tokens->value.cols();
    if (tokens->value.rows() != half_grid * half_grid) throw ShapeError("ptd_upsample: token count mismatch");
    Var x = reshape(tokens, {half_grid, half_grid, c});
    x = detail::run_res_block(u.res1, x, time_d);
    x = bilinear_up2(x);
    x = conv3x3(x, u.conv_w, u.conv_b, 1);
    x = detail::run_res_block(u.res2, x, time_d);
    return reshape(x, {(2 * half_grid) * (2 * half_grid), c});
}

inline Var ptd_out_mlp(OutMlpParams& m, const Var& h) {
    auto res = [&](Linear& a, Linear& b, const Var& x) { return add(x, fwd_linear(b, silu(fwd_linear(a, x)))); };
    Var x = res(m.a1, m.b1, h);
    x = res(m.a2, m.b2, x);
    x = res(m.a3, m.b3, x);
    return fwd_linear(m.lin4, x);
}

inline void for_each_param(PtdParams& p, const std::function<void(const std::string&, Var&)>& fn) {
    auto res = [&](const std::string& base, ResBlock& r) {
        fn(base + ".conv1.w", r.conv1_w);
        fn(base + ".conv1.b", r.conv1_b);
        fn(base + ".conv2.w", r.conv2_w);
        fn(base + ".conv2.b", r.conv2_b);
        fn(base + ".cond.w", r.cond_head.w);
        fn(base + ".cond.b", r.cond_head.b);
    };
    res("down.res", p.down.res);
    fn("down.conv.w", p.down.down_w);
    fn("down.conv.b", p.down.down_b);
    res("up.res1", p.up.res1);
    fn("up.conv.w", p.up.conv_w);
    fn("up.conv.b", p.up.conv_b);
    res("up.res2", p.up.res2);
    auto lin = [&](const std::string& n, Linear& l) {
        fn(n + ".w", l.w);
        fn(n + ".b", l.b);
    };
    lin("out_mlp.a1", p.out_mlp.a1);
    lin("out_mlp.b1", p.out_mlp.b1);
    lin("out_mlp.a2", p.out_mlp.a2);
    lin("out_mlp.b2", p.out_mlp.b2);
    lin("out_mlp.a3", p.out_mlp.a3);
    lin("out_mlp.b3", p.out_mlp.b3);
    lin("out_mlp.lin4", p.out_mlp.lin4);
}

inline void set_requires_grad(PtdParams& p, bool rg) {
    for_each_param(p, [rg](const std::string&, Var& v) { v->requires_grad = rg; });
}

inline PtdParams clone(const PtdParams& src_in) {
    PtdParams& src = const_cast<PtdParams&>(src_in);
    PtdParams dst = src;
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
