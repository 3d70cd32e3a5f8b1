#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ditlab/numkit/autodiff.hpp"
#include "ditlab/numkit/rng.hpp"
#include "ditlab/mmdit/params.hpp"

namespace ditlab {

struct TextEncoderConfig {
    size_t vocab = 16;
    size_t max_len = 8;
    size_t d_enc = 32;
    size_t heads = 2;
    size_t n_layers = 2;
    size_t ffn_mult = 2;
    size_t pooled_dim = 32;
    size_t adapter_out = 0;  // 0 = no adapter; otherwise tokens project to this dim
};

struct TextEncoderLayer {
    Linear qkv;   // d_enc -> 3 d_enc
    Linear out;   // d_enc -> d_enc
    Linear ffn1;  // d_enc -> m d_enc
    Linear ffn2;  // m d_enc -> d_enc
};

// Two self-attention layers over token embeddings plus learned positions.
// The optional adapter is a two-layer MLP with a skip path so a zero-init
// adapter at matching dims is an exact identity.
struct ToyTextEncoder {
    TextEncoderConfig cfg;
    Var embed;  // [vocab x d_enc]
    Var pos;    // [max_len x d_enc]
    std::vector<TextEncoderLayer> layers;
    Linear pooled_head;  // d_enc -> pooled_dim
    struct Adapter {
        Linear a1;    // d_enc -> out
        Linear a2;    // out -> out, zero-init
        std::optional<Linear> skip;  // only when d_enc != out
    };
    std::optional<Adapter> adapter;

    size_t out_dim() const { return cfg.adapter_out ? cfg.adapter_out : cfg.d_enc; }
};

inline ToyTextEncoder init_text_encoder(const TextEncoderConfig& cfg, Rng& rng) {
    if (cfg.d_enc % cfg.heads != 0) throw ShapeError("text encoder: d_enc must divide by heads");
    ToyTextEncoder e;
    e.cfg = cfg;
    e.embed = param(rng.normal_tensor({cfg.vocab, cfg.d_enc}, 0.0, 1.0));
    e.pos = param(rng.normal_tensor({cfg.max_len, cfg.d_enc}, 0.0, 0.3));
    for (size_t l = 0; l < cfg.n_layers; ++l) {
        TextEncoderLayer layer;
        layer.qkv = make_linear(cfg.d_enc, 3 * cfg.d_enc, rng);
        layer.out = make_linear(cfg.d_enc, cfg.d_enc, rng);
        layer.ffn1 = make_linear(cfg.d_enc, cfg.ffn_mult * cfg.d_enc, rng);
        layer.ffn2 = make_linear(cfg.ffn_mult * cfg.d_enc, cfg.d_enc, rng);
        e.layers.push_back(std::move(layer));
    }
    e.pooled_head = make_linear(cfg.d_enc, cfg.pooled_dim, rng);
    if (cfg.adapter_out) {
        ToyTextEncoder::Adapter a;
        a.a1 = make_linear(cfg.d_enc, cfg.adapter_out, rng);
        a.a2 = zero_linear(cfg.adapter_out, cfg.adapter_out);
        if (cfg.adapter_out != cfg.d_enc) a.skip = make_linear(cfg.d_enc, cfg.adapter_out, rng);
        e.adapter = std::move(a);
    }
    return e;
}

struct EncodedPrompt {
    Var tokens;  // [max_len x out_dim]
    Var pooled;  // [pooled_dim]
};

inline EncodedPrompt encode(ToyTextEncoder& e, const std::vector<int>& ids) {
    if (ids.size() != e.cfg.max_len) throw ShapeError("encode: caption length mismatch");
    size_t d = e.cfg.d_enc, dh = d / e.cfg.heads;
    Var x = add(gather_rows(e.embed, ids), e.pos);
    for (auto& l : e.layers) {
        Var h = layer_norm(x);
        Var qkv = fwd_linear(l.qkv, h);
        Var q = slice_cols(qkv, 0, d), k = slice_cols(qkv, d, 2 * d), v = slice_cols(qkv, 2 * d, 3 * d);
        std::vector<Var> heads;
        double scl = 1.0 / std::sqrt(static_cast<double>(dh));
        for (size_t hh = 0; hh < e.cfg.heads; ++hh) {
            Var qh = slice_cols(q, hh * dh, (hh + 1) * dh);
            Var kh = slice_cols(k, hh * dh, (hh + 1) * dh);
            Var vh = slice_cols(v, hh * dh, (hh + 1) * dh);
            heads.push_back(matmul(softmax_rows(scale(matmul(qh, transpose(kh)), scl)), vh));
        }
        x = add(x, fwd_linear(l.out, concat_cols(heads)));
        x = add(x, fwd_linear(l.ffn2, gelu(fwd_linear(l.ffn1, layer_norm(x)))));
    }
    Var final_state = layer_norm(x);

    EncodedPrompt out;
    Var pooled2d = fwd_linear(e.pooled_head, reshape(mean_rows(final_state), {1, d}));
    out.pooled = reshape(pooled2d, {e.cfg.pooled_dim});
    if (e.adapter) {
        Var h = fwd_linear(e.adapter->a1, final_state);
        Var branch = fwd_linear(e.adapter->a2, silu(h));
        Var skip = e.adapter->skip ? fwd_linear(*e.adapter->skip, final_state) : final_state;
        out.tokens = add(skip, branch);
    } else {
        out.tokens = final_state;
    }
    return out;
}

inline void for_each_param(ToyTextEncoder& e, const std::function<void(const std::string&, Var&)>& fn) {
    auto lin = [&](const std::string& name, Linear& l) {
        fn(name + ".w", l.w);
        fn(name + ".b", l.b);
    };
    fn("embed", e.embed);
    fn("pos", e.pos);
    for (size_t i = 0; i < e.layers.size(); ++i) {
        std::string base = "layer." + std::to_string(i) + ".";
        lin(base + "qkv", e.layers[i].qkv);
        lin(base + "out", e.layers[i].out);
        lin(base + "ffn1", e.layers[i].ffn1);
        lin(base + "ffn2", e.layers[i].ffn2);
    }
    lin("pooled_head", e.pooled_head);
    if (e.adapter) {
        lin("adapter.a1", e.adapter->a1);
        lin("adapter.a2", e.adapter->a2);
        if (e.adapter->skip) lin("adapter.skip", *e.adapter->skip);
    }
}

inline void set_requires_grad(ToyTextEncoder& e, bool rg) {
    for_each_param(e, [rg](const std::string&, Var& v) { v->requires_grad = rg; });
}

inline ToyTextEncoder clone(const ToyTextEncoder& src_in) {
    ToyTextEncoder& src = const_cast<ToyTextEncoder&>(src_in);
    ToyTextEncoder dst = src;
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
