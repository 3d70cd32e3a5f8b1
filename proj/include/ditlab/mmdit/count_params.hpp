#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "ditlab/mmdit/params.hpp"

namespace ditlab {

// Closed-form parameter accounting. Weights and biases are reported
// separately; the block-size figures people quote are weight-only.
struct ParamCounts {
    uint64_t ds_block_w = 0;   // one DS block
    uint64_t ss_block_w = 0;   // one SS block
    uint64_t ds_adaln_w = 0;   // AdaLN share of one DS block
    uint64_t ss_adaln_w = 0;
    uint64_t embed_w = 0;      // time/pooled MLPs and token in/out projections
    uint64_t total_w = 0;
    uint64_t total_b = 0;
    std::map<std::string, uint64_t> components;  // weight-only, per component
};

inline ParamCounts count_params(const ModelConfig& cfg, bool static_ln = false) {
    cfg.validate();
    uint64_t d = cfg.d, f = cfg.ffn_mult;
    ParamCounts c;
    c.ds_adaln_w = 12 * d * d;  // 6d^2 per modality
    c.ss_adaln_w = 3 * d * d;
    // DS: 8d^2 attention (q,k,v,o per modality) + 2 * 2f d^2 FFNs + AdaLN
    c.ds_block_w = 8 * d * d + 2 * (2 * f * d * d) + (static_ln ? 0 : c.ds_adaln_w);
    // SS: fused in (3+f)d^2 + fused out (1+f)d^2 + AdaLN
    c.ss_block_w = (3 + f) * d * d + (1 + f) * d * d + (static_ln ? 0 : c.ss_adaln_w);
    c.embed_w = cfg.t_emb_dim * d + d * d          // time mlp
              + cfg.pooled_dim * d + d * d         // pooled mlp
              + cfg.latent_channels * d            // img in
              + cfg.txt_in_dim * d                 // txt in
              + d * cfg.latent_channels;           // out projection
    c.total_w = cfg.n_ds * c.ds_block_w + cfg.n_ss * c.ss_block_w + c.embed_w;

    uint64_t ds_b = 2 * (4 * d + f * d + d + (static_ln ? 0 : 6 * d));
    uint64_t ss_b = (3 + f) * d + d + (static_ln ? 0 : 3 * d);
    uint64_t embed_b = 2 * d + 2 * d + d + d + cfg.latent_channels;
    c.total_b = cfg.n_ds * ds_b + cfg.n_ss * ss_b + embed_b;

    c.components["ds_block"] = c.ds_block_w;
    c.components["ss_block"] = c.ss_block_w;
    c.components["ds_adaln"] = static_ln ? 0 : c.ds_adaln_w;
    c.components["ss_adaln"] = static_ln ? 0 : c.ss_adaln_w;
    c.components["ds_total"] = cfg.n_ds * c.ds_block_w;
    c.components["ss_total"] = cfg.n_ss * c.ss_block_w;
    c.components["embedders"] = c.embed_w;
    c.components["total"] = c.total_w;
    return c;
}

/// Brute-force enumeration of the actual weight tensors (>=2-d) and biases
/// (1-d). Must agree exactly with the closed form.
struct BruteCounts {
    uint64_t weights = 0;
    uint64_t biases = 0;
};

inline BruteCounts brute_force_count(MMDiTParams& p) {
    BruteCounts bc;
    for_each_param(p, [&](const std::string&, Var& v) {
        if (v->value.ndim() >= 2) bc.weights += v->value.numel();
        else bc.biases += v->value.numel();
    });
    return bc;
}

}  // namespace ditlab
