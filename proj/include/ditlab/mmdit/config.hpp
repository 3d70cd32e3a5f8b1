#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "ditlab/numkit/tensor.hpp"

namespace ditlab {

/// Architecture hyperparameters of the toy MMDiT.
struct ModelConfig {
    size_t d = 64;            // hidden dim, must equal H * d_H
    size_t H = 8;             // attention heads
    size_t d_H = 8;           // head dim
    size_t n_ds = 4;          // double-stream blocks
    size_t n_ss = 6;          // single-stream blocks
    size_t ffn_mult = 4;      // FFN expansion
    size_t img_grid = 8;      // sqrt(T) of the image-token grid
    size_t txt_len = 8;       // text tokens
    size_t t_emb_dim = 32;    // sinusoidal timestep embedding width
    size_t pooled_dim = 32;   // pooled-condition input width
    size_t txt_in_dim = 32;   // tokenwise prompt-embedding input width
    size_t latent_channels = 4;

    size_t img_tokens() const { return img_grid * img_grid; }
    size_t total_tokens() const { return img_tokens() + txt_len; }

    void validate() const {
        if (d != H * d_H) throw ShapeError("config: d must equal H * d_H");
        if (img_grid < 2) throw ShapeError("config: img_grid must be >= 2");
        if (n_ds < 1 || n_ss < 1 || H < 1 || d_H < 1 || txt_len < 1 || ffn_mult < 1) {
            throw ShapeError("config: all counts must be >= 1");
        }
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"d", c.d},
                       {"H", c.H},
                       {"d_H", c.d_H},
                       {"n_ds", c.n_ds},
                       {"n_ss", c.n_ss},
                       {"ffn_mult", c.ffn_mult},
                       {"img_grid", c.img_grid},
                       {"txt_len", c.txt_len},
                       {"t_emb_dim", c.t_emb_dim},
                       {"pooled_dim", c.pooled_dim},
                       {"txt_in_dim", c.txt_in_dim},
                       {"latent_channels", c.latent_channels}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    static const char* known[] = {"d", "H", "d_H", "n_ds", "n_ss", "ffn_mult", "img_grid",
                                  "txt_len", "t_emb_dim", "pooled_dim", "txt_in_dim", "latent_channels"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || (it.key() == k);
        if (!ok) throw std::runtime_error("model config: unknown key '" + it.key() + "'");
    }
    j.at("d").get_to(c.d);
    j.at("H").get_to(c.H);
    j.at("d_H").get_to(c.d_H);
    j.at("n_ds").get_to(c.n_ds);
    j.at("n_ss").get_to(c.n_ss);
    if (j.contains("ffn_mult")) j.at("ffn_mult").get_to(c.ffn_mult);
    if (j.contains("img_grid")) j.at("img_grid").get_to(c.img_grid);
    if (j.contains("txt_len")) j.at("txt_len").get_to(c.txt_len);
    if (j.contains("t_emb_dim")) j.at("t_emb_dim").get_to(c.t_emb_dim);
    if (j.contains("pooled_dim")) j.at("pooled_dim").get_to(c.pooled_dim);
    if (j.contains("txt_in_dim")) j.at("txt_in_dim").get_to(c.txt_in_dim);
    if (j.contains("latent_channels")) j.at("latent_channels").get_to(c.latent_channels);
}

}  // namespace ditlab
