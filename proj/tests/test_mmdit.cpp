#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ditlab/mmdit/count_params.hpp"
#include "ditlab/mmdit/model.hpp"
#include "test_support.hpp"

using namespace ditlab;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.d = 8;
    c.H = 2;
    c.d_H = 4;
    c.n_ds = 2;
    c.n_ss = 2;
    c.ffn_mult = 2;
    c.img_grid = 2;
    c.txt_len = 2;
    c.t_emb_dim = 8;
    c.pooled_dim = 8;
    c.txt_in_dim = 8;
    c.latent_channels = 3;
    return c;
}

// zero the gate slots of every AdaLN projection (slots 2 and 5)
void zero_gates(MMDiTParams& p) {
    size_t d = p.cfg.d;
    auto zero_slot = [&](Linear& l, size_t slot) {
        for (size_t i = 0; i < l.w->value.rows(); ++i)
            for (size_t j = slot * d; j < (slot + 1) * d; ++j) l.w->value.at(i, j) = 0.0;
        for (size_t j = slot * d; j < (slot + 1) * d; ++j) l.b->value.at(j) = 0.0;
    };
    for (auto& b : p.ds) {
        for (int m = 0; m < 2; ++m) {
            zero_slot(*b.adaln[m], 2);
            zero_slot(*b.adaln[m], 5);
        }
    }
    for (auto& b : p.ss) zero_slot(*b.adaln, 2);
}

}  // namespace

TEST_CASE("zero-initialized output projection gives zero velocity") {
    ModelConfig cfg = tiny_config();
    Rng rng(21);
    MMDiTParams p = init_mmdit(cfg, rng);
    p.out_proj.w->value.fill(0.0);
    p.out_proj.b->value.fill(0.0);
    Tensor v = velocity(p, rng.normal_tensor({cfg.img_tokens(), cfg.latent_channels}),
                        rng.normal_tensor({cfg.txt_len, cfg.txt_in_dim}), 0.3,
                        rng.normal_tensor({cfg.pooled_dim}));
    for (size_t i = 0; i < v.numel(); ++i) CHECK(v.at(i) == 0.0);
}

TEST_CASE("trace exposes one record per block with correct shapes") {
    ModelConfig cfg = tiny_config();
    Rng rng(22);
    MMDiTParams p = init_mmdit(cfg, rng);
    ForwardTrace tr;
    velocity(p, rng.normal_tensor({cfg.img_tokens(), cfg.latent_channels}),
             rng.normal_tensor({cfg.txt_len, cfg.txt_in_dim}), 0.5,
             rng.normal_tensor({cfg.pooled_dim}), &tr);
    REQUIRE(tr.blocks.size() == cfg.n_ds + cfg.n_ss);
    for (size_t bi = 0; bi < tr.blocks.size(); ++bi) {
        const auto& e = tr.blocks[bi];
        CHECK(e.img_in->value.shape() == std::vector<size_t>{cfg.img_tokens(), cfg.d});
        CHECK(e.txt_in->value.shape() == std::vector<size_t>{cfg.txt_len, cfg.d});
        CHECK(e.img_out->value.shape() == std::vector<size_t>{cfg.img_tokens(), cfg.d});
        CHECK(e.txt_out->value.shape() == std::vector<size_t>{cfg.txt_len, cfg.d});
        REQUIRE(e.head_feats.size() == cfg.H);
        for (const auto& hf : e.head_feats) {
            CHECK(hf->value.shape() == std::vector<size_t>{cfg.total_tokens(), cfg.d_H});
        }
        CHECK(e.coeffs.size() == (bi < cfg.n_ds ? 12u : 3u));
    }
}

TEST_CASE("permuting image tokens with their rope positions permutes outputs") {
    ModelConfig cfg = tiny_config();
    cfg.img_grid = 3;
    Rng rng(23);
    MMDiTParams p = init_mmdit(cfg, rng);
    Tensor x = rng.normal_tensor({cfg.img_tokens(), cfg.latent_channels});
    Tensor prompt = rng.normal_tensor({cfg.txt_len, cfg.txt_in_dim});
    Tensor pooled = rng.normal_tensor({cfg.pooled_dim});

    Tensor base = velocity(p, x, prompt, 0.4, pooled);

    std::vector<size_t> perm(cfg.img_tokens());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = (i * 4 + 3) % perm.size();  // a fixed permutation
    Tensor xp({cfg.img_tokens(), cfg.latent_channels});
    for (size_t i = 0; i < perm.size(); ++i)
        for (size_t c = 0; c < cfg.latent_channels; ++c) xp.at(i, c) = x.at(perm[i], c);
    ForwardHooks hooks;
    hooks.img_position_ids = &perm;
    Tensor out = velocity(p, xp, prompt, 0.4, pooled, nullptr, &hooks);

    for (size_t i = 0; i < perm.size(); ++i)
        for (size_t c = 0; c < cfg.latent_channels; ++c)
            CHECK(std::fabs(out.at(i, c) - base.at(perm[i], c)) < 1e-11);
}

TEST_CASE("joint attention basics") {
    size_t H = 1, d_H = 4, d = 4;
    Rng rng(24);
    Rope2D rope = rope_table(1, d_H, 1, 1.0);
    Tensor angles = rope.sequence_angles();  // txt 1 + img 1 tokens

    SUBCASE("single token per modality under masking returns v (softmax over one key)") {
        Var qt = constant(rng.normal_tensor({1, d})), kt = constant(rng.normal_tensor({1, d}));
        Var vt = constant(rng.normal_tensor({1, d}));
        Var qi = constant(rng.normal_tensor({1, d})), ki = constant(rng.normal_tensor({1, d}));
        Var vi = constant(rng.normal_tensor({1, d}));
        JointAttnOut out = joint_attention(qt, kt, vt, qi, ki, vi, H, d_H, angles, /*mask=*/true);
        CHECK(max_abs_diff(out.txt->value, vt->value) < 1e-12);
        CHECK(max_abs_diff(out.img->value, vi->value) < 1e-12);
    }

    SUBCASE("identical heads produce identical per-head outputs") {
        size_t HH = 3, dd = HH * d_H;
        Rope2D rp = rope_table(2, d_H, 2, 2.0);
        Tensor ang = rp.sequence_angles();
        auto tile = [&](const Tensor& block, size_t rows) {
            Tensor out({rows, dd});
            for (size_t i = 0; i < rows; ++i)
                for (size_t h = 0; h < HH; ++h)
                    for (size_t j = 0; j < d_H; ++j) out.at(i, h * d_H + j) = block.at(i, j);
            return out;
        };
        Tensor bt = rng.normal_tensor({2, d_H}), bi = rng.normal_tensor({4, d_H});
        JointAttnOut out = joint_attention(constant(tile(bt, 2)), constant(tile(bt, 2)), constant(tile(bt, 2)),
                                           constant(tile(bi, 4)), constant(tile(bi, 4)), constant(tile(bi, 4)),
                                           HH, d_H, ang);
        for (size_t h = 1; h < HH; ++h) {
            CHECK(max_abs_diff(out.head_feats[h]->value, out.head_feats[0]->value) < 1e-12);
        }
    }

    SUBCASE("attention rows sum to one: all-ones values map to all-ones outputs") {
        Rope2D rp = rope_table(2, d_H, 2, 2.0);
        Tensor ang = rp.sequence_angles();
        Var qt = constant(rng.normal_tensor({2, d})), kt = constant(rng.normal_tensor({2, d}));
        Var qi = constant(rng.normal_tensor({4, d})), ki = constant(rng.normal_tensor({4, d}));
        JointAttnOut out = joint_attention(qt, kt, constant(Tensor::ones({2, d})),
                                           qi, ki, constant(Tensor::ones({4, d})), H, d_H, ang);
        for (size_t i = 0; i < out.img->value.numel(); ++i) {
            CHECK(std::fabs(out.img->value.at(i) - 1.0) < 1e-12);
        }
    }

    SUBCASE("masked joint attention equals per-modality self-attention") {
        size_t t_txt = 2, t_img = 4;
        Rope2D rp = rope_table(2, d_H, t_txt, 2.0);
        Tensor ang = rp.sequence_angles();
        Tensor qt = rng.normal_tensor({t_txt, d}), kt = rng.normal_tensor({t_txt, d}), vt = rng.normal_tensor({t_txt, d});
        Tensor qi = rng.normal_tensor({t_img, d}), ki = rng.normal_tensor({t_img, d}), vi = rng.normal_tensor({t_img, d});
        JointAttnOut masked = joint_attention(constant(qt), constant(kt), constant(vt),
                                              constant(qi), constant(ki), constant(vi), H, d_H, ang, true);
        // reference: independent softmax attention per modality slice
        auto self_attn = [&](const Tensor& q, const Tensor& k, const Tensor& v, size_t row0) {
            Tensor a({q.rows(), d_H / 2});
            for (size_t i = 0; i < q.rows(); ++i)
                for (size_t pp = 0; pp < d_H / 2; ++pp) a.at(i, pp) = ang.at(row0 + i, pp);
            Var qh = rope_rotate(constant(q), a);
            Var kh = rope_rotate(constant(k), a);
            Var s = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(d_H)));
            return matmul(softmax_rows(s), constant(v));
        };
        CHECK(max_abs_diff(masked.txt->value, self_attn(qt, kt, vt, 0)->value) < 1e-12);
        CHECK(max_abs_diff(masked.img->value, self_attn(qi, ki, vi, t_txt)->value) < 1e-12);
    }
}

TEST_CASE("adaln_modulate wiring") {
    Rng rng(25);
    size_t t = 5, d = 6;
    Var x = param(rng.normal_tensor({t, d}));
    auto id = [](const Var& h) { return h; };

    SUBCASE("scale 0, shift 0, gate 1 is the pure layer-norm path") {
        std::vector<Var> c{constant(Tensor({d})), constant(Tensor({d})), constant(Tensor::ones({d}))};
        Var out = adaln_modulate(x, c, id);
        CHECK(max_abs_diff(out->value, layer_norm(x)->value) == 0.0);
    }

    SUBCASE("arity 6 with zero gates is the identity (residual passthrough)") {
        std::vector<Var> c;
        for (int i = 0; i < 6; ++i) c.push_back(constant(i == 2 || i == 5 ? Tensor({d}) : Tensor::ones({d})));
        c[2] = constant(Tensor({d}));
        c[5] = constant(Tensor({d}));
        Var out = adaln_modulate(x, c, id, id);
        CHECK(bit_equal(out->value, x->value));
    }

    SUBCASE("wrong arity raises") {
        std::vector<Var> c{constant(Tensor({d})), constant(Tensor({d}))};
        CHECK_THROWS_AS(adaln_modulate(x, c, id), ShapeError);
    }

    SUBCASE("modulation is differentiable") {
        Var shift = param(rng.normal_tensor({d}));
        Var sc = param(rng.normal_tensor({d}));
        Var gate = param(rng.normal_tensor({d}));
        Var target = constant(rng.normal_tensor({t, d}));
        auto loss = [&] {
            std::vector<Var> c{shift, sc, gate};
            Var out = adaln_modulate(x, c, [](const Var& h) { return gelu(h); });
            return mean_all(square(sub(out, target)));
        };
        CHECK(testing::max_rel_grad_err(loss, {x, shift, sc, gate}, 20, rng) < 1e-4);
    }
}

TEST_CASE("zeroed gates make every block a residual passthrough") {
    ModelConfig cfg = tiny_config();
    Rng rng(26);
    MMDiTParams p = init_mmdit(cfg, rng);
    zero_gates(p);
    ForwardTrace tr;
    Tensor x = rng.normal_tensor({cfg.img_tokens(), cfg.latent_channels});
    velocity(p, x, rng.normal_tensor({cfg.txt_len, cfg.txt_in_dim}), 0.7,
             rng.normal_tensor({cfg.pooled_dim}), &tr);
    for (const auto& e : tr.blocks) {
        CHECK(bit_equal(e.img_out->value, e.img_in->value));
        CHECK(bit_equal(e.txt_out->value, e.txt_in->value));
    }
}

TEST_CASE("count_params reproduces the paper-scale block sizes") {
    auto ds_ss = [](size_t d, size_t H, size_t d_H, size_t n_ds, size_t n_ss, bool st) {
        ModelConfig c;
        c.d = d;
        c.H = H;
        c.d_H = d_H;
        c.n_ds = n_ds;
        c.n_ss = n_ss;
        c.ffn_mult = 4;
        c.img_grid = 32;
        c.txt_len = 256;
        c.t_emb_dim = 256;
        c.pooled_dim = 768;
        c.txt_in_dim = 4096;
        c.latent_channels = 64;
        return count_params(c, st);
    };
    auto near_rel = [](uint64_t got, double want, double tol) {
        return std::fabs(static_cast<double>(got) / want - 1.0) <= tol;
    };
    // d=3072 base: DS 340M, SS 140M
    ParamCounts base = ds_ss(3072, 24, 128, 19, 38, false);
    CHECK(base.ds_block_w == 36ull * 3072 * 3072);
    CHECK(near_rel(base.ds_block_w, 340e6, 0.05));
    CHECK(near_rel(base.ss_block_w, 140e6, 0.05));
    CHECK(near_rel(base.total_w, 12e9, 0.07));
    // d=2048: DS 150M, SS 61M
    ParamCounts c1 = ds_ss(2048, 16, 128, 19, 38, false);
    CHECK(near_rel(c1.ds_block_w, 150e6, 0.05));
    CHECK(near_rel(c1.ss_block_w, 61e6, 0.05));
    CHECK(near_rel(c1.total_w, 5e9, 0.07));
    // d=1536: DS 85M, SS 35M
    ParamCounts c2 = ds_ss(1536, 16, 96, 19, 38, false);
    CHECK(c2.ds_block_w == 84934656ull);
    CHECK(near_rel(c2.ds_block_w, 85e6, 0.05));
    CHECK(near_rel(c2.ss_block_w, 35e6, 0.05));
    CHECK(near_rel(c2.total_w, 3e9, 0.07));
    ParamCounts c3 = ds_ss(1536, 16, 96, 19, 24, false);
    CHECK(near_rel(c3.total_w, 2.5e9, 0.07));
    // d=1536 with AdaLN removed: DS 57M, SS vs 27M within 5%
    ParamCounts c4 = ds_ss(1536, 16, 96, 19, 24, true);
    CHECK(c4.ds_block_w == 24ull * 1536 * 1536);
    CHECK(near_rel(c4.ds_block_w, 57e6, 0.05));
    CHECK(near_rel(c4.ss_block_w, 27e6, 0.05));
    CHECK(near_rel(c4.total_w, 1.8e9, 0.07));
}

TEST_CASE("closed forms match brute-force enumeration exactly") {
    ModelConfig cfg;  // default toy T1
    Rng rng(27);
    MMDiTParams p = init_mmdit(cfg, rng);
    ParamCounts c = count_params(cfg, false);
    BruteCounts bc = brute_force_count(p);
    CHECK(bc.weights == c.total_w);
    CHECK(bc.biases == c.total_b);
}

TEST_CASE("rope table construction") {
    SUBCASE("rotation at position (0,0) is the identity") {
        Rope2D r = rope_table(4, 8, 2, 4.0);
        for (size_t p = 0; p < r.pairs; ++p) CHECK(r.img_angles.at(0, p) == 0.0);
    }
    SUBCASE("rotated queries keep their norm") {
        Rng rng(28);
        Rope2D r = rope_table(4, 8, 2, 4.0);
        Tensor ang = r.sequence_angles();
        Tensor q = rng.normal_tensor({ang.rows(), 8});
        Var rot = rope_rotate(constant(q), ang);
        for (size_t i = 0; i < q.rows(); ++i) {
            double n0 = 0, n1 = 0;
            for (size_t j = 0; j < 8; ++j) {
                n0 += q.at(i, j) * q.at(i, j);
                n1 += rot->value.at(i, j) * rot->value.at(i, j);
            }
            CHECK(std::fabs(std::sqrt(n0) - std::sqrt(n1)) < 1e-12);
        }
    }
    SUBCASE("coarse table equals every-other fine coordinate scaled down") {
        size_t g = 8, d_H = 8;
        Rope2D fine = rope_table(g, d_H, 2, static_cast<double>(g));
        Rope2D coarse = rope_table(g / 2, d_H, 2, static_cast<double>(g));
        for (size_t i = 0; i < g / 2; ++i) {
            for (size_t j = 0; j < g / 2; ++j) {
                for (size_t p = 0; p < coarse.pairs; ++p) {
                    double fine_scaled = 0.5 * fine.img_angles.at((2 * i) * g + (2 * j), p);
                    CHECK(coarse.img_angles.at(i * (g / 2) + j, p) == doctest::Approx(fine_scaled).epsilon(1e-12));
                }
            }
        }
    }
    SUBCASE("d_H not divisible by 4 is rejected") {
        CHECK_THROWS_AS(rope_table(4, 6, 2, 4.0), ShapeError);
    }
}

TEST_CASE("forward is differentiable end to end") {
    ModelConfig cfg = tiny_config();
    Rng rng(29);
    MMDiTParams p = init_mmdit(cfg, rng);
    Tensor x = rng.normal_tensor({cfg.img_tokens(), cfg.latent_channels});
    Tensor prompt = rng.normal_tensor({cfg.txt_len, cfg.txt_in_dim});
    Tensor pooled = rng.normal_tensor({cfg.pooled_dim});
    Tensor target = rng.normal_tensor({cfg.img_tokens(), cfg.latent_channels});

    auto loss = [&] {
        Var v = mmdit_forward(p, constant(x), constant(prompt), 0.6, constant(pooled));
        return mean_all(square(sub(v, constant(target))));
    };
    std::vector<Var> params;
    for_each_param(p, [&](const std::string&, Var& v) { params.push_back(v); });
    CHECK(testing::max_rel_grad_err(loss, params, 30, rng) < 1e-4);
}

TEST_CASE("forward rejects bad shapes and timesteps") {
    ModelConfig cfg = tiny_config();
    Rng rng(30);
    MMDiTParams p = init_mmdit(cfg, rng);
    Tensor x = rng.normal_tensor({cfg.img_tokens(), cfg.latent_channels});
    Tensor prompt = rng.normal_tensor({cfg.txt_len, cfg.txt_in_dim});
    Tensor pooled = rng.normal_tensor({cfg.pooled_dim});
    CHECK_THROWS_AS(velocity(p, rng.normal_tensor({3, cfg.latent_channels}), prompt, 0.5, pooled), ShapeError);
    CHECK_THROWS_AS(velocity(p, x, rng.normal_tensor({cfg.txt_len, 5}), 0.5, pooled), ShapeError);
    CHECK_THROWS_AS(velocity(p, x, prompt, 1.5, pooled), ShapeError);
}
