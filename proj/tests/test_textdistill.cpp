#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ditlab/textdistill/blockwise.hpp"
#include "ditlab/textdistill/eval_swap.hpp"
#include "ditlab/textdistill/warmup.hpp"
#include "test_support.hpp"

using namespace ditlab;

namespace {
ModelConfig td_config() {
    ModelConfig c;
    c.d = 8;
    c.H = 2;
    c.d_H = 4;
    c.n_ds = 2;
    c.n_ss = 2;
    c.ffn_mult = 2;
    c.img_grid = 2;
    c.txt_len = 4;
    c.t_emb_dim = 8;
    c.pooled_dim = 8;
    c.txt_in_dim = 8;
    c.latent_channels = 2;
    return c;
}

TextEncoderConfig teacher_cfg() {
    TextEncoderConfig t;
    t.vocab = synth_vocab_size;
    t.max_len = 4;
    t.d_enc = 8;
    t.heads = 2;
    t.pooled_dim = 8;
    return t;
}

TextEncoderConfig student_cfg() {
    TextEncoderConfig t = teacher_cfg();
    t.d_enc = 4;
    t.adapter_out = 8;
    return t;
}

std::vector<std::vector<int>> toy_corpus() {
    std::vector<std::vector<int>> out;
    for (int id = 0; id < SynthSpec::n_combos; id += 3) {
        for (auto& c : caption_variants(combo_factors(id), 4)) out.push_back(c);
    }
    return out;
}

// teacher-architecture student sharing the teacher's weights, plus an
// identity adapter (matching dims, zero residual branch)
ToyTextEncoder cloned_student(const ToyTextEncoder& teacher) {
    TextEncoderConfig cfg = teacher.cfg;
    cfg.adapter_out = cfg.d_enc;
    Rng rng(1);
    ToyTextEncoder s = init_text_encoder(cfg, rng);
    ToyTextEncoder& t = const_cast<ToyTextEncoder&>(teacher);
    std::vector<Tensor> tvals;
    for_each_param(t, [&](const std::string&, Var& v) { tvals.push_back(v->value); });
    size_t i = 0;
    for_each_param(s, [&](const std::string& name, Var& v) {
        if (name.rfind("adapter.", 0) == 0) return;  // keep zero-init identity adapter
        v->value = tvals[i++];
    });
    return s;
}
}  // namespace

TEST_CASE("warmup: identity student gives zero loss; training decreases it") {
    Rng rng(100);
    ToyTextEncoder teacher = init_text_encoder(teacher_cfg(), rng);
    set_requires_grad(teacher, false);
    auto corpus = toy_corpus();

    SUBCASE("teacher clone with identity adapter has exactly zero loss") {
        ToyTextEncoder s = cloned_student(teacher);
        for (const auto& c : corpus) {
            CHECK(warmup_loss(teacher, s, c)->value.at(0) == 0.0);
        }
    }

    SUBCASE("adapter output dim must match the teacher") {
        TextEncoderConfig bad = student_cfg();
        bad.adapter_out = 6;
        Rng r2(101);
        ToyTextEncoder s = init_text_encoder(bad, r2);
        CHECK_THROWS_AS(warmup_loss(teacher, s, corpus[0]), ShapeError);
    }

    SUBCASE("epoch means decrease monotonically at lr 1e-3") {
        Rng r2(102);
        ToyTextEncoder s = init_text_encoder(student_cfg(), r2);
        WarmupRecipe r;
        r.epochs = 6;
        r.lr = 1e-3;
        std::vector<double> losses = warmup(teacher, s, corpus, r, 77);
        REQUIRE(losses.size() == 6);
        for (size_t i = 1; i < losses.size(); ++i) CHECK(losses[i] < losses[i - 1]);
    }

    SUBCASE("warm-up loss gradient matches finite differences") {
        Rng r2(103);
        ToyTextEncoder s = init_text_encoder(student_cfg(), r2);
        auto loss = [&] { return warmup_loss(teacher, s, corpus[0]); };
        std::vector<Var> params;
        for_each_param(s, [&](const std::string&, Var& v) { params.push_back(v); });
        CHECK(testing::max_rel_grad_err(loss, params, 20, r2) < 1e-4);
    }
}

TEST_CASE("default_alphas covers the first three blocks with fallback") {
    std::vector<double> a10 = default_alphas(10);
    REQUIRE(a10.size() == 10);
    for (size_t i = 0; i < 3; ++i) CHECK(a10[i] == 0.1);
    for (size_t i = 3; i < 10; ++i) CHECK(a10[i] == 0.0);
    std::vector<double> a3 = default_alphas(3);
    CHECK(a3 == std::vector<double>{0.1, 0.1, 0.1});
    std::vector<double> a2 = default_alphas(2);
    CHECK(a2 == std::vector<double>{0.1, 0.1});
}

TEST_CASE("blockwise distillation semantics") {
    ModelConfig cfg = td_config();
    Rng rng(104);
    MMDiTParams dit = init_mmdit(cfg, rng);
    ToyTextEncoder teacher = init_text_encoder(teacher_cfg(), rng);
    set_requires_grad(teacher, false);
    auto corpus = toy_corpus();
    Schedule sched = Schedule::uniform(4);
    size_t L = cfg.n_ds + cfg.n_ss;

    SUBCASE("all-zero alphas give zero loss and zero gradients") {
        Rng r2(105);
        ToyTextEncoder s = init_text_encoder(student_cfg(), r2);
        BlockwiseRecipe r;
        r.iters = 2;
        r.lr = 0.0;
        BlockwiseReport rep = blockwise_distill(dit, teacher, s, corpus, sched,
                                                std::vector<double>(L, 0.0), r, 5);
        for (double l : rep.iter_losses) CHECK(l == 0.0);
        for_each_param(s, [&](const std::string&, Var& v) {
            if (v->grad.numel() == 0) return;
            for (size_t i = 0; i < v->grad.numel(); ++i) CHECK(v->grad.at(i) == 0.0);
        });
    }

    SUBCASE("cutoff beyond the last step detaches everything: encoder grads exactly zero") {
        Rng r2(106);
        ToyTextEncoder s = init_text_encoder(student_cfg(), r2);
        BlockwiseRecipe r;
        r.iters = 1;
        r.lr = 0.0;
        r.cutoff = static_cast<long>(sched.steps()) + 1;
        BlockwiseReport rep = blockwise_distill(dit, teacher, s, corpus, sched, default_alphas(L), r, 6);
        CHECK(rep.iter_losses[0] == 0.0);
        for_each_param(s, [&](const std::string&, Var& v) {
            if (v->grad.numel() == 0) return;
            for (size_t i = 0; i < v->grad.numel(); ++i) CHECK(v->grad.at(i) == 0.0);
        });
    }

    SUBCASE("cloned student gives zero loss at every step") {
        ToyTextEncoder s = cloned_student(teacher);
        BlockwiseRecipe r;
        r.iters = 2;
        r.lr = 0.0;
        r.cutoff = 0;  // supervise every step
        BlockwiseReport rep = blockwise_distill(dit, teacher, s, corpus, sched, default_alphas(L), r, 7);
        for (double l : rep.iter_losses) CHECK(l < 1e-24);
    }

    SUBCASE("cutoff = 0 reproduces the every-timestep baseline configuration") {
        Rng r2(107);
        ToyTextEncoder s = init_text_encoder(student_cfg(), r2);
        BlockwiseRecipe r;
        r.iters = 2;
        r.lr = 0.0;
        r.cutoff = 0;
        BlockwiseReport rep = blockwise_distill(dit, teacher, s, corpus, sched, default_alphas(L), r, 8);
        for (size_t c : rep.cutoffs) CHECK(c == 0);
        for (double l : rep.iter_losses) CHECK(l > 0.0);
    }

    SUBCASE("gradients scale exactly linearly in each alpha") {
        for (size_t target_block : {size_t{0}, size_t{2}}) {
            std::vector<double> a1v(L, 0.0), a2v(L, 0.0);
            a1v[target_block] = 0.1;
            a2v[target_block] = 0.2;
            Rng ra(108);
            ToyTextEncoder s1 = init_text_encoder(student_cfg(), ra);
            ToyTextEncoder s2 = clone(s1);
            BlockwiseRecipe r;
            r.iters = 1;
            r.lr = 0.0;
            r.cutoff = 0;
            blockwise_distill(dit, teacher, s1, corpus, sched, a1v, r, 9);
            blockwise_distill(dit, teacher, s2, corpus, sched, a2v, r, 9);
            std::vector<Var> p1, p2;
            for_each_param(s1, [&](const std::string&, Var& v) { p1.push_back(v); });
            for_each_param(s2, [&](const std::string&, Var& v) { p2.push_back(v); });
            for (size_t i = 0; i < p1.size(); ++i) {
                if (p1[i]->grad.numel() == 0) continue;
                for (size_t j = 0; j < p1[i]->grad.numel(); ++j) {
                    CHECK(p2[i]->grad.at(j) == doctest::Approx(2.0 * p1[i]->grad.at(j)).epsilon(1e-12));
                }
            }
        }
    }

    SUBCASE("the frozen transformer is bit-identical before and after stage 2") {
        std::vector<Tensor> before;
        for_each_param(dit, [&](const std::string&, Var& v) { before.push_back(v->value); });
        Rng r2(109);
        ToyTextEncoder s = init_text_encoder(student_cfg(), r2);
        BlockwiseRecipe r;
        r.iters = 3;
        r.lr = 1e-3;
        blockwise_distill(dit, teacher, s, corpus, sched, default_alphas(L), r, 10);
        size_t i = 0;
        for_each_param(dit, [&](const std::string&, Var& v) { CHECK(bit_equal(v->value, before[i++])); });
    }
}

TEST_CASE("eval_swap gap metrics") {
    ModelConfig cfg = td_config();
    Rng rng(110);
    MMDiTParams dit = init_mmdit(cfg, rng);
    ToyTextEncoder teacher = init_text_encoder(teacher_cfg(), rng);
    set_requires_grad(teacher, false);
    SynthSpec spec;
    spec.grid = cfg.img_grid;
    spec.channels = cfg.latent_channels;
    SynthDataset val = make_dataset(spec, 6, 444, cfg.txt_len);

    SUBCASE("cloned encoder has zero velocity gap and zero accuracy gap") {
        ToyTextEncoder s = cloned_student(teacher);
        SwapEval ev = eval_swap(dit, teacher, s, val, 2, 11);
        CHECK(ev.velocity_gap == 0.0);
        CHECK(ev.accuracy_gap() == 0.0);
    }

    SUBCASE("an untrained student has a strictly larger gap than a clone") {
        Rng r2(111);
        ToyTextEncoder s = init_text_encoder(student_cfg(), r2);
        SwapEval ev = eval_swap(dit, teacher, s, val, 2, 12);
        CHECK(ev.velocity_gap > 0.0);
    }

    SUBCASE("dimension mismatch is rejected") {
        TextEncoderConfig bad = student_cfg();
        bad.adapter_out = 6;
        Rng r2(112);
        ToyTextEncoder s = init_text_encoder(bad, r2);
        CHECK_THROWS_AS(eval_swap(dit, teacher, s, val, 2, 13), ShapeError);
    }
}
