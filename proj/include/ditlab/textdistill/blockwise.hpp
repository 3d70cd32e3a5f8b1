#pragma once

#include "ditlab/compress/optimizer.hpp"
#include "ditlab/flow/sampler.hpp"
#include "ditlab/flow/text_encoder.hpp"

namespace ditlab {

/// Per-block loss coefficients: 0.1 on the first three blocks, zero beyond;
/// fewer than three blocks fall back to 0.1 on all of them.
inline std::vector<double> default_alphas(size_t n_blocks) {
    if (n_blocks == 0) throw ShapeError("default_alphas: no blocks");
    std::vector<double> a(n_blocks, 0.0);
    for (size_t i = 0; i < std::min<size_t>(3, n_blocks); ++i) a[i] = 0.1;
    return a;
}

struct BlockwiseRecipe {
    size_t iters = 32;
    double lr = 5e-4;
    // -1: resample the cutoff uniformly over {1..N} each iteration;
    // 0: supervise every step (the every-timestep baseline);
    // any fixed k: detach student states on steps with index below k
    long cutoff = -1;
};

struct BlockwiseReport {
    std::vector<double> iter_losses;
    std::vector<size_t> cutoffs;  // the sampled t_hat per iteration
};

// Stage 2: denoising rollout under student conditioning. At each schedule
// step both conditionings run through the frozen transformer; text-stream
// hidden states are matched for steps at or above the cutoff t_hat, earlier
// ones carry no gradient. The Euler update follows the student velocity;
// rollout states are detached between steps.
inline BlockwiseReport blockwise_distill(MMDiTParams& dit, ToyTextEncoder& teacher_enc,
                                         ToyTextEncoder& student, const std::vector<std::vector<int>>& prompts,
                                         const Schedule& sched, const std::vector<double>& alphas,
                                         const BlockwiseRecipe& r, uint64_t seed) {
    sched.validate();
    size_t n_blocks = dit.cfg.n_ds + dit.cfg.n_ss;
    if (alphas.size() != n_blocks) throw ShapeError("blockwise_distill: alpha count != block count");
    bool any_alpha = false;
    for (double a : alphas) {
        if (a < 0.0) throw ShapeError("blockwise_distill: alphas must be non-negative");
        any_alpha = any_alpha || a > 0.0;
    }
    set_requires_grad(dit, false);
    set_requires_grad(teacher_enc, false);

    std::vector<Var> params;
    for_each_param(student, [&](const std::string&, Var& v) { params.push_back(v); });
    Adam opt(params, {r.lr});
    Rng rng = Rng::derive(seed, 0xb10c);
    size_t n_steps = sched.steps();

    BlockwiseReport rep;
    for (size_t iter = 0; iter < r.iters; ++iter) {
        const auto& caption = prompts[rng.index(prompts.size())];
        size_t t_hat = r.cutoff < 0 ? 1 + rng.index(n_steps) : static_cast<size_t>(r.cutoff);
        rep.cutoffs.push_back(t_hat);

        EncodedPrompt ps = encode(student, caption);
        EncodedPrompt pt = encode(teacher_enc, caption);

        Tensor x = rng.normal_tensor({dit.cfg.img_tokens(), dit.cfg.latent_channels});
        Var loss = constant(Tensor::scalar(0.0));
        for (size_t j = n_steps; j >= 1; --j) {
            double t = sched.t[j];
            bool supervised = j >= t_hat;
            ForwardTrace st;
            Var vs = mmdit_forward(dit, constant(x), ps.tokens, t, ps.pooled, &st);
            if (supervised && any_alpha) {
                ForwardTrace tt;
                mmdit_forward(dit, constant(x), pt.tokens, t, pt.pooled, &tt);
                for (size_t b = 0; b < n_blocks; ++b) {
                    if (alphas[b] == 0.0) continue;
                    Var hs = st.blocks[b].txt_out;
                    Var ht = detach(tt.blocks[b].txt_out);
                    loss = add(loss, scale(sq_norm(sub(hs, ht)), alphas[b]));
                }
            }
            // Euler update on detached values; the rollout follows the student
            double dt = sched.t[j] - sched.t[j - 1];
            for (size_t i = 0; i < x.numel(); ++i) x.at(i) -= dt * vs->value.at(i);
            x.require_finite("blockwise_distill rollout");
        }
        if (!std::isfinite(loss->value.at(0))) throw NumericError("blockwise_distill: non-finite loss");
        rep.iter_losses.push_back(loss->value.at(0));
        opt.zero_grad();
        backward(loss);
        opt.step();
    }
    return rep;
}

}  // namespace ditlab
