#pragma once

#include "ditlab/compress/optimizer.hpp"
#include "ditlab/flow/eval.hpp"
#include "ditlab/ptd/routing.hpp"

namespace ditlab {

struct PtdTrainRecipe {
    size_t stage_epochs = 1;
    size_t final_epochs = 1;
    size_t batch = 4;
    double lr = 1e-3;
};

struct PtdTrainReport {
    // one entry per progressive stage (deepest block first), then "final"
    std::vector<std::pair<std::string, std::vector<double>>> stage_losses;
    size_t stages = 0;
};

namespace detail {
inline std::vector<double> ptd_phase(MMDiTParams& model, MMDiTParams& reference, PtdParams& ptd,
                                     const PtdConfig& cfg, std::pair<size_t, size_t> span,
                                     const std::vector<Var>& trainable, const SynthDataset& data,
                                     ToyTextEncoder& enc, size_t epochs, size_t batch, double lr,
                                     Rng& rng, const std::string& label) {
    Adam opt(trainable, {lr});
    size_t n = data.samples.size();
    std::vector<double> losses;
    for (size_t e = 0; e < epochs; ++e) {
        std::vector<size_t> order(n);
        for (size_t i = 0; i < n; ++i) order[i] = i;
        for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        double esum = 0.0;
        size_t ecount = 0;
        for (size_t s0 = 0; s0 < n; s0 += batch) {
            size_t b_end = std::min(n, s0 + batch);
            Var loss;
            for (size_t i = s0; i < b_end; ++i) {
                const auto& smp = data.samples[order[i]];
                PromptCond pc = encode_values(enc, smp.captions[rng.index(smp.captions.size())]);
                // train inside the routed regime
                double t = cfg.t_thresh > 0.0 ? rng.uniform(0.0, cfg.t_thresh) : rng.uniform();
                if (t == 0.0) t = cfg.t_thresh > 0.0 ? cfg.t_thresh : 0.5;
                Tensor eps = rng.normal_tensor(smp.latent.shape());
                FlowBatch fb = FlowBatch::make(smp.latent, eps, t, smp.prompt_id);
                Tensor target = velocity(reference, fb.x_t, pc.tokens, t, pc.pooled);
                Var v = routed_forward(model, ptd, cfg, constant(fb.x_t), constant(pc.tokens), t,
                                       constant(pc.pooled), span, /*force_low=*/true);
                Var li = mse(v, constant(target));
                loss = loss ? add(loss, li) : li;
            }
            loss = scale(loss, 1.0 / static_cast<double>(b_end - s0));
            if (!std::isfinite(loss->value.at(0))) {
                throw NumericError("ptd " + label + ": diverged (non-finite loss)");
            }
            opt.zero_grad();
            backward(loss);
            opt.step();
            esum += loss->value.at(0);
            ++ecount;
        }
        losses.push_back(esum / static_cast<double>(ecount));
    }
    return losses;
}

inline std::vector<Var> block_params(MMDiTParams& m, size_t ss_idx) {
    std::vector<Var> out{m.ss[ss_idx].fused_in.w, m.ss[ss_idx].fused_in.b,
                         m.ss[ss_idx].fused_out.w, m.ss[ss_idx].fused_out.b};
    if (m.ss[ss_idx].adaln) {
        out.push_back(m.ss[ss_idx].adaln->w);
        out.push_back(m.ss[ss_idx].adaln->b);
    }
    return out;
}

inline std::vector<Var> ptd_subset(PtdParams& p, bool down, bool up, bool mlp) {
    std::vector<Var> out;
    for_each_param(p, [&](const std::string& name, Var& v) {
        bool is_down = name.rfind("down.", 0) == 0;
        bool is_up = name.rfind("up.", 0) == 0;
        bool is_mlp = name.rfind("out_mlp.", 0) == 0;
        if ((is_down && down) || (is_up && up) || (is_mlp && mlp)) out.push_back(v);
    });
    return out;
}
}  // namespace detail

/// Deepest-block-first progressive training. Stage 0 trains {D, U, final
/// block of B_D, extended output MLP}; each later stage moves D one block
/// earlier and trains {D, newly covered block}. U and the output MLP stay
/// frozen after stage 0. A final pass fine-tunes D together with all B_D
/// blocks. Distillation target is the pre-PTD model.
inline PtdTrainReport progressive_train(MMDiTParams& model, PtdParams& ptd, const PtdConfig& cfg,
                                        const SynthDataset& data, ToyTextEncoder& enc,
                                        const PtdTrainRecipe& r, uint64_t seed,
                                        const std::function<void(size_t stage)>& on_stage_end = nullptr) {
    cfg.validate(model.cfg);
    MMDiTParams reference = clone(model);  // pre-PTD distillation target
    set_requires_grad(reference, false);
    set_requires_grad(model, false);       // per-stage sets re-enable selectively
    set_requires_grad(ptd, false);

    Rng rng = Rng::derive(seed, 0x97d);
    PtdTrainReport rep;
    size_t n_stages = cfg.bd_size();
    rep.stages = n_stages;

    for (size_t k = 0; k < n_stages; ++k) {
        size_t block = cfg.bd_end - 1 - k;  // deepest first
        std::pair<size_t, size_t> span{block, cfg.bd_end};
        std::vector<Var> trainable = detail::ptd_subset(ptd, /*down=*/true, /*up=*/k == 0, /*mlp=*/k == 0);
        std::vector<Var> bp = detail::block_params(model, block);
        trainable.insert(trainable.end(), bp.begin(), bp.end());
        for (auto& v : trainable) v->requires_grad = true;
        std::vector<double> losses = detail::ptd_phase(model, reference, ptd, cfg, span, trainable, data, enc,
                                                       r.stage_epochs, r.batch, r.lr, rng,
                                                       "stage" + std::to_string(k));
        rep.stage_losses.emplace_back("stage" + std::to_string(k) + ":block" + std::to_string(block),
                                      std::move(losses));
        for (auto& v : trainable) v->requires_grad = false;
        if (on_stage_end) on_stage_end(k);
    }

    if (r.final_epochs > 0) {
        std::vector<Var> trainable = detail::ptd_subset(ptd, true, false, false);
        for (size_t b = cfg.bd_begin; b < cfg.bd_end; ++b) {
            std::vector<Var> bp = detail::block_params(model, b);
            trainable.insert(trainable.end(), bp.begin(), bp.end());
        }
        for (auto& v : trainable) v->requires_grad = true;
        std::vector<double> losses =
            detail::ptd_phase(model, reference, ptd, cfg, {cfg.bd_begin, cfg.bd_end}, trainable, data, enc,
                              r.final_epochs, r.batch, r.lr, rng, "final");
        rep.stage_losses.emplace_back("final", std::move(losses));
        for (auto& v : trainable) v->requires_grad = false;
    }
    set_requires_grad(model, true);
    set_requires_grad(ptd, true);
    return rep;
}

}  // namespace ditlab
