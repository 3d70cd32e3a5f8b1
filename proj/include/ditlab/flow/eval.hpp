#pragma once

#include "ditlab/flow/sampler.hpp"
#include "ditlab/flow/select_steps.hpp"
#include "ditlab/flow/synth.hpp"
#include "ditlab/flow/text_encoder.hpp"

namespace ditlab {

struct PromptCond {
    Tensor tokens;  // [txt_len x enc_out]
    Tensor pooled;  // [pooled_dim]
};

inline PromptCond encode_values(ToyTextEncoder& enc, const std::vector<int>& caption) {
    EncodedPrompt ep = encode(enc, caption);
    return PromptCond{ep.tokens->value, ep.pooled->value};
}

/// Fraction of generated samples whose factor classification matches the
/// conditioning prompt. One sample per dataset item, derived noise streams.
inline double sample_accuracy(MMDiTParams& model, ToyTextEncoder& enc, const SynthDataset& items,
                              size_t n_steps, uint64_t seed, size_t caption_variant = 0) {
    if (items.samples.empty()) throw ShapeError("sample_accuracy: empty item set");
    Schedule sched = Schedule::uniform(n_steps);
    size_t hits = 0;
    for (size_t i = 0; i < items.samples.size(); ++i) {
        const auto& s = items.samples[i];
        PromptCond pc = encode_values(enc, s.captions[caption_variant % s.captions.size()]);
        Rng rng = Rng::derive(seed, i);
        SampleTrajectory tr = euler_sample(model_velocity(model, pc.tokens, pc.pooled), sched,
                                           {model.cfg.img_tokens(), model.cfg.latent_channels}, rng);
        if (classify(items.spec, tr.x0_hat) == combo_factors(s.prompt_id)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(items.samples.size());
}

/// Mean squared velocity gap between two models over held-out interpolants.
inline double heldout_distill_loss(MMDiTParams& student, MMDiTParams& teacher, const SynthDataset& heldout,
                                   ToyTextEncoder& enc, uint64_t seed, size_t draws_per_sample = 2) {
    if (heldout.samples.empty()) throw ShapeError("heldout_distill_loss: empty set");
    double total = 0.0;
    size_t count = 0;
    for (size_t i = 0; i < heldout.samples.size(); ++i) {
        const auto& s = heldout.samples[i];
        Rng rng = Rng::derive(seed, i);
        for (size_t k = 0; k < draws_per_sample; ++k) {
            size_t variant = rng.index(s.captions.size());
            PromptCond pc = encode_values(enc, s.captions[variant]);
            FlowBatch b = FlowBatch::draw(s.latent, rng, s.prompt_id);
            Tensor vs = velocity(student, b.x_t, pc.tokens, b.t, pc.pooled);
            Tensor vt = velocity(teacher, b.x_t, pc.tokens, b.t, pc.pooled);
            double mse_v = 0.0;
            for (size_t j = 0; j < vs.numel(); ++j) {
                double dd = vs.at(j) - vt.at(j);
                mse_v += dd * dd;
            }
            total += mse_v / static_cast<double>(vs.numel());
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

/// Step-count cross-validation driven by the quality proxy.
inline StepSelection select_steps_for_model(MMDiTParams& model, ToyTextEncoder& enc, const SynthDataset& val,
                                            const std::vector<size_t>& candidates, uint64_t seed) {
    auto gen = [&](size_t n, size_t item) {
        const auto& s = val.samples[item];
        PromptCond pc = encode_values(enc, s.captions[0]);
        Rng rng = Rng::derive(seed, item);
        return euler_sample(model_velocity(model, pc.tokens, pc.pooled), Schedule::uniform(n),
                            {model.cfg.img_tokens(), model.cfg.latent_channels}, rng)
            .x0_hat;
    };
    return select_steps(gen, val, candidates);
}

}  // namespace ditlab
