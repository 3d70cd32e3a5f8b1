#pragma once

#include "ditlab/flow/eval.hpp"

namespace ditlab {

/// Distill-gap metrics for swapping the student encoder under a frozen
/// transformer: velocity MSE between the two conditionings plus the
/// factor-accuracy of generated samples under each.
struct SwapEval {
    double velocity_gap = 0.0;
    double acc_teacher = 0.0;
    double acc_student = 0.0;
    double accuracy_gap() const { return acc_teacher - acc_student; }
};

inline SwapEval eval_swap(MMDiTParams& dit, ToyTextEncoder& teacher_enc, ToyTextEncoder& student_enc,
                          const SynthDataset& val, size_t n_steps, uint64_t seed) {
    if (val.samples.empty()) throw ShapeError("eval_swap: empty validation set");
    if (student_enc.out_dim() != dit.cfg.txt_in_dim || teacher_enc.out_dim() != dit.cfg.txt_in_dim) {
        throw ShapeError("eval_swap: encoder output dim does not match the transformer's text input");
    }
    SwapEval out;
    size_t count = 0;
    for (size_t i = 0; i < val.samples.size(); ++i) {
        const auto& s = val.samples[i];
        Rng rng = Rng::derive(seed, i);
        size_t variant = rng.index(s.captions.size());
        PromptCond pt = encode_values(teacher_enc, s.captions[variant]);
        PromptCond ps = encode_values(student_enc, s.captions[variant]);
        FlowBatch b = FlowBatch::draw(s.latent, rng, s.prompt_id);
        Tensor vt = velocity(dit, b.x_t, pt.tokens, b.t, pt.pooled);
        Tensor vs = velocity(dit, b.x_t, ps.tokens, b.t, ps.pooled);
        double m = 0.0;
        for (size_t j = 0; j < vt.numel(); ++j) {
            double dd = vt.at(j) - vs.at(j);
            m += dd * dd;
        }
        out.velocity_gap += m / static_cast<double>(vt.numel());
        ++count;
    }
    out.velocity_gap /= static_cast<double>(count);
    out.acc_teacher = sample_accuracy(dit, teacher_enc, val, n_steps, seed ^ 0x7e);
    out.acc_student = sample_accuracy(dit, student_enc, val, n_steps, seed ^ 0x7e);
    return out;
}

}  // namespace ditlab
