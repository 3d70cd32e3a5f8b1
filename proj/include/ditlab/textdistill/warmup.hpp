#pragma once

#include "ditlab/compress/optimizer.hpp"
#include "ditlab/flow/text_encoder.hpp"

namespace ditlab {

struct WarmupRecipe {
    size_t epochs = 8;
    size_t batch = 8;
    double lr = 1e-3;
};

/// Stage 1: minimize MSE between teacher and adapted student prompt
/// embeddings (token-level plus pooled) over the caption corpus.
inline Var warmup_loss(ToyTextEncoder& teacher, ToyTextEncoder& student, const std::vector<int>& caption) {
    EncodedPrompt pt = encode(teacher, caption);
    EncodedPrompt ps = encode(student, caption);
    if (pt.tokens->value.cols() != ps.tokens->value.cols()) {
        throw ShapeError("warmup: adapter output dim must match the teacher embedding dim");
    }
    return add(mse(ps.tokens, detach(pt.tokens)), mse(ps.pooled, detach(pt.pooled)));
}

inline std::vector<double> warmup(ToyTextEncoder& teacher, ToyTextEncoder& student,
                                  const std::vector<std::vector<int>>& prompts,
                                  const WarmupRecipe& r, uint64_t seed) {
    if (prompts.empty()) throw ShapeError("warmup: empty prompt corpus");
    std::vector<Var> params;
    for_each_param(student, [&](const std::string&, Var& v) { params.push_back(v); });
    Adam opt(params, {r.lr});
    Rng rng = Rng::derive(seed, 0x3a9);
    std::vector<double> epoch_losses;
    size_t n = prompts.size();
    for (size_t e = 0; e < r.epochs; ++e) {
        std::vector<size_t> order(n);
        for (size_t i = 0; i < n; ++i) order[i] = i;
        for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        double esum = 0.0;
        size_t ecount = 0;
        for (size_t s0 = 0; s0 < n; s0 += r.batch) {
            size_t b_end = std::min(n, s0 + r.batch);
            Var loss;
            for (size_t i = s0; i < b_end; ++i) {
                Var li = warmup_loss(teacher, student, prompts[order[i]]);
                loss = loss ? add(loss, li) : li;
            }
            loss = scale(loss, 1.0 / static_cast<double>(b_end - s0));
            if (!std::isfinite(loss->value.at(0))) throw NumericError("warmup: diverged (non-finite loss)");
            opt.zero_grad();
            backward(loss);
            opt.step();
            esum += loss->value.at(0);
            ++ecount;
        }
        epoch_losses.push_back(esum / static_cast<double>(ecount));
    }
    return epoch_losses;
}

}  // namespace ditlab
