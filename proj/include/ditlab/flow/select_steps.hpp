#pragma once

#include <functional>
#include <map>

#include "ditlab/flow/synth.hpp"

namespace ditlab {

struct StepSelection {
    size_t best_n = 0;
    std::map<size_t, double> error_by_n;  // factor-classification error per candidate
};

/// Cross-validates the inference step count: generates one sample per
/// validation item at every candidate N, classifies it, and returns the N
/// with the lowest factor error. Ties break toward the smaller N.
inline StepSelection select_steps(const std::function<Tensor(size_t n, size_t item)>& generate,
                                  const SynthDataset& val, std::vector<size_t> candidates) {
    if (candidates.empty()) throw ShapeError("select_steps: no candidates");
    if (val.samples.empty()) throw ShapeError("select_steps: empty validation set");
    std::sort(candidates.begin(), candidates.end());
    StepSelection sel;
    double best_err = 0.0;
    for (size_t n : candidates) {
        size_t wrong = 0;
        for (size_t i = 0; i < val.samples.size(); ++i) {
            Tensor x0_hat = generate(n, i);
            FactorTuple pred = classify(val.spec, x0_hat);
            if (!(pred == combo_factors(val.samples[i].prompt_id))) ++wrong;
        }
        double err = static_cast<double>(wrong) / static_cast<double>(val.samples.size());
        sel.error_by_n[n] = err;
        if (sel.best_n == 0 || err < best_err) {
            best_err = err;
            sel.best_n = n;
        }
    }
    return sel;
}

}  // namespace ditlab
