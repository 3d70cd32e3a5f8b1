#pragma once

#include <vector>

#include "ditlab/flow/schedule.hpp"
#include "ditlab/mmdit/model.hpp"

namespace ditlab {

/// Per block, per stream: cosine similarity between block input and output
/// hidden states, averaged over tokens, samples and the schedule timesteps.
struct SimilarityProfile {
    std::vector<double> img;  // blocks in global order (DS then SS)
    std::vector<double> txt;
    size_t n_ds = 0;
    size_t n_ss = 0;
};

namespace detail {
inline double token_mean_cosine(const Tensor& a, const Tensor& b) {
    double total = 0.0;
    size_t t = a.rows(), d = a.cols();
    for (size_t i = 0; i < t; ++i) {
        double dot = 0, na = 0, nb = 0;
        for (size_t j = 0; j < d; ++j) {
            dot += a.at(i, j) * b.at(i, j);
            na += a.at(i, j) * a.at(i, j);
            nb += b.at(i, j) * b.at(i, j);
        }
        double denom = std::sqrt(na) * std::sqrt(nb);
        total += denom > 0.0 ? dot / denom : 1.0;
    }
    return total / static_cast<double>(t);
}
}  // namespace detail

/// Accumulates the profile from already-collected traces (one per forward).
inline SimilarityProfile similarity_from_traces(const std::vector<ForwardTrace>& traces,
                                                size_t n_ds, size_t n_ss) {
    if (traces.empty()) throw ShapeError("block_similarity: no traces");
    size_t n_blocks = n_ds + n_ss;
    SimilarityProfile prof;
    prof.n_ds = n_ds;
    prof.n_ss = n_ss;
    prof.img.assign(n_blocks, 0.0);
    prof.txt.assign(n_blocks, 0.0);
    for (const auto& tr : traces) {
        if (tr.blocks.size() != n_blocks) throw ShapeError("block_similarity: trace shape mismatch");
        for (size_t b = 0; b < n_blocks; ++b) {
            prof.img[b] += detail::token_mean_cosine(tr.blocks[b].img_in->value, tr.blocks[b].img_out->value);
            prof.txt[b] += detail::token_mean_cosine(tr.blocks[b].txt_in->value, tr.blocks[b].txt_out->value);
        }
    }
    for (size_t b = 0; b < n_blocks; ++b) {
        prof.img[b] /= static_cast<double>(traces.size());
        prof.txt[b] /= static_cast<double>(traces.size());
    }
    return prof;
}

struct SimilarityProbeItem {
    Tensor x0;
    Tensor prompt;
    Tensor pooled;
};

/// Runs the model over every probe sample at every schedule timestep
/// (interpolants use per-item derived noise) and averages the cosines.
inline SimilarityProfile block_similarity(MMDiTParams& model, const std::vector<SimilarityProbeItem>& probe,
                                          const Schedule& sched, uint64_t seed = 0x51a1) {
    if (probe.empty()) throw ShapeError("block_similarity: empty probe set");
    sched.validate();
    std::vector<ForwardTrace> traces;
    for (size_t i = 0; i < probe.size(); ++i) {
        Rng rng = Rng::derive(seed, i);
        Tensor eps = rng.normal_tensor(probe[i].x0.shape());
        for (size_t j = 1; j <= sched.steps(); ++j) {
            double t = sched.t[j];
            FlowBatch b = FlowBatch::make(probe[i].x0, eps, t);
            ForwardTrace tr;
            velocity(model, b.x_t, probe[i].prompt, t, probe[i].pooled, &tr);
            traces.push_back(std::move(tr));
        }
    }
    return similarity_from_traces(traces, model.cfg.n_ds, model.cfg.n_ss);
}

/// Contiguous SS-block index range [begin, end) selected for merging.
struct MergeChain {
    size_t begin = 0;
    size_t end = 0;
    size_t length() const { return end - begin; }
    bool empty() const { return end == begin; }
};

/// Longest contiguous run of SS blocks whose image similarity exceeds
/// threshold_img and text similarity exceeds threshold_txt. Ties in run
/// length break toward the later (deeper) run.
inline MergeChain select_merge_chain(const SimilarityProfile& prof, double threshold_img, double threshold_txt) {
    if (threshold_img <= 0.0 || threshold_img > 1.0 || threshold_txt <= 0.0 || threshold_txt > 1.0) {
        throw ShapeError("select_merge_chain: thresholds must lie in (0, 1]");
    }
    MergeChain best;
    size_t run_start = 0;
    bool in_run = false;
    auto close_run = [&](size_t end) {
        if (!in_run) return;
        size_t len = end - run_start;
        if (len >= std::max<size_t>(best.length(), 1)) {  // >= biases toward deeper runs
            best.begin = run_start;
            best.end = end;
        }
        in_run = false;
    };
    for (size_t i = 0; i < prof.n_ss; ++i) {
        size_t g = prof.n_ds + i;
        bool ok = prof.img[g] > threshold_img && prof.txt[g] > threshold_txt;
        if (ok && !in_run) {
            run_start = i;
            in_run = true;
        }
        if (!ok) close_run(i);
    }
    close_run(prof.n_ss);
    return best;
}

}  // namespace ditlab
