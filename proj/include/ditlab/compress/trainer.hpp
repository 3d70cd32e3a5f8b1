#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ditlab/analysis/block_similarity.hpp"
#include "ditlab/compress/losses.hpp"
#include "ditlab/compress/optimizer.hpp"
#include "ditlab/compress/static_ln.hpp"
#include "ditlab/compress/transforms.hpp"
#include "ditlab/flow/eval.hpp"
#include "ditlab/flow/loss.hpp"
#include "ditlab/mmdit/count_params.hpp"

namespace ditlab {

// ---------------------------------------------------------------------------
// Flow-matching training (the teacher)
// ---------------------------------------------------------------------------

struct FlowTrainRecipe {
    size_t epochs = 4;
    size_t batch = 8;
    double lr = 2e-3;
    bool cosine = false;
    double pooled_dropout = 0.0;  // prob of zeroing pooled conditioning per draw
};

/// Minimizes the flow-matching objective over the dataset; returns per-epoch
/// mean losses. Non-finite losses abort with the stage name.
inline std::vector<double> train_flow(MMDiTParams& model, const SynthDataset& data, ToyTextEncoder& enc,
                                      const FlowTrainRecipe& r, uint64_t seed, const std::string& stage = "teacher") {
    std::vector<Var> params;
    for_each_param(model, [&](const std::string&, Var& v) { params.push_back(v); });
    Adam opt(params, {r.lr});
    Rng rng = Rng::derive(seed, 0xf10f);
    size_t n = data.samples.size();
    size_t steps_per_epoch = (n + r.batch - 1) / r.batch;
    size_t total_steps = r.epochs * steps_per_epoch;
    std::vector<double> epoch_losses;
    size_t step = 0;
    Tensor zero_pooled({model.cfg.pooled_dim});
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
                const auto& smp = data.samples[order[i]];
                PromptCond pc = encode_values(enc, smp.captions[rng.index(smp.captions.size())]);
                bool drop = r.pooled_dropout > 0.0 && rng.uniform() < r.pooled_dropout;
                FlowBatch fb = FlowBatch::draw(smp.latent, rng, smp.prompt_id);
                Var li = fm_loss(model, fb, constant(pc.tokens), constant(drop ? zero_pooled : pc.pooled));
                loss = loss ? add(loss, li) : li;
            }
            loss = scale(loss, 1.0 / static_cast<double>(b_end - s0));
            if (!std::isfinite(loss->value.at(0))) {
                throw NumericError("stage " + stage + ": diverged (non-finite loss) at epoch " + std::to_string(e));
            }
            opt.zero_grad();
            backward(loss);
            opt.step(r.cosine ? cosine_lr(r.lr, step, total_steps) : r.lr);
            esum += loss->value.at(0);
            ++ecount;
            ++step;
        }
        epoch_losses.push_back(esum / static_cast<double>(ecount));
    }
    return epoch_losses;
}

// ---------------------------------------------------------------------------
// Compression stages C1-C4
// ---------------------------------------------------------------------------

struct TrainPhase {
    std::string teacher = "stage";  // "stage" = structural parent, "root" = original teacher
    size_t epochs = 2;
    size_t batch = 8;
    double lr = 1e-3;
    bool cosine = false;
    double gamma = 0.0;  // feature-loss weight (C1 uses 1.0)
};

struct CompressionPlan {
    std::string stage;  // c1_head_prune | c2_dim_reduce | c3_block_merge | c4_static_ln
    size_t target_H = 0;
    size_t target_dH = 0;
    double threshold_img = 0.85;
    double threshold_txt = 0.9;
    std::optional<std::pair<size_t, size_t>> merge_range;  // explicit SS-local [begin, end)
    bool drop_instead_of_merge = false;
    size_t calib_samples = 8;
    size_t sim_probe_items = 4;
    std::vector<TrainPhase> phases;
    std::vector<size_t> step_candidates = {4, 8};

    void validate(const ModelConfig& teacher_cfg) const {
        if (stage == "c1_head_prune") {
            if (target_H < 1 || target_H > teacher_cfg.H) throw ShapeError("plan: target_H must not exceed teacher H");
        } else if (stage == "c2_dim_reduce") {
            if (target_dH < 1 || target_dH > teacher_cfg.d_H) throw ShapeError("plan: target_dH must not exceed teacher d_H");
        } else if (stage == "c3_block_merge") {
            if (merge_range && merge_range->second > teacher_cfg.n_ss) {
                throw ShapeError("plan: merge range must lie within SS blocks");
            }
        } else if (stage == "c4_static_ln") {
            if (calib_samples < 1) throw ShapeError("plan: calib_samples must be >= 1");
        } else {
            throw ShapeError("plan: unknown stage '" + stage + "'");
        }
    }
};

struct StageReport {
    std::string stage;
    uint64_t params_before_w = 0, params_before_b = 0;
    uint64_t params_after_w = 0, params_after_b = 0;
    std::vector<std::pair<std::string, std::vector<double>>> phase_losses;
    double heldout_distill_stage = 0.0;  // vs the structural parent
    double heldout_distill_root = 0.0;   // vs the original teacher
    double accuracy = 0.0;
    size_t selected_n = 0;
    std::map<size_t, double> error_by_n;
    size_t merge_begin = 0, merge_end = 0;
    std::vector<double> sim_img, sim_txt;  // recorded for C3
    size_t calib_samples = 0;
    std::vector<std::string> notes;
};

struct StageContext {
    MMDiTParams* stage_teacher = nullptr;  // structural parent, frozen
    MMDiTParams* root_teacher = nullptr;   // original teacher (may equal stage teacher)
    ToyTextEncoder* encoder = nullptr;     // frozen prompt encoder
    const SynthDataset* train = nullptr;
    const SynthDataset* heldout = nullptr;
    uint64_t seed = 0;
};

namespace detail {
inline std::vector<double> distill_train_phase(MMDiTParams& student, MMDiTParams& teacher,
                                               const SynthDataset& data, ToyTextEncoder& enc,
                                               const TrainPhase& ph, uint64_t seed, const std::string& stage) {
    std::vector<Var> params;
    for_each_param(student, [&](const std::string&, Var& v) { params.push_back(v); });
    Adam opt(params, {ph.lr});
    Rng rng = Rng::derive(seed, 0xd157);
    size_t n = data.samples.size();
    size_t steps_per_epoch = (n + ph.batch - 1) / ph.batch;
    size_t total_steps = ph.epochs * steps_per_epoch;
    std::vector<double> losses;
    size_t step = 0;
    for (size_t e = 0; e < ph.epochs; ++e) {
        std::vector<size_t> order(n);
        for (size_t i = 0; i < n; ++i) order[i] = i;
        for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        double esum = 0.0;
        size_t ecount = 0;
        for (size_t s0 = 0; s0 < n; s0 += ph.batch) {
            size_t b_end = std::min(n, s0 + ph.batch);
            Var loss;
            for (size_t i = s0; i < b_end; ++i) {
                const auto& smp = data.samples[order[i]];
                PromptCond pc = encode_values(enc, smp.captions[rng.index(smp.captions.size())]);
                FlowBatch fb = FlowBatch::draw(smp.latent, rng, smp.prompt_id);
                Var li;
                if (ph.gamma > 0.0) {
                    ForwardTrace tt, st;
                    li = distill_loss(teacher, student, fb.x_t, fb.t, constant(pc.tokens), constant(pc.pooled), &tt, &st);
                    li = add(li, scale(feature_loss(tt, st), ph.gamma));
                } else {
                    li = distill_loss(teacher, student, fb.x_t, fb.t, constant(pc.tokens), constant(pc.pooled));
                }
                loss = loss ? add(loss, li) : li;
            }
            loss = scale(loss, 1.0 / static_cast<double>(b_end - s0));
            if (!std::isfinite(loss->value.at(0))) {
                throw NumericError("stage " + stage + ": diverged (non-finite loss) at epoch " + std::to_string(e));
            }
            opt.zero_grad();
            backward(loss);
            opt.step(ph.cosine ? cosine_lr(ph.lr, step, total_steps) : ph.lr);
            esum += loss->value.at(0);
            ++ecount;
            ++step;
        }
        losses.push_back(esum / static_cast<double>(ecount));
    }
    return losses;
}

inline std::vector<Tensor> calib_pooled_set(const SynthDataset& data, ToyTextEncoder& enc, size_t limit) {
    std::vector<Tensor> out;
    for (size_t i = 0; i < data.samples.size() && out.size() < limit; ++i) {
        out.push_back(encode_values(enc, data.samples[i].captions[i % data.samples[i].captions.size()]).pooled);
    }
    return out;
}
}  // namespace detail

/// Applies one structural transform, trains per recipe, evaluates, reports.
inline std::pair<MMDiTParams, StageReport> run_stage(const CompressionPlan& plan, const StageContext& ctx) {
    if (!ctx.stage_teacher || !ctx.encoder || !ctx.train || !ctx.heldout) {
        throw ShapeError("run_stage: incomplete context");
    }
    MMDiTParams& teacher = *ctx.stage_teacher;
    plan.validate(teacher.cfg);
    set_requires_grad(teacher, false);

    StageReport rep;
    rep.stage = plan.stage;
    BruteCounts before = brute_force_count(teacher);
    rep.params_before_w = before.weights;
    rep.params_before_b = before.biases;

    MMDiTParams student;
    if (plan.stage == "c1_head_prune") {
        student = prune_heads(teacher, plan.target_H);
    } else if (plan.stage == "c2_dim_reduce") {
        student = reduce_head_dim(teacher, plan.target_dH);
    } else if (plan.stage == "c3_block_merge") {
        size_t begin, end;
        if (plan.merge_range) {
            begin = plan.merge_range->first;
            end = plan.merge_range->second;
        } else {
            std::vector<SimilarityProbeItem> probe;
            for (size_t i = 0; i < std::min(plan.sim_probe_items, ctx.train->samples.size()); ++i) {
                const auto& smp = ctx.train->samples[i];
                PromptCond pc = encode_values(*ctx.encoder, smp.captions[0]);
                probe.push_back({smp.latent, pc.tokens, pc.pooled});
            }
            SimilarityProfile prof = block_similarity(teacher, probe, Schedule::uniform(plan.step_candidates.back()),
                                                      ctx.seed ^ 0x5e1ec7);
            rep.sim_img = prof.img;
            rep.sim_txt = prof.txt;
            MergeChain chain = select_merge_chain(prof, plan.threshold_img, plan.threshold_txt);
            if (chain.length() < 2) {
                throw ShapeError("stage c3: selected chain shorter than 2 blocks; lower the thresholds");
            }
            begin = chain.begin;
            end = chain.end;
        }
        rep.merge_begin = begin;
        rep.merge_end = end;
        student = plan.drop_instead_of_merge ? drop_blocks(teacher, begin, end) : merge_blocks(teacher, begin, end);
        if (plan.drop_instead_of_merge) rep.notes.push_back("comparison mode: dropped instead of merged");
    } else {
        std::vector<Tensor> pooled_set = detail::calib_pooled_set(*ctx.train, *ctx.encoder, plan.calib_samples);
        StaticLnTable tab = calibrate_static_ln(teacher, pooled_set, Schedule::uniform(plan.step_candidates.back()),
                                                plan.calib_samples);
        student = apply_static_ln(teacher, std::move(tab));
        rep.calib_samples = plan.calib_samples;
    }

    set_requires_grad(student, true);
    for (size_t pi = 0; pi < plan.phases.size(); ++pi) {
        const TrainPhase& ph = plan.phases[pi];
        MMDiTParams* t = &teacher;
        if (ph.teacher == "root") {
            if (!ctx.root_teacher) throw ShapeError("run_stage: phase wants root teacher but none given");
            t = ctx.root_teacher;
            set_requires_grad(*t, false);
        }
        std::vector<double> losses =
            detail::distill_train_phase(student, *t, *ctx.train, *ctx.encoder, ph, ctx.seed + pi, plan.stage);
        rep.phase_losses.emplace_back("phase" + std::to_string(pi) + ":" + ph.teacher, std::move(losses));
    }

    BruteCounts after = brute_force_count(student);
    rep.params_after_w = after.weights;
    rep.params_after_b = after.biases;

    set_requires_grad(student, false);
    rep.heldout_distill_stage = heldout_distill_loss(student, teacher, *ctx.heldout, *ctx.encoder, ctx.seed ^ 0xe7a1);
    MMDiTParams* root = ctx.root_teacher ? ctx.root_teacher : &teacher;
    rep.heldout_distill_root = heldout_distill_loss(student, *root, *ctx.heldout, *ctx.encoder, ctx.seed ^ 0xe7a1);
    StepSelection sel = select_steps_for_model(student, *ctx.encoder, *ctx.heldout, plan.step_candidates, ctx.seed ^ 0x57e9);
    rep.selected_n = sel.best_n;
    rep.error_by_n = sel.error_by_n;
    rep.accuracy = sample_accuracy(student, *ctx.encoder, *ctx.heldout, sel.best_n, ctx.seed ^ 0xacc);
    set_requires_grad(student, true);
    return {std::move(student), std::move(rep)};
}

}  // namespace ditlab
