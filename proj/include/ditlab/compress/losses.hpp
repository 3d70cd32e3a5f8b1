#pragma once

#include "ditlab/mmdit/model.hpp"

namespace ditlab {

/// Knowledge distillation: MSE between student and teacher velocities on the
/// same (x_t, t, prompt). Structural transforms never change token geometry,
/// so the two outputs always share a shape.
inline Var distill_loss(MMDiTParams& teacher, MMDiTParams& student,
                        const Tensor& x_t, double t, const Var& prompt, const Var& pooled,
                        ForwardTrace* teacher_trace = nullptr, ForwardTrace* student_trace = nullptr) {
    Var vt = mmdit_forward(teacher, constant(x_t), prompt, t, pooled, teacher_trace);
    Var vs = mmdit_forward(student, constant(x_t), prompt, t, pooled, student_trace);
    if (!vt->value.same_shape(vs->value)) throw ShapeError("distill_loss: velocity shapes diverge");
    return mse(vs, vt);
}

/// Attention-head-level feature loss: per block, squared L2 distance between
/// the head-mean of token-mean features, teacher vs student, summed over
/// blocks. The head mean lives in the shared d_H space, so differing head
/// counts compare directly.
inline Var feature_loss(const ForwardTrace& teacher_trace, const ForwardTrace& student_trace) {
    if (teacher_trace.blocks.size() != student_trace.blocks.size()) {
        throw ShapeError("feature_loss: traces cover different block counts");
    }
    Var total = constant(Tensor::scalar(0.0));
    for (size_t b = 0; b < teacher_trace.blocks.size(); ++b) {
        const auto& tf = teacher_trace.blocks[b].head_feats;
        const auto& sf = student_trace.blocks[b].head_feats;
        if (tf.empty() || sf.empty()) throw ShapeError("feature_loss: trace lacks head features");
        if (tf[0]->value.cols() != sf[0]->value.cols()) {
            throw ShapeError("feature_loss: teacher/student d_H mismatch");
        }
        auto head_mean = [](const std::vector<Var>& feats) {
            Var acc = mean_rows(feats[0]);
            for (size_t h = 1; h < feats.size(); ++h) acc = add(acc, mean_rows(feats[h]));
            return scale(acc, 1.0 / static_cast<double>(feats.size()));
        };
        total = add(total, sq_norm(sub(head_mean(sf), head_mean(tf))));
    }
    return total;
}

}  // namespace ditlab
