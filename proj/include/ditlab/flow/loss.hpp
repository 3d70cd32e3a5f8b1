#pragma once

#include "ditlab/flow/schedule.hpp"
#include "ditlab/mmdit/model.hpp"

namespace ditlab {

/// Flow-matching objective on one interpolant: mean squared error between
/// the predicted velocity at x_t and the target eps - x0.
inline Var fm_loss(MMDiTParams& p, const FlowBatch& batch, const Var& prompt, const Var& pooled,
                   ForwardTrace* trace = nullptr) {
    Var v = mmdit_forward(p, constant(batch.x_t), prompt, batch.t, pooled, trace);
    return mse(v, constant(batch.target()));
}

}  // namespace ditlab
