#pragma once

#include <functional>

#include "ditlab/flow/schedule.hpp"
#include "ditlab/mmdit/model.hpp"

namespace ditlab {

using VelocityFn = std::function<Tensor(const Tensor& x, double t)>;

struct SampleTrajectory {
    Tensor x0_hat;
    std::vector<Tensor> latents;     // x_N, x_{N-1}, ..., x_0
    std::vector<double> eval_times;  // t_j at which the field was evaluated
};

// Euler integration from x_N ~ N(0, I) toward t = 0. The update is
// x_{j-1} = x_j - (t_j - t_{j-1}) * f(x_j, t_j): with the exact field
// eps - x0 this recovers x0 for any step count.
inline SampleTrajectory euler_sample(const VelocityFn& f, const Schedule& sched, Tensor x_init) {
    sched.validate();
    SampleTrajectory out;
    Tensor x = std::move(x_init);
    out.latents.push_back(x);
    for (size_t j = sched.steps(); j >= 1; --j) {
        double tj = sched.t[j];
        double dt = sched.t[j] - sched.t[j - 1];
        Tensor v = f(x, tj);
        if (!v.same_shape(x)) throw ShapeError("euler_sample: velocity shape mismatch");
        for (size_t i = 0; i < x.numel(); ++i) x.at(i) -= dt * v.at(i);
        x.require_finite("euler_sample");
        out.latents.push_back(x);
        out.eval_times.push_back(tj);
    }
    out.x0_hat = x;
    return out;
}

inline SampleTrajectory euler_sample(const VelocityFn& f, const Schedule& sched,
                                     const std::vector<size_t>& latent_shape, Rng& rng) {
    return euler_sample(f, sched, rng.normal_tensor(latent_shape));
}

/// Velocity field of a model under fixed prompt conditioning.
inline VelocityFn model_velocity(MMDiTParams& p, Tensor prompt, Tensor pooled) {
    return [&p, prompt = std::move(prompt), pooled = std::move(pooled)](const Tensor& x, double t) {
        return velocity(p, x, prompt, t, pooled);
    };
}

}  // namespace ditlab
