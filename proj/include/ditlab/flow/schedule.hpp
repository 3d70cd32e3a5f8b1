#pragma once

#include <vector>

#include "ditlab/numkit/rng.hpp"
#include "ditlab/numkit/tensor.hpp"

namespace ditlab {

/// Discrete sampler timesteps t_0 < ... < t_N with t_0 = 0, t_N = 1.
struct Schedule {
    std::vector<double> t;

    size_t steps() const { return t.empty() ? 0 : t.size() - 1; }

    void validate() const {
        if (t.size() < 2) throw ShapeError("schedule: needs at least one step");
        if (t.front() != 0.0 || t.back() != 1.0) throw ShapeError("schedule: endpoints must be 0 and 1");
        for (size_t i = 1; i < t.size(); ++i) {
            if (!(t[i] > t[i - 1])) throw ShapeError("schedule: timesteps must increase strictly");
        }
    }

    static Schedule uniform(size_t n) {
        if (n < 1) throw ShapeError("schedule: N must be >= 1");
        Schedule s;
        s.t.resize(n + 1);
        for (size_t j = 0; j <= n; ++j) s.t[j] = static_cast<double>(j) / static_cast<double>(n);
        s.t[0] = 0.0;
        s.t[n] = 1.0;
        return s;
    }
};

/// One training interpolant: x_t = (1 - t) x0 + t eps.
struct FlowBatch {
    Tensor x0;
    Tensor eps;
    double t = 0.0;
    Tensor x_t;
    int prompt_id = -1;

    static FlowBatch make(Tensor x0, Tensor eps, double t, int prompt_id = -1) {
        if (!x0.same_shape(eps)) throw ShapeError("flow batch: x0/eps shape mismatch");
        FlowBatch b;
        b.x_t = Tensor(x0.shape());
        for (size_t i = 0; i < x0.numel(); ++i) b.x_t.at(i) = (1.0 - t) * x0.at(i) + t * eps.at(i);
        b.x0 = std::move(x0);
        b.eps = std::move(eps);
        b.t = t;
        b.prompt_id = prompt_id;
        return b;
    }

    static FlowBatch draw(const Tensor& x0, Rng& rng, int prompt_id = -1) {
        Tensor eps = rng.normal_tensor(x0.shape());
        double t = rng.uniform();
        return make(x0, std::move(eps), t, prompt_id);
    }

    /// Velocity target eps - x0.
    Tensor target() const {
        Tensor v(x0.shape());
        for (size_t i = 0; i < v.numel(); ++i) v.at(i) = eps.at(i) - x0.at(i);
        return v;
    }
};

}  // namespace ditlab
