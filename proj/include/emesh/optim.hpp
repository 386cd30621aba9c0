#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "emesh/errors.hpp"
#include "emesh/tensor.hpp"

namespace emesh {

struct HyperParams {
    float inner_lr = 7.5e-5f;
    float beta1 = 0.9f;
    float beta2 = 0.95f;
    float eps = 1e-8f;
    float weight_decay = 0.1f;
    float outer_lr = 0.7f;
    float outer_momentum = 0.9f;
    uint32_t warmup_steps = 1000;
    uint32_t total_steps = 10000;
    float cooldown_fraction = 0.2f;

    void validate() const {
        if (!(beta1 >= 0.0f && beta1 < 1.0f)) throw ConfigError("beta1 must be in [0,1)");
        if (!(beta2 >= 0.0f && beta2 < 1.0f)) throw ConfigError("beta2 must be in [0,1)");
        if (!(inner_lr > 0.0f)) throw ConfigError("inner_lr must be > 0");
        if (!(outer_lr > 0.0f)) throw ConfigError("outer_lr must be > 0");
        if (!(cooldown_fraction >= 0.0f && cooldown_fraction < 1.0f))
            throw ConfigError("cooldown_fraction must be in [0,1)");
        if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
    }
};

struct AdamWState {
    uint64_t step = 0;
    ModelParams m;  // first moment, mirrors the parameter shapes
    ModelParams v;  // second moment, elementwise >= 0

    static AdamWState zeros_like(const ModelParams& params) {
        AdamWState s;
        s.m = params.zeros_like();
        s.v = params.zeros_like();
        return s;
    }
};

struct NesterovState {
    ModelParams buffer;  // momentum accumulator, mirrors the parameter shapes

    static NesterovState zeros_like(const ModelParams& params) {
        NesterovState s;
        s.buffer = params.zeros_like();
        return s;
    }
};

// One AdamW step with bias correction and decoupled weight decay. The decay
// multiplies parameters directly (not the gradient) before the moment update,
// and the effective rate is inner_lr * lr_scale. All elementwise arithmetic
// is fp32 in canonical order, so replicas stepping on identical inputs stay
// bit-identical.
inline void adamw_step(ModelParams& params, const ModelParams& grads, AdamWState& state,
                       const HyperParams& hp, float lr_scale) {
    if (!params.same_shapes(grads)) throw ShapeError("adamw_step: params/grads shape mismatch");
    if (!params.same_shapes(state.m) || !params.same_shapes(state.v))
        throw ShapeError("adamw_step: optimizer state shape mismatch");
    if (!(lr_scale >= 0.0f && lr_scale <= 1.0f)) throw RangeError("lr_scale must be in [0,1]");

    state.step += 1;
    const float lr = hp.inner_lr * lr_scale;
    const float bc1 = static_cast<float>(1.0 - std::pow(static_cast<double>(hp.beta1),
                                                        static_cast<double>(state.step)));
    const float bc2 = static_cast<float>(1.0 - std::pow(static_cast<double>(hp.beta2),
                                                        static_cast<double>(state.step)));

    for (size_t pi = 0; pi < params.entries.size(); ++pi) {
        auto& [name, p] = params.entries[pi];
        const Tensor& g = grads.entries[pi].second;
        Tensor& m = state.m.entries[pi].second;
        Tensor& v = state.v.entries[pi].second;
        for (size_t i = 0; i < p.size(); ++i) {
            const float gi = g[i];
            if (!std::isfinite(gi))
                throw NumericError("non-finite gradient in parameter " + name);
            p[i] -= lr * hp.weight_decay * p[i];
            m[i] = hp.beta1 * m[i] + (1.0f - hp.beta1) * gi;
            v[i] = hp.beta2 * v[i] + (1.0f - hp.beta2) * gi * gi;
            const float mhat = m[i] / bc1;
            const float vhat = v[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + hp.eps);
        }
    }
}

// Per-worker outer-gradient term: the displacement the inner phase produced,
// measured against the host-retained weights. Averaging happens in the
// all-reduce, not here.
inline ModelParams compute_pseudo_gradient(const ModelParams& theta_prev,
                                           const ModelParams& theta_local) {
    if (!theta_prev.same_shapes(theta_local))
        throw ShapeError("compute_pseudo_gradient: shape mismatch");
    ModelParams delta = theta_prev.zeros_like();
    for (size_t pi = 0; pi < delta.entries.size(); ++pi) {
        const Tensor& a = theta_prev.entries[pi].second;
        const Tensor& b = theta_local.entries[pi].second;
        Tensor& d = delta.entries[pi].second;
        for (size_t i = 0; i < d.size(); ++i) d[i] = a[i] - b[i];
    }
    return delta;
}

// Nesterov outer update, applied once per round to the averaged displacement:
//   b <- momentum * b + delta
//   theta <- theta - lr * (delta + momentum * b)
inline void nesterov_outer_step(ModelParams& params, const ModelParams& avg_delta,
                                NesterovState& state, const HyperParams& hp) {
    if (!params.same_shapes(avg_delta)) throw ShapeError("nesterov_outer_step: shape mismatch");
    if (!params.same_shapes(state.buffer))
        throw ShapeError("nesterov_outer_step: momentum buffer shape mismatch");
    const float mu = hp.outer_momentum;
    const float lr = hp.outer_lr;
    for (size_t pi = 0; pi < params.entries.size(); ++pi) {
        Tensor& p = params.entries[pi].second;
        const Tensor& d = avg_delta.entries[pi].second;
        Tensor& b = state.buffer.entries[pi].second;
        for (size_t i = 0; i < p.size(); ++i) {
            b[i] = mu * b[i] + d[i];
            p[i] -= lr * (d[i] + mu * b[i]);
        }
    }
}

// Warmup-stable-decay schedule: linear ramp over warmup_steps, flat at 1.0,
// then linear decay to 0 over the final cooldown fraction.
inline float wsd_lr_scale(uint64_t step, const HyperParams& hp) {
    if (step > hp.total_steps) throw RangeError("wsd_lr_scale: step beyond total_steps");
    if (hp.warmup_steps > 0 && step < hp.warmup_steps)
        return static_cast<float>(step) / static_cast<float>(hp.warmup_steps);
    const double cooldown_start =
        static_cast<double>(hp.total_steps) * (1.0 - static_cast<double>(hp.cooldown_fraction));
    if (static_cast<double>(step) <= cooldown_start) return 1.0f;
    const double span = static_cast<double>(hp.total_steps) - cooldown_start;
    return static_cast<float>((static_cast<double>(hp.total_steps) - static_cast<double>(step)) / span);
}

}  // namespace emesh
