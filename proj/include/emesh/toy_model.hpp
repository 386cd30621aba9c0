#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "emesh/errors.hpp"
#include "emesh/rng.hpp"
#include "emesh/tensor.hpp"

namespace emesh {

// Two-layer tanh MLP doing least-squares regression against a fixed synthetic
// teacher. Small enough for finite-difference checks, expressive enough to
// show convergence; the teacher is wider than the student so the loss floor
// stays bounded away from zero and run-to-run comparisons stay stable.
struct ToyModelConfig {
    uint32_t input_dim = 8;
    uint32_t hidden_dim = 16;
    uint32_t output_dim = 4;
    uint32_t teacher_hidden_dim = 32;
};

struct Batch {
    Tensor inputs;   // [batch, input_dim]
    Tensor targets;  // [batch, output_dim]
    uint32_t batch_size = 0;
};

inline ModelParams toy_model_shapes(const ToyModelConfig& cfg) {
    ModelParams p;
    p.add("w1", Tensor({cfg.hidden_dim, cfg.input_dim}));
    p.add("b1", Tensor({cfg.hidden_dim}));
    p.add("w2", Tensor({cfg.output_dim, cfg.hidden_dim}));
    p.add("b2", Tensor({cfg.output_dim}));
    return p;
}

// Deterministic init: scaled uniforms from the counter-based generator, so
// every node building from the same seed holds bit-identical weights.
inline ModelParams toy_model_init(const ToyModelConfig& cfg, uint64_t seed) {
    ModelParams p = toy_model_shapes(cfg);
    uint64_t stream = 0xA11C0DE;
    uint64_t idx = 0;
    for (auto& [name, t] : p.entries) {
        float scale = 0.0f;
        if (name == "w1") scale = 1.0f / std::sqrt(static_cast<float>(cfg.input_dim));
        if (name == "w2") scale = 1.0f / std::sqrt(static_cast<float>(cfg.hidden_dim));
        for (float& v : t.data) v = scale * rng_uniform(seed, stream, 0, idx++);
    }
    return p;
}

namespace detail {

// Fixed random teacher network (input_dim -> teacher_hidden -> output_dim).
// Weights derive from the seed alone; it is never trained.
struct Teacher {
    std::vector<float> w1, b1, w2, b2;
    ToyModelConfig cfg;

    Teacher(const ToyModelConfig& c, uint64_t seed) : cfg(c) {
        uint64_t stream = 0x7EAC4E5;
        uint64_t idx = 0;
        auto draw = [&] { return rng_uniform(seed, stream, 0, idx++); };
        w1.resize(static_cast<size_t>(c.teacher_hidden_dim) * c.input_dim);
        b1.resize(c.teacher_hidden_dim);
        w2.resize(static_cast<size_t>(c.output_dim) * c.teacher_hidden_dim);
        b2.resize(c.output_dim);
        float s1 = 1.5f / std::sqrt(static_cast<float>(c.input_dim));
        float s2 = 1.5f / std::sqrt(static_cast<float>(c.teacher_hidden_dim));
        for (auto& v : w1) v = s1 * draw();
        for (auto& v : b1) v = 0.3f * draw();
        for (auto& v : w2) v = s2 * draw();
        for (auto& v : b2) v = 0.3f * draw();
    }

    void eval(const float* x, float* y) const {
        std::vector<float> h(cfg.teacher_hidden_dim);
        for (uint32_t j = 0; j < cfg.teacher_hidden_dim; ++j) {
            float acc = b1[j];
            for (uint32_t i = 0; i < cfg.input_dim; ++i) acc += w1[j * cfg.input_dim + i] * x[i];
            h[j] = std::tanh(acc);
        }
        for (uint32_t o = 0; o < cfg.output_dim; ++o) {
            float acc = b2[o];
            for (uint32_t j = 0; j < cfg.teacher_hidden_dim; ++j)
                acc += w2[o * cfg.teacher_hidden_dim + j] * h[j];
            y[o] = acc;
        }
    }
};

}  // namespace detail

// Batch `state.counter` of shard `shard_id`: a pure function of
// (seed, shard, counter), so shards are disjoint streams and any position
// can be replayed exactly after a checkpoint resume. Advances the counter.
inline Batch synth_batch(RngState& state, uint32_t shard_id, uint32_t batch_size,
                         const ToyModelConfig& cfg) {
    Batch b;
    b.batch_size = batch_size;
    b.inputs = Tensor({batch_size, cfg.input_dim});
    b.targets = Tensor({batch_size, cfg.output_dim});
    const uint64_t stream = 0x5AD0000ull + shard_id;
    for (uint32_t r = 0; r < batch_size; ++r)
        for (uint32_t i = 0; i < cfg.input_dim; ++i)
            b.inputs.data[r * cfg.input_dim + i] =
                rng_uniform(state.seed, stream, state.counter, r * cfg.input_dim + i);
    detail::Teacher teacher(cfg, state.seed);
    for (uint32_t r = 0; r < batch_size; ++r)
        teacher.eval(&b.inputs.data[r * cfg.input_dim], &b.targets.data[r * cfg.output_dim]);
    state.counter += 1;
    return b;
}

// Forward + exact backward for the student MLP. Loss is the mean over all
// batch x output entries of the squared error. Reductions run in canonical
// sequential order.
inline std::pair<float, ModelParams> toy_forward_backward(const ModelParams& params,
                                                          const Batch& batch,
                                                          const ToyModelConfig& cfg) {
    const Tensor& w1 = params.entries[0].second;
    const Tensor& b1 = params.entries[1].second;
    const Tensor& w2 = params.entries[2].second;
    const Tensor& b2 = params.entries[3].second;
    if (w1.shape != std::vector<uint32_t>({cfg.hidden_dim, cfg.input_dim}))
        throw ShapeError("toy_forward_backward: params do not match model config");
    if (batch.inputs.shape != std::vector<uint32_t>({batch.batch_size, cfg.input_dim}) ||
        batch.targets.shape != std::vector<uint32_t>({batch.batch_size, cfg.output_dim}))
        throw ShapeError("toy_forward_backward: batch shape mismatch");

    const uint32_t B = batch.batch_size;
    const uint32_t I = cfg.input_dim, H = cfg.hidden_dim, O = cfg.output_dim;

    std::vector<float> hidden(static_cast<size_t>(B) * H);
    std::vector<float> out(static_cast<size_t>(B) * O);

    for (uint32_t r = 0; r < B; ++r) {
        const float* x = &batch.inputs.data[r * I];
        for (uint32_t j = 0; j < H; ++j) {
            float acc = b1[j];
            for (uint32_t i = 0; i < I; ++i) acc += w1[j * I + i] * x[i];
            if (!std::isfinite(acc)) throw NumericError("non-finite activation in hidden layer");
            hidden[r * H + j] = std::tanh(acc);
        }
        for (uint32_t o = 0; o < O; ++o) {
            float acc = b2[o];
            for (uint32_t j = 0; j < H; ++j) acc += w2[o * H + j] * hidden[r * H + j];
            if (!std::isfinite(acc)) throw NumericError("non-finite activation in output layer");
            out[r * O + o] = acc;
        }
    }

    float loss = 0.0f;
    const float inv_n = 1.0f / static_cast<float>(B * O);
    for (uint32_t r = 0; r < B; ++r)
        for (uint32_t o = 0; o < O; ++o) {
            float e = out[r * O + o] - batch.targets.data[r * O + o];
            loss += e * e * inv_n;
        }

    ModelParams grads = params.zeros_like();
    Tensor& gw1 = grads.entries[0].second;
    Tensor& gb1 = grads.entries[1].second;
    Tensor& gw2 = grads.entries[2].second;
    Tensor& gb2 = grads.entries[3].second;

    std::vector<float> dhidden(H);
    for (uint32_t r = 0; r < B; ++r) {
        const float* x = &batch.inputs.data[r * I];
        std::fill(dhidden.begin(), dhidden.end(), 0.0f);
        for (uint32_t o = 0; o < O; ++o) {
            float dout = 2.0f * inv_n * (out[r * O + o] - batch.targets.data[r * O + o]);
            gb2[o] += dout;
            for (uint32_t j = 0; j < H; ++j) {
                gw2[o * H + j] += dout * hidden[r * H + j];
                dhidden[j] += dout * w2[o * H + j];
            }
        }
        for (uint32_t j = 0; j < H; ++j) {
            float h = hidden[r * H + j];
            float dz = dhidden[j] * (1.0f - h * h);  // d tanh
            gb1[j] += dz;
            for (uint32_t i = 0; i < I; ++i) gw1[j * I + i] += dz * x[i];
        }
    }
    return {loss, std::move(grads)};
}

// Loss only; used for evaluation batches.
inline float toy_loss(const ModelParams& params, const Batch& batch, const ToyModelConfig& cfg) {
    return toy_forward_backward(params, batch, cfg).first;
}

}  // namespace emesh
