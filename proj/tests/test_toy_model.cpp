#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "emesh/optim.hpp"
#include "emesh/toy_model.hpp"

using namespace emesh;

namespace {

// Test-only double-precision forward pass, independent of the library path.
// Used as the finite-difference oracle.
double forward_loss_f64(const ToyModelConfig& cfg, const std::vector<double>& flat,
                        const Batch& batch) {
    const uint32_t I = cfg.input_dim, H = cfg.hidden_dim, O = cfg.output_dim;
    const double* w1 = flat.data();
    const double* b1 = w1 + static_cast<size_t>(H) * I;
    const double* w2 = b1 + H;
    const double* b2 = w2 + static_cast<size_t>(O) * H;
    double loss = 0.0;
    for (uint32_t r = 0; r < batch.batch_size; ++r) {
        std::vector<double> h(H);
        for (uint32_t j = 0; j < H; ++j) {
            double acc = b1[j];
            for (uint32_t i = 0; i < I; ++i)
                acc += w1[j * I + i] * static_cast<double>(batch.inputs.data[r * I + i]);
            h[j] = std::tanh(acc);
        }
        for (uint32_t o = 0; o < O; ++o) {
            double acc = b2[o];
            for (uint32_t j = 0; j < H; ++j) acc += w2[o * H + j] * h[j];
            double e = acc - static_cast<double>(batch.targets.data[r * O + o]);
            loss += e * e / static_cast<double>(batch.batch_size * O);
        }
    }
    return loss;
}

}  // namespace

TEST_CASE("zero-weight network on zero targets gives zero loss") {
    ToyModelConfig cfg;
    ModelParams p = toy_model_shapes(cfg);  // zero-initialized
    Batch b;
    b.batch_size = 3;
    b.inputs = Tensor({3, cfg.input_dim});
    b.targets = Tensor({3, cfg.output_dim});
    for (auto& v : b.inputs.data) v = 0.7f;
    auto [loss, grads] = toy_forward_backward(p, b, cfg);
    CHECK(loss == 0.0f);
    REQUIRE(grads.same_shapes(p));
}

TEST_CASE("gradients match central finite differences") {
    ToyModelConfig cfg;
    cfg.input_dim = 2;
    cfg.hidden_dim = 4;
    cfg.output_dim = 2;
    cfg.teacher_hidden_dim = 8;
    ModelParams p = toy_model_init(cfg, 99);
    RngState rng{99, 0};
    Batch b = synth_batch(rng, 0, 5, cfg);

    auto [loss, grads] = toy_forward_backward(p, b, cfg);
    CHECK(std::isfinite(loss));

    std::vector<float> flat32 = p.flatten();
    std::vector<double> flat(flat32.begin(), flat32.end());
    REQUIRE(flat.size() <= 100);

    std::vector<float> gflat = grads.flatten();
    const double h = 1e-3;
    for (size_t i = 0; i < flat.size(); ++i) {
        std::vector<double> up = flat, dn = flat;
        up[i] += h;
        dn[i] -= h;
        double fd = (forward_loss_f64(cfg, up, b) - forward_loss_f64(cfg, dn, b)) / (2 * h);
        double rel = std::abs(static_cast<double>(gflat[i]) - fd) /
                     std::max(1.0, std::abs(fd));
        CHECK(rel <= 1e-4);
    }
}

TEST_CASE("forward/backward is bit-deterministic") {
    ToyModelConfig cfg;
    ModelParams p = toy_model_init(cfg, 5);
    RngState rng{5, 0};
    Batch b = synth_batch(rng, 2, 8, cfg);
    auto [l1, g1] = toy_forward_backward(p, b, cfg);
    auto [l2, g2] = toy_forward_backward(p, b, cfg);
    CHECK(std::memcmp(&l1, &l2, 4) == 0);
    auto f1 = g1.flatten(), f2 = g2.flatten();
    CHECK(std::memcmp(f1.data(), f2.data(), 4 * f1.size()) == 0);
}

TEST_CASE("synth batches: determinism, shard disjointness, replay") {
    ToyModelConfig cfg;
    RngState a{77, 0}, b{77, 0};
    Batch ba = synth_batch(a, 0, 4, cfg);
    Batch bb = synth_batch(b, 0, 4, cfg);
    CHECK(ba.inputs.data == bb.inputs.data);
    CHECK(ba.targets.data == bb.targets.data);
    CHECK(a.counter == 1);

    RngState c{77, 0};
    Batch bc = synth_batch(c, 1, 4, cfg);
    CHECK(bc.inputs.data != ba.inputs.data);

    // replay from a saved stream position
    RngState pos{77, 0};
    synth_batch(pos, 0, 4, cfg);
    synth_batch(pos, 0, 4, cfg);
    RngState saved = pos;  // position after two batches
    Batch b3 = synth_batch(pos, 0, 4, cfg);
    RngState resumed = saved;
    Batch b3r = synth_batch(resumed, 0, 4, cfg);
    CHECK(b3.inputs.data == b3r.inputs.data);
    CHECK(b3.targets.data == b3r.targets.data);
}

TEST_CASE("training on the toy problem reduces loss") {
    ToyModelConfig cfg;
    ModelParams p = toy_model_init(cfg, 123);
    HyperParams hp;
    hp.inner_lr = 5e-3f;
    hp.warmup_steps = 0;
    hp.total_steps = 200;
    hp.cooldown_fraction = 0.0f;
    hp.weight_decay = 0.0f;
    AdamWState st = AdamWState::zeros_like(p);
    RngState rng{123, 0};
    float first = 0, last = 0;
    for (int step = 0; step < 200; ++step) {
        Batch b = synth_batch(rng, 0, 16, cfg);
        auto [loss, grads] = toy_forward_backward(p, b, cfg);
        if (step == 0) first = loss;
        last = loss;
        adamw_step(p, grads, st, hp, 1.0f);
    }
    CHECK(last < 0.5f * first);
}
