#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "emesh/coordinator.hpp"
#include "emesh/sim.hpp"
#include "emesh/trainer.hpp"

using namespace emesh;

namespace {

TrainerConfig base_config() {
    TrainerConfig cfg;
    cfg.inner_steps = 5;
    cfg.total_rounds = 6;
    cfg.batch_size = 8;
    cfg.seed = 2024;
    cfg.mode = ReduceMode::fp32;
    cfg.hp.inner_lr = 2e-3f;
    cfg.hp.warmup_steps = 0;
    cfg.hp.total_steps = 0;  // filled by validate: H*T
    cfg.hp.cooldown_fraction = 0.0f;
    cfg.hp.weight_decay = 0.01f;
    cfg.barrier_timeout = 900.0;
    cfg.reduce.step_timeout = 30.0;
    return cfg;
}

struct ClusterResult {
    std::map<std::string, Trainer::Outcome> outcomes;
    std::map<std::string, std::string> errors;
    CoordinatorService::Summary summary;
};

struct JoinPlanEntry {
    std::string id;
    JoinMode mode = JoinMode::initial;
    double start_at = 0;  // sim seconds before the node starts its join
};

ClusterResult run_cluster(uint32_t initial, TrainerConfig cfg,
                          std::vector<JoinPlanEntry> extra = {},
                          std::vector<std::pair<double, std::string>> crashes = {},
                          std::vector<std::pair<double, std::string>> leaves = {},
                          double bw = 1e9, double lat = 1e-4) {
    SimWorld w;
    w.set_default_link({bw, lat, {}});
    CoordinatorConfig ccfg;
    ccfg.expected_initial = initial;
    ccfg.cluster_hash = cfg.config_hash();
    ccfg.hb_interval = cfg.hb_interval;
    ccfg.hb_timeout = cfg.hb_timeout;
    ccfg.deadline_s = 30000.0;
    CoordinatorService coord(w.env("coord"), ccfg);
    ClusterResult result;
    std::mutex mu;
    w.spawn("coord", "coordinator", [&] { result.summary = coord.run(); });

    std::map<std::string, std::shared_ptr<Trainer>> trainers;
    auto launch = [&](const std::string& id, JoinMode mode, double delay) {
        auto tr = std::make_shared<Trainer>(w.env(id), "coord", cfg);
        trainers[id] = tr;
        w.spawn(id, "trainer-" + id, [&w, &result, &mu, tr, id, mode, delay] {
            if (delay > 0) w.env(id).rt->sleep_for(delay);
            try {
                Trainer::Outcome out = tr->run(mode);
                std::lock_guard<std::mutex> g(mu);
                result.outcomes[id] = std::move(out);
            } catch (const Error& e) {
                std::lock_guard<std::mutex> g(mu);
                result.errors[id] = e.what();
            }
        });
    };
    for (uint32_t i = 0; i < initial; ++i)
        launch("w" + std::to_string(i), JoinMode::initial, 0);
    for (const auto& e : extra) launch(e.id, e.mode, e.start_at);
    for (const auto& [at, id] : crashes) {
        std::string node = id;
        double t = at;
        w.spawn("", "crash-" + node, [&w, t, node] {
            w.env("script").rt->sleep_for(t);
            w.crash_node(node);
        });
    }
    for (const auto& [at, id] : leaves) {
        std::string node = id;
        double t = at;
        auto tr = trainers[node];
        w.spawn("", "leave-" + node, [&w, t, tr] {
            w.env("script").rt->sleep_for(t);
            tr->request_leave();
        });
    }
    w.run();
    return result;
}

// Plain single-process training loop: the oracle for the DiLoCo identities.
std::pair<ModelParams, std::vector<float>> plain_training(const TrainerConfig& cfg,
                                                          uint32_t steps, uint32_t shard) {
    ModelParams theta = toy_model_init(cfg.model, cfg.seed);
    AdamWState inner = AdamWState::zeros_like(theta);
    RngState rng{cfg.seed, 0};
    std::vector<float> losses;
    for (uint32_t s = 0; s < steps; ++s) {
        Batch b = synth_batch(rng, shard, cfg.batch_size, cfg.model);
        auto [loss, grads] = toy_forward_backward(theta, b, cfg.model);
        float scale = wsd_lr_scale(inner.step, cfg.hp);
        adamw_step(theta, grads, inner, cfg.hp, scale);
        losses.push_back(loss);
    }
    return {theta, losses};
}

bool params_bit_equal(const ModelParams& a, const ModelParams& b) {
    return params_hash(a) == params_hash(b);
}

float eval_loss(const ModelParams& params, const TrainerConfig& cfg) {
    RngState rng{cfg.seed + 999, 0};
    float total = 0;
    for (int i = 0; i < 8; ++i) {
        Batch b = synth_batch(rng, 4242, 64, cfg.model);
        total += toy_loss(params, b, cfg.model);
    }
    return total / 8;
}

}  // namespace

TEST_CASE("comm reduction factor arithmetic") {
    CHECK(comm_reduction_factor(100, ReduceMode::int8) == 400.0);
    CHECK(comm_reduction_factor(500, ReduceMode::int8) == 2000.0);
    CHECK(comm_reduction_factor(1, ReduceMode::fp32) == 1.0);
    CHECK_THROWS_AS(comm_reduction_factor(0, ReduceMode::fp32), RangeError);
}

TEST_CASE("compute utilization over a metrics stream") {
    std::vector<RoundMetrics> ms(3);
    for (auto& m : ms) {
        m.inner_seconds = 2.0;
        m.allreduce_seconds = 0.5;
    }
    CHECK(compute_utilization(ms) == Catch::Approx(0.8));
    for (auto& m : ms) m.allreduce_seconds = 0;  // k=1: no communication
    CHECK(compute_utilization(ms) == 1.0);
    CHECK_THROWS_AS(compute_utilization({}), RangeError);
}

TEST_CASE("config validation") {
    TrainerConfig cfg = base_config();
    cfg.inner_steps = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = base_config();
    cfg.hp.beta1 = 1.5f;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = base_config();
    cfg.validate();
    CHECK(cfg.hp.total_steps == cfg.inner_steps * cfg.total_rounds);
}

TEST_CASE("diloco identity: k=1, H=1, mu=0, outer lr=1 equals plain training") {
    TrainerConfig cfg = base_config();
    cfg.inner_steps = 1;
    cfg.total_rounds = 100;
    cfg.hp.outer_momentum = 0.0f;
    cfg.hp.outer_lr = 1.0f;
    cfg.force_shard = 0;

    auto res = run_cluster(1, cfg);
    REQUIRE(res.errors.empty());
    REQUIRE(res.outcomes.count("w0") == 1);
    const auto& out = res.outcomes["w0"];
    REQUIRE(out.completed);

    TrainerConfig oracle_cfg = cfg;
    oracle_cfg.validate();
    auto [theta, losses] = plain_training(oracle_cfg, 100, 0);
    CHECK(params_bit_equal(out.final_checkpoint.params, theta));
    REQUIRE(out.metrics.size() == 100);
    for (size_t t = 0; t < 100; ++t)
        CHECK(out.metrics[t].mean_inner_loss == losses[t]);
}

TEST_CASE("diloco identity: k=4 with identical shards equals k=1 bit-exactly") {
    TrainerConfig cfg = base_config();
    cfg.inner_steps = 3;
    cfg.total_rounds = 8;
    cfg.force_shard = 0;  // same data stream on every node

    auto res4 = run_cluster(4, cfg);
    REQUIRE(res4.errors.empty());
    auto res1 = run_cluster(1, cfg);
    REQUIRE(res1.errors.empty());

    const auto& k4 = res4.outcomes["w0"];
    const auto& k1 = res1.outcomes["w0"];
    REQUIRE(k4.completed);
    REQUIRE(k1.completed);
    CHECK(params_bit_equal(k4.final_checkpoint.params, k1.final_checkpoint.params));
    // replicated-state invariant: all four nodes agree at every boundary
    for (size_t t = 0; t < cfg.total_rounds; ++t) {
        for (int i = 1; i < 4; ++i) {
            const auto& mi = res4.outcomes["w" + std::to_string(i)].metrics;
            REQUIRE(mi.size() == cfg.total_rounds);
            CHECK(mi[t].param_hash == k4.metrics[t].param_hash);
        }
        CHECK(k4.metrics[t].param_hash == k1.metrics[t].param_hash);
    }
}

TEST_CASE("distinct shards diverge locally but agree at boundaries") {
    TrainerConfig cfg = base_config();
    auto res = run_cluster(3, cfg);
    REQUIRE(res.errors.empty());
    for (size_t t = 0; t < cfg.total_rounds; ++t) {
        const std::string& h0 = res.outcomes["w0"].metrics[t].param_hash;
        CHECK(res.outcomes["w1"].metrics[t].param_hash == h0);
        CHECK(res.outcomes["w2"].metrics[t].param_hash == h0);
    }
    // different data per shard: local losses differ
    CHECK(res.outcomes["w0"].metrics[0].mean_inner_loss !=
          res.outcomes["w1"].metrics[0].mean_inner_loss);
}

TEST_CASE("int8 run stays close to fp32 run on the same seeds") {
    TrainerConfig cfg = base_config();
    cfg.inner_steps = 10;
    cfg.total_rounds = 10;
    auto fp = run_cluster(2, cfg);
    REQUIRE(fp.errors.empty());
    cfg.mode = ReduceMode::int8;
    auto q = run_cluster(2, cfg);
    REQUIRE(q.errors.empty());

    float lf = eval_loss(fp.outcomes["w0"].final_checkpoint.params, cfg);
    float lq = eval_loss(q.outcomes["w0"].final_checkpoint.params, cfg);
    INFO("fp32 " << lf << " int8 " << lq);
    CHECK(std::abs(lq - lf) <= 0.10f * std::max(lf, 1e-3f));
    // int8 nodes still agree bit-exactly with each other
    for (size_t t = 0; t < cfg.total_rounds; ++t)
        CHECK(q.outcomes["w0"].metrics[t].param_hash ==
              q.outcomes["w1"].metrics[t].param_hash);
}

TEST_CASE("determinism: identical config and script give identical metrics") {
    TrainerConfig cfg = base_config();
    cfg.mode = ReduceMode::int8;
    auto a = run_cluster(3, cfg);
    auto b = run_cluster(3, cfg);
    REQUIRE(a.errors.empty());
    REQUIRE(b.errors.empty());
    for (const std::string id : {"w0", "w1", "w2"}) {
        const auto& ma = a.outcomes[id].metrics;
        const auto& mb = b.outcomes[id].metrics;
        REQUIRE(ma.size() == mb.size());
        for (size_t i = 0; i < ma.size(); ++i)
            CHECK(ma[i].to_json_line() == mb[i].to_json_line());
    }
}

TEST_CASE("blocking join: checkpoint identical, next rounds average the joiner in") {
    TrainerConfig cfg = base_config();
    cfg.inner_steps = 4;
    cfg.total_rounds = 8;
    cfg.sim_inner_step_seconds = 1.0;  // rounds take ~4s of sim time
    // joiner shows up mid-round-3
    auto res = run_cluster(2, cfg, {{"w9", JoinMode::blocking, 9.0}});
    REQUIRE(res.errors.empty());
    REQUIRE(res.outcomes.count("w9") == 1);
    const auto& joiner = res.outcomes["w9"];
    REQUIRE(joiner.completed);
    REQUIRE_FALSE(joiner.metrics.empty());
    uint64_t entry = joiner.metrics.front().outer_step;
    CHECK(entry >= 3);

    // from the entry round on, every live node reports the same param hash
    // and a world size of 3
    for (const auto& m : joiner.metrics) {
        const auto& w0m = res.outcomes["w0"].metrics[m.outer_step - 1];
        CHECK(w0m.param_hash == m.param_hash);
        CHECK(w0m.world_size == (w0m.outer_step >= entry ? 3 : 2));
    }
    // entry round contributed exactly-zero delta: the joiner's loss field is 0
    CHECK(joiner.metrics.front().mean_inner_loss == 0.0f);
}

TEST_CASE("nonblocking join: active nodes never pause and joiner enters with zero delta") {
    TrainerConfig cfg = base_config();
    cfg.inner_steps = 4;
    cfg.total_rounds = 10;
    cfg.sim_inner_step_seconds = 1.0;
    cfg.blocking_join = false;

    auto with_join = run_cluster(2, cfg, {{"w9", JoinMode::nonblocking, 9.0}});
    REQUIRE(with_join.errors.empty());
    auto without = run_cluster(2, cfg);
    REQUIRE(without.errors.empty());

    const auto& joiner = with_join.outcomes["w9"];
    REQUIRE(joiner.completed);
    CHECK(joiner.metrics.front().mean_inner_loss == 0.0f);  // zero pseudo-gradient entry

    // the active nodes' inner-phase timing is untouched by the concurrent join
    for (size_t t = 0; t + 1 < joiner.metrics.front().outer_step; ++t) {
        CHECK(with_join.outcomes["w0"].metrics[t].inner_seconds ==
              Catch::Approx(without.outcomes["w0"].metrics[t].inner_seconds));
    }
    // convergent state across all three after entry
    const auto& last_w0 = with_join.outcomes["w0"].metrics.back();
    const auto& last_j = joiner.metrics.back();
    CHECK(last_w0.param_hash == last_j.param_hash);
}

TEST_CASE("graceful leave mid-inner-phase leaves survivors undisturbed") {
    TrainerConfig cfg = base_config();
    cfg.inner_steps = 4;
    cfg.total_rounds = 6;
    cfg.sim_inner_step_seconds = 1.0;
    auto res = run_cluster(3, cfg, {}, {}, {{9.5, "w2"}});
    REQUIRE(res.errors.empty());
    // w2 left early and incomplete
    REQUIRE(res.outcomes.count("w2") == 1);
    CHECK_FALSE(res.outcomes["w2"].completed);
    // survivors finish all rounds and agree; world size drops to 2
    const auto& m0 = res.outcomes["w0"].metrics;
    REQUIRE(m0.size() == cfg.total_rounds);
    CHECK(m0.back().world_size == 2);
    CHECK(m0.back().param_hash == res.outcomes["w1"].metrics.back().param_hash);
    CHECK(res.summary.ok);
}

TEST_CASE("crash mid-run: survivors finish with survivor-count divisor") {
    TrainerConfig cfg = base_config();
    cfg.inner_steps = 4;
    cfg.total_rounds = 6;
    cfg.sim_inner_step_seconds = 1.0;
    auto res = run_cluster(3, cfg, {}, {{9.5, "w1"}});
    REQUIRE(res.errors.count("w0") == 0);
    REQUIRE(res.errors.count("w2") == 0);
    const auto& m0 = res.outcomes["w0"].metrics;
    const auto& m2 = res.outcomes["w2"].metrics;
    REQUIRE(m0.size() == cfg.total_rounds);
    REQUIRE(m2.size() == cfg.total_rounds);
    CHECK(m0.back().world_size == 2);
    for (size_t t = 0; t < cfg.total_rounds; ++t) CHECK(m0[t].param_hash == m2[t].param_hash);
}

TEST_CASE("sample accounting matches k x H x T with per-round world size") {
    TrainerConfig cfg = base_config();
    cfg.inner_steps = 4;
    cfg.total_rounds = 5;
    auto res = run_cluster(2, cfg);
    REQUIRE(res.errors.empty());
    // every completed node consumed exactly H batches per round it trained
    for (const std::string id : {"w0", "w1"}) {
        const auto& out = res.outcomes[id];
        uint64_t rounds_trained = out.metrics.size();
        CHECK(out.final_checkpoint.data_counter == rounds_trained * cfg.inner_steps);
    }
}

TEST_CASE("metrics stream file is valid JSON lines") {
    TrainerConfig cfg = base_config();
    cfg.total_rounds = 3;
    cfg.metrics_path = "/tmp/emesh_metrics_test.jsonl";
    auto res = run_cluster(1, cfg);
    REQUIRE(res.errors.empty());
    std::ifstream in(cfg.metrics_path);
    REQUIRE(in.good());
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) {
        CHECK(line.find("\"outer_step\":") != std::string::npos);
        CHECK(line.find("\"param_hash\":\"") != std::string::npos);
        rows += 1;
    }
    CHECK(rows == 3);
    std::remove(cfg.metrics_path.c_str());
}

TEST_CASE("resume from checkpoint continues the run") {
    TrainerConfig cfg = base_config();
    cfg.inner_steps = 2;
    cfg.total_rounds = 4;
    cfg.checkpoint_dir = "/tmp/emesh_resume_test";
    std::system("mkdir -p /tmp/emesh_resume_test");
    auto first = run_cluster(2, cfg);
    REQUIRE(first.errors.empty());

    // same config, two more rounds, resuming from the written files
    TrainerConfig cfg2 = cfg;
    cfg2.total_rounds = 6;
    // config hash must match across resume: keep total_steps identical
    cfg.validate();
    cfg2.hp.total_steps = cfg.hp.total_steps;
    SimWorld w;
    w.set_default_link({1e9, 1e-4, {}});
    CoordinatorConfig ccfg;
    ccfg.expected_initial = 2;
    TrainerConfig probe = cfg2;
    probe.resume_from = "/tmp/emesh_resume_test/w0.ckpt";
    ccfg.cluster_hash = probe.config_hash();
    ccfg.deadline_s = 10000.0;
    CoordinatorService coord(w.env("coord"), ccfg);
    w.spawn("coord", "coordinator", [&] { coord.run(); });
    std::map<std::string, Trainer::Outcome> outs;
    std::mutex mu;
    for (const std::string id : {"w0", "w1"}) {
        TrainerConfig mine = cfg2;
        mine.resume_from = "/tmp/emesh_resume_test/" + id + ".ckpt";
        w.spawn(id, "trainer-" + id, [&w, &outs, &mu, id, mine] {
            Trainer tr(w.env(id), "coord", mine);
            auto out = tr.run(JoinMode::initial);
            std::lock_guard<std::mutex> g(mu);
            outs[id] = std::move(out);
        });
    }
    w.run();
    REQUIRE(outs.count("w0") == 1);
    const auto& m = outs["w0"].metrics;
    REQUIRE(m.size() == 2);  // rounds 5 and 6 only
    CHECK(m.front().outer_step == 5);
    CHECK(outs["w0"].final_checkpoint.outer_step == 6);
    CHECK(outs["w0"].metrics.back().param_hash == outs["w1"].metrics.back().param_hash);
    std::system("rm -rf /tmp/emesh_resume_test");
}
