#pragma once

#include <atomic>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "emesh/allreduce.hpp"
#include "emesh/checkpoint.hpp"
#include "emesh/client.hpp"
#include "emesh/optim.hpp"
#include "emesh/toy_model.hpp"
#include "emesh/topology.hpp"

namespace emesh {

struct TrainerConfig {
    uint32_t inner_steps = 100;  // local optimizer steps per round
    uint32_t total_rounds = 10;
    uint32_t batch_size = 16;
    uint64_t seed = 1;
    ReduceMode mode = ReduceMode::int8;
    bool blocking_join = true;
    HyperParams hp;
    ToyModelConfig model;

    double hb_interval = 2.0;
    double hb_timeout = 6.0;
    double barrier_timeout = 600.0;
    double fetch_timeout = 120.0;
    ReduceOptions reduce;
    double probe_interval = 0;  // 0 disables background bandwidth probing
    double topo_floor_bps = 1e3;

    int64_t force_shard = -1;           // >=0: every node reads this shard (tests)
    double sim_inner_step_seconds = 0;  // compute cost model under the simulator
    std::string metrics_path;           // JSON lines; empty keeps metrics in memory only
    std::string checkpoint_dir;
    uint32_t checkpoint_every = 0;  // rounds between disk checkpoints; 0 = final only
    std::string resume_from;        // checkpoint file: continue a previous run

    void validate() {
        if (inner_steps < 1) throw ConfigError("inner_steps must be >= 1");
        if (total_rounds < 1) throw ConfigError("total_rounds must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (hp.total_steps == 0) hp.total_steps = inner_steps * total_rounds;
        hp.validate();
    }

    // Identity of the training run: joins are refused unless these agree.
    Sha256::Digest config_hash() const {
        ByteWriter w;
        w.u32(inner_steps);
        w.u32(total_rounds);
        w.u32(batch_size);
        w.u64(seed);
        w.u8(static_cast<uint8_t>(mode));
        w.u32(model.input_dim);
        w.u32(model.hidden_dim);
        w.u32(model.output_dim);
        w.u32(model.teacher_hidden_dim);
        w.f32(hp.inner_lr);
        w.f32(hp.beta1);
        w.f32(hp.beta2);
        w.f32(hp.eps);
        w.f32(hp.weight_decay);
        w.f32(hp.outer_lr);
        w.f32(hp.outer_momentum);
        w.u32(hp.warmup_steps);
        w.u32(hp.total_steps);
        w.f32(hp.cooldown_fraction);
        return Sha256::hash(w.buffer());
    }
};

struct RoundMetrics {
    uint64_t outer_step = 0;
    float mean_inner_loss = 0;
    double inner_seconds = 0;
    double allreduce_seconds = 0;
    uint64_t bytes_sent = 0;
    uint64_t bytes_received = 0;
    uint32_t world_size = 0;
    float lr_scale = 0;
    std::string param_hash;

    std::string to_json_line() const {
        char buf[512];
        std::snprintf(buf, sizeof buf,
                      "{\"outer_step\":%" PRIu64
                      ",\"mean_inner_loss\":%.9g,\"inner_seconds\":%.9g,"
                      "\"allreduce_seconds\":%.9g,\"bytes_sent\":%" PRIu64
                      ",\"bytes_received\":%" PRIu64
                      ",\"world_size\":%u,\"lr_scale\":%.9g,\"param_hash\":\"%s\"}",
                      outer_step, mean_inner_loss, inner_seconds, allreduce_seconds,
                      bytes_sent, bytes_received, world_size, lr_scale, param_hash.c_str());
        return std::string(buf);
    }
};

// Synchronization-frequency saving times payload-size saving. Codebook
// overhead is deliberately excluded (it amortizes away for large tensors);
// the metrics stream reports true byte counts separately.
inline double comm_reduction_factor(uint32_t inner_steps, ReduceMode mode) {
    if (inner_steps < 1) throw RangeError("comm_reduction_factor: H >= 1 required");
    return static_cast<double>(inner_steps) * (mode == ReduceMode::int8 ? 4.0 : 1.0);
}

// Fraction of run time spent computing rather than communicating.
inline double compute_utilization(const std::vector<RoundMetrics>& rounds) {
    if (rounds.empty()) throw RangeError("compute_utilization: empty metrics stream");
    double inner = 0, comm = 0;
    for (const auto& r : rounds) {
        inner += r.inner_seconds;
        comm += r.allreduce_seconds;
    }
    return inner / (inner + comm);
}

// ---------------------------------------------------------------------------
// The training loop: H inner AdamW steps against shard-local batches, pseudo-
// gradient against the host-retained weights, (quantized) ring all-reduce,
// and a redundantly replicated Nesterov outer step at every boundary.

class Trainer {
public:
    struct Outcome {
        bool completed = false;  // reached round T (false: asked to leave early)
        Checkpoint final_checkpoint;
        std::vector<RoundMetrics> metrics;
    };

    Trainer(Env env, std::string coordinator, TrainerConfig cfg)
        : env_(env), coordinator_(std::move(coordinator)), cfg_(std::move(cfg)) {
        cfg_.validate();
    }

    // Graceful departure: the node deathrattles at its next opportunity.
    void request_leave() { leave_.store(true); }

    Outcome run(JoinMode how) {
        MeshClient mc(env_, coordinator_);
        mc.start_heartbeats(cfg_.hb_interval);
        auto vault = std::make_shared<CheckpointVault>();
        auto stop = std::make_shared<std::atomic<bool>>(false);
        Env env = env_;
        auto serve_task = env_.rt->spawn(
            "ckpt-serve", [env, vault, stop] { serve_checkpoints(env, vault, stop); });
        auto probe_srv_task =
            env_.rt->spawn("probe-serve", [env, stop] { probe_server(env, stop); });
        std::shared_ptr<TaskHandle> probe_task;

        Outcome outcome;
        try {
            RingIO io(env_);
            outcome = run_inner(mc, io, vault, stop, how, probe_task);
        } catch (const Error& e) {
            // best effort: tell the mesh before going down
            try {
                mc.mark_aborted(e.what());
            } catch (const Error&) {
            }
            try {
                mc.deathrattle();
            } catch (const Error&) {
            }
            stop->store(true);
            mc.stop_heartbeats();
            serve_task->join();
            probe_srv_task->join();
            if (probe_task) probe_task->join();
            throw;
        }
        stop->store(true);
        mc.stop_heartbeats();
        serve_task->join();
        probe_srv_task->join();
        if (probe_task) probe_task->join();
        return outcome;
    }

private:
    struct NodeState {
        ModelParams retained;  // theta^(t-1), never touched by inner steps
        ModelParams local;     // theta_i during the inner phase
        AdamWState inner;
        NesterovState outer;
        RngState rng;
        uint32_t shard = 0;
        uint64_t round = 0;  // last completed outer step
    };

    Outcome run_inner(MeshClient& mc, RingIO& io, std::shared_ptr<CheckpointVault> vault,
                      std::shared_ptr<std::atomic<bool>> stop, JoinMode how,
                      std::shared_ptr<TaskHandle>& probe_task) {
        const std::string self = env_.net->local_id();
        const Sha256::Digest chash = cfg_.config_hash();

        NodeState st;
        MeshState mesh;
        uint64_t entry_round = 0;  // first collective this node takes part in
        bool entering = false;     // true: contribute zero pseudo-gradients at entry

        if (how == JoinMode::initial) {
            JoinRequest req;
            req.mode = JoinMode::initial;
            req.config_hash = chash;
            Checkpoint resume;
            bool resuming = !cfg_.resume_from.empty();
            if (resuming) {
                resume = read_checkpoint_file(cfg_.resume_from);
                if (resume.config_hash != chash)
                    throw ConfigError("resume checkpoint was built from a different config");
                req.start_step = resume.outer_step;
            }
            mc.join_cluster(req);
            BarrierRelease rel = mc.wait_release_any(cfg_.barrier_timeout);
            mesh = rel.mesh;
            const MeshMember* me = mesh.find(self);
            if (me == nullptr) throw FatalError("not admitted at formation");
            if (resuming) {
                st.retained = resume.params;
                st.local = resume.params;
                st.inner = resume.inner;
                st.outer = resume.outer;
                st.rng = RngState{cfg_.seed, resume.data_counter};
                st.shard = resume.shard;
                st.round = resume.outer_step;
            } else {
                if (rel.round != 0)
                    throw FatalError("cluster resumed at step " + std::to_string(rel.round) +
                                     " but this worker has no checkpoint");
                st.retained = toy_model_init(cfg_.model, cfg_.seed);
                st.local = st.retained;
                st.inner = AdamWState::zeros_like(st.retained);
                st.outer = NesterovState::zeros_like(st.retained);
                st.rng = RngState{cfg_.seed, 0};
                st.shard = me->shard;
                st.round = 0;
            }
        } else {
            JoinRequest req;
            req.mode = how;
            req.config_hash = chash;
            mc.join_cluster(req);
            Checkpoint ck;
            if (how == JoinMode::blocking) {
                MeshClient::JoinWait jw = mc.wait_admission(cfg_.barrier_timeout);
                if (jw.outcome == MeshClient::JoinOutcome::refused)
                    throw FatalError("join refused (config mismatch?)");
                if (jw.outcome != MeshClient::JoinOutcome::admitted)
                    throw FatalError("unexpected join outcome");
                mesh = jw.release.mesh;
                entry_round = jw.release.round;
                std::vector<std::string> donors;
                for (const auto& m : mesh.members)
                    if (m.id != self && !is_joiner(jw.release, m.id)) donors.push_back(m.id);
                ck = fetch_checkpoint(env_, donors, cfg_.fetch_timeout);
                mc.kv().set(keys::fetched(entry_round, self), {});
            } else {
                // non-blocking: download during the others' inner phase, then
                // enter at the next boundary with zero pseudo-gradients
                for (;;) {
                    Bytes mb = mc.kv().wait(keys::mesh, KvCond::exists, {}, cfg_.barrier_timeout);
                    MeshState cur = decode_mesh_state(mb);
                    std::vector<std::string> donors;
                    for (const auto& m : cur.members)
                        if (m.id != self) donors.push_back(m.id);
                    ck = fetch_checkpoint(env_, donors, cfg_.fetch_timeout);
                    mc.announce_ready(ck.outer_step);
                    MeshClient::JoinWait jw = mc.wait_admission(cfg_.barrier_timeout);
                    if (jw.outcome == MeshClient::JoinOutcome::refused)
                        throw FatalError("join refused (config mismatch?)");
                    if (jw.outcome == MeshClient::JoinOutcome::stale) continue;
                    mesh = jw.release.mesh;
                    entry_round = jw.release.round;
                    break;
                }
            }
            if (ck.config_hash != chash)
                throw FatalError("donor checkpoint does not match this configuration");
            if (ck.outer_step + 1 != entry_round)
                throw FatalError("admitted with a stale checkpoint");
            const MeshMember* me = mesh.find(self);
            if (me == nullptr) throw FatalError("admitted but absent from the mesh");
            st.retained = ck.params;
            st.local = ck.params;
            st.inner = ck.inner;
            st.outer = ck.outer;
            st.rng = RngState{cfg_.seed, 0};
            st.shard = me->shard;
            st.round = ck.outer_step;
            entering = true;
        }
        if (cfg_.force_shard >= 0) st.shard = static_cast<uint32_t>(cfg_.force_shard);

        vault->put(make_checkpoint(st));
        if (cfg_.probe_interval > 0) start_probe_loop(probe_task, stop);

        std::ofstream metrics_out;
        if (!cfg_.metrics_path.empty()) {
            metrics_out.open(cfg_.metrics_path, std::ios::trunc);
            if (!metrics_out) throw ConfigError("cannot write metrics to " + cfg_.metrics_path);
        }

        Outcome outcome;
        const size_t flat_size = st.retained.element_count();

        for (uint64_t t = st.round + 1; t <= cfg_.total_rounds; ++t) {
            RoundMetrics rm;
            rm.outer_step = t;
            uint64_t bytes0 = env_.net->bytes_sent();
            uint64_t rbytes0 = env_.net->bytes_received();

            std::vector<float> delta;
            Sha256::Digest retained_before = params_hash(st.retained);
            const bool entry_boundary = entering;
            if (entering) {
                // first boundary after a join: exactly-zero contribution,
                // counted in the divisor
                delta.assign(flat_size, 0.0f);
                rm.mean_inner_loss = 0;
                rm.lr_scale = 0;
                entering = false;
            } else {
                double inner_t0 = env_.rt->now();
                float loss_sum = 0;
                for (uint32_t h = 0; h < cfg_.inner_steps; ++h) {
                    if (leave_.load()) {
                        mc.deathrattle();
                        mc.stop_heartbeats();
                        outcome.completed = false;
                        outcome.final_checkpoint = make_checkpoint(st);
                        return outcome;
                    }
                    Batch batch = synth_batch(st.rng, st.shard, cfg_.batch_size, cfg_.model);
                    auto [loss, grads] = toy_forward_backward(st.local, batch, cfg_.model);
                    if (!std::isfinite(loss))
                        throw NumericError("non-finite loss in round " + std::to_string(t));
                    rm.lr_scale = wsd_lr_scale(st.inner.step, cfg_.hp);
                    adamw_step(st.local, grads, st.inner, cfg_.hp, rm.lr_scale);
                    loss_sum += loss;
                    if (cfg_.sim_inner_step_seconds > 0)
                        env_.rt->charge_compute(cfg_.sim_inner_step_seconds);
                }
                rm.mean_inner_loss = loss_sum / static_cast<float>(cfg_.inner_steps);
                rm.inner_seconds = env_.rt->now() - inner_t0;

                if (params_hash(st.retained) != retained_before)
                    throw FatalError("retained weights mutated during the inner phase");

                ModelParams delta_params = compute_pseudo_gradient(st.retained, st.local);
                delta = delta_params.flatten();
            }

            // ---- outer synchronization at the epoch barrier; a joiner is
            // admitted by the release itself and does not count in the quorum
            double ar_t0 = env_.rt->now();
            if (!entry_boundary) mc.arrive(t);
            BarrierRelease rel = mc.wait_release(t, cfg_.barrier_timeout);
            mesh = rel.mesh;
            // blocking joiners download now; everyone holds until they have it
            for (const auto& j : rel.joiners) {
                if (j.mode != JoinMode::blocking || j.id == self) continue;
                try {
                    mc.kv().wait(keys::fetched(t, j.id), KvCond::exists, {}, cfg_.fetch_timeout);
                } catch (const TimeoutError&) {
                    // joiner never finished; the retry path will exclude it
                }
            }

            ReduceJob job{t, std::move(delta), cfg_.mode};
            RetryResult red = allreduce_with_retry(env_, io, mc, mesh, job, cfg_.reduce);
            rm.world_size = red.participants;

            ModelParams avg = st.retained.zeros_like();
            avg.unflatten(red.value);
            nesterov_outer_step(st.retained, avg, st.outer, cfg_.hp);
            st.local = st.retained;
            st.round = t;
            rm.allreduce_seconds = env_.rt->now() - ar_t0;

            vault->put(make_checkpoint(st));
            rm.bytes_sent = env_.net->bytes_sent() - bytes0;
            rm.bytes_received = env_.net->bytes_received() - rbytes0;
            rm.param_hash = Sha256::hex(params_hash(st.retained));
            outcome.metrics.push_back(rm);
            if (metrics_out.is_open()) metrics_out << rm.to_json_line() << "\n" << std::flush;

            if (!cfg_.checkpoint_dir.empty() && cfg_.checkpoint_every > 0 &&
                t % cfg_.checkpoint_every == 0)
                write_checkpoint_file(checkpoint_path(), make_checkpoint(st));
        }

        outcome.completed = true;
        outcome.final_checkpoint = make_checkpoint(st);
        if (!cfg_.checkpoint_dir.empty())
            write_checkpoint_file(checkpoint_path(), outcome.final_checkpoint);
        mc.mark_done();
        return outcome;
    }

    static bool is_joiner(const BarrierRelease& rel, const std::string& id) {
        for (const auto& j : rel.joiners)
            if (j.id == id) return true;
        return false;
    }

    Checkpoint make_checkpoint(const NodeState& st) const {
        Checkpoint ck;
        ck.outer_step = st.round;
        ck.params = st.retained;
        ck.retained = st.retained;
        ck.inner = st.inner;
        ck.outer = st.outer;
        ck.rng_seed = cfg_.seed;
        ck.data_counter = st.rng.counter;
        ck.shard = st.shard;
        ck.config_hash = cfg_.config_hash();
        return ck;
    }

    std::string checkpoint_path() const {
        return cfg_.checkpoint_dir + "/" + env_.net->local_id() + ".ckpt";
    }

    void start_probe_loop(std::shared_ptr<TaskHandle>& task,
                          std::shared_ptr<std::atomic<bool>> stop) {
        Env env = env_;
        std::string coord = coordinator_;
        double interval = cfg_.probe_interval;
        double floor = cfg_.topo_floor_bps;
        task = env_.rt->spawn("probe-loop", [env, coord, interval, floor, stop] {
            try {
                KvClient kv(env.net->connect(coord, "kv", 30.0));
                while (!stop->load()) {
                    env.rt->sleep_for(interval);
                    if (stop->load()) break;
                    auto mv = kv.get(keys::mesh);
                    if (!mv) continue;
                    MeshState mesh = decode_mesh_state(*mv);
                    probe_and_report(env, kv, mesh.member_ids(), floor);
                }
            } catch (const Error&) {
                // probing is best-effort; training carries on without it
            }
        });
    }

    Env env_;
    std::string coordinator_;
    TrainerConfig cfg_;
    std::atomic<bool> leave_{false};
};

}  // namespace emesh
