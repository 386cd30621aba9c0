#pragma once

#include <atomic>
#include <memory>
#include <string>

#include "emesh/coordinator.hpp"
#include "emesh/kv.hpp"
#include "emesh/mesh.hpp"
#include "emesh/runtime.hpp"

namespace emesh {

// Worker-side view of the mesh: owns the kv control link, emits heartbeats
// in the background, and wraps the barrier/join/failure protocol.
class MeshClient {
public:
    MeshClient(Env env, std::string coordinator_id)
        : env_(env),
          coordinator_(std::move(coordinator_id)),
          kv_(env.net->connect(coordinator_, "kv", 30.0)),
          stop_(std::make_shared<std::atomic<bool>>(false)) {}

    ~MeshClient() { stop_heartbeats(); }

    KvClient& kv() { return kv_; }
    const std::string& coordinator() const { return coordinator_; }

    // Heartbeat emission runs beside training on its own link so a parked
    // kv_wait never starves it.
    void start_heartbeats(double interval_s) {
        if (hb_task_) return;
        auto link = env_.net->connect(coordinator_, "kv", 30.0);
        auto stop = stop_;
        auto wake = stop_wake_ = env_.rt->make_wait();
        Runtime* rt = env_.rt;
        hb_task_ = env_.rt->spawn("heartbeat", [link, stop, wake, rt, interval_s] {
            Frame f;
            f.kind = FrameKind::heartbeat;
            while (!stop->load()) {
                try {
                    link->send(f);
                } catch (const LinkError&) {
                    break;  // coordinator gone; the trainer will notice on its own
                }
                if (wake->wait_until(rt->now() + interval_s)) break;  // stop signal
            }
            link->close();
        });
    }

    void stop_heartbeats() {
        stop_->store(true);
        if (stop_wake_) stop_wake_->signal();
        if (hb_task_) {
            hb_task_->join();
            hb_task_.reset();
        }
    }

    // Graceful exit: immediate removal from the process group, no timeout.
    void deathrattle() {
        try {
            auto link = env_.net->connect(coordinator_, "kv", 10.0);
            Frame f;
            f.kind = FrameKind::deathrattle;
            link->send(f);
            link->close();
        } catch (const LinkError&) {
            // best effort; the heartbeat timeout is the fallback
        }
    }

    void join_cluster(const JoinRequest& req) {
        kv_.set(keys::join(env_.net->local_id()), encode_join_request(req));
    }

    void announce_ready(uint64_t ckpt_step) {
        kv_.set(keys::ready(env_.net->local_id()), u64_bytes(ckpt_step));
    }

    // Barrier: announce arrival at round r, then block for the release.
    void arrive(uint64_t round) {
        kv_.set(keys::arrive(round, env_.net->local_id()), {});
    }

    BarrierRelease wait_release(uint64_t round, double timeout_s) {
        Bytes b = kv_.wait(keys::release(round), KvCond::exists, {}, timeout_s);
        return decode_release(b);
    }

    // The formation release, whatever its round number is (resumed runs
    // continue their old numbering).
    BarrierRelease wait_release_any(double timeout_s) {
        Bytes b = kv_.wait(keys::formation, KvCond::exists, {}, timeout_s);
        return decode_release(b);
    }

    // Join path: wait until the coordinator either admits us, refuses us, or
    // asks for a refetch because our checkpoint went stale.
    enum class JoinOutcome { admitted, refused, stale };
    struct JoinWait {
        JoinOutcome outcome;
        BarrierRelease release;   // valid when admitted
        uint64_t stale_round = 0; // valid when stale
    };

    JoinWait wait_admission(double timeout_s) {
        const std::string self = env_.net->local_id();
        const double deadline = env_.rt->now() + timeout_s;
        for (;;) {
            if (auto v = kv_.get(keys::refused(self))) return {JoinOutcome::refused, {}, 0};
            if (auto v = kv_.get(keys::stale(self))) {
                uint64_t round = bytes_u64(*v);
                if (round > last_stale_round_) {
                    last_stale_round_ = round;
                    return {JoinOutcome::stale, {}, round};
                }
            }
            try {
                Bytes b = kv_.wait(keys::admit(self), KvCond::exists, {}, 1.0);
                return {JoinOutcome::admitted, decode_release(b), 0};
            } catch (const TimeoutError&) {
                if (env_.rt->now() >= deadline) throw;
            }
        }
    }

    void report_failure(const std::string& failed_id) {
        kv_.set(keys::failed(failed_id), {});
    }

    MeshState fetch_mesh() {
        auto v = kv_.get(keys::mesh);
        if (!v) throw CoordinatorError("mesh not formed yet");
        return decode_mesh_state(*v);
    }

    // Blocks until the mesh epoch differs from `old_epoch`.
    MeshState wait_epoch_change(uint64_t old_epoch, double timeout_s) {
        kv_.wait(keys::epoch, KvCond::not_equals, u64_bytes(old_epoch), timeout_s);
        return fetch_mesh();
    }

    void mark_done() { kv_.set(keys::done(env_.net->local_id()), {}); }
    void mark_aborted(const std::string& why) {
        kv_.set(keys::aborted(env_.net->local_id()), Bytes(why.begin(), why.end()));
    }

private:
    Env env_;
    std::string coordinator_;
    KvClient kv_;
    std::shared_ptr<std::atomic<bool>> stop_;
    std::shared_ptr<WaitHandle> stop_wake_;
    std::shared_ptr<TaskHandle> hb_task_;
    uint64_t last_stale_round_ = 0;
};

}  // namespace emesh
