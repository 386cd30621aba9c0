#pragma once

#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "emesh/kv.hpp"
#include "emesh/mesh.hpp"
#include "emesh/runtime.hpp"
#include "emesh/topology.hpp"

namespace emesh {

// Key naming shared by coordinator and workers.
namespace keys {
inline std::string release(uint64_t r) { return "release/" + std::to_string(r); }
inline std::string arrive(uint64_t r, const std::string& id) {
    return "arrive/" + std::to_string(r) + "/" + id;
}
inline std::string fetched(uint64_t r, const std::string& id) {
    return "fetched/" + std::to_string(r) + "/" + id;
}
inline std::string admit(const std::string& id) { return "admit/" + id; }
inline std::string join(const std::string& id) { return "join/" + id; }
inline std::string ready(const std::string& id) { return "ready/" + id; }
inline std::string refused(const std::string& id) { return "join_refused/" + id; }
inline std::string stale(const std::string& id) { return "join_stale/" + id; }
inline std::string failed(const std::string& id) { return "failed/" + id; }
inline std::string done(const std::string& id) { return "done/" + id; }
inline std::string aborted(const std::string& id) { return "aborted/" + id; }
inline constexpr const char* mesh = "mesh";
inline constexpr const char* epoch = "epoch";
inline constexpr const char* formation = "formation";
}  // namespace keys

struct CoordinatorConfig {
    uint32_t expected_initial = 1;
    double hb_interval = 2.0;  // heartbeat cadence, also the detector cadence
    double hb_timeout = 6.0;   // silence past this is an eviction
    Sha256::Digest cluster_hash{};
    double deadline_s = kNever;  // hard stop for runaway scenarios
    // ring maintenance
    bool solve_ring_enabled = true;
    double topo_ema = 0.5;
    double topo_hysteresis = 0.10;
    double topo_floor_bps = 1e3;
};

// The master key-value store plus membership service. Single process, single
// store: every membership mutation funnels through one mutex, giving the
// linearizable per-key semantics the workers rely on.
class CoordinatorService {
public:
    struct Summary {
        bool ok = true;
        std::vector<std::string> aborted;
        uint64_t final_epoch = 0;
        uint64_t final_round = 0;
    };

    CoordinatorService(Env env, CoordinatorConfig cfg)
        : env_(env),
          cfg_(cfg),
          store_(*env.rt),
          mesh_(cfg.expected_initial, cfg.hb_timeout, cfg.cluster_hash) {
        mesh_.set_ring_solver([this](const std::vector<std::string>& ids) {
            return ring_for(ids);
        });
    }

    KvStore& store() { return store_; }

    void request_stop() { stop_.store(true); }

    Summary run() {
        auto listener = env_.net->listen("kv");
        auto detector = env_.rt->spawn("detector", [this] { detector_loop(); });
        while (!stop_.load()) {
            std::shared_ptr<Link> link;
            try {
                link = listener->accept(0.5);
            } catch (const TimeoutError&) {
                continue;
            } catch (const LinkError&) {
                break;
            }
            env_.rt->spawn("kv-conn-" + link->peer_id(),
                           [this, link] { serve_link(link); });
        }
        listener->close();
        detector->join();
        Summary s;
        {
            std::lock_guard<std::mutex> g(mu_);
            s.ok = aborted_.empty();
            s.aborted.assign(aborted_.begin(), aborted_.end());
            s.final_epoch = mesh_.state().epoch;
            s.final_round = mesh_.state().round;
        }
        return s;
    }

private:
    void detector_loop() {
        while (!stop_.load()) {
            env_.rt->sleep_for(cfg_.hb_interval);
            double now = env_.rt->now();
            if (now > cfg_.deadline_s) {
                stop_.store(true);
                break;
            }
            MeshEffects fx;
            {
                std::lock_guard<std::mutex> g(mu_);
                fx = mesh_.tick(now);
            }
            apply(fx);
            maybe_finish();
        }
    }

    void serve_link(std::shared_ptr<Link> link) {
        const std::string peer = link->peer_id();
        for (;;) {
            Frame f;
            try {
                f = link->recv(1.0);
            } catch (const TimeoutError&) {
                if (stop_.load()) return;
                continue;
            } catch (const LinkError&) {
                return;  // peer departed; its handler ends here
            }
            try {
                switch (f.kind) {
                    case FrameKind::heartbeat: {
                        std::lock_guard<std::mutex> g(mu_);
                        mesh_.on_heartbeat(peer, env_.rt->now());
                        break;
                    }
                    case FrameKind::deathrattle: {
                        MeshEffects fx;
                        {
                            std::lock_guard<std::mutex> g(mu_);
                            fx = mesh_.on_deathrattle(peer);
                        }
                        apply(fx);
                        maybe_finish();
                        break;
                    }
                    case FrameKind::kv_op:
                        handle_kv(*link, peer, decode_kv_request(f));
                        break;
                    default:
                        break;  // unknown traffic on the kv channel is dropped
                }
            } catch (const DecodeError&) {
                // malformed request: drop the frame, keep the connection
            }
        }
    }

    void handle_kv(Link& link, const std::string& peer, KvRequest q) {
        switch (q.op) {
            case KvOp::set: {
                store_.set(q.key, q.value);
                on_key_set(peer, q.key, q.value);
                link.send(encode_kv_response(KvStatus::ok, {}));
                break;
            }
            case KvOp::get: {
                auto v = store_.get(q.key);
                link.send(encode_kv_response(v ? KvStatus::ok : KvStatus::absent,
                                             v.value_or(Bytes{})));
                break;
            }
            case KvOp::wait: {
                auto v = store_.wait(q.key, q.cond, q.value, q.timeout_s);
                link.send(encode_kv_response(v ? KvStatus::ok : KvStatus::timeout,
                                             v.value_or(Bytes{})));
                break;
            }
            default:
                throw DecodeError("bad kv op");
        }
    }

    // Mesh-relevant keys trigger membership logic after the plain store write.
    void on_key_set(const std::string& peer, const std::string& key, const Bytes& value) {
        MeshEffects fx;
        bool relevant = true;
        {
            std::lock_guard<std::mutex> g(mu_);
            double now = env_.rt->now();
            if (key.rfind("arrive/", 0) == 0) {
                auto rest = key.substr(7);
                auto slash = rest.find('/');
                uint64_t round = std::stoull(rest.substr(0, slash));
                fx = mesh_.on_arrive(round, rest.substr(slash + 1), now);
            } else if (key.rfind("join/", 0) == 0) {
                fx = mesh_.on_join_request(key.substr(5), decode_join_request(value), now);
            } else if (key.rfind("ready/", 0) == 0) {
                fx = mesh_.on_join_ready(key.substr(6), bytes_u64(value));
            } else if (key.rfind("failed/", 0) == 0) {
                fx = mesh_.on_failure_report(key.substr(7));
            } else if (key.rfind("done/", 0) == 0) {
                done_.insert(key.substr(5));
            } else if (key.rfind("aborted/", 0) == 0) {
                aborted_.insert(key.substr(8));
            } else if (key.rfind("bw/", 0) == 0) {
                ingest_bandwidth(key.substr(3), value);
            } else {
                relevant = false;
            }
        }
        (void)peer;
        if (relevant) {
            apply(fx);
            maybe_finish();
        }
    }

    void apply(const MeshEffects& fx) {
        if (fx.changed) {
            std::lock_guard<std::mutex> g(mu_);
            store_.set(keys::mesh, encode_mesh_state(mesh_.state()));
            store_.set(keys::epoch, u64_bytes(mesh_.state().epoch));
        }
        if (fx.release) {
            Bytes enc = encode_release(*fx.release);
            for (const auto& j : fx.release->joiners) store_.set(keys::admit(j.id), enc);
            store_.set(keys::release(fx.release->round), enc);
            if (!formation_published_.exchange(true)) store_.set(keys::formation, enc);
        }
        for (const auto& id : fx.refused) store_.set(keys::refused(id), {1});
        for (const auto& [id, round] : fx.stale) store_.set(keys::stale(id), u64_bytes(round));
    }

    // The run ends when every current member reported done (or aborted), or
    // when everyone is gone.
    void maybe_finish() {
        std::lock_guard<std::mutex> g(mu_);
        if (!mesh_.formed()) return;
        for (const auto& m : mesh_.state().members)
            if (done_.count(m.id) == 0 && aborted_.count(m.id) == 0) return;
        stop_.store(true);
    }

    // ------------------------------------------------------------------
    // bandwidth matrix upkeep (called under mu_)

    void ingest_bandwidth(const std::string& src_dst, const Bytes& value) {
        auto slash = src_dst.find('/');
        if (slash == std::string::npos) return;
        std::string src = src_dst.substr(0, slash);
        std::string dst = src_dst.substr(slash + 1);
        ByteReader r(value);
        double est = r.f64();
        raw_bw_[{src, dst}] = est;
        // symmetrize conservatively: min of the two directions when both known
        auto rev = raw_bw_.find({dst, src});
        double sym = rev == raw_bw_.end() ? est : std::min(est, rev->second);
        auto key = src < dst ? std::make_pair(src, dst) : std::make_pair(dst, src);
        auto it = ema_bw_.find(key);
        if (it == ema_bw_.end())
            ema_bw_[key] = sym;
        else
            it->second = cfg_.topo_ema * sym + (1.0 - cfg_.topo_ema) * it->second;
    }

    double edge_bw(const std::string& a, const std::string& b) const {
        auto key = a < b ? std::make_pair(a, b) : std::make_pair(b, a);
        auto it = ema_bw_.find(key);
        return it == ema_bw_.end() ? cfg_.topo_floor_bps : std::max(it->second, cfg_.topo_floor_bps);
    }

    // Ring order for the given member set, called by MeshCore at every
    // membership commit (already under mu_). Keeps the previous order unless
    // the membership changed or a candidate beats it by the hysteresis band.
    std::vector<std::string> ring_for(const std::vector<std::string>& ids) {
        if (!cfg_.solve_ring_enabled || ids.size() < 3 || ema_bw_.empty()) {
            last_ring_ = ids;
            return ids;
        }
        BandwidthMatrix m(ids);
        for (size_t i = 0; i < ids.size(); ++i)
            for (size_t j = i + 1; j < ids.size(); ++j)
                m.set_sym(i, j, edge_bw(ids[i], ids[j]));
        RingOrder solved = solve_ring(m);
        std::vector<std::string> candidate;
        for (uint32_t idx : solved.order) candidate.push_back(ids[idx]);

        bool same_set = last_ring_.size() == ids.size();
        if (same_set) {
            auto sorted_prev = last_ring_;
            auto sorted_now = ids;
            std::sort(sorted_prev.begin(), sorted_prev.end());
            std::sort(sorted_now.begin(), sorted_now.end());
            same_set = sorted_prev == sorted_now;
        }
        if (same_set && !last_ring_.empty()) {
            // evaluate the incumbent on the fresh matrix
            std::map<std::string, uint32_t> index;
            for (uint32_t i = 0; i < ids.size(); ++i) index[ids[i]] = i;
            std::vector<uint32_t> prev_order;
            for (const auto& id : last_ring_) prev_order.push_back(index[id]);
            double prev_obj = cycle_objective(m, prev_order);
            if (solved.objective < (1.0 + cfg_.topo_hysteresis) * prev_obj)
                return last_ring_;  // not enough improvement to churn the ring
        }
        last_ring_ = candidate;
        return candidate;
    }

    Env env_;
    CoordinatorConfig cfg_;
    KvStore store_;
    MeshCore mesh_;
    std::mutex mu_;
    std::set<std::string> done_;
    std::set<std::string> aborted_;
    std::map<std::pair<std::string, std::string>, double> raw_bw_;
    std::map<std::pair<std::string, std::string>, double> ema_bw_;
    std::vector<std::string> last_ring_;
    std::atomic<bool> formation_published_{false};
    std::atomic<bool> stop_{false};
};

}  // namespace emesh
