#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "emesh/bytes.hpp"
#include "emesh/errors.hpp"
#include "emesh/sha256.hpp"

namespace emesh {

// ---------------------------------------------------------------------------
// Membership ground truth. Ranks are contiguous 0..k-1 in member order; the
// shard id is stable for the life of a member (it survives rank compaction,
// so data streams never reshuffle on churn).

struct MeshMember {
    std::string id;
    uint32_t rank = 0;
    uint32_t shard = 0;
};

struct MeshState {
    uint64_t epoch = 0;
    uint64_t round = 0;  // last released barrier
    std::vector<MeshMember> members;
    std::vector<std::string> ring;      // permutation of member ids
    std::vector<std::string> joining;   // ids mid-join

    size_t world_size() const { return members.size(); }

    const MeshMember* find(const std::string& id) const {
        for (const auto& m : members)
            if (m.id == id) return &m;
        return nullptr;
    }

    std::vector<std::string> member_ids() const {
        std::vector<std::string> out;
        out.reserve(members.size());
        for (const auto& m : members) out.push_back(m.id);
        return out;
    }
};

inline void write_mesh_state(ByteWriter& w, const MeshState& s) {
    w.u64(s.epoch);
    w.u64(s.round);
    w.u32(static_cast<uint32_t>(s.members.size()));
    for (const auto& m : s.members) {
        w.str(m.id);
        w.u32(m.rank);
        w.u32(m.shard);
    }
    w.u32(static_cast<uint32_t>(s.ring.size()));
    for (const auto& id : s.ring) w.str(id);
    w.u32(static_cast<uint32_t>(s.joining.size()));
    for (const auto& id : s.joining) w.str(id);
}

inline MeshState read_mesh_state(ByteReader& r) {
    MeshState s;
    s.epoch = r.u64();
    s.round = r.u64();
    uint32_t n = r.u32();
    for (uint32_t i = 0; i < n; ++i) {
        MeshMember m;
        m.id = r.str();
        m.rank = r.u32();
        m.shard = r.u32();
        s.members.push_back(std::move(m));
    }
    n = r.u32();
    for (uint32_t i = 0; i < n; ++i) s.ring.push_back(r.str());
    n = r.u32();
    for (uint32_t i = 0; i < n; ++i) s.joining.push_back(r.str());
    return s;
}

inline Bytes encode_mesh_state(const MeshState& s) {
    ByteWriter w;
    write_mesh_state(w, s);
    return std::move(w.buffer());
}

inline MeshState decode_mesh_state(const Bytes& b) {
    ByteReader r(b);
    MeshState s = read_mesh_state(r);
    r.expect_done();
    return s;
}

enum class JoinMode : uint8_t { initial = 0, blocking = 1, nonblocking = 2 };

struct JoinerInfo {
    std::string id;
    JoinMode mode = JoinMode::initial;
};

// Published at every barrier: the membership in force for this round's
// collective, plus any nodes joining at this boundary.
struct BarrierRelease {
    uint64_t round = 0;
    MeshState mesh;
    std::vector<JoinerInfo> joiners;
};

inline Bytes encode_release(const BarrierRelease& rel) {
    ByteWriter w;
    w.u64(rel.round);
    write_mesh_state(w, rel.mesh);
    w.u32(static_cast<uint32_t>(rel.joiners.size()));
    for (const auto& j : rel.joiners) {
        w.str(j.id);
        w.u8(static_cast<uint8_t>(j.mode));
    }
    return std::move(w.buffer());
}

inline BarrierRelease decode_release(const Bytes& b) {
    ByteReader r(b);
    BarrierRelease rel;
    rel.round = r.u64();
    rel.mesh = read_mesh_state(r);
    uint32_t n = r.u32();
    for (uint32_t i = 0; i < n; ++i) {
        JoinerInfo j;
        j.id = r.str();
        j.mode = static_cast<JoinMode>(r.u8());
        rel.joiners.push_back(std::move(j));
    }
    r.expect_done();
    return rel;
}

struct JoinRequest {
    JoinMode mode = JoinMode::initial;
    Sha256::Digest config_hash{};
    uint64_t start_step = 0;  // resumed initial workers re-seat the barrier here
};

inline Bytes encode_join_request(const JoinRequest& q) {
    ByteWriter w;
    w.u8(static_cast<uint8_t>(q.mode));
    w.raw(q.config_hash.data(), q.config_hash.size());
    w.u64(q.start_step);
    return std::move(w.buffer());
}

inline JoinRequest decode_join_request(const Bytes& b) {
    ByteReader r(b);
    JoinRequest q;
    q.mode = static_cast<JoinMode>(r.u8());
    const uint8_t* p = r.take(32);
    std::copy(p, p + 32, q.config_hash.begin());
    q.start_step = r.u64();
    r.expect_done();
    return q;
}

// ---------------------------------------------------------------------------
// The membership state machine. Pure logic driven by explicit events and
// timestamps; the coordinator glues it to the store and the wire. Rules:
//   - crash eviction and deathrattle remove a member immediately (epoch++),
//   - joins commit only at barrier releases,
//   - a barrier releases once every current member has arrived,
//   - every member-set change strictly increases the epoch.

struct MeshEffects {
    bool changed = false;  // mesh/epoch snapshots need republishing
    std::optional<BarrierRelease> release;
    std::vector<std::string> refused;                      // join refused (hash mismatch etc.)
    std::vector<std::pair<std::string, uint64_t>> stale;   // nonblocking joiner must refetch
    std::vector<std::string> evicted;

    void merge(MeshEffects&& other) {
        changed = changed || other.changed;
        if (other.release) release = std::move(other.release);
        for (auto& x : other.refused) refused.push_back(std::move(x));
        for (auto& x : other.stale) stale.push_back(std::move(x));
        for (auto& x : other.evicted) evicted.push_back(std::move(x));
    }
};

class MeshCore {
public:
    using RingSolver = std::function<std::vector<std::string>(const std::vector<std::string>&)>;

    MeshCore(uint32_t expected_initial, double hb_timeout, Sha256::Digest cluster_hash)
        : expected_initial_(expected_initial),
          hb_timeout_(hb_timeout),
          cluster_hash_(cluster_hash) {
        ring_solver_ = [](const std::vector<std::string>& ids) { return ids; };
    }

    void set_ring_solver(RingSolver solver) { ring_solver_ = std::move(solver); }

    const MeshState& state() const { return state_; }
    bool formed() const { return formed_; }

    MeshEffects on_heartbeat(const std::string& id, double now) {
        hb_[id] = std::max(hb_[id], now);
        return {};
    }

    MeshEffects on_join_request(const std::string& id, const JoinRequest& req, double now) {
        MeshEffects fx;
        if (req.config_hash != cluster_hash_) {
            fx.refused.push_back(id);
            return fx;
        }
        if (state_.find(id) != nullptr) {
            fx.refused.push_back(id);  // id already active
            return fx;
        }
        for (auto& p : pending_)
            if (p.id == id) return fx;  // duplicate request
        pending_.push_back(Pending{id, req.mode, false, 0, req.start_step});
        hb_[id] = now;
        sync_joining();
        fx.changed = true;
        if (!formed_) fx.merge(try_form());
        return fx;
    }

    MeshEffects on_join_ready(const std::string& id, uint64_t ckpt_step) {
        for (auto& p : pending_) {
            if (p.id == id) {
                p.ready = true;
                p.ckpt_step = ckpt_step;
            }
        }
        return {};
    }

    MeshEffects on_deathrattle(const std::string& id) { return remove_member(id); }

    MeshEffects on_failure_report(const std::string& id) { return remove_member(id); }

    MeshEffects on_arrive(uint64_t round, const std::string& id, double now) {
        now_hint_ = now;
        arrivals_[round].insert(id);
        return try_release(now_hint_);
    }

    // Periodic failure detection: members silent for longer than the timeout
    // are evicted. Also re-checks the pending barrier, since an eviction can
    // complete the quorum.
    MeshEffects tick(double now) {
        now_hint_ = now;
        MeshEffects fx;
        std::vector<std::string> dead;
        for (const auto& m : state_.members) {
            auto it = hb_.find(m.id);
            double last = it == hb_.end() ? 0.0 : it->second;
            if (now - last > hb_timeout_) dead.push_back(m.id);
        }
        for (const auto& id : dead) fx.merge(remove_member(id));
        return fx;
    }

    std::vector<std::string> member_ids() const { return state_.member_ids(); }

private:
    struct Pending {
        std::string id;
        JoinMode mode;
        bool ready = false;
        uint64_t ckpt_step = 0;
        uint64_t start_step = 0;
    };

    void sync_joining() {
        state_.joining.clear();
        for (const auto& p : pending_) state_.joining.push_back(p.id);
    }

    void recompact() {
        for (uint32_t i = 0; i < state_.members.size(); ++i) state_.members[i].rank = i;
        state_.ring = ring_solver_(state_.member_ids());
    }

    MeshEffects remove_member(const std::string& id) {
        MeshEffects fx;
        bool was_pending = false;
        for (size_t i = 0; i < pending_.size(); ++i)
            if (pending_[i].id == id) {
                pending_.erase(pending_.begin() + i);
                was_pending = true;
                sync_joining();
                break;
            }
        auto& ms = state_.members;
        bool was_member = false;
        for (size_t i = 0; i < ms.size(); ++i)
            if (ms[i].id == id) {
                ms.erase(ms.begin() + i);
                was_member = true;
                break;
            }
        if (!was_member) {
            fx.changed = was_pending;
            return fx;  // idempotent: second deathrattle is a no-op
        }
        state_.epoch += 1;
        recompact();
        fx.changed = true;
        fx.evicted.push_back(id);
        // quorum may now be complete
        fx.merge(try_release(now_hint_));
        return fx;
    }

    MeshEffects try_form() {
        MeshEffects fx;
        std::vector<std::string> ids;
        uint64_t start = 0;
        for (const auto& p : pending_)
            if (p.mode == JoinMode::initial) {
                ids.push_back(p.id);
                start = std::max(start, p.start_step);
            }
        if (ids.size() < expected_initial_) return fx;
        std::sort(ids.begin(), ids.end());
        for (const auto& id : ids) {
            MeshMember m;
            m.id = id;
            m.rank = static_cast<uint32_t>(state_.members.size());
            m.shard = next_shard_++;
            state_.members.push_back(std::move(m));
            for (size_t i = 0; i < pending_.size(); ++i)
                if (pending_[i].id == id) {
                    pending_.erase(pending_.begin() + i);
                    break;
                }
        }
        sync_joining();
        state_.epoch = 1;
        state_.round = start;  // resumed runs continue their barrier numbering
        recompact();
        formed_ = true;
        fx.changed = true;
        BarrierRelease rel;
        rel.round = state_.round;
        rel.mesh = state_;
        fx.release = std::move(rel);
        return fx;
    }

    MeshEffects try_release(double now) {
        MeshEffects fx;
        if (!formed_ || state_.members.empty()) return fx;
        const uint64_t r = state_.round + 1;
        auto it = arrivals_.find(r);
        if (it == arrivals_.end()) return fx;
        for (const auto& m : state_.members)
            if (it->second.count(m.id) == 0) return fx;

        // Quorum complete: commit eligible joins at this boundary.
        std::vector<JoinerInfo> joiners;
        std::vector<std::string> admit_ids;
        for (auto& p : pending_) {
            if (p.mode == JoinMode::blocking) {
                admit_ids.push_back(p.id);
            } else if (p.mode == JoinMode::nonblocking && p.ready) {
                if (p.ckpt_step + 1 == r) {
                    admit_ids.push_back(p.id);
                } else {
                    fx.stale.emplace_back(p.id, r);
                    p.ready = false;  // must refetch and re-announce
                }
            }
        }
        std::sort(admit_ids.begin(), admit_ids.end());
        for (const auto& id : admit_ids) {
            Pending pend;
            for (size_t i = 0; i < pending_.size(); ++i)
                if (pending_[i].id == id) {
                    pend = pending_[i];
                    pending_.erase(pending_.begin() + i);
                    break;
                }
            MeshMember m;
            m.id = id;
            m.rank = static_cast<uint32_t>(state_.members.size());
            m.shard = next_shard_++;
            state_.members.push_back(std::move(m));
            joiners.push_back(JoinerInfo{id, pend.mode});
            hb_[id] = now;  // admission grace
        }
        sync_joining();
        if (!admit_ids.empty()) state_.epoch += 1;
        recompact();
        state_.round = r;
        arrivals_.erase(arrivals_.begin(), arrivals_.upper_bound(r));
        fx.changed = true;
        BarrierRelease rel;
        rel.round = r;
        rel.mesh = state_;
        rel.joiners = std::move(joiners);
        fx.release = std::move(rel);
        return fx;
    }

    uint32_t expected_initial_;
    double hb_timeout_;
    Sha256::Digest cluster_hash_;
    RingSolver ring_solver_;
    MeshState state_;
    std::map<std::string, double> hb_;
    std::vector<Pending> pending_;
    std::map<uint64_t, std::set<std::string>> arrivals_;
    uint32_t next_shard_ = 0;
    bool formed_ = false;
    double now_hint_ = 0;
};

}  // namespace emesh
