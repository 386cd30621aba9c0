#pragma once

#include <bit>
#include <cstring>
#include <deque>
#include <exception>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "emesh/client.hpp"
#include "emesh/mesh.hpp"
#include "emesh/quant.hpp"
#include "emesh/runtime.hpp"

namespace emesh {

enum class ReduceMode : uint8_t { fp32 = 0, int8 = 1 };

// One collective over a fixed membership epoch. Chunks partition the flat
// tensor into k near-equal contiguous slices, one per rank.
struct RingPlan {
    uint64_t job_id = 0;
    uint32_t epoch = 0;
    std::vector<std::string> order;  // ring order
    uint32_t self_index = 0;

    static RingPlan from_mesh(const MeshState& mesh, const std::string& self, uint64_t job_id) {
        RingPlan p;
        p.job_id = job_id;
        p.epoch = static_cast<uint32_t>(mesh.epoch);
        p.order = mesh.ring;
        bool found = false;
        for (uint32_t i = 0; i < p.order.size(); ++i)
            if (p.order[i] == self) {
                p.self_index = i;
                found = true;
            }
        if (!found) throw ShapeError("node " + self + " is not in the ring");
        return p;
    }
};

// The input tensor is preserved unmodified for the job's lifetime so a retry
// can restart the collective from scratch.
struct ReduceJob {
    uint64_t id = 0;
    std::vector<float> input;
    ReduceMode mode = ReduceMode::fp32;
};

struct ReduceOptions {
    uint32_t pipeline_subchunks = 4;   // wire units per rank chunk per hop
    bool pipelined = true;             // overlap codec with transmission
    double codec_sec_per_element = 0;  // simulated codec cost model
    double step_timeout = 30.0;        // per-frame receive budget
    uint32_t max_retries = 5;
    double evict_wait = 20.0;          // budget for the mesh to confirm an eviction
};

namespace ring_detail {

enum class Phase : uint8_t { reduce_scatter = 0, all_gather = 1, abort = 2 };

struct ChunkMsg {
    uint64_t job_id;
    uint32_t epoch;
    uint32_t chunk;
    Phase phase;
    ReduceMode mode;
    Bytes payload;
};

inline Frame encode_chunk_msg(const ChunkMsg& m) {
    ByteWriter w;
    w.u64(m.job_id);
    w.u32(m.epoch);
    w.u32(m.chunk);
    w.u8(static_cast<uint8_t>(m.phase));
    w.u8(static_cast<uint8_t>(m.mode));
    w.raw(m.payload.data(), m.payload.size());
    Frame f;
    f.kind = FrameKind::allreduce_chunk;
    f.payload = std::move(w.buffer());
    return f;
}

inline ChunkMsg decode_chunk_msg(const Frame& f) {
    ByteReader r(f.payload);
    ChunkMsg m;
    m.job_id = r.u64();
    m.epoch = r.u32();
    m.chunk = r.u32();
    m.phase = static_cast<Phase>(r.u8());
    m.mode = static_cast<ReduceMode>(r.u8());
    const size_t n = r.remaining();
    const uint8_t* p = r.take(n);
    m.payload.assign(p, p + n);
    return m;
}

// Contiguous [begin, end) extents splitting `total` into `parts` near-equal
// pieces; the first (total % parts) pieces get one extra element.
inline std::vector<std::pair<size_t, size_t>> split(size_t total, size_t parts) {
    std::vector<std::pair<size_t, size_t>> out(parts);
    size_t base = parts ? total / parts : 0;
    size_t rem = parts ? total % parts : 0;
    size_t off = 0;
    for (size_t i = 0; i < parts; ++i) {
        size_t len = base + (i < rem ? 1 : 0);
        out[i] = {off, off + len};
        off += len;
    }
    return out;
}

inline Bytes encode_f32s(std::span<const float> xs) {
    Bytes out(xs.size() * 4);
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out.data(), xs.data(), out.size());
    } else {
        for (size_t i = 0; i < xs.size(); ++i) {
            uint32_t u = std::bit_cast<uint32_t>(xs[i]);
            out[4 * i] = static_cast<uint8_t>(u);
            out[4 * i + 1] = static_cast<uint8_t>(u >> 8);
            out[4 * i + 2] = static_cast<uint8_t>(u >> 16);
            out[4 * i + 3] = static_cast<uint8_t>(u >> 24);
        }
    }
    return out;
}

inline std::vector<float> decode_f32s(const Bytes& b) {
    if (b.size() % 4 != 0) throw DecodeError("fp32 payload not a multiple of 4");
    std::vector<float> out(b.size() / 4);
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out.data(), b.data(), b.size());
    } else {
        for (size_t i = 0; i < out.size(); ++i) {
            uint32_t u = static_cast<uint32_t>(b[4 * i]) |
                         (static_cast<uint32_t>(b[4 * i + 1]) << 8) |
                         (static_cast<uint32_t>(b[4 * i + 2]) << 16) |
                         (static_cast<uint32_t>(b[4 * i + 3]) << 24);
            out[i] = std::bit_cast<float>(u);
        }
    }
    return out;
}

// Wire form of one sub-slice. Empty slices travel as empty payloads.
inline Bytes encode_slice(std::span<const float> xs, ReduceMode mode) {
    if (xs.empty()) return {};
    if (mode == ReduceMode::fp32) return encode_f32s(xs);
    return encode_quant_chunk(quantize(xs));
}

inline std::vector<float> decode_slice(const Bytes& payload, ReduceMode mode) {
    if (payload.empty()) return {};
    if (mode == ReduceMode::fp32) return decode_f32s(payload);
    return dequantize(decode_quant_chunk(payload));
}

}  // namespace ring_detail

// Accepts ring connections in the background and hands them out by peer id.
// Each collective attempt dials fresh links, so frames from abandoned
// attempts die with their links instead of leaking into the next one.
class RingIO {
public:
    explicit RingIO(Env env) : env_(env), stop_(std::make_shared<std::atomic<bool>>(false)) {
        wait_ = env_.rt->make_wait();
        auto stop = stop_;
        listener_ = env_.net->listen("ring");
        auto listener = listener_;
        auto self = this;
        pump_ = env_.rt->spawn("ring-accept", [self, listener, stop] {
            while (!stop->load()) {
                try {
                    auto link = listener->accept(0.5);
                    self->offer(link);
                } catch (const TimeoutError&) {
                } catch (const LinkError&) {
                    return;
                }
            }
        });
    }

    ~RingIO() { shutdown(); }

    void shutdown() {
        stop_->store(true);
        if (listener_) listener_->close();
        if (pump_) {
            pump_->join();
            pump_.reset();
        }
    }

    std::shared_ptr<Link> connect_to(const std::string& peer, double timeout) {
        return env_.net->connect(peer, "ring", timeout);
    }

    // Next accepted link from `peer`, FIFO by arrival.
    std::shared_ptr<Link> take_from(const std::string& peer, double deadline) {
        for (;;) {
            {
                std::lock_guard<std::mutex> g(mu_);
                auto& q = incoming_[peer];
                if (!q.empty()) {
                    auto link = q.front();
                    q.pop_front();
                    return link;
                }
            }
            if (!wait_->wait_until(deadline))
                throw TimeoutError("no ring connection from " + peer);
        }
    }

private:
    void offer(std::shared_ptr<Link> link) {
        {
            std::lock_guard<std::mutex> g(mu_);
            incoming_[link->peer_id()].push_back(std::move(link));
        }
        wait_->signal();
    }

    Env env_;
    std::shared_ptr<std::atomic<bool>> stop_;
    std::shared_ptr<Listener> listener_;
    std::shared_ptr<TaskHandle> pump_;
    std::mutex mu_;
    std::map<std::string, std::deque<std::shared_ptr<Link>>> incoming_;
    std::shared_ptr<WaitHandle> wait_;
};

namespace ring_detail {

// Receive side of one attempt: validates frames against the plan, survives
// stale links from abandoned attempts, and converts peer failures into
// RingFailureError with the best culprit information available.
class AttemptRx {
public:
    AttemptRx(RingIO& io, const RingPlan& plan, const std::string& pred, double step_timeout)
        : io_(io), plan_(plan), pred_(pred), step_timeout_(step_timeout) {}

    ChunkMsg expect(Phase phase, uint32_t chunk, Runtime& rt) {
        const double deadline = rt.now() + step_timeout_;
        for (;;) {
            ensure_link(rt, deadline);
            Frame f;
            try {
                f = link_->recv(deadline - rt.now());
            } catch (const LinkError&) {
                if (got_frames_) {
                    // the predecessor vanished mid-attempt without an abort
                    throw RingFailureError(pred_, "ring peer lost: " + pred_);
                }
                link_.reset();  // stale link from an earlier attempt
                continue;
            } catch (const TimeoutError&) {
                throw RingFailureError("", "ring step timed out waiting for " + pred_);
            }
            if (f.kind != FrameKind::allreduce_chunk) continue;  // stray traffic
            ChunkMsg m = decode_chunk_msg(f);
            if (m.epoch > plan_.epoch)
                throw StalePlanError(m.epoch, "newer plan epoch on the ring");
            if (m.epoch < plan_.epoch || m.job_id != plan_.job_id) continue;  // stale attempt
            if (m.phase == Phase::abort) {
                std::string culprit(m.payload.begin(), m.payload.end());
                throw RingFailureError(culprit, "upstream abort");
            }
            got_frames_ = true;
            if (m.phase != phase || m.chunk != chunk)
                throw Error("ring protocol violation: unexpected chunk frame");
            return m;
        }
    }

    std::shared_ptr<Link> link() { return link_; }

private:
    void ensure_link(Runtime& rt, double deadline) {
        if (link_) return;
        try {
            link_ = io_.take_from(pred_, deadline);
        } catch (const TimeoutError&) {
            throw RingFailureError("", "no ring connection from " + pred_);
        }
        got_frames_ = false;
        (void)rt;
    }

    RingIO& io_;
    const RingPlan& plan_;
    std::string pred_;
    double step_timeout_;
    std::shared_ptr<Link> link_;
    bool got_frames_ = false;
};

}  // namespace ring_detail

// Chunked ring all-reduce returning the elementwise mean over participants.
// fp32 mode transmits raw fp32 and is exact for the deterministic ring
// summation order; int8 mode quantizes each transmitted reduce term and
// accumulates in fp32, and the all-gather forwards identical bytes so every
// participant ends bit-identical in both modes.
inline std::vector<float> ring_allreduce(Env env, RingIO& io, const RingPlan& plan,
                                         const ReduceJob& job, const ReduceOptions& opts) {
    using namespace ring_detail;
    const size_t k = plan.order.size();
    if (k == 0) throw ShapeError("empty ring");
    if (k == 1) return job.input;  // identity, zero communication

    const uint32_t r = plan.self_index;
    const std::string& succ = plan.order[(r + 1) % k];
    const std::string& pred = plan.order[(r + k - 1) % k];

    std::vector<float> accum = job.input;
    auto chunks = split(accum.size(), k);
    auto subs_of = [&](uint32_t c) {
        auto [lo, hi] = chunks[c];
        size_t len = hi - lo;
        auto subs = split(len, len == 0 ? 1 : std::min<size_t>(opts.pipeline_subchunks, len));
        for (auto& s : subs) {
            s.first += lo;
            s.second += lo;
        }
        return subs;
    };

    std::shared_ptr<Link> out;
    AttemptRx rx(io, plan, pred, opts.step_timeout);

    // A failure anywhere must unwind the whole attempt; tell both neighbors
    // who the culprit was before rethrowing so the abort sweeps the ring.
    auto abort_both_ways = [&](const std::string& culprit) {
        ChunkMsg m{job.id, plan.epoch, 0, Phase::abort, job.mode,
                   Bytes(culprit.begin(), culprit.end())};
        Frame f = encode_chunk_msg(m);
        if (out) {
            try {
                out->send(f);
            } catch (const Error&) {
            }
        }
        if (auto in = rx.link()) {
            try {
                in->send(f);
            } catch (const Error&) {
            }
        }
    };

    try {
        try {
            out = io.connect_to(succ, opts.step_timeout);
        } catch (const LinkError&) {
            throw RingFailureError(succ, "cannot reach ring successor " + succ);
        }

        const double codec_cost = opts.codec_sec_per_element;
        auto charge = [&](size_t elems) {
            if (codec_cost > 0 && job.mode == ReduceMode::int8)
                env.rt->charge_compute(codec_cost * static_cast<double>(elems));
        };

        // Sends one chunk's sub-slices, encoding each; runs as a subtask so
        // codec work and transmission overlap receive processing.
        std::exception_ptr sender_error;
        auto run_sender = [&](uint32_t chunk_idx, const std::vector<Bytes>* fixed_payloads,
                              const std::vector<float>* source) {
            auto body = [&, chunk_idx, fixed_payloads, source] {
                try {
                    auto subs = subs_of(chunk_idx);
                    for (size_t j = 0; j < subs.size(); ++j) {
                        Bytes payload;
                        if (fixed_payloads != nullptr) {
                            payload = (*fixed_payloads)[j];
                        } else {
                            auto [lo, hi] = subs[j];
                            charge(hi - lo);
                            payload = encode_slice(
                                std::span<const float>(source->data() + lo, hi - lo), job.mode);
                        }
                        ChunkMsg m{job.id, plan.epoch, chunk_idx,
                                   fixed_payloads ? Phase::all_gather : Phase::reduce_scatter,
                                   job.mode, std::move(payload)};
                        out->send(encode_chunk_msg(m));
                        if (!opts.pipelined) out->drain();
                    }
                } catch (const LinkError&) {
                    sender_error = std::make_exception_ptr(
                        RingFailureError(succ, "ring successor lost: " + succ));
                } catch (const std::exception&) {
                    sender_error = std::current_exception();
                }
            };
            if (opts.pipelined) return env.rt->spawn("ring-send", body);
            body();
            return std::shared_ptr<TaskHandle>();
        };

        // ---- reduce-scatter: k-1 hops of partial sums
        for (size_t s = 0; s + 1 < k; ++s) {
            uint32_t send_c = static_cast<uint32_t>((r + k - s) % k);
            uint32_t recv_c = static_cast<uint32_t>((r + k - s - 1) % k);
            auto sender = run_sender(send_c, nullptr, &accum);
            if (!opts.pipelined && sender_error) std::rethrow_exception(sender_error);
            auto subs = subs_of(recv_c);
            for (auto [lo, hi] : subs) {
                ChunkMsg m = rx.expect(Phase::reduce_scatter, recv_c, *env.rt);
                std::vector<float> vals = decode_slice(m.payload, job.mode);
                if (vals.size() != hi - lo) throw Error("ring slice length mismatch");
                charge(vals.size());
                for (size_t i = 0; i < vals.size(); ++i) accum[lo + i] += vals[i];
            }
            if (sender) sender->join();
            if (sender_error) std::rethrow_exception(sender_error);
        }

        // ---- all-gather: owner finalizes its chunk, identical bytes forward
        std::vector<float> result = accum;
        std::vector<std::vector<Bytes>> final_payloads(k);
        const uint32_t own_c = static_cast<uint32_t>((r + 1) % k);
        {
            auto subs = subs_of(own_c);
            final_payloads[own_c].resize(subs.size());
            const float divisor = static_cast<float>(k);
            for (size_t j = 0; j < subs.size(); ++j) {
                auto [lo, hi] = subs[j];
                std::vector<float> mean(hi - lo);
                for (size_t i = 0; i < mean.size(); ++i) mean[i] = accum[lo + i] / divisor;
                charge(mean.size());
                final_payloads[own_c][j] = encode_slice(mean, job.mode);
                std::vector<float> own_vals = decode_slice(final_payloads[own_c][j], job.mode);
                for (size_t i = 0; i < own_vals.size(); ++i) result[lo + i] = own_vals[i];
            }
        }
        for (size_t s = 0; s + 1 < k; ++s) {
            uint32_t send_c = static_cast<uint32_t>((r + 1 + k - s) % k);
            uint32_t recv_c = static_cast<uint32_t>((r + k - s) % k);
            auto sender = run_sender(send_c, &final_payloads[send_c], nullptr);
            if (!opts.pipelined && sender_error) std::rethrow_exception(sender_error);
            auto subs = subs_of(recv_c);
            final_payloads[recv_c].resize(subs.size());
            for (size_t j = 0; j < subs.size(); ++j) {
                auto [lo, hi] = subs[j];
                ChunkMsg m = rx.expect(Phase::all_gather, recv_c, *env.rt);
                std::vector<float> vals = decode_slice(m.payload, job.mode);
                if (vals.size() != hi - lo) throw Error("ring slice length mismatch");
                charge(vals.size());
                for (size_t i = 0; i < vals.size(); ++i) result[lo + i] = vals[i];
                final_payloads[recv_c][j] = std::move(m.payload);
            }
            if (sender) sender->join();
            if (sender_error) std::rethrow_exception(sender_error);
        }
        return result;
    } catch (const RingFailureError& rf) {
        abort_both_ways(rf.failed_node);
        throw;
    } catch (const StalePlanError&) {
        abort_both_ways("");
        throw;
    }
}

// Retry-on-failure wrapper: reports the culprit, waits for the mesh to commit
// the eviction, rebuilds the plan from survivors, and restarts from the
// preserved input. The result is the mean over the final plan's participants.
struct RetryResult {
    std::vector<float> value;
    uint32_t participants = 0;
    uint32_t attempts = 0;  // failures survived
    uint64_t epoch = 0;
};

inline RetryResult allreduce_with_retry(Env env, RingIO& io, MeshClient& mesh,
                                        MeshState mesh_state, const ReduceJob& job,
                                        const ReduceOptions& opts) {
    uint32_t failures = 0;
    for (;;) {
        if (mesh_state.find(env.net->local_id()) == nullptr)
            throw FatalError("this node is no longer in the mesh");
        if (mesh_state.members.size() < 1) throw FatalError("no participants left");
        RingPlan plan = RingPlan::from_mesh(mesh_state, env.net->local_id(), job.id);
        try {
            RetryResult out;
            out.value = ring_allreduce(env, io, plan, job, opts);
            out.participants = static_cast<uint32_t>(plan.order.size());
            out.attempts = failures;
            out.epoch = mesh_state.epoch;
            return out;
        } catch (const RingFailureError& rf) {
            failures += 1;
            if (failures > opts.max_retries)
                throw FatalError("all-reduce retries exhausted: " + std::string(rf.what()));
            if (!rf.failed_node.empty() && rf.failed_node != env.net->local_id())
                mesh.report_failure(rf.failed_node);
            try {
                mesh_state = mesh.wait_epoch_change(mesh_state.epoch, opts.evict_wait);
            } catch (const TimeoutError&) {
                mesh_state = mesh.fetch_mesh();  // maybe it changed and we missed it
            }
        } catch (const StalePlanError&) {
            failures += 1;
            if (failures > opts.max_retries) throw FatalError("all-reduce retries exhausted");
            mesh_state = mesh.fetch_mesh();
        }
    }
}

}  // namespace emesh
