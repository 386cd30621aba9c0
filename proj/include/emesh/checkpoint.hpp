#pragma once

#include <atomic>
#include <cstdint>
#include <fstream>
#include <memory>
#include <mutex>
#include <string>

#include "emesh/bytes.hpp"
#include "emesh/optim.hpp"
#include "emesh/runtime.hpp"
#include "emesh/sha256.hpp"
#include "emesh/tensor.hpp"

namespace emesh {

// The unit of peer-to-peer join transfer and of disk persistence: everything
// a node needs to take over a seat in the mesh at an outer-step boundary.
struct Checkpoint {
    uint64_t outer_step = 0;
    ModelParams params;    // theta after the outer step
    ModelParams retained;  // host-retained copy used for the next pseudo-gradient
    AdamWState inner;
    NesterovState outer;
    uint64_t rng_seed = 0;
    uint64_t data_counter = 0;  // stream position of this node's shard
    uint32_t shard = 0;
    Sha256::Digest config_hash{};
};

inline Bytes encode_checkpoint(const Checkpoint& ck) {
    ByteWriter w;
    w.u64(ck.outer_step);
    write_params(w, ck.params);
    write_params(w, ck.retained);
    w.u64(ck.inner.step);
    write_params(w, ck.inner.m);
    write_params(w, ck.inner.v);
    write_params(w, ck.outer.buffer);
    w.u64(ck.rng_seed);
    w.u64(ck.data_counter);
    w.u32(ck.shard);
    w.raw(ck.config_hash.data(), ck.config_hash.size());
    return std::move(w.buffer());
}

inline Checkpoint decode_checkpoint(const Bytes& b) {
    ByteReader r(b);
    Checkpoint ck;
    ck.outer_step = r.u64();
    ck.params = read_params(r);
    ck.retained = read_params(r);
    ck.inner.step = r.u64();
    ck.inner.m = read_params(r);
    ck.inner.v = read_params(r);
    ck.outer.buffer = read_params(r);
    ck.rng_seed = r.u64();
    ck.data_counter = r.u64();
    ck.shard = r.u32();
    const uint8_t* p = r.take(32);
    std::copy(p, p + 32, ck.config_hash.begin());
    r.expect_done();
    if (!ck.params.same_shapes(ck.retained) || !ck.params.same_shapes(ck.inner.m) ||
        !ck.params.same_shapes(ck.inner.v) || !ck.params.same_shapes(ck.outer.buffer))
        throw DecodeError("checkpoint tensor shapes inconsistent");
    return ck;
}

// Stream layout: u64 LE payload length, 32-byte sha256 of the payload, then
// the canonical checkpoint bytes (split across frames under the payload cap).
constexpr size_t kCheckpointFrameBytes = 1u << 20;

inline void send_checkpoint_stream(Link& link, const Bytes& payload) {
    Sha256::Digest digest = Sha256::hash(payload);
    ByteWriter head;
    head.u64(payload.size());
    head.raw(digest.data(), digest.size());
    size_t off = 0;
    bool first = true;
    while (first || off < payload.size()) {
        Frame f;
        f.kind = FrameKind::checkpoint;
        if (first) f.payload = head.buffer();
        size_t take = std::min(kCheckpointFrameBytes, payload.size() - off);
        f.payload.insert(f.payload.end(), payload.begin() + off, payload.begin() + off + take);
        off += take;
        first = false;
        link.send(f);
    }
}

inline Bytes recv_checkpoint_stream(Link& link, double timeout_s) {
    Frame head = link.recv(timeout_s);
    if (head.kind != FrameKind::checkpoint) throw DecodeError("expected checkpoint frame");
    ByteReader r(head.payload);
    uint64_t total = r.u64();
    if (total > (1u << 30)) throw DecodeError("implausible checkpoint size");
    const uint8_t* dp = r.take(32);
    Sha256::Digest digest;
    std::copy(dp, dp + 32, digest.begin());
    Bytes payload;
    payload.reserve(total);
    const size_t tail = r.remaining();
    const uint8_t* rest = r.take(tail);
    payload.insert(payload.end(), rest, rest + tail);
    while (payload.size() < total) {
        Frame f = link.recv(timeout_s);
        if (f.kind != FrameKind::checkpoint) throw DecodeError("expected checkpoint frame");
        payload.insert(payload.end(), f.payload.begin(), f.payload.end());
    }
    if (payload.size() != total) throw DecodeError("checkpoint stream length mismatch");
    if (Sha256::hash(payload) != digest)
        throw Error("checkpoint content hash mismatch");
    return payload;
}

// Thread-safe snapshot holder: the trainer replaces it at each boundary, the
// serving task streams it to joiners concurrently with training.
class CheckpointVault {
public:
    void put(const Checkpoint& ck) {
        Bytes enc = encode_checkpoint(ck);
        std::lock_guard<std::mutex> g(mu_);
        snapshot_ = std::make_shared<Bytes>(std::move(enc));
        step_ = ck.outer_step;
    }

    std::shared_ptr<const Bytes> get() const {
        std::lock_guard<std::mutex> g(mu_);
        return snapshot_;
    }

    bool has() const {
        std::lock_guard<std::mutex> g(mu_);
        return snapshot_ != nullptr;
    }

private:
    mutable std::mutex mu_;
    std::shared_ptr<Bytes> snapshot_;
    uint64_t step_ = 0;
};

// Serves the current snapshot on the "ckpt" channel until stop is signalled.
// One task per incoming transfer keeps slow joiners off the accept loop.
inline void serve_checkpoints(Env env, std::shared_ptr<CheckpointVault> vault,
                              std::shared_ptr<std::atomic<bool>> stop) {
    auto listener = env.net->listen("ckpt");
    while (!stop->load()) {
        std::shared_ptr<Link> link;
        try {
            link = listener->accept(0.5);
        } catch (const TimeoutError&) {
            continue;
        } catch (const LinkError&) {
            break;
        }
        env.rt->spawn("ckpt-send", [link, vault] {
            try {
                link->recv(10.0);  // request frame
                auto snap = vault->get();
                if (snap == nullptr) throw Error("no checkpoint available");
                send_checkpoint_stream(*link, *snap);
            } catch (const Error&) {
                link->close();
            }
        });
    }
}

// Downloads a checkpoint from any of the given donors, first to respond wins;
// integrity failures and dead donors move on to the next.
inline Checkpoint fetch_checkpoint(Env env, const std::vector<std::string>& donors,
                                   double per_donor_timeout = 120.0) {
    std::string last_err = "no donors";
    for (const auto& donor : donors) {
        if (donor == env.net->local_id()) continue;
        try {
            auto link = env.net->connect(donor, "ckpt", 10.0);
            Frame req;
            req.kind = FrameKind::checkpoint;
            link->send(req);
            Bytes payload = recv_checkpoint_stream(*link, per_donor_timeout);
            link->close();
            return decode_checkpoint(payload);
        } catch (const Error& e) {
            last_err = e.what();
        }
    }
    throw Error("checkpoint fetch failed from all donors: " + last_err);
}

// Disk persistence for resume-from-checkpoint runs.
inline void write_checkpoint_file(const std::string& path, const Checkpoint& ck) {
    Bytes payload = encode_checkpoint(ck);
    Sha256::Digest digest = Sha256::hash(payload);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint file " + path);
    ByteWriter head;
    head.u64(payload.size());
    head.raw(digest.data(), digest.size());
    out.write(reinterpret_cast<const char*>(head.buffer().data()),
              static_cast<std::streamsize>(head.buffer().size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
}

inline Checkpoint read_checkpoint_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read checkpoint file " + path);
    Bytes head(40);
    in.read(reinterpret_cast<char*>(head.data()), 40);
    if (in.gcount() != 40) throw DecodeError("truncated checkpoint file");
    ByteReader r(head);
    uint64_t total = r.u64();
    const uint8_t* dp = r.take(32);
    Sha256::Digest digest;
    std::copy(dp, dp + 32, digest.begin());
    Bytes payload(total);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(total));
    if (static_cast<uint64_t>(in.gcount()) != total) throw DecodeError("truncated checkpoint file");
    if (Sha256::hash(payload) != digest) throw Error("checkpoint file hash mismatch");
    return decode_checkpoint(payload);
}

}  // namespace emesh
