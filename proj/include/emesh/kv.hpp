#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "emesh/bytes.hpp"
#include "emesh/runtime.hpp"

namespace emesh {

// Wire ops for the coordinator key-value store. One request/response pair per
// frame; kv_wait parks server-side until the condition holds or times out.
enum class KvOp : uint8_t { set = 0, get = 1, wait = 2, response = 3 };
enum class KvCond : uint8_t { exists = 0, equals = 1, not_equals = 2 };
enum class KvStatus : uint8_t { ok = 0, absent = 1, timeout = 2 };

struct KvRequest {
    KvOp op = KvOp::get;
    std::string key;
    Bytes value;      // set: value, wait: condition operand
    KvCond cond = KvCond::exists;
    double timeout_s = 0;
};

inline Frame encode_kv_request(const KvRequest& q) {
    ByteWriter w;
    w.u8(static_cast<uint8_t>(q.op));
    w.str(q.key);
    w.u32(static_cast<uint32_t>(q.value.size()));
    w.raw(q.value.data(), q.value.size());
    w.u8(static_cast<uint8_t>(q.cond));
    w.f64(q.timeout_s);
    Frame f;
    f.kind = FrameKind::kv_op;
    f.payload = std::move(w.buffer());
    return f;
}

inline KvRequest decode_kv_request(const Frame& f) {
    ByteReader r(f.payload);
    KvRequest q;
    q.op = static_cast<KvOp>(r.u8());
    q.key = r.str();
    uint32_t n = r.u32();
    const uint8_t* p = r.take(n);
    q.value.assign(p, p + n);
    q.cond = static_cast<KvCond>(r.u8());
    q.timeout_s = r.f64();
    r.expect_done();
    return q;
}

inline Frame encode_kv_response(KvStatus status, const Bytes& value) {
    ByteWriter w;
    w.u8(static_cast<uint8_t>(KvOp::response));
    w.u8(static_cast<uint8_t>(status));
    w.u32(static_cast<uint32_t>(value.size()));
    w.raw(value.data(), value.size());
    Frame f;
    f.kind = FrameKind::kv_op;
    f.payload = std::move(w.buffer());
    return f;
}

inline std::pair<KvStatus, Bytes> decode_kv_response(const Frame& f) {
    ByteReader r(f.payload);
    if (static_cast<KvOp>(r.u8()) != KvOp::response) throw DecodeError("not a kv response");
    KvStatus st = static_cast<KvStatus>(r.u8());
    uint32_t n = r.u32();
    const uint8_t* p = r.take(n);
    Bytes v(p, p + n);
    r.expect_done();
    return {st, std::move(v)};
}

inline bool kv_cond_holds(KvCond cond, const Bytes& operand,
                          const std::optional<Bytes>& current) {
    switch (cond) {
        case KvCond::exists: return current.has_value();
        case KvCond::equals: return current.has_value() && *current == operand;
        case KvCond::not_equals: return current.has_value() && *current != operand;
    }
    return false;
}

// ---------------------------------------------------------------------------
// Server-side store. Linearizable per key: one mutex serializes all
// mutations, and waiters are woken on every set of their key.

class KvStore {
public:
    explicit KvStore(Runtime& rt) : rt_(&rt) {}

    void set(const std::string& key, Bytes value) {
        std::vector<std::shared_ptr<WaitHandle>> to_wake;
        {
            std::lock_guard<std::mutex> g(mu_);
            map_[key] = std::move(value);
            auto it = waiters_.find(key);
            if (it != waiters_.end()) {
                to_wake = it->second;
                it->second.clear();
            }
        }
        for (auto& w : to_wake) w->signal();
    }

    std::optional<Bytes> get(const std::string& key) const {
        std::lock_guard<std::mutex> g(mu_);
        auto it = map_.find(key);
        if (it == map_.end()) return std::nullopt;
        return it->second;
    }

    // Blocks the calling task until the condition holds or the deadline
    // passes. Returns the value when satisfied.
    std::optional<Bytes> wait(const std::string& key, KvCond cond, const Bytes& operand,
                              double timeout_s) {
        const double deadline = timeout_s == kNever ? kNever : rt_->now() + timeout_s;
        for (;;) {
            std::shared_ptr<WaitHandle> handle;
            {
                std::lock_guard<std::mutex> g(mu_);
                auto it = map_.find(key);
                std::optional<Bytes> cur =
                    it == map_.end() ? std::nullopt : std::optional<Bytes>(it->second);
                if (kv_cond_holds(cond, operand, cur)) return cur;
                handle = rt_->make_wait();
                waiters_[key].push_back(handle);
            }
            if (!handle->wait_until(deadline)) {
                std::lock_guard<std::mutex> g(mu_);
                auto& v = waiters_[key];
                for (size_t i = 0; i < v.size(); ++i)
                    if (v[i] == handle) {
                        v.erase(v.begin() + i);
                        break;
                    }
                return std::nullopt;  // timed out
            }
        }
    }

    size_t size() const {
        std::lock_guard<std::mutex> g(mu_);
        return map_.size();
    }

private:
    Runtime* rt_;
    mutable std::mutex mu_;
    std::map<std::string, Bytes> map_;
    std::map<std::string, std::vector<std::shared_ptr<WaitHandle>>> waiters_;
};

// ---------------------------------------------------------------------------
// Client. One outstanding request per link; callers that need concurrent
// waits open separate channels.

class KvClient {
public:
    explicit KvClient(std::shared_ptr<Link> link) : link_(std::move(link)) {}

    void set(const std::string& key, Bytes value) {
        KvRequest q;
        q.op = KvOp::set;
        q.key = key;
        q.value = std::move(value);
        roundtrip(q, 60.0);
    }

    void set_str(const std::string& key, const std::string& s) {
        set(key, Bytes(s.begin(), s.end()));
    }

    std::optional<Bytes> get(const std::string& key) {
        KvRequest q;
        q.op = KvOp::get;
        q.key = key;
        auto [st, v] = roundtrip(q, 60.0);
        if (st == KvStatus::absent) return std::nullopt;
        return v;
    }

    // Throws TimeoutError when the server reports the wait expired.
    Bytes wait(const std::string& key, KvCond cond, Bytes operand, double timeout_s) {
        KvRequest q;
        q.op = KvOp::wait;
        q.key = key;
        q.cond = cond;
        q.value = std::move(operand);
        q.timeout_s = timeout_s;
        // generous link-level slack on top of the server-side timeout
        auto [st, v] = roundtrip(q, timeout_s == kNever ? kNever : timeout_s + 30.0);
        if (st == KvStatus::timeout) throw TimeoutError("kv_wait timed out on " + key);
        return v;
    }

    void close() { link_->close(); }
    Link& link() { return *link_; }

private:
    std::pair<KvStatus, Bytes> roundtrip(const KvRequest& q, double timeout) {
        try {
            link_->send(encode_kv_request(q));
            Frame f = link_->recv(timeout);
            if (f.kind != FrameKind::kv_op) throw DecodeError("unexpected frame kind");
            return decode_kv_response(f);
        } catch (const LinkError& e) {
            throw CoordinatorError(std::string("coordinator unreachable: ") + e.what());
        }
    }

    std::shared_ptr<Link> link_;
};

inline Bytes u64_bytes(uint64_t v) {
    ByteWriter w;
    w.u64(v);
    return std::move(w.buffer());
}

inline uint64_t bytes_u64(const Bytes& b) {
    ByteReader r(b);
    uint64_t v = r.u64();
    return v;
}

}  // namespace emesh
