#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <string>

#include "emesh/bytes.hpp"
#include "emesh/errors.hpp"

namespace emesh {

constexpr double kNever = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Frames: the unit of transfer on every link.
// Wire format: u32 LE payload length, u8 kind, payload.

enum class FrameKind : uint8_t {
    heartbeat = 1,
    deathrattle = 2,
    kv_op = 3,
    checkpoint = 4,
    allreduce_chunk = 5,
    probe = 6,
};

constexpr size_t kMaxFramePayload = 16u << 20;  // larger tensors are chunked by callers
constexpr size_t kFrameHeaderBytes = 5;

struct Frame {
    FrameKind kind = FrameKind::kv_op;
    Bytes payload;

    size_t wire_size() const { return kFrameHeaderBytes + payload.size(); }
};

inline bool frame_kind_valid(uint8_t k) { return k >= 1 && k <= 6; }

// ---------------------------------------------------------------------------
// Execution environment. Node logic is written once against these interfaces
// and runs unchanged on the virtual-clock simulator and on real TCP.

// Binary-semaphore style wakeup slot. Single waiter at a time.
class WaitHandle {
public:
    virtual ~WaitHandle() = default;
    virtual void signal() = 0;
    // Returns true when signalled, false on deadline. Consumes the signal.
    virtual bool wait_until(double deadline) = 0;
};

class TaskHandle {
public:
    virtual ~TaskHandle() = default;
    virtual void join() = 0;
};

class Runtime {
public:
    virtual ~Runtime() = default;
    virtual double now() = 0;
    virtual void sleep_for(double seconds) = 0;
    virtual std::shared_ptr<TaskHandle> spawn(const std::string& name,
                                              std::function<void()> fn) = 0;
    virtual std::shared_ptr<WaitHandle> make_wait() = 0;
    virtual bool simulated() const = 0;
    // Model a CPU cost: the simulator advances the virtual clock, real
    // runtimes rely on the work itself having been done.
    virtual void charge_compute(double seconds) {
        if (simulated() && seconds > 0) sleep_for(seconds);
    }
};

// Reliable ordered framed byte stream to one peer. Confined to one owner;
// frames are delivered whole or an error is raised.
class Link {
public:
    virtual ~Link() = default;
    virtual void send(const Frame& f) = 0;
    virtual Frame recv(double timeout_seconds) = 0;
    virtual void close() = 0;
    virtual const std::string& peer_id() const = 0;
    // Blocks until queued outbound frames have left the wire. Models
    // synchronous transmission on the simulator; a no-op for kernel-buffered
    // transports.
    virtual void drain() {}
};

class Listener {
public:
    virtual ~Listener() = default;
    // Accepts the next incoming connection; the peer's node id is already
    // resolved by the connection handshake.
    virtual std::shared_ptr<Link> accept(double timeout_seconds) = 0;
    virtual void close() = 0;
};

class Net {
public:
    virtual ~Net() = default;
    virtual const std::string& local_id() const = 0;
    virtual std::shared_ptr<Listener> listen(const std::string& channel) = 0;
    virtual std::shared_ptr<Link> connect(const std::string& peer, const std::string& channel,
                                          double timeout_seconds) = 0;
    virtual uint64_t bytes_sent() const = 0;
    virtual uint64_t bytes_received() const = 0;
};

// One node's execution context.
struct Env {
    Runtime* rt = nullptr;
    Net* net = nullptr;
};

// ---------------------------------------------------------------------------
// Single-consumer blocking queue built on a WaitHandle; works under both
// runtimes. Producers may be many, the consumer must be one task.

template <typename T>
class BlockingQueue {
public:
    explicit BlockingQueue(Runtime& rt) : wait_(rt.make_wait()) {}

    void push(T item) {
        {
            std::lock_guard<std::mutex> g(mu_);
            items_.push_back(std::move(item));
        }
        wait_->signal();
    }

    // Throws TimeoutError on deadline.
    T pop(double deadline) {
        for (;;) {
            {
                std::lock_guard<std::mutex> g(mu_);
                if (!items_.empty()) {
                    T item = std::move(items_.front());
                    items_.pop_front();
                    return item;
                }
            }
            if (!wait_->wait_until(deadline)) throw TimeoutError("queue pop timed out");
        }
    }

    bool empty() const {
        std::lock_guard<std::mutex> g(mu_);
        return items_.empty();
    }

private:
    mutable std::mutex mu_;
    std::deque<T> items_;
    std::shared_ptr<WaitHandle> wait_;
};

}  // namespace emesh
