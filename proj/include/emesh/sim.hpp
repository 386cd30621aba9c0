#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <queue>
#include <string>
#include <thread>
#include <vector>

#include "emesh/runtime.hpp"

namespace emesh {

// Scripted per-link fault.
struct LinkFault {
    double at = 0;                 // simulated seconds
    bool drop = false;             // sever the link
    double degrade_to_bps = 0;     // when not dropping: new bandwidth
};

struct LinkSpec {
    double bandwidth_bps = 1e9;
    double latency_s = 0.0;
    std::vector<LinkFault> faults;  // sorted by time

    void validate() const {
        if (!(bandwidth_bps > 0)) throw ConfigError("link bandwidth must be > 0");
        if (!(latency_s >= 0)) throw ConfigError("link latency must be >= 0");
    }
};

// Deterministic in-process network and scheduler. Logical nodes run as real
// threads, but exactly one is runnable at any instant: every blocking call
// parks the caller in a (time, sequence) ordered event queue and hands off
// to the next event. Identical inputs therefore replay identical schedules,
// timestamps and delivery orders, independent of OS scheduling.
class SimWorld {
    // Control-flow signals. Deliberately outside the Error hierarchy so node
    // code never catches them by accident.
    struct CrashSignal {};
    struct AbortSignal {};

    struct Actor {
        std::string node;  // empty for free-standing actors (test drivers)
        std::string name;
        std::thread thread;
        std::condition_variable cv;
        enum class State { parked, running, done } state = State::parked;
        std::vector<Actor*> join_waiters;
    };

    struct Event {
        double t;
        uint64_t seq;
        Actor* actor;
        bool operator>(const Event& o) const { return t != o.t ? t > o.t : seq > o.seq; }
    };

    struct LinkShared;

    struct SimListener;

    struct SimNode {
        std::string id;
        bool crashed = false;
        double crashed_at = kNever;
        uint64_t bytes_sent = 0;
        uint64_t bytes_received = 0;
        std::map<std::string, SimListener*> listeners;
    };

    struct PairKey {
        std::string a, b;  // a < b
        bool operator<(const PairKey& o) const { return a != o.a ? a < o.a : b < o.b; }
    };

    struct PairState {
        double bandwidth_bps = 1e9;
        double latency_s = 0.0;
        std::vector<LinkFault> faults;
        size_t next_fault = 0;
        double dropped_at = kNever;
        double next_free[2] = {0, 0};  // 0: a->b, 1: b->a
    };

public:
    SimWorld() = default;
    ~SimWorld() { teardown(); }

    SimWorld(const SimWorld&) = delete;
    SimWorld& operator=(const SimWorld&) = delete;

    void set_default_link(LinkSpec spec) {
        spec.validate();
        std::lock_guard<std::mutex> g(mu_);
        default_spec_ = std::move(spec);
    }

    void set_link(const std::string& a, const std::string& b, LinkSpec spec) {
        spec.validate();
        std::lock_guard<std::mutex> g(mu_);
        PairState& p = pair_locked(a, b, /*create=*/true, /*apply_default=*/false);
        p.bandwidth_bps = spec.bandwidth_bps;
        p.latency_s = spec.latency_s;
        p.faults = spec.faults;
        p.next_fault = 0;
    }

    // Immediate mid-run mutations (used by churn scripts).
    void degrade_link(const std::string& a, const std::string& b, double bps) {
        std::lock_guard<std::mutex> g(mu_);
        pair_locked(a, b, true, true).bandwidth_bps = bps;
    }

    void crash_node(const std::string& id) {
        std::lock_guard<std::mutex> g(mu_);
        auto it = nodes_.find(id);
        if (it == nodes_.end()) throw ConfigError("crash of unknown node " + id);
        it->second->crashed = true;
        it->second->crashed_at = now_;
        // Park-blocked actors of this node die at their next wakeup; anything
        // blocked on its links gets a link error.
        for (auto& a : actors_)
            if (a->node == id && a->state == Actor::State::parked) push_event_locked(now_, a.get());
        for (auto& [key, links] : links_by_pair_)
            if (key.a == id || key.b == id)
                for (auto& weak : links)
                    if (auto l = weak.lock()) wake_link_waiters_locked(*l);
    }

    bool node_crashed(const std::string& id) {
        std::lock_guard<std::mutex> g(mu_);
        auto it = nodes_.find(id);
        return it != nodes_.end() && it->second->crashed;
    }

    double now() {
        std::lock_guard<std::mutex> g(mu_);
        return now_;
    }

    // Spawns a logical task. `node` may name a simulated node (created on
    // first use) or be empty for a plain driver task.
    std::shared_ptr<TaskHandle> spawn(const std::string& node, const std::string& name,
                                      std::function<void()> fn);

    // Runs the event loop until every actor finished. Throws on deadlock
    // (parked actors with an empty event queue).
    void run() {
        std::unique_lock<std::mutex> l(mu_);
        if (current_ == nullptr) dispatch_locked();
        world_cv_.wait(l, [&] { return live_ == 0 || deadlock_; });
        bool dead = deadlock_;
        l.unlock();
        if (dead) {
            teardown();
            throw FatalError("simulation deadlock: all actors parked with no pending events");
        }
        teardown();
        if (!first_error_.empty()) throw FatalError("actor failed: " + first_error_);
    }

    // Errors recorded from actors that let an exception escape.
    std::vector<std::string> actor_errors() {
        std::lock_guard<std::mutex> g(mu_);
        return errors_;
    }

    Env env(const std::string& node);

    uint64_t node_bytes_sent(const std::string& id) {
        std::lock_guard<std::mutex> g(mu_);
        return node_locked(id)->bytes_sent;
    }
    uint64_t node_bytes_received(const std::string& id) {
        std::lock_guard<std::mutex> g(mu_);
        return node_locked(id)->bytes_received;
    }

private:
    // ------------------------------------------------------------------
    // scheduler core (all under mu_)

    static thread_local Actor* tls_actor_;

    void push_event_locked(double t, Actor* a) {
        if (t == kNever) return;
        events_.push(Event{t < now_ ? now_ : t, seq_++, a});
    }

    void dispatch_locked() {
        for (;;) {
            if (events_.empty()) {
                if (live_ == 0) {
                    world_cv_.notify_all();
                } else if (current_ == nullptr) {
                    bool any_parked = false;
                    for (auto& a : actors_)
                        if (a->state == Actor::State::parked) any_parked = true;
                    if (any_parked) {
                        deadlock_ = true;
                        world_cv_.notify_all();
                    } else {
                        world_cv_.notify_all();
                    }
                }
                return;
            }
            Event ev = events_.top();
            events_.pop();
            if (ev.actor->state != Actor::State::parked) continue;  // stale wakeup
            if (ev.t > now_) now_ = ev.t;
            ev.actor->state = Actor::State::running;
            current_ = ev.actor;
            ev.actor->cv.notify_all();
            return;
        }
    }

    // Parks the calling actor until `t` (or an explicit wake) and hands the
    // world to the next event. Returns with the actor running again.
    void park_until_locked(std::unique_lock<std::mutex>& l, double t) {
        Actor* self = tls_actor_;
        if (self == nullptr || self != current_) throw FatalError("sim call outside actor context");
        push_event_locked(t, self);
        self->state = Actor::State::parked;
        current_ = nullptr;
        dispatch_locked();
        self->cv.wait(l, [&] { return self->state == Actor::State::running || aborted_; });
        if (aborted_) throw AbortSignal{};
        check_crashed_locked();
    }

    void check_crashed_locked() {
        Actor* self = tls_actor_;
        if (self != nullptr && !self->node.empty()) {
            auto it = nodes_.find(self->node);
            if (it != nodes_.end() && it->second->crashed) throw CrashSignal{};
        }
    }

    SimNode* node_locked(const std::string& id) {
        auto it = nodes_.find(id);
        if (it == nodes_.end()) {
            auto n = std::make_unique<SimNode>();
            n->id = id;
            it = nodes_.emplace(id, std::move(n)).first;
        }
        return it->second.get();
    }

    PairState& pair_locked(const std::string& x, const std::string& y, bool /*create*/,
                           bool /*apply_default*/) {
        PairKey key = x < y ? PairKey{x, y} : PairKey{y, x};
        auto it = pairs_.find(key);
        if (it == pairs_.end()) {
            PairState p;
            p.bandwidth_bps = default_spec_.bandwidth_bps;
            p.latency_s = default_spec_.latency_s;
            p.faults = default_spec_.faults;
            it = pairs_.emplace(key, std::move(p)).first;
        }
        return it->second;
    }

    void apply_faults_locked(PairState& p) {
        while (p.next_fault < p.faults.size() && p.faults[p.next_fault].at <= now_) {
            const LinkFault& f = p.faults[p.next_fault++];
            if (f.drop) {
                if (f.at < p.dropped_at) p.dropped_at = f.at;
            } else {
                p.bandwidth_bps = f.degrade_to_bps;
            }
        }
    }

    void teardown() {
        {
            std::lock_guard<std::mutex> g(mu_);
            aborted_ = true;
            for (auto& a : actors_) a->cv.notify_all();
        }
        for (auto& a : actors_)
            if (a->thread.joinable()) a->thread.join();
    }

    // ------------------------------------------------------------------
    // links

    struct LinkShared {
        SimWorld* world = nullptr;
        PairKey pair;
        std::string node_id[2];
        struct End {
            std::deque<std::pair<double, Frame>> inbox;  // (arrival time, frame), arrival-ordered
            Actor* waiter = nullptr;
            bool closed = false;
        };
        End ends[2];
    };

    void wake_link_waiters_locked(LinkShared& l) {
        for (auto& e : l.ends)
            if (e.waiter != nullptr && e.waiter->state == Actor::State::parked)
                push_event_locked(now_, e.waiter);
    }

    class SimLink : public Link {
    public:
        SimLink(SimWorld* w, std::shared_ptr<LinkShared> shared, int side)
            : w_(w), shared_(std::move(shared)), side_(side) {}

        ~SimLink() override { close_quiet(); }

        void send(const Frame& f) override {
            if (f.payload.size() > kMaxFramePayload) throw Error("frame payload exceeds cap");
            std::unique_lock<std::mutex> l(w_->mu_);
            w_->check_crashed_locked();
            LinkShared& sh = *shared_;
            PairState& p = w_->pair_locked(sh.pair.a, sh.pair.b, true, true);
            w_->apply_faults_locked(p);
            const std::string& peer = sh.node_id[1 - side_];
            if (p.dropped_at <= w_->now_) throw LinkError(peer, "link dropped");
            if (sh.ends[side_].closed) throw LinkError(peer, "link closed locally");
            if (sh.ends[1 - side_].closed) throw LinkError(peer, "peer closed connection");
            if (!peer.empty() && w_->node_locked(peer)->crashed)
                throw LinkError(peer, "peer is down");
            const double bits = static_cast<double>(f.wire_size()) * 8.0;
            // serialize transmissions per direction: all channels between a
            // pair share the configured capacity
            int dir = (sh.node_id[side_] == sh.pair.a) ? 0 : 1;
            double start = std::max(w_->now_, p.next_free[dir]);
            double dur = bits / p.bandwidth_bps;
            double arrival = start + dur + p.latency_s;
            p.next_free[dir] = start + dur;
            sh.ends[1 - side_].inbox.emplace_back(arrival, f);
            if (!sh.node_id[side_].empty())
                w_->node_locked(sh.node_id[side_])->bytes_sent += f.wire_size();
            if (!peer.empty()) w_->node_locked(peer)->bytes_received += f.wire_size();
            Actor* waiter = sh.ends[1 - side_].waiter;
            if (waiter != nullptr && waiter->state == Actor::State::parked)
                w_->push_event_locked(arrival, waiter);
        }

        Frame recv(double timeout_seconds) override {
            std::unique_lock<std::mutex> l(w_->mu_);
            w_->check_crashed_locked();
            LinkShared& sh = *shared_;
            const std::string& peer = sh.node_id[1 - side_];
            const double deadline =
                timeout_seconds == kNever ? kNever : w_->now_ + timeout_seconds;
            for (;;) {
                PairState& p = w_->pair_locked(sh.pair.a, sh.pair.b, true, true);
                w_->apply_faults_locked(p);
                auto& end = sh.ends[side_];
                // frames still on the wire when the link dropped or the peer
                // crashed never complete
                double severed_at = p.dropped_at;
                if (!peer.empty()) {
                    SimNode* pn = w_->node_locked(peer);
                    if (pn->crashed) severed_at = std::min(severed_at, pn->crashed_at);
                }
                while (!end.inbox.empty() && end.inbox.back().first > severed_at)
                    end.inbox.pop_back();
                if (!end.inbox.empty() && end.inbox.front().first <= w_->now_) {
                    Frame f = std::move(end.inbox.front().second);
                    end.inbox.pop_front();
                    return f;
                }
                bool drained = end.inbox.empty();
                if (drained && p.dropped_at <= w_->now_) throw LinkError(peer, "link dropped");
                if (drained && end.closed) throw LinkError(peer, "link closed locally");
                if (drained && sh.ends[1 - side_].closed)
                    throw LinkError(peer, "peer closed connection");
                if (drained && !peer.empty() && w_->node_locked(peer)->crashed)
                    throw LinkError(peer, "peer is down");
                if (w_->now_ >= deadline) throw TimeoutError("recv timed out");
                double next = deadline;
                if (!end.inbox.empty() && end.inbox.front().first < next)
                    next = end.inbox.front().first;
                end.waiter = w_->tls_actor_;
                try {
                    w_->park_until_locked(l, next);
                } catch (...) {
                    end.waiter = nullptr;
                    throw;
                }
                end.waiter = nullptr;
            }
        }

        void close() override {
            std::unique_lock<std::mutex> l(w_->mu_);
            shared_->ends[side_].closed = true;
            w_->wake_link_waiters_locked(*shared_);
        }

        void drain() override {
            std::unique_lock<std::mutex> l(w_->mu_);
            w_->check_crashed_locked();
            LinkShared& sh = *shared_;
            int dir = (sh.node_id[side_] == sh.pair.a) ? 0 : 1;
            for (;;) {
                PairState& p = w_->pair_locked(sh.pair.a, sh.pair.b, true, true);
                if (p.next_free[dir] <= w_->now_) return;
                w_->park_until_locked(l, p.next_free[dir]);
            }
        }

        const std::string& peer_id() const override { return shared_->node_id[1 - side_]; }

    private:
        void close_quiet() {
            std::lock_guard<std::mutex> g(w_->mu_);
            shared_->ends[side_].closed = true;
            for (auto& e : shared_->ends)
                if (e.waiter != nullptr && e.waiter->state == Actor::State::parked)
                    w_->push_event_locked(w_->now_, e.waiter);
        }

        SimWorld* w_;
        std::shared_ptr<LinkShared> shared_;
        int side_;
    };

    struct SimListener : public Listener {
        SimListener(SimWorld* w, SimNode* node, std::string channel)
            : w_(w), node_(node), channel_(std::move(channel)) {}

        ~SimListener() override {
            std::lock_guard<std::mutex> g(w_->mu_);
            unregister_locked();
        }

        std::shared_ptr<Link> accept(double timeout_seconds) override {
            std::unique_lock<std::mutex> l(w_->mu_);
            w_->check_crashed_locked();
            const double deadline =
                timeout_seconds == kNever ? kNever : w_->now_ + timeout_seconds;
            for (;;) {
                if (!pending_.empty() && pending_.front().first <= w_->now_) {
                    auto link = std::move(pending_.front().second);
                    pending_.pop_front();
                    return link;
                }
                if (closed_) throw LinkError("", "listener closed");
                if (w_->now_ >= deadline) throw TimeoutError("accept timed out");
                double next = deadline;
                if (!pending_.empty() && pending_.front().first < next)
                    next = pending_.front().first;
                waiter_ = w_->tls_actor_;
                try {
                    w_->park_until_locked(l, next);
                } catch (...) {
                    waiter_ = nullptr;
                    throw;
                }
                waiter_ = nullptr;
            }
        }

        void close() override {
            std::lock_guard<std::mutex> g(w_->mu_);
            closed_ = true;
            unregister_locked();
            if (waiter_ != nullptr && waiter_->state == Actor::State::parked)
                w_->push_event_locked(w_->now_, waiter_);
        }

        void unregister_locked() {
            auto it = node_->listeners.find(channel_);
            if (it != node_->listeners.end() && it->second == this) node_->listeners.erase(it);
        }

        SimWorld* w_;
        SimNode* node_;
        std::string channel_;
        std::deque<std::pair<double, std::shared_ptr<Link>>> pending_;  // (ready time, link)
        Actor* waiter_ = nullptr;
        bool closed_ = false;
    };

    // ------------------------------------------------------------------
    // per-node runtime / net facade

    class SimWait : public WaitHandle {
    public:
        explicit SimWait(SimWorld* w) : w_(w) {}
        void signal() override {
            std::lock_guard<std::mutex> g(w_->mu_);
            flag_ = true;
            if (waiter_ != nullptr && waiter_->state == Actor::State::parked)
                w_->push_event_locked(w_->now_, waiter_);
        }
        bool wait_until(double deadline) override {
            std::unique_lock<std::mutex> l(w_->mu_);
            w_->check_crashed_locked();
            for (;;) {
                if (flag_) {
                    flag_ = false;
                    return true;
                }
                if (w_->now_ >= deadline) return false;
                waiter_ = w_->tls_actor_;
                try {
                    w_->park_until_locked(l, deadline);
                } catch (...) {
                    waiter_ = nullptr;
                    throw;
                }
                waiter_ = nullptr;
            }
        }

    private:
        SimWorld* w_;
        bool flag_ = false;
        Actor* waiter_ = nullptr;
    };

    class NodeEnv : public Runtime, public Net {
    public:
        NodeEnv(SimWorld* w, std::string node) : w_(w), node_(std::move(node)) {}

        // Runtime
        double now() override { return w_->now(); }
        void sleep_for(double seconds) override {
            std::unique_lock<std::mutex> l(w_->mu_);
            w_->check_crashed_locked();
            w_->park_until_locked(l, w_->now_ + seconds);
        }
        std::shared_ptr<TaskHandle> spawn(const std::string& name,
                                          std::function<void()> fn) override {
            return w_->spawn(node_, name, std::move(fn));
        }
        std::shared_ptr<WaitHandle> make_wait() override {
            return std::make_shared<SimWait>(w_);
        }
        bool simulated() const override { return true; }

        // Net
        const std::string& local_id() const override { return node_; }

        std::shared_ptr<Listener> listen(const std::string& channel) override {
            std::lock_guard<std::mutex> g(w_->mu_);
            SimNode* n = w_->node_locked(node_);
            if (n->listeners.count(channel))
                throw Error("channel already has a listener: " + channel);
            auto lst = std::make_shared<SimListener>(w_, n, channel);
            n->listeners[channel] = lst.get();
            listeners_.push_back(lst);
            return lst;
        }

        std::shared_ptr<Link> connect(const std::string& peer, const std::string& channel,
                                      double /*timeout_seconds*/) override {
            std::lock_guard<std::mutex> g(w_->mu_);
            w_->check_crashed_locked();
            SimNode* pn = w_->node_locked(peer);
            if (pn->crashed) throw LinkError(peer, "connection refused: node down");
            auto it = pn->listeners.find(channel);
            if (it == pn->listeners.end())
                throw LinkError(peer, "connection refused: nothing listening on " + channel);
            PairState& p = w_->pair_locked(node_, peer, true, true);
            w_->apply_faults_locked(p);
            if (p.dropped_at <= w_->now_) throw LinkError(peer, "link dropped");

            auto shared = std::make_shared<LinkShared>();
            shared->world = w_;
            shared->pair = node_ < peer ? PairKey{node_, peer} : PairKey{peer, node_};
            shared->node_id[0] = node_;
            shared->node_id[1] = peer;
            w_->links_by_pair_[shared->pair].push_back(shared);
            auto mine = std::make_shared<SimLink>(w_, shared, 0);
            auto theirs = std::make_shared<SimLink>(w_, shared, 1);
            SimListener* lst = it->second;
            const double ready = w_->now_ + p.latency_s;
            auto pos = lst->pending_.end();
            while (pos != lst->pending_.begin() && std::prev(pos)->first > ready) --pos;
            lst->pending_.emplace(pos, ready, std::move(theirs));
            if (lst->waiter_ != nullptr && lst->waiter_->state == Actor::State::parked)
                w_->push_event_locked(ready, lst->waiter_);
            return mine;
        }

        uint64_t bytes_sent() const override { return w_->node_bytes_sent(node_); }
        uint64_t bytes_received() const override { return w_->node_bytes_received(node_); }

    private:
        SimWorld* w_;
        std::string node_;
        std::vector<std::shared_ptr<Listener>> listeners_;
    };

    // ------------------------------------------------------------------

    std::mutex mu_;
    std::condition_variable world_cv_;
    double now_ = 0;
    uint64_t seq_ = 0;
    std::priority_queue<Event, std::vector<Event>, std::greater<Event>> events_;
    std::vector<std::unique_ptr<Actor>> actors_;
    Actor* current_ = nullptr;
    size_t live_ = 0;
    bool deadlock_ = false;
    bool aborted_ = false;
    std::vector<std::string> errors_;
    std::string first_error_;
    std::map<std::string, std::unique_ptr<SimNode>> nodes_;
    std::map<PairKey, PairState> pairs_;
    std::map<PairKey, std::vector<std::weak_ptr<LinkShared>>> links_by_pair_;
    LinkSpec default_spec_;
    std::map<std::string, std::unique_ptr<NodeEnv>> envs_;
};

inline thread_local SimWorld::Actor* SimWorld::tls_actor_ = nullptr;

inline std::shared_ptr<TaskHandle> SimWorld::spawn(const std::string& node,
                                                   const std::string& name,
                                                   std::function<void()> fn) {
    struct SimTask : TaskHandle {
        SimWorld* w;
        Actor* a;
        void join() override {
            // Cooperative join: park until the target actor finishes. A
            // crashed joiner abandons its children instead of rethrowing
            // through destructors (they die at their own next wakeup).
            std::unique_lock<std::mutex> l(w->mu_);
            try {
                while (a->state != Actor::State::done) {
                    a->join_waiters.push_back(tls_actor_);
                    w->park_until_locked(l, kNever);
                }
            } catch (const CrashSignal&) {
            } catch (const AbortSignal&) {
            }
        }
    };

    Actor* actor = nullptr;
    {
        std::lock_guard<std::mutex> g(mu_);
        auto a = std::make_unique<Actor>();
        a->node = node;
        a->name = name;
        actor = a.get();
        actors_.push_back(std::move(a));
        live_ += 1;
        push_event_locked(now_, actor);
        if (!node.empty()) node_locked(node);
    }
    actor->thread = std::thread([this, actor, fn = std::move(fn)] {
        tls_actor_ = actor;
        {
            std::unique_lock<std::mutex> l(mu_);
            actor->cv.wait(l, [&] { return actor->state == Actor::State::running || aborted_; });
            if (aborted_) {
                actor->state = Actor::State::done;
                live_ -= 1;
                return;
            }
        }
        try {
            fn();
        } catch (const CrashSignal&) {
            // scripted crash: silent exit
        } catch (const AbortSignal&) {
        } catch (const std::exception& e) {
            std::lock_guard<std::mutex> g(mu_);
            errors_.push_back(actor->name + ": " + e.what());
            if (first_error_.empty()) first_error_ = errors_.back();
        }
        {
            std::unique_lock<std::mutex> l(mu_);
            actor->state = Actor::State::done;
            live_ -= 1;
            if (current_ == actor) current_ = nullptr;
            for (Actor* j : actor->join_waiters)
                if (j->state == Actor::State::parked) push_event_locked(now_, j);
            actor->join_waiters.clear();
            dispatch_locked();
        }
    });

    auto task = std::make_shared<SimTask>();
    task->w = this;
    task->a = actor;
    return task;
}

inline Env SimWorld::env(const std::string& node) {
    std::lock_guard<std::mutex> g(mu_);
    auto it = envs_.find(node);
    if (it == envs_.end())
        it = envs_.emplace(node, std::make_unique<NodeEnv>(this, node)).first;
    node_locked(node);
    return Env{it->second.get(), it->second.get()};
}

}  // namespace emesh
