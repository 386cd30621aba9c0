#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "emesh/bytes.hpp"
#include "emesh/runtime.hpp"

namespace emesh {

// host:port endpoint table for one mesh. Node ids map to dial targets;
// the listening side learns peer identity from the connection hello.
struct PeerAddr {
    std::string node_id;
    std::string host;
    uint16_t port = 0;
};

namespace tcp_detail {

inline void close_fd(int fd) {
    if (fd >= 0) ::close(fd);
}

// Full send, EINTR-safe.
inline bool send_all(int fd, const uint8_t* p, size_t n) {
    while (n > 0) {
        ssize_t w = ::send(fd, p, n, MSG_NOSIGNAL);
        if (w < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        p += w;
        n -= static_cast<size_t>(w);
    }
    return true;
}

// Full recv with a deadline enforced via poll. Returns false on clean EOF
// at a frame boundary (n untouched); throws on timeout/error mid-frame.
inline bool recv_all(int fd, uint8_t* p, size_t n, double timeout_s, const std::string& peer,
                     bool at_boundary) {
    using clock = std::chrono::steady_clock;
    auto deadline = clock::now() + std::chrono::duration_cast<clock::duration>(
                                       std::chrono::duration<double>(
                                           timeout_s == kNever ? 3e7 : timeout_s));
    size_t got = 0;
    while (got < n) {
        auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - clock::now());
        if (left.count() <= 0) throw TimeoutError("recv timed out");
        pollfd pfd{fd, POLLIN, 0};
        int pr = ::poll(&pfd, 1, static_cast<int>(std::min<int64_t>(left.count(), 1000)));
        if (pr < 0) {
            if (errno == EINTR) continue;
            throw LinkError(peer, "poll failed");
        }
        if (pr == 0) continue;
        ssize_t r = ::recv(fd, p + got, n - got, 0);
        if (r == 0) {
            if (at_boundary && got == 0) return false;
            throw LinkError(peer, "connection closed mid-frame");
        }
        if (r < 0) {
            if (errno == EINTR) continue;
            throw LinkError(peer, "recv failed: " + std::string(strerror(errno)));
        }
        got += static_cast<size_t>(r);
    }
    return true;
}

}  // namespace tcp_detail

class TcpLink : public Link {
public:
    TcpLink(int fd, std::string peer, std::shared_ptr<std::atomic<uint64_t>> tx,
            std::shared_ptr<std::atomic<uint64_t>> rx)
        : fd_(fd), peer_(std::move(peer)), tx_(std::move(tx)), rx_(std::move(rx)) {}

    ~TcpLink() override { close(); }

    void send(const Frame& f) override {
        if (f.payload.size() > kMaxFramePayload) throw Error("frame payload exceeds cap");
        std::lock_guard<std::mutex> g(send_mu_);
        if (fd_ < 0) throw LinkError(peer_, "link closed");
        uint8_t hdr[kFrameHeaderBytes];
        uint32_t len = static_cast<uint32_t>(f.payload.size());
        for (int i = 0; i < 4; ++i) hdr[i] = static_cast<uint8_t>(len >> (8 * i));
        hdr[4] = static_cast<uint8_t>(f.kind);
        if (!tcp_detail::send_all(fd_, hdr, sizeof hdr) ||
            !tcp_detail::send_all(fd_, f.payload.data(), f.payload.size()))
            throw LinkError(peer_, "send failed");
        *tx_ += f.wire_size();
    }

    Frame recv(double timeout_seconds) override {
        if (fd_ < 0) throw LinkError(peer_, "link closed");
        uint8_t hdr[kFrameHeaderBytes];
        if (!tcp_detail::recv_all(fd_, hdr, sizeof hdr, timeout_seconds, peer_, true))
            throw LinkError(peer_, "peer closed connection");
        uint32_t len = static_cast<uint32_t>(hdr[0]) | (static_cast<uint32_t>(hdr[1]) << 8) |
                       (static_cast<uint32_t>(hdr[2]) << 16) |
                       (static_cast<uint32_t>(hdr[3]) << 24);
        if (len > kMaxFramePayload) throw DecodeError("oversized frame");
        if (!frame_kind_valid(hdr[4])) throw DecodeError("unknown frame kind");
        Frame f;
        f.kind = static_cast<FrameKind>(hdr[4]);
        f.payload.resize(len);
        if (len > 0)
            tcp_detail::recv_all(fd_, f.payload.data(), len, timeout_seconds, peer_, false);
        *rx_ += f.wire_size();
        return f;
    }

    void close() override {
        int fd = fd_.exchange(-1);
        if (fd >= 0) {
            ::shutdown(fd, SHUT_RDWR);
            tcp_detail::close_fd(fd);
        }
    }

    const std::string& peer_id() const override { return peer_; }

private:
    std::atomic<int> fd_;
    std::string peer_;
    std::mutex send_mu_;
    std::shared_ptr<std::atomic<uint64_t>> tx_, rx_;
};

// Wall-clock runtime + TCP networking for one node. listen() demultiplexes
// incoming connections by the channel named in the hello line.
class TcpEnv : public Runtime, public Net {
public:
    TcpEnv(std::string node_id, uint16_t listen_port, std::vector<PeerAddr> peers)
        : node_id_(std::move(node_id)),
          listen_port_(listen_port),
          start_(std::chrono::steady_clock::now()),
          tx_(std::make_shared<std::atomic<uint64_t>>(0)),
          rx_(std::make_shared<std::atomic<uint64_t>>(0)) {
        for (auto& p : peers) peers_[p.node_id] = p;
        start_acceptor();  // port 0 binds an ephemeral port
    }

    ~TcpEnv() override {
        stopping_ = true;
        if (accept_fd_ >= 0) {
            ::shutdown(accept_fd_, SHUT_RDWR);
            tcp_detail::close_fd(accept_fd_);
        }
        if (accept_thread_.joinable()) accept_thread_.join();
        for (auto& t : threads_)
            if (t.joinable()) t.join();
    }

    uint16_t bound_port() const { return bound_port_; }

    // Runtime ----------------------------------------------------------
    double now() override {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }
    void sleep_for(double seconds) override {
        if (seconds > 0)
            std::this_thread::sleep_for(std::chrono::duration<double>(seconds));
    }
    std::shared_ptr<TaskHandle> spawn(const std::string& name, std::function<void()> fn) override;
    std::shared_ptr<WaitHandle> make_wait() override;
    bool simulated() const override { return false; }

    // Net ---------------------------------------------------------------
    const std::string& local_id() const override { return node_id_; }

    std::shared_ptr<Listener> listen(const std::string& channel) override;

    std::shared_ptr<Link> connect(const std::string& peer, const std::string& channel,
                                  double timeout_seconds) override {
        PeerAddr addr;
        {
            std::lock_guard<std::mutex> g(mu_);
            auto it = peers_.find(peer);
            if (it == peers_.end()) throw LinkError(peer, "unknown peer");
            addr = it->second;
        }
        int fd = dial(addr, timeout_seconds);
        // hello: our id + desired channel
        ByteWriter w;
        w.str(node_id_);
        w.str(channel);
        uint32_t hlen = static_cast<uint32_t>(w.buffer().size());
        uint8_t lenb[4];
        for (int i = 0; i < 4; ++i) lenb[i] = static_cast<uint8_t>(hlen >> (8 * i));
        if (!tcp_detail::send_all(fd, lenb, 4) ||
            !tcp_detail::send_all(fd, w.buffer().data(), w.buffer().size())) {
            tcp_detail::close_fd(fd);
            throw LinkError(peer, "hello failed");
        }
        return std::make_shared<TcpLink>(fd, peer, tx_, rx_);
    }

    uint64_t bytes_sent() const override { return *tx_; }
    uint64_t bytes_received() const override { return *rx_; }

private:
    struct ChannelQueue {
        std::deque<std::shared_ptr<Link>> pending;
        bool closed = false;
    };

    int dial(const PeerAddr& addr, double timeout_s) {
        addrinfo hints{};
        hints.ai_family = AF_INET;
        hints.ai_socktype = SOCK_STREAM;
        addrinfo* res = nullptr;
        std::string port = std::to_string(addr.port);
        if (::getaddrinfo(addr.host.c_str(), port.c_str(), &hints, &res) != 0 || res == nullptr)
            throw LinkError(addr.node_id, "resolve failed for " + addr.host);
        int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
        if (fd < 0) {
            ::freeaddrinfo(res);
            throw LinkError(addr.node_id, "socket failed");
        }
        int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        int rc = ::connect(fd, res->ai_addr, res->ai_addrlen);
        ::freeaddrinfo(res);
        (void)timeout_s;
        if (rc != 0) {
            tcp_detail::close_fd(fd);
            throw LinkError(addr.node_id, "connection refused");
        }
        return fd;
    }

    void start_acceptor() {
        accept_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (accept_fd_ < 0) throw FatalError("cannot create listen socket");
        int one = 1;
        ::setsockopt(accept_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        sockaddr_in sa{};
        sa.sin_family = AF_INET;
        sa.sin_addr.s_addr = htonl(INADDR_ANY);
        sa.sin_port = htons(listen_port_);
        if (::bind(accept_fd_, reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0 ||
            ::listen(accept_fd_, 64) != 0)
            throw FatalError("cannot bind port " + std::to_string(listen_port_));
        socklen_t slen = sizeof sa;
        ::getsockname(accept_fd_, reinterpret_cast<sockaddr*>(&sa), &slen);
        bound_port_ = ntohs(sa.sin_port);

        accept_thread_ = std::thread([this] {
            while (!stopping_) {
                int fd = ::accept(accept_fd_, nullptr, nullptr);
                if (fd < 0) {
                    if (stopping_) break;
                    continue;
                }
                int one2 = 1;
                ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one2, sizeof one2);
                handle_hello(fd);
            }
        });
    }

    void handle_hello(int fd) {
        try {
            uint8_t lenb[4];
            tcp_detail::recv_all(fd, lenb, 4, 10.0, "?", false);
            uint32_t hlen = static_cast<uint32_t>(lenb[0]) | (lenb[1] << 8) | (lenb[2] << 16) |
                            (static_cast<uint32_t>(lenb[3]) << 24);
            if (hlen > 4096) throw DecodeError("oversized hello");
            Bytes hello(hlen);
            tcp_detail::recv_all(fd, hello.data(), hlen, 10.0, "?", false);
            ByteReader r(hello);
            std::string peer = r.str();
            std::string channel = r.str();
            auto link = std::make_shared<TcpLink>(fd, peer, tx_, rx_);
            {
                std::lock_guard<std::mutex> g(mu_);
                channels_[channel].pending.push_back(std::move(link));
            }
            cv_.notify_all();
        } catch (const std::exception&) {
            tcp_detail::close_fd(fd);
        }
    }

    class TcpListener : public Listener {
    public:
        TcpListener(TcpEnv* env, std::string channel) : env_(env), channel_(std::move(channel)) {}
        ~TcpListener() override { close(); }

        std::shared_ptr<Link> accept(double timeout_seconds) override {
            std::unique_lock<std::mutex> l(env_->mu_);
            auto deadline = std::chrono::steady_clock::now() +
                            std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                std::chrono::duration<double>(
                                    timeout_seconds == kNever ? 3e7 : timeout_seconds));
            auto& q = env_->channels_[channel_];
            for (;;) {
                if (!q.pending.empty()) {
                    auto link = q.pending.front();
                    q.pending.pop_front();
                    return link;
                }
                if (q.closed || env_->stopping_) throw LinkError("", "listener closed");
                if (env_->cv_.wait_until(l, deadline) == std::cv_status::timeout)
                    throw TimeoutError("accept timed out");
            }
        }

        void close() override {
            std::lock_guard<std::mutex> g(env_->mu_);
            env_->channels_[channel_].closed = true;
            env_->cv_.notify_all();
        }

    private:
        TcpEnv* env_;
        std::string channel_;
    };

    std::string node_id_;
    uint16_t listen_port_ = 0;
    uint16_t bound_port_ = 0;
    std::chrono::steady_clock::time_point start_;
    std::map<std::string, PeerAddr> peers_;
    std::map<std::string, ChannelQueue> channels_;
    std::mutex mu_;
    std::condition_variable cv_;
    int accept_fd_ = -1;
    std::thread accept_thread_;
    std::vector<std::thread> threads_;
    std::atomic<bool> stopping_{false};
    std::shared_ptr<std::atomic<uint64_t>> tx_, rx_;
};

inline std::shared_ptr<TaskHandle> TcpEnv::spawn(const std::string& /*name*/,
                                                 std::function<void()> fn) {
    struct ThreadTask : TaskHandle {
        std::thread t;
        void join() override {
            if (t.joinable()) t.join();
        }
        ~ThreadTask() override {
            if (t.joinable()) t.join();
        }
    };
    auto task = std::make_shared<ThreadTask>();
    task->t = std::thread(std::move(fn));
    return task;
}

inline std::shared_ptr<Listener> TcpEnv::listen(const std::string& channel) {
    std::lock_guard<std::mutex> g(mu_);
    channels_[channel].closed = false;
    return std::make_shared<TcpListener>(this, channel);
}

inline std::shared_ptr<WaitHandle> TcpEnv::make_wait() {
    struct CvWait : WaitHandle {
        std::mutex mu;
        std::condition_variable cv;
        bool flag = false;
        void signal() override {
            {
                std::lock_guard<std::mutex> g(mu);
                flag = true;
            }
            cv.notify_all();
        }
        bool wait_until(double deadline_s) override {
            // deadline is relative to an arbitrary epoch shared with now();
            // for the wall-clock runtime we convert via steady_clock directly.
            std::unique_lock<std::mutex> l(mu);
            if (flag) {
                flag = false;
                return true;
            }
            auto until = deadline_s == kNever
                             ? std::chrono::steady_clock::now() + std::chrono::hours(24 * 365)
                             : epoch + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                           std::chrono::duration<double>(deadline_s));
            if (!cv.wait_until(l, until, [&] { return flag; })) return false;
            flag = false;
            return true;
        }
        std::chrono::steady_clock::time_point epoch;
    };
    auto w = std::make_shared<CvWait>();
    w->epoch = start_;
    return w;
}

}  // namespace emesh
