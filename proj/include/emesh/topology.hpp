#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "emesh/errors.hpp"
#include "emesh/kv.hpp"
#include "emesh/runtime.hpp"

namespace emesh {

// Symmetric pairwise bandwidth estimates, bits/second. Diagonal unused.
struct BandwidthMatrix {
    std::vector<std::string> ids;
    std::vector<double> w;  // n*n

    BandwidthMatrix() = default;
    explicit BandwidthMatrix(std::vector<std::string> node_ids)
        : ids(std::move(node_ids)), w(ids.size() * ids.size(), 0.0) {
        if (ids.size() < 2) throw ShapeError("bandwidth matrix needs n >= 2");
    }

    size_t n() const { return ids.size(); }
    double& at(size_t i, size_t j) { return w[i * n() + j]; }
    double at(size_t i, size_t j) const { return w[i * n() + j]; }

    void set_sym(size_t i, size_t j, double v) {
        at(i, j) = v;
        at(j, i) = v;
    }
};

struct RingOrder {
    std::vector<uint32_t> order;  // permutation of 0..n-1
    double objective = 0;         // min edge bandwidth over the cycle
};

inline double cycle_objective(const BandwidthMatrix& m, const std::vector<uint32_t>& order) {
    double obj = std::numeric_limits<double>::infinity();
    const size_t n = order.size();
    for (size_t i = 0; i < n; ++i) obj = std::min(obj, m.at(order[i], order[(i + 1) % n]));
    return obj;
}

namespace topo_detail {

// Exact search: enumerate distinct Hamiltonian cycles via permutations with
// node 0 fixed first and reflections deduplicated (order[1] < order[n-1]).
// Deterministic: first maximizer in lexicographic enumeration order wins.
inline RingOrder solve_exact(const BandwidthMatrix& m) {
    const size_t n = m.n();
    std::vector<uint32_t> rest;
    for (uint32_t i = 1; i < n; ++i) rest.push_back(i);
    RingOrder best;
    best.objective = -1;
    std::vector<uint32_t> order(n);
    order[0] = 0;
    do {
        if (n > 2 && rest.front() > rest.back()) continue;  // reflection dup
        std::copy(rest.begin(), rest.end(), order.begin() + 1);
        double obj = cycle_objective(m, order);
        if (obj > best.objective) {
            best.objective = obj;
            best.order = order;
        }
    } while (std::next_permutation(rest.begin(), rest.end()));
    return best;
}

// Backtracking Hamiltonian-cycle search restricted to edges >= threshold.
// Exact up to the step budget; a blown budget reports "not found", which can
// only make the threshold search conservative, never invalid.
struct HamSearch {
    const BandwidthMatrix& m;
    double threshold;
    size_t budget = 4000000;
    std::vector<uint32_t> path;
    std::vector<bool> used;

    explicit HamSearch(const BandwidthMatrix& mat, double thr) : m(mat), threshold(thr) {
        used.assign(m.n(), false);
    }

    bool run(std::vector<uint32_t>& out) {
        path.assign(1, 0);
        used[0] = true;
        if (!dfs()) return false;
        out = path;
        return true;
    }

    bool dfs() {
        if (budget == 0) return false;
        --budget;
        const size_t n = m.n();
        if (path.size() == n) return m.at(path.back(), 0) >= threshold;
        uint32_t cur = path.back();
        for (uint32_t next = 1; next < n; ++next) {
            if (used[next] || m.at(cur, next) < threshold) continue;
            used[next] = true;
            path.push_back(next);
            if (dfs()) return true;
            path.pop_back();
            used[next] = false;
        }
        return false;
    }
};

// Greedy baseline: repeatedly hop to the unvisited neighbor with the best
// bandwidth. The heuristic answer is never worse than this.
inline RingOrder solve_greedy(const BandwidthMatrix& m) {
    const size_t n = m.n();
    RingOrder r;
    r.order.push_back(0);
    std::vector<bool> used(n, false);
    used[0] = true;
    for (size_t step = 1; step < n; ++step) {
        uint32_t cur = r.order.back();
        int best = -1;
        for (uint32_t cand = 0; cand < n; ++cand)
            if (!used[cand] && (best < 0 || m.at(cur, cand) > m.at(cur, best))) best = cand;
        used[best] = true;
        r.order.push_back(static_cast<uint32_t>(best));
    }
    r.objective = cycle_objective(m, r.order);
    return r;
}

// Threshold search over the distinct edge weights: find the largest weight
// for which a Hamiltonian cycle exists using only edges at least that heavy.
inline RingOrder solve_threshold(const BandwidthMatrix& m) {
    const size_t n = m.n();
    std::vector<double> weights;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) weights.push_back(m.at(i, j));
    std::sort(weights.begin(), weights.end());
    weights.erase(std::unique(weights.begin(), weights.end()), weights.end());

    RingOrder best = solve_greedy(m);
    size_t lo = 0, hi = weights.size();  // candidates with index < hi are feasible-unknown
    // binary search for the largest feasible threshold
    while (lo < hi) {
        size_t mid = (lo + hi) / 2;
        HamSearch search(m, weights[mid]);
        std::vector<uint32_t> cycle;
        if (search.run(cycle)) {
            double obj = cycle_objective(m, cycle);
            if (obj > best.objective) best = RingOrder{cycle, obj};
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    return best;
}

}  // namespace topo_detail

// Ring order maximizing the minimum edge bandwidth along the cycle. Exact for
// n <= 10; threshold search with a greedy floor beyond that. Deterministic
// for a given matrix.
inline RingOrder solve_ring(const BandwidthMatrix& m) {
    const size_t n = m.n();
    if (n < 2) throw ShapeError("solve_ring: need at least 2 nodes");
    RingOrder result;
    if (n == 2) {
        result.order = {0, 1};
        result.objective = m.at(0, 1);
    } else if (n <= 10) {
        result = topo_detail::solve_exact(m);
    } else {
        result = topo_detail::solve_threshold(m);
    }
    // self-consistency: the reported objective is the recomputed min edge
    if (result.objective != cycle_objective(m, result.order))
        throw FatalError("solve_ring objective self-check failed");
    return result;
}

// ---------------------------------------------------------------------------
// Plain-text snapshot: header of node ids, then n rows of bits/second.

inline void write_matrix(std::ostream& os, const BandwidthMatrix& m) {
    for (size_t i = 0; i < m.n(); ++i) os << (i ? " " : "") << m.ids[i];
    os << "\n";
    for (size_t i = 0; i < m.n(); ++i) {
        for (size_t j = 0; j < m.n(); ++j) os << (j ? " " : "") << m.at(i, j);
        os << "\n";
    }
}

inline BandwidthMatrix read_matrix(std::istream& is) {
    std::string header;
    if (!std::getline(is, header)) throw DecodeError("empty matrix file");
    std::istringstream hs(header);
    std::vector<std::string> ids;
    std::string tok;
    while (hs >> tok) ids.push_back(tok);
    if (ids.size() < 2) throw DecodeError("matrix header needs at least 2 node ids");
    BandwidthMatrix m(ids);
    for (size_t i = 0; i < m.n(); ++i)
        for (size_t j = 0; j < m.n(); ++j)
            if (!(is >> m.at(i, j))) throw DecodeError("matrix row truncated");
    for (size_t i = 0; i < m.n(); ++i)
        for (size_t j = 0; j < m.n(); ++j)
            if (m.at(i, j) < 0) throw DecodeError("negative bandwidth entry");
    return m;
}

// ---------------------------------------------------------------------------
// Bandwidth probing. Protocol: the prober connects on the "probe" channel and
// sends a request naming a payload size; the server answers with two frames
// of that size back to back. The estimate uses the inter-arrival gap of the
// two frames, which cancels latency on both transports.

inline void probe_server(Env env, std::shared_ptr<std::atomic<bool>> stop) {
    auto listener = env.net->listen("probe");
    while (!stop->load()) {
        std::shared_ptr<Link> link;
        try {
            link = listener->accept(0.5);
        } catch (const TimeoutError&) {
            continue;
        } catch (const LinkError&) {
            break;
        }
        env.rt->spawn("probe-reply", [link] {
            try {
                Frame req = link->recv(10.0);
                ByteReader r(req.payload);
                uint32_t size = r.u32();
                if (size > (4u << 20)) throw DecodeError("oversized probe");
                Frame f;
                f.kind = FrameKind::probe;
                f.payload.assign(size, 0xAB);
                link->send(f);
                link->send(f);
            } catch (const Error&) {
            }
            link->close();
        });
    }
}

inline double measure_bandwidth(Env env, const std::string& peer, uint32_t probe_bytes = 65536) {
    auto link = env.net->connect(peer, "probe", 10.0);
    ByteWriter w;
    w.u32(probe_bytes);
    Frame req;
    req.kind = FrameKind::probe;
    req.payload = std::move(w.buffer());
    link->send(req);
    link->recv(30.0);
    double t1 = env.rt->now();
    Frame second = link->recv(30.0);
    double t2 = env.rt->now();
    link->close();
    if (t2 <= t1) return 1e12;  // faster than the clock can resolve
    return static_cast<double>(second.wire_size()) * 8.0 / (t2 - t1);
}

// One probe sweep: measure this node's links to every mesh peer and publish
// the estimates for the coordinator's matrix. Failures report the floor value
// so a dead edge steers the solver away instead of erroring.
inline void probe_and_report(Env env, KvClient& kv, const std::vector<std::string>& peers,
                             double floor_bps, uint32_t probe_bytes = 65536) {
    for (const auto& peer : peers) {
        if (peer == env.net->local_id()) continue;
        double est = floor_bps;
        try {
            est = std::max(measure_bandwidth(env, peer, probe_bytes), floor_bps);
        } catch (const Error&) {
        }
        ByteWriter w;
        w.f64(est);
        kv.set("bw/" + env.net->local_id() + "/" + peer, std::move(w.buffer()));
    }
}

}  // namespace emesh
