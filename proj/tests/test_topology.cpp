#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <sstream>
#include <vector>

#include "emesh/rng.hpp"
#include "emesh/sim.hpp"
#include "emesh/topology.hpp"

using namespace emesh;

namespace {

// Factorial brute force over every permutation (no symmetry tricks): the
// independent optimum oracle.
double oracle_best_objective(const BandwidthMatrix& m) {
    std::vector<uint32_t> perm;
    for (uint32_t i = 0; i < m.n(); ++i) perm.push_back(i);
    double best = -1;
    do {
        best = std::max(best, cycle_objective(m, perm));
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

BandwidthMatrix random_matrix(size_t n, uint64_t seed) {
    std::vector<std::string> ids;
    for (size_t i = 0; i < n; ++i) ids.push_back("n" + std::to_string(i));
    BandwidthMatrix m(ids);
    uint64_t idx = 0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j)
            m.set_sym(i, j, 1e6 * (1.0 + rng_uniform(seed, 77, 0, idx++)));
    return m;
}

}  // namespace

TEST_CASE("n=2: the only ring") {
    BandwidthMatrix m({"a", "b"});
    m.set_sym(0, 1, 42.0);
    RingOrder r = solve_ring(m);
    CHECK(r.order == std::vector<uint32_t>{0, 1});
    CHECK(r.objective == 42.0);
}

TEST_CASE("n=3: unique cycle, objective is the min of all three edges") {
    BandwidthMatrix m({"a", "b", "c"});
    m.set_sym(0, 1, 10);
    m.set_sym(1, 2, 7);
    m.set_sym(0, 2, 12);
    RingOrder r = solve_ring(m);
    CHECK(r.objective == 7.0);
}

TEST_CASE("n=4 hand case: square beats the diagonals") {
    BandwidthMatrix m({"a", "b", "c", "d"});
    m.set_sym(0, 1, 10);
    m.set_sym(1, 2, 10);
    m.set_sym(2, 3, 10);
    m.set_sym(0, 3, 10);
    m.set_sym(0, 2, 1);
    m.set_sym(1, 3, 1);
    RingOrder r = solve_ring(m);
    CHECK(r.objective == 10.0);
    // up to rotation/reflection, the cycle must be 0-1-2-3
    std::vector<uint32_t> expect{0, 1, 2, 3};
    auto rotated = r.order;
    auto pos = std::find(rotated.begin(), rotated.end(), 0u);
    std::rotate(rotated.begin(), pos, rotated.end());
    if (rotated[1] == 3) {  // reflection
        std::reverse(rotated.begin() + 1, rotated.end());
    }
    CHECK(rotated == expect);
}

TEST_CASE("seeded matrices match the exhaustive oracle for n in 4..8") {
    for (size_t n = 4; n <= 8; ++n) {
        for (uint64_t trial = 0; trial < 20; ++trial) {
            BandwidthMatrix m = random_matrix(n, 1000 * n + trial);
            RingOrder r = solve_ring(m);
            double ref = oracle_best_objective(m);
            INFO("n=" << n << " trial=" << trial);
            CHECK(r.objective == ref);
        }
    }
}

TEST_CASE("solver is deterministic") {
    BandwidthMatrix m = random_matrix(7, 99);
    RingOrder a = solve_ring(m);
    RingOrder b = solve_ring(m);
    CHECK(a.order == b.order);
    CHECK(a.objective == b.objective);
}

TEST_CASE("objective is invariant under node relabeling") {
    BandwidthMatrix m = random_matrix(6, 123);
    // conjugate by the permutation (0 1 2 3 4 5) -> (5 4 3 2 1 0)
    BandwidthMatrix p(m.ids);
    size_t n = m.n();
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) p.at(i, j) = m.at(n - 1 - i, n - 1 - j);
    CHECK(solve_ring(m).objective == solve_ring(p).objective);
}

TEST_CASE("raising a non-cycle edge never lowers the objective") {
    BandwidthMatrix m = random_matrix(6, 321);
    RingOrder base = solve_ring(m);
    std::vector<bool> on_cycle(m.n() * m.n(), false);
    for (size_t i = 0; i < base.order.size(); ++i) {
        uint32_t a = base.order[i], b = base.order[(i + 1) % base.order.size()];
        on_cycle[a * m.n() + b] = on_cycle[b * m.n() + a] = true;
    }
    for (size_t i = 0; i < m.n(); ++i)
        for (size_t j = i + 1; j < m.n(); ++j) {
            if (on_cycle[i * m.n() + j]) continue;
            BandwidthMatrix up = m;
            up.set_sym(i, j, up.at(i, j) * 3.0);
            CHECK(solve_ring(up).objective >= base.objective);
        }
}

TEST_CASE("threshold-search path (n>10) meets the greedy floor and self-checks") {
    for (uint64_t trial = 0; trial < 5; ++trial) {
        BandwidthMatrix m = random_matrix(13, 400 + trial);
        RingOrder r = solve_ring(m);
        RingOrder greedy = topo_detail::solve_greedy(m);
        CHECK(r.objective >= greedy.objective);
        CHECK(r.objective == cycle_objective(m, r.order));
        std::vector<uint32_t> sorted = r.order;
        std::sort(sorted.begin(), sorted.end());
        for (uint32_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
    }
}

TEST_CASE("matrix text snapshot round-trips") {
    BandwidthMatrix m = random_matrix(5, 7);
    std::ostringstream os;
    write_matrix(os, m);
    std::istringstream is(os.str());
    BandwidthMatrix back = read_matrix(is);
    CHECK(back.ids == m.ids);
    for (size_t i = 0; i < m.n(); ++i)
        for (size_t j = 0; j < m.n(); ++j)
            CHECK(back.at(i, j) == Catch::Approx(m.at(i, j)).epsilon(1e-9));

    std::istringstream bad("a b\n1 2\n");
    CHECK_THROWS_AS(read_matrix(bad), DecodeError);
}

TEST_CASE("solve_ring rejects n<2") {
    BandwidthMatrix m;
    m.ids = {"solo"};
    m.w = {0.0};
    CHECK_THROWS_AS(solve_ring(m), ShapeError);
}

// ---------------------------------------------------------------------------
// bandwidth probing over the simulator

TEST_CASE("simulated probe recovers the configured bandwidth within 10%") {
    SimWorld w;
    w.set_default_link({1e8, 0.02, {}});  // 100 Mb/s, 20 ms latency
    auto stop = std::make_shared<std::atomic<bool>>(false);
    double est = 0, est2 = 0;
    w.spawn("b", "server", [&] { probe_server(w.env("b"), stop); });
    w.spawn("a", "prober", [&] {
        est = measure_bandwidth(w.env("a"), "b");
        est2 = measure_bandwidth(w.env("a"), "b");
        stop->store(true);
    });
    w.run();
    CHECK(est >= 0.9e8);
    CHECK(est <= 1.1e8);
    // repeat probes agree
    CHECK(std::abs(est - est2) <= 0.1 * est);
}

TEST_CASE("probe reflects a degraded link") {
    SimWorld w;
    LinkSpec spec{1e8, 0.005, {{1.0, false, 1e7}}};  // degrades to 10 Mb/s at t=1
    w.set_link("a", "b", spec);
    auto stop = std::make_shared<std::atomic<bool>>(false);
    double before = 0, after = 0;
    w.spawn("b", "server", [&] { probe_server(w.env("b"), stop); });
    w.spawn("a", "prober", [&] {
        before = measure_bandwidth(w.env("a"), "b");
        w.env("a").rt->sleep_for(2.0);
        after = measure_bandwidth(w.env("a"), "b");
        stop->store(true);
    });
    w.run();
    CHECK(before == Catch::Approx(1e8).epsilon(0.1));
    CHECK(after == Catch::Approx(1e7).epsilon(0.1));
}
