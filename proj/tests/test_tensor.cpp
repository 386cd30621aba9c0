#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <limits>

#include "emesh/tensor.hpp"

using namespace emesh;

TEST_CASE("tensor shape/data consistency enforced") {
    CHECK_THROWS_AS(Tensor({2, 3}, {1.0f}), ShapeError);
    Tensor t({2, 3});
    CHECK(t.size() == 6);
    CHECK_THROWS_AS(Tensor({0}), ShapeError);
}

TEST_CASE("model params reject duplicate names") {
    ModelParams p;
    p.add("w", Tensor({2}));
    CHECK_THROWS_AS(p.add("w", Tensor({2})), ShapeError);
}

TEST_CASE("flatten/unflatten round-trip preserves canonical order") {
    ModelParams p;
    p.add("a", Tensor({2}, {1, 2}));
    p.add("b", Tensor({3}, {3, 4, 5}));
    auto flat = p.flatten();
    REQUIRE(flat == std::vector<float>{1, 2, 3, 4, 5});
    flat[0] = 10;
    p.unflatten(flat);
    CHECK(p.entries[0].second[0] == 10);
}

TEST_CASE("canonical serialization round-trips bit-exactly") {
    ModelParams p;
    p.add("w1", Tensor({2, 2}, {0.25f, -1.5f, 3.0f, 1e-20f}));
    p.add("b1", Tensor({2}, {0.0f, -0.0f}));

    ByteWriter w;
    write_params(w, p);
    ByteReader r(w.buffer());
    ModelParams q = read_params(r);
    r.expect_done();

    REQUIRE(q.same_shapes(p));
    for (size_t i = 0; i < p.entries.size(); ++i)
        CHECK(std::memcmp(q.entries[i].second.data.data(), p.entries[i].second.data.data(),
                          4 * p.entries[i].second.size()) == 0);
    CHECK(params_hash(p) == params_hash(q));
}

TEST_CASE("tensor wire layout: name, rank, extents, data, all LE") {
    ByteWriter w;
    write_tensor(w, "x", Tensor({1}, {1.0f}));
    // u32 len=1, 'x', u32 rank=1, u32 extent=1, f32 1.0
    Bytes expect{1, 0, 0, 0, 'x', 1, 0, 0, 0, 1, 0, 0, 0, 0x00, 0x00, 0x80, 0x3f};
    CHECK(w.buffer() == expect);
}

TEST_CASE("decode rejects malformed tensors") {
    ByteWriter w;
    write_tensor(w, "x", Tensor({4}, {1, 2, 3, 4}));
    Bytes truncated(w.buffer().begin(), w.buffer().end() - 3);
    ByteReader r(truncated);
    CHECK_THROWS_AS(read_tensor(r), DecodeError);

    // non-finite payload
    ByteWriter w2;
    w2.str("y");
    w2.u32(1);
    w2.u32(1);
    w2.f32(std::numeric_limits<float>::infinity());
    ByteReader r2(w2.buffer());
    CHECK_THROWS_AS(read_tensor(r2), DecodeError);
}
