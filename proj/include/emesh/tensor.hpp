#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "emesh/bytes.hpp"
#include "emesh/errors.hpp"
#include "emesh/sha256.hpp"

namespace emesh {

// Flat row-major fp32 buffer with an explicit shape. The unit of all
// numerics and all communication in this library.
struct Tensor {
    std::vector<uint32_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<uint32_t> s) : shape(std::move(s)) {
        data.assign(element_count(shape), 0.0f);
    }
    Tensor(std::vector<uint32_t> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != element_count(shape)) throw ShapeError("tensor data/shape size mismatch");
    }

    static size_t element_count(const std::vector<uint32_t>& shape) {
        size_t n = 1;
        for (uint32_t e : shape) {
            if (e == 0) throw ShapeError("zero extent in tensor shape");
            n *= e;
        }
        return n;
    }

    size_t size() const { return data.size(); }
    float& operator[](size_t i) { return data[i]; }
    float operator[](size_t i) const { return data[i]; }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// Ordered, uniquely named tensors. The ordering is canonical: serialization,
// flattening for collectives, and optimizer traversal all follow it.
struct ModelParams {
    std::vector<std::pair<std::string, Tensor>> entries;

    size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }

    void add(std::string name, Tensor t) {
        for (const auto& [n, _] : entries)
            if (n == name) throw ShapeError("duplicate parameter name: " + name);
        entries.emplace_back(std::move(name), std::move(t));
    }

    Tensor& at(const std::string& name) {
        for (auto& [n, t] : entries)
            if (n == name) return t;
        throw ShapeError("no parameter named " + name);
    }

    bool same_shapes(const ModelParams& other) const {
        if (entries.size() != other.entries.size()) return false;
        for (size_t i = 0; i < entries.size(); ++i) {
            if (entries[i].first != other.entries[i].first) return false;
            if (!entries[i].second.same_shape(other.entries[i].second)) return false;
        }
        return true;
    }

    size_t element_count() const {
        size_t n = 0;
        for (const auto& [_, t] : entries) n += t.size();
        return n;
    }

    // Concatenation in canonical order; the layout collectives operate on.
    std::vector<float> flatten() const {
        std::vector<float> out;
        out.reserve(element_count());
        for (const auto& [_, t] : entries) out.insert(out.end(), t.data.begin(), t.data.end());
        return out;
    }

    void unflatten(const std::vector<float>& flat) {
        if (flat.size() != element_count()) throw ShapeError("flat buffer size mismatch");
        size_t off = 0;
        for (auto& [_, t] : entries) {
            std::copy(flat.begin() + off, flat.begin() + off + t.size(), t.data.begin());
            off += t.size();
        }
    }

    ModelParams zeros_like() const {
        ModelParams out;
        for (const auto& [n, t] : entries) out.entries.emplace_back(n, Tensor(t.shape));
        return out;
    }
};

// ---------------------------------------------------------------------------
// Canonical serialization: name length + UTF-8 name, rank, extents u32 LE,
// data fp32 LE. Shared by checkpoints and the wire protocol.

inline void write_tensor(ByteWriter& w, const std::string& name, const Tensor& t) {
    w.str(name);
    w.u32(static_cast<uint32_t>(t.shape.size()));
    for (uint32_t e : t.shape) w.u32(e);
    for (float v : t.data) w.f32(v);
}

inline std::pair<std::string, Tensor> read_tensor(ByteReader& r) {
    std::string name = r.str();
    uint32_t rank = r.u32();
    if (rank > 8) throw DecodeError("implausible tensor rank");
    std::vector<uint32_t> shape(rank);
    size_t count = 1;
    for (uint32_t& e : shape) {
        e = r.u32();
        if (e == 0) throw DecodeError("zero extent");
        if (count > (1u << 28) / std::max<uint32_t>(e, 1)) throw DecodeError("implausible tensor size");
        count *= e;
    }
    std::vector<float> data(count);
    for (float& v : data) {
        v = r.f32();
        if (!std::isfinite(v)) throw DecodeError("non-finite value in tensor payload");
    }
    return {std::move(name), Tensor(std::move(shape), std::move(data))};
}

inline void write_params(ByteWriter& w, const ModelParams& p) {
    w.u32(static_cast<uint32_t>(p.entries.size()));
    for (const auto& [n, t] : p.entries) write_tensor(w, n, t);
}

inline ModelParams read_params(ByteReader& r) {
    uint32_t count = r.u32();
    ModelParams p;
    for (uint32_t i = 0; i < count; ++i) {
        auto [n, t] = read_tensor(r);
        p.add(std::move(n), std::move(t));
    }
    return p;
}

inline Sha256::Digest params_hash(const ModelParams& p) {
    ByteWriter w;
    write_params(w, p);
    return Sha256::hash(w.buffer());
}

}  // namespace emesh
