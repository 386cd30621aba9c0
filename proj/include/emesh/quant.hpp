#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "emesh/bytes.hpp"
#include "emesh/errors.hpp"

namespace emesh {

// Uniform 256-bucket codebook quantization of an fp32 chunk. The range is
// [mu - 6*sigma, mu + 6*sigma] over the chunk (population sigma), each value
// maps to its bucket index, and each occupied bucket is represented by the
// mean of its members. Statistics are per transmitted chunk: the pipelined
// ring requantizes per hop, so chunk-local statistics are the only
// self-consistent choice.
struct QuantChunk {
    static constexpr size_t kBuckets = 256;

    std::vector<float> codebook;    // exactly 256 entries, nondecreasing
    std::vector<uint8_t> indices;   // one per source element

    size_t count() const { return indices.size(); }
};

inline QuantChunk quantize(std::span<const float> values) {
    if (values.empty()) throw ShapeError("quantize: empty chunk");
    for (float v : values)
        if (!std::isfinite(v)) throw NumericError("quantize: non-finite input");

    const size_t n = values.size();
    double sum = 0.0;
    for (float v : values) sum += v;
    const double mu = sum / static_cast<double>(n);
    double var = 0.0;
    for (float v : values) {
        double d = static_cast<double>(v) - mu;
        var += d * d;
    }
    var /= static_cast<double>(n);  // population variance
    const double sigma = std::sqrt(var);

    QuantChunk q;
    q.indices.resize(n);
    q.codebook.assign(QuantChunk::kBuckets, 0.0f);

    if (sigma == 0.0) {
        // Degenerate chunk: all values equal mu. Everything lands in bucket 0
        // and the codebook carries mu so the round-trip is exact.
        std::fill(q.indices.begin(), q.indices.end(), uint8_t{0});
        std::fill(q.codebook.begin(), q.codebook.end(), static_cast<float>(mu));
        return q;
    }

    const double lo = mu - 6.0 * sigma;
    const double hi = mu + 6.0 * sigma;
    const double width = (hi - lo) / static_cast<double>(QuantChunk::kBuckets);

    std::vector<double> bucket_sum(QuantChunk::kBuckets, 0.0);
    std::vector<uint32_t> bucket_count(QuantChunk::kBuckets, 0);

    for (size_t i = 0; i < n; ++i) {
        double x = static_cast<double>(values[i]);
        if (x < lo) x = lo;
        if (x > hi) x = hi;
        // A value exactly on a bucket edge goes to the higher bucket; the top
        // edge clamps into bucket 255.
        long b = static_cast<long>(std::floor((x - lo) / width));
        if (b < 0) b = 0;
        if (b >= static_cast<long>(QuantChunk::kBuckets)) b = QuantChunk::kBuckets - 1;
        q.indices[i] = static_cast<uint8_t>(b);
        bucket_sum[static_cast<size_t>(b)] += x;
        bucket_count[static_cast<size_t>(b)] += 1;
    }

    for (size_t b = 0; b < QuantChunk::kBuckets; ++b) {
        if (bucket_count[b] > 0) {
            q.codebook[b] =
                static_cast<float>(bucket_sum[b] / static_cast<double>(bucket_count[b]));
        } else {
            q.codebook[b] = static_cast<float>(lo + (static_cast<double>(b) + 0.5) * width);
        }
    }
    return q;
}

inline void dequantize_into(const QuantChunk& chunk, std::span<float> out) {
    if (out.size() != chunk.count()) throw ShapeError("dequantize: output size mismatch");
    if (chunk.codebook.size() != QuantChunk::kBuckets)
        throw ShapeError("dequantize: malformed codebook");
    for (size_t i = 0; i < chunk.count(); ++i) out[i] = chunk.codebook[chunk.indices[i]];
}

inline std::vector<float> dequantize(const QuantChunk& chunk) {
    std::vector<float> out(chunk.count());
    dequantize_into(chunk, out);
    return out;
}

// Wire layout: u32 LE count, 256 x fp32 LE codebook, count x u8 indices.
inline void encode_quant_chunk(ByteWriter& w, const QuantChunk& chunk) {
    if (chunk.codebook.size() != QuantChunk::kBuckets)
        throw ShapeError("encode_quant_chunk: malformed codebook");
    w.u32(static_cast<uint32_t>(chunk.count()));
    for (float v : chunk.codebook) w.f32(v);
    w.raw(chunk.indices.data(), chunk.indices.size());
}

inline Bytes encode_quant_chunk(const QuantChunk& chunk) {
    ByteWriter w;
    encode_quant_chunk(w, chunk);
    return std::move(w.buffer());
}

inline QuantChunk decode_quant_chunk(const Bytes& buf) {
    ByteReader r(buf);
    uint32_t count = r.u32();
    QuantChunk q;
    q.codebook.resize(QuantChunk::kBuckets);
    for (float& v : q.codebook) {
        v = r.f32();
        if (!std::isfinite(v)) throw DecodeError("non-finite codebook entry");
    }
    if (r.remaining() != count) throw DecodeError("quant chunk count does not match payload");
    const uint8_t* idx = r.take(count);
    q.indices.assign(idx, idx + count);
    r.expect_done();
    return q;
}

}  // namespace emesh
