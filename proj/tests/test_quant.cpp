#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "emesh/quant.hpp"
#include "emesh/rng.hpp"

using namespace emesh;

namespace {

// Independent scalar reference quantizer used as the oracle: same contract,
// written as straight-line double arithmetic.
std::vector<float> reference_roundtrip(const std::vector<float>& xs) {
    size_t n = xs.size();
    double mu = 0;
    for (float v : xs) mu += v;
    mu /= static_cast<double>(n);
    double var = 0;
    for (float v : xs) var += (v - mu) * (v - mu);
    var /= static_cast<double>(n);
    double sigma = std::sqrt(var);
    if (sigma == 0.0) return xs;
    double lo = mu - 6 * sigma, hi = mu + 6 * sigma;
    double w = (hi - lo) / 256.0;
    std::vector<int> idx(n);
    std::vector<double> sum(256, 0.0);
    std::vector<int> cnt(256, 0);
    for (size_t i = 0; i < n; ++i) {
        double x = std::min(std::max(static_cast<double>(xs[i]), lo), hi);
        int b = static_cast<int>(std::floor((x - lo) / w));
        b = std::min(std::max(b, 0), 255);
        idx[i] = b;
        sum[b] += x;
        cnt[b] += 1;
    }
    std::vector<float> code(256);
    for (int b = 0; b < 256; ++b)
        code[b] = cnt[b] ? static_cast<float>(sum[b] / cnt[b])
                         : static_cast<float>(lo + (b + 0.5) * w);
    std::vector<float> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = code[idx[i]];
    return out;
}

std::vector<float> normal_samples(size_t n, uint64_t seed) {
    // Box-Muller over the counter rng
    std::vector<float> xs(n);
    for (size_t i = 0; i < n; ++i) {
        double u1 = (rng_uniform(seed, 0, 0, 2 * i) + 1.0) * 0.5;
        double u2 = (rng_uniform(seed, 0, 0, 2 * i + 1) + 1.0) * 0.5;
        u1 = std::max(u1, 1e-12);
        xs[i] = static_cast<float>(std::sqrt(-2.0 * std::log(u1)) *
                                   std::cos(2.0 * M_PI * u2));
    }
    return xs;
}

}  // namespace

TEST_CASE("constant tensor takes the degenerate-sigma path exactly") {
    std::vector<float> xs{5, 5, 5, 5};
    QuantChunk q = quantize(xs);
    for (uint8_t i : q.indices) CHECK(i == 0);
    CHECK(dequantize(q) == xs);
}

TEST_CASE("two-point chunk: bucket arithmetic from the scalar reference") {
    // values [-1, 1]: mu=0, sigma=1, width 12/256; indices 106 and 149;
    // each bucket holds its sole member so the round-trip is exact
    std::vector<float> xs{-1.0f, 1.0f};
    QuantChunk q = quantize(xs);
    CHECK(q.indices[0] == 106);
    CHECK(q.indices[1] == 149);
    CHECK(q.codebook[106] == -1.0f);
    CHECK(q.codebook[149] == 1.0f);
    CHECK(dequantize(q) == xs);
}

TEST_CASE("round-trip RMSE on 10k standard normals is within the bucket bound") {
    auto xs = normal_samples(10000, 2024);
    QuantChunk q = quantize(xs);
    auto ys = dequantize(q);
    auto ref = reference_roundtrip(xs);
    double se = 0, se_ref = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        se += (ys[i] - xs[i]) * (ys[i] - xs[i]);
        se_ref += (ref[i] - xs[i]) * (ref[i] - xs[i]);
    }
    double rmse = std::sqrt(se / xs.size());
    double rmse_ref = std::sqrt(se_ref / xs.size());
    CHECK(rmse <= 0.02);
    CHECK(rmse == Catch::Approx(rmse_ref).margin(1e-6));
}

TEST_CASE("dequantized values stay in the clipping range") {
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        std::vector<float> xs(777);
        for (size_t i = 0; i < xs.size(); ++i)
            xs[i] = 3.0f * rng_uniform(seed, 4, 0, i) + (i % 13 == 0 ? 20.0f : 0.0f);
        double mu = 0;
        for (float v : xs) mu += v;
        mu /= xs.size();
        double var = 0;
        for (float v : xs) var += (v - mu) * (v - mu);
        double sigma = std::sqrt(var / xs.size());
        auto ys = dequantize(quantize(xs));
        for (float y : ys) {
            CHECK(y >= mu - 6 * sigma - 1e-4);
            CHECK(y <= mu + 6 * sigma + 1e-4);
        }
    }
}

TEST_CASE("quantization is monotone and codebook nondecreasing") {
    auto xs = normal_samples(4096, 7);
    QuantChunk q = quantize(xs);
    for (size_t b = 1; b < QuantChunk::kBuckets; ++b)
        CHECK(q.codebook[b] >= q.codebook[b - 1]);
    auto ys = dequantize(q);
    std::vector<std::pair<float, float>> pairs(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) pairs[i] = {xs[i], ys[i]};
    std::sort(pairs.begin(), pairs.end());
    for (size_t i = 1; i < pairs.size(); ++i) CHECK(pairs[i].second >= pairs[i - 1].second);
}

TEST_CASE("per-element error bounded by one bucket width") {
    auto xs = normal_samples(2000, 31);
    double mu = 0;
    for (float v : xs) mu += v;
    mu /= xs.size();
    double var = 0;
    for (float v : xs) var += (v - mu) * (v - mu);
    double sigma = std::sqrt(var / xs.size());
    double width = 12.0 * sigma / 256.0;
    auto ys = dequantize(quantize(xs));
    for (size_t i = 0; i < xs.size(); ++i)
        if (std::abs(xs[i] - mu) <= 6 * sigma)  // in-range elements
            CHECK(std::abs(ys[i] - xs[i]) <= width + 1e-5);
}

TEST_CASE("all indices equal -> constant output") {
    QuantChunk q;
    q.codebook.assign(256, 0.0f);
    q.codebook[17] = 3.5f;
    q.indices.assign(9, uint8_t{17});
    auto ys = dequantize(q);
    for (float y : ys) CHECK(y == 3.5f);
}

TEST_CASE("wire encode/decode round-trip and malformed buffers") {
    auto xs = normal_samples(300, 5);
    QuantChunk q = quantize(xs);
    Bytes b = encode_quant_chunk(q);
    // layout check: u32 count + 256 f32 + count u8
    CHECK(b.size() == 4 + 256 * 4 + 300);
    QuantChunk d = decode_quant_chunk(b);
    CHECK(d.codebook == q.codebook);
    CHECK(d.indices == q.indices);
    CHECK(encode_quant_chunk(d) == b);

    Bytes truncated(b.begin(), b.end() - 5);
    CHECK_THROWS_AS(decode_quant_chunk(truncated), DecodeError);

    Bytes wrong_count = b;
    wrong_count[0] = 200;  // declared count no longer matches payload
    CHECK_THROWS_AS(decode_quant_chunk(wrong_count), DecodeError);
}

TEST_CASE("fuzzed random buffers error but never crash") {
    for (uint64_t seed = 0; seed < 200; ++seed) {
        size_t len = rng_word(seed, 9, 0, 0) % 2000;
        Bytes buf(len);
        for (size_t i = 0; i < len; ++i)
            buf[i] = static_cast<uint8_t>(rng_word(seed, 9, 1, i));
        try {
            QuantChunk q = decode_quant_chunk(buf);
            CHECK(q.codebook.size() == 256);  // decoded: must be structurally valid
        } catch (const DecodeError&) {
            // expected for malformed input
        }
    }
}

TEST_CASE("quantize rejects bad input") {
    std::vector<float> empty;
    CHECK_THROWS_AS(quantize(empty), ShapeError);
    std::vector<float> nan1{1.0f, std::nanf("")};
    CHECK_THROWS_AS(quantize(nan1), NumericError);
}
