// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdint>

#include "doctest.h"
#include "metis/fp4_quant.hpp"
#include "oracles.hpp"

using namespace metis;

TEST_SUITE("fp4_quant") {

TEST_CASE("single block with a dominant element") {
    DenseMatrix m(1, 4);
    m(0, 0) = 12.0;
    m(0, 1) = 1.0;
    const QuantizedBlockTensor q = quantize_nvfp4(m, 4, Rounding::NearestEven);
    REQUIRE(q.scales.size() == 1);
    CHECK(q.scales[0] == 2.0);  // 12 / 6, exact on the e4m3 grid
    CHECK(q.codes[0] == 6.0);
    CHECK(q.codes[1] == 0.5);
    CHECK(q.codes[2] == 0.0);
    CHECK(q.codes[3] == 0.0);
    const DenseMatrix back = dequantize(q);
    CHECK(back(0, 0) == 12.0);
    CHECK(back(0, 1) == 1.0);
}

TEST_CASE("block maximum crushes small elements to zero") {
    DenseMatrix m(1, 4);
    m(0, 0) = 6.0;
    m(0, 1) = m(0, 2) = m(0, 3) = 0.2;  // scale 1, below half the 0.5 step
    const QuantizedBlockTensor q = quantize_nvfp4(m, 4, Rounding::NearestEven);
    CHECK(q.scales[0] == 1.0);
    CHECK(zero_fraction(m, q) == 0.75);
}

TEST_CASE("scale rounds up in magnitude so codes never exceed 6") {
    RngStream gen(derive_seed(11, 0));
    for (int trial = 0; trial < 500; ++trial) {
        DenseMatrix m(1, 16);
        const double spread = std::ldexp(1.0, static_cast<int>(gen.next_below(24)) - 12);
        for (Index j = 0; j < 16; ++j) m(0, j) = (gen.next_double() * 2.0 - 1.0) * spread;
        const QuantizedBlockTensor q = quantize_nvfp4(m, 16, Rounding::NearestEven);
        const double s = q.scales[0];
        CHECK(s > 0.0);
        CHECK(s == e4m3_decode(e4m3_encode(s)));  // on grid
        for (Index j = 0; j < 16; ++j) {
            CAPTURE(trial);
            CHECK(std::abs(m(0, j)) / s <= 6.0);
            CHECK(std::abs(q.codes[static_cast<size_t>(j)]) <= 6.0);
        }
    }
}

TEST_CASE("all-zero block gets scale one and zero codes") {
    DenseMatrix m(2, 16);
    const QuantizedBlockTensor q = quantize_nvfp4(m, 16, Rounding::NearestEven);
    for (double s : q.scales) CHECK(s == 1.0);
    for (double c : q.codes) CHECK(c == 0.0);
    CHECK(zero_fraction(m, q) == 0.0);  // no nonzero inputs to crush
}

TEST_CASE("rows never share a block; short trailing block per row") {
    DenseMatrix m(3, 20);
    for (Index i = 0; i < 3; ++i)
        for (Index j = 0; j < 20; ++j) m(i, j) = static_cast<double>(i + 1);
    const QuantizedBlockTensor q = quantize_nvfp4(m, 16, Rounding::NearestEven);
    CHECK(q.blocks_per_row() == 2);
    CHECK(q.scales.size() == 6);
    // Each row is constant, so both its blocks see the same max.
    for (Index i = 0; i < 3; ++i)
        CHECK(q.scales[static_cast<size_t>(i * 2)] == q.scales[static_cast<size_t>(i * 2 + 1)]);
    const DenseMatrix back = dequantize(q);
    for (Index i = 0; i < 3; ++i)
        CHECK(back(i, 0) == back(i, 19));
}

TEST_CASE("quantizing an already-quantized tensor is the identity") {
    const DenseMatrix m = random_gaussian(8, 32, 21, 1.3);
    const QuantizedBlockTensor q = quantize_nvfp4(m, 16, Rounding::NearestEven);
    const DenseMatrix back = dequantize(q);
    const QuantizedBlockTensor q2 = quantize_nvfp4(back, 16, Rounding::NearestEven);
    const DenseMatrix back2 = dequantize(q2);
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) CHECK(back(i, j) == back2(i, j));
}

TEST_CASE("stochastic quantization is deterministic per seed") {
    const DenseMatrix m = random_gaussian(4, 32, 22, 1.0);
    const QuantizedBlockTensor a = quantize_nvfp4(m, 16, Rounding::Stochastic, 77);
    const QuantizedBlockTensor b = quantize_nvfp4(m, 16, Rounding::Stochastic, 77);
    const QuantizedBlockTensor c = quantize_nvfp4(m, 16, Rounding::Stochastic, 78);
    CHECK(a.codes == b.codes);
    CHECK(a.scales == b.scales);
    CHECK(a.codes != c.codes);
    CHECK(a.scales == c.scales);  // scale rounding is deterministic in every mode
}

TEST_CASE("stochastic element rounding is unbiased within 4 sigma") {
    DenseMatrix m(1, 16);
    for (Index j = 0; j < 16; ++j) m(0, j) = 1.3;  // scale 1, between codes 1 and 1.5
    const int trials = 8000;
    double sum = 0.0;
    for (int t = 0; t < trials; ++t) {
        const QuantizedBlockTensor q =
            quantize_nvfp4(m, 16, Rounding::Stochastic, static_cast<uint64_t>(t));
        for (Index j = 0; j < 16; ++j) sum += dequantize(q)(0, j);
    }
    const int n = trials * 16;
    const double mean = sum / n;
    const double p = (1.3 - 1.0) / 0.5;
    const double sigma = 0.5 * std::sqrt(p * (1.0 - p) / n);
    CHECK(std::abs(mean - 1.3) < 4.0 * sigma);
}

TEST_CASE("e2m1 codec is an exact bijection on its 16 codes") {
    const auto grid = oracle::e2m1_grid();
    int distinct = 0;
    for (int code = 0; code < 16; ++code) {
        const double v = e2m1_decode(static_cast<uint8_t>(code));
        bool on_grid = false;
        for (const auto& p : grid) on_grid = on_grid || p.value == v;
        CHECK(on_grid);
        if (!(code == 8 && v == 0.0))  // negative zero folds onto zero
            ++distinct;
        CHECK(e2m1_encode(v) == (v == 0.0 ? 0 : code));
    }
    CHECK(distinct >= 15);
}

TEST_CASE("e4m3 codec round-trips every finite code") {
    int finite = 0;
    for (int code = 0; code < 256; ++code) {
        if (code == 0x7f || code == 0xff) {  // nan patterns are rejected, not decoded
            CHECK_THROWS(e4m3_decode(static_cast<uint8_t>(code)));
            continue;
        }
        const double v = e4m3_decode(static_cast<uint8_t>(code));
        ++finite;
        CHECK(std::abs(v) <= 448.0);
        if (v == 0.0) continue;  // two zero encodings
        CHECK(e4m3_encode(v) == code);
    }
    CHECK(finite == 254);
}

TEST_CASE("quant stream seeds separate roles, steps and layers") {
    const uint64_t a = quant_stream_seed(1, 2, 3, QuantRole::X);
    CHECK(a == quant_stream_seed(1, 2, 3, QuantRole::X));
    CHECK(a != quant_stream_seed(1, 2, 3, QuantRole::W));
    CHECK(a != quant_stream_seed(1, 3, 3, QuantRole::X));
    CHECK(a != quant_stream_seed(1, 2, 4, QuantRole::X));
    CHECK(a != quant_stream_seed(2, 2, 3, QuantRole::X));
}

TEST_CASE("rectangular tensors quantize against the enumeration oracle") {
    const auto e2m1 = oracle::e2m1_grid();
    const DenseMatrix m = random_gaussian(6, 33, 23, 2.7);
    const QuantizedBlockTensor q = quantize_nvfp4(m, 16, Rounding::NearestEven);
    const DenseMatrix back = dequantize(q);
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) {
            const double s = q.scales[static_cast<size_t>(i * q.blocks_per_row() + j / 16)];
            const double code = q.codes[static_cast<size_t>(i * m.cols() + j)];
            CHECK(code == oracle::nearest_even_on_grid(m(i, j) / s, e2m1));
            CHECK(back(i, j) == code * s);
        }
}

} // TEST_SUITE
