// SPDX-License-Identifier: Apache-2.0
#include "metis/fp4_quant.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace metis {

QuantizedBlockTensor quantize_nvfp4(const DenseMatrix& m, int block_size, Rounding mode,
                                    uint64_t seed) {
    require(block_size >= 1, "quantize_nvfp4: block_size must be >= 1");
    require(m.all_finite(), "quantize_nvfp4: non-finite input");

    QuantizedBlockTensor q;
    q.rows = m.rows();
    q.cols = m.cols();
    q.block_size = block_size;
    q.mode = mode;
    q.codes.assign(static_cast<size_t>(m.size()), 0.0);
    q.scales.assign(static_cast<size_t>(q.rows * q.blocks_per_row()), 1.0);

    const Index bpr = q.blocks_per_row();
    for (Index i = 0; i < q.rows; ++i) {
        for (Index b = 0; b < bpr; ++b) {
            const Index j0 = b * block_size;
            const Index j1 = std::min<Index>(j0 + block_size, q.cols);
            double amax = 0.0;
            for (Index j = j0; j < j1; ++j) amax = std::max(amax, std::abs(m(i, j)));

            const Index flat_block = i * bpr + b;
            if (amax == 0.0) continue;  // scale 1, codes stay 0

            // Rounding the scale up in magnitude keeps amax / scale <= 6, so
            // the largest element never clips past the top fp4 code.
            double scale = round_value(amax / kFp4E2m1Max, Format::Fp8E4m3,
                                       Rounding::UpMagnitude);
            if (scale == 0.0) scale = std::ldexp(1.0, -9);  // smallest e4m3 subnormal
            q.scales[static_cast<size_t>(flat_block)] = scale;

            RngStream rng(derive_seed(seed, static_cast<uint64_t>(flat_block)));
            RngStream* rp = mode == Rounding::Stochastic ? &rng : nullptr;
            for (Index j = j0; j < j1; ++j) {
                double c = round_value(m(i, j) / scale, Format::Fp4E2m1, mode, rp);
                if (c == 0.0) c = 0.0;  // normalize -0
                q.codes[static_cast<size_t>(i * q.cols + j)] = c;
            }
        }
    }
    return q;
}

DenseMatrix dequantize(const QuantizedBlockTensor& q) {
    DenseMatrix out(q.rows, q.cols);
    const Index bpr = q.blocks_per_row();
    for (Index i = 0; i < q.rows; ++i)
        for (Index j = 0; j < q.cols; ++j) {
            const Index b = i * bpr + j / q.block_size;
            out(i, j) = q.codes[static_cast<size_t>(i * q.cols + j)] *
                        q.scales[static_cast<size_t>(b)];
        }
    return out;
}

double zero_fraction(const DenseMatrix& original, const QuantizedBlockTensor& q) {
    require(original.rows() == q.rows && original.cols() == q.cols,
            "zero_fraction: shape mismatch");
    Index nonzero = 0, crushed = 0;
    for (Index i = 0; i < q.rows; ++i)
        for (Index j = 0; j < q.cols; ++j) {
            if (original(i, j) == 0.0) continue;
            ++nonzero;
            if (q.codes[static_cast<size_t>(i * q.cols + j)] == 0.0) ++crushed;
        }
    return nonzero == 0 ? 0.0 : static_cast<double>(crushed) / static_cast<double>(nonzero);
}

namespace {
constexpr std::array<double, 8> kE2m1Magnitudes = {0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0};
}

uint8_t e4m3_encode(double v) {
    if (!std::isfinite(v)) throw std::invalid_argument("e4m3_encode: non-finite value");
    const uint8_t sign = std::signbit(v) ? 0x80 : 0x00;
    const double a = std::abs(v);
    uint8_t bits;
    if (a == 0.0) {
        bits = 0;
    } else if (a < std::ldexp(1.0, -6)) {
        const double m = a * 512.0;  // subnormal step 2^-9
        if (m != std::nearbyint(m) || m > 7.0)
            throw std::invalid_argument("e4m3_encode: value off the grid");
        bits = static_cast<uint8_t>(m);
    } else {
        int e = 0;
        const double frac = std::frexp(a, &e);  // a = frac * 2^e, frac in [.5,1)
        const int exp = e - 1;
        const double m = (std::ldexp(frac, 1) - 1.0) * 8.0;
        if (exp < -6 || exp > 8 || m != std::nearbyint(m) || m > 7.0)
            throw std::invalid_argument("e4m3_encode: value off the grid");
        bits = static_cast<uint8_t>(((exp + 7) << 3) | static_cast<int>(m));
    }
    if ((bits & 0x7f) == 0x7f) throw std::invalid_argument("e4m3_encode: nan pattern");
    return sign | bits;
}

double e4m3_decode(uint8_t bits) {
    const double sign = (bits & 0x80) ? -1.0 : 1.0;
    const int e = (bits >> 3) & 0xf;
    const int m = bits & 0x7;
    if (e == 0xf && m == 0x7) throw std::invalid_argument("e4m3_decode: nan pattern");
    if (e == 0) return sign * m * std::ldexp(1.0, -9);
    return sign * (1.0 + m / 8.0) * std::ldexp(1.0, e - 7);
}

uint8_t e2m1_encode(double v) {
    const double a = std::abs(v);
    for (uint8_t k = 0; k < 8; ++k)
        if (a == kE2m1Magnitudes[k])
            return (v < 0.0 ? 0x8 : 0x0) | k;  // -0 encodes as +0
    throw std::invalid_argument("e2m1_encode: value off the grid");
}

double e2m1_decode(uint8_t code) {
    if (code > 0xf) throw std::invalid_argument("e2m1_decode: code out of range");
    const double mag = kE2m1Magnitudes[code & 0x7];
    return (code & 0x8) ? -mag : mag;
}

} // namespace metis
