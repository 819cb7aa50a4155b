// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "metis/precision.hpp"

namespace metis {

// Every quantized operand in the engine and the baselines gets a stream
// keyed by (seed, step, layer, role) so runs are reproducible regardless of
// evaluation order, and so the degenerate rank-0 engine path can reproduce
// the direct baseline bit for bit.
enum class QuantRole : uint64_t {
    X = 1,   // activation, natural orientation
    W = 2,   // dense weight
    D = 3,   // output gradient
    XT = 4,  // activation, transposed for the weight-gradient pass
    WT = 5,  // weight, transposed for the data-gradient pass
    AK = 6,  // activation low-rank left factor
    BT = 7,  // activation basis, transposed
    XR = 8,  // activation residual
    U = 9,   // weight left factor
    VT = 10, // weight right factor, transposed
    WR = 11, // weight residual
    P = 12,  // gradient low-rank left factor
    QT = 13, // gradient basis, transposed
    DR = 14, // gradient residual
    XBT = 15 // composite activation, re-quantized transposed for backward
};

inline uint64_t quant_stream_seed(uint64_t base, uint64_t step, uint64_t layer, QuantRole role) {
    return derive_seed(base, step, layer, static_cast<uint64_t>(role));
}

// Block-quantized tensor: contiguous groups of `block_size` elements along
// the last axis share one fp8 e4m3 scale; elements are fp4 e2m1 multiples
// of that scale. Rows never share a block, so a trailing short block closes
// each row. Codes and scales are kept as doubles already on their grids.
struct QuantizedBlockTensor {
    Index rows = 0;
    Index cols = 0;
    int block_size = 16;
    Rounding mode = Rounding::NearestEven;
    std::vector<double> codes;   // rows*cols, e2m1 grid values
    std::vector<double> scales;  // rows*blocks_per_row, e4m3 grid, > 0

    Index blocks_per_row() const {
        return block_size > 0 ? (cols + block_size - 1) / block_size : 0;
    }
};

// NVFP4-style quantization: per block, scale = (max|e| / 6) rounded up in
// magnitude onto the e4m3 grid, elements = round(e / scale) on the e2m1
// grid. An all-zero block gets scale 1 and zero codes. Stochastic element
// rounding draws from a stream keyed by (seed, flat block index); the scale
// rounding is deterministic in every mode.
QuantizedBlockTensor quantize_nvfp4(const DenseMatrix& m, int block_size = 16,
                                    Rounding mode = Rounding::NearestEven,
                                    uint64_t seed = 0);

DenseMatrix dequantize(const QuantizedBlockTensor& q);

// Fraction of nonzero inputs whose dequantized value is exactly zero. The
// summary statistic behind underflow diagnostics: block maxima set the
// scale, everything under half the smallest code step gets crushed.
double zero_fraction(const DenseMatrix& original, const QuantizedBlockTensor& q);

// Bit-level codecs used by serialization and the exhaustiveness tests.
// e4m3: s.eeee.mmm, bias 7, no infinities, 0xff/0x7f are nan patterns.
// e2m1 code: low 3 bits index {0,.5,1,1.5,2,3,4,6}, bit 3 is the sign.
uint8_t e4m3_encode(double v);
double e4m3_decode(uint8_t bits);
uint8_t e2m1_encode(double v);
double e2m1_decode(uint8_t code);

} // namespace metis
