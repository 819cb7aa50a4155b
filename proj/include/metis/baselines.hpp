// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "metis/fp4_quant.hpp"
#include "metis/gemm.hpp"

namespace metis {

// Direct low-bit GeMM: both operands block quantized in their written
// orientation, product accumulated per `accum`. The rank-0 engine path calls
// this too, which is what makes the two bit-identical.
DenseMatrix quantized_gemm(const DenseMatrix& a, const DenseMatrix& b, int block_size,
                           Rounding mode, uint64_t seed_a, uint64_t seed_b,
                           AccumMode accum, OpCounter* counter = nullptr);

// In-place unnormalized Walsh-Hadamard butterfly; v.size() must be a power
// of two. Applying it twice multiplies by v.size().
void fwht_pow2(std::span<double> v);

// Random Hadamard rotation R = H * diag(signs) / sqrt(p) over a zero-padded
// power-of-two dimension p >= dim. Orthogonal, so folding R into one
// operand and R^T into the other leaves the exact product unchanged while
// flattening outliers before quantization.
struct HadamardPlan {
    Index dim = 0;
    Index padded = 0;
    std::vector<double> signs;  // padded entries in {-1, +1}
};

HadamardPlan make_hadamard_plan(Index dim, uint64_t seed);

// Rotate a's columns by R (rows of a are transformed vectors) and b's rows
// by R^T, quantize both, multiply. plan.dim must equal the contraction
// dimension a.cols() == b.rows().
DenseMatrix hadamard_gemm(const DenseMatrix& a, const DenseMatrix& b,
                          const HadamardPlan& plan, int block_size, Rounding mode,
                          uint64_t seed_a, uint64_t seed_b, AccumMode accum,
                          OpCounter* counter = nullptr);

// Apply the rotation alone (rows of m as vectors). Exposed for tests and
// distortion analysis.
DenseMatrix hadamard_rotate_rows(const DenseMatrix& m, const HadamardPlan& plan);

} // namespace metis
