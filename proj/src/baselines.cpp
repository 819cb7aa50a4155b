// SPDX-License-Identifier: Apache-2.0
#include "metis/baselines.hpp"

#include <bit>
#include <cmath>

namespace metis {

DenseMatrix quantized_gemm(const DenseMatrix& a, const DenseMatrix& b, int block_size,
                           Rounding mode, uint64_t seed_a, uint64_t seed_b,
                           AccumMode accum, OpCounter* counter) {
    const DenseMatrix ah = dequantize(quantize_nvfp4(a, block_size, mode, seed_a));
    const DenseMatrix bh = dequantize(quantize_nvfp4(b, block_size, mode, seed_b));
    return gemm(ah, bh, accum, counter);
}

void fwht_pow2(std::span<double> v) {
    const size_t n = v.size();
    require(n > 0 && (n & (n - 1)) == 0, "fwht_pow2: length must be a power of two");
    for (size_t h = 1; h < n; h <<= 1)
        for (size_t i = 0; i < n; i += h << 1)
            for (size_t j = i; j < i + h; ++j) {
                const double x = v[j];
                const double y = v[j + h];
                v[j] = x + y;
                v[j + h] = x - y;
            }
}

HadamardPlan make_hadamard_plan(Index dim, uint64_t seed) {
    require(dim >= 1, "make_hadamard_plan: dim must be >= 1");
    HadamardPlan plan;
    plan.dim = dim;
    plan.padded = static_cast<Index>(std::bit_ceil(static_cast<uint64_t>(dim)));
    plan.signs.resize(plan.padded);
    RngStream rng(derive_seed(seed, 0xadaull));
    for (auto& s : plan.signs) s = (rng.next_u64() & 1u) ? 1.0 : -1.0;
    return plan;
}

DenseMatrix hadamard_rotate_rows(const DenseMatrix& m, const HadamardPlan& plan) {
    require(m.cols() == plan.dim, "hadamard_rotate_rows: dimension mismatch");
    const double norm = 1.0 / std::sqrt(static_cast<double>(plan.padded));
    DenseMatrix out(m.rows(), plan.padded);
    std::vector<double> buf(plan.padded);
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < plan.dim; ++j) buf[j] = m(i, j);
        std::fill(buf.begin() + plan.dim, buf.end(), 0.0);
        fwht_pow2(buf);
        for (Index j = 0; j < plan.padded; ++j) out(i, j) = buf[j] * plan.signs[j] * norm;
    }
    return out;
}

DenseMatrix hadamard_gemm(const DenseMatrix& a, const DenseMatrix& b,
                          const HadamardPlan& plan, int block_size, Rounding mode,
                          uint64_t seed_a, uint64_t seed_b, AccumMode accum,
                          OpCounter* counter) {
    require(a.cols() == b.rows(), "hadamard_gemm: inner dimensions disagree");
    require(a.cols() == plan.dim, "hadamard_gemm: plan built for a different dimension");
    const DenseMatrix ar = hadamard_rotate_rows(a, plan);
    const DenseMatrix br = transpose(hadamard_rotate_rows(transpose(b), plan));
    return quantized_gemm(ar, br, block_size, mode, seed_a, seed_b, accum, counter);
}

} // namespace metis
