// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "metis/precision.hpp"

namespace metis {

// Accumulation discipline for emulated matrix products. Products are always
// formed in double; Bf16 mode rounds the running partial sum after every
// addition, which is where low-precision accumulators actually lose bits.
enum class AccumMode : uint8_t { Wide = 0, Bf16 = 1 };

// Multiply counter threaded through the engine so measured work can be
// compared against the analytic cost model.
struct OpCounter {
    uint64_t multiplies = 0;

    void add(Index l, Index m, Index n) {
        multiplies += static_cast<uint64_t>(l) * static_cast<uint64_t>(m) *
                      static_cast<uint64_t>(n);
    }
};

// C = A * B with the chosen accumulation. Inner-dimension mismatch throws.
DenseMatrix gemm(const DenseMatrix& a, const DenseMatrix& b, AccumMode mode,
                 OpCounter* counter = nullptr);

// Elementwise a + b, rounded per mode. Used for the term sums that a fused
// kernel would emit through its output datapath.
DenseMatrix add_rounded(const DenseMatrix& a, const DenseMatrix& b, AccumMode mode);

// m * diag(d) and diag(d) * m in double. Diagonal factors stay wide.
DenseMatrix scale_cols(const DenseMatrix& m, const std::vector<double>& d);
DenseMatrix scale_rows(const DenseMatrix& m, const std::vector<double>& d);

} // namespace metis
