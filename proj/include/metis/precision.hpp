// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "metis/rng.hpp"

namespace metis {

using Index = std::int64_t;

// Narrow formats are emulated on a double carrier: every stored value is a
// member of the target grid, arithmetic happens in double, and explicit
// rounding points model where hardware would round.
enum class Format : uint8_t {
    Wide = 0,     // double, no constraint
    Bf16 = 1,     // 8-bit significand, float32 exponent range
    Fp8E4m3 = 2,  // 4-bit exponent (bias 7), 3-bit mantissa, max 448, no inf
    Fp4E2m1 = 3,  // magnitudes {0, .5, 1, 1.5, 2, 3, 4, 6}
};

enum class Rounding : uint8_t {
    NearestEven = 0,
    Stochastic = 1,
    UpMagnitude = 2,  // away from zero, saturating at max finite
};

struct FormatSpec {
    int sig_bits;        // significand bits including the implicit one
    int min_normal_exp;  // unbiased exponent of the smallest normal
    double max_finite;
};

const FormatSpec& format_spec(Format f);
const char* format_name(Format f);
const char* rounding_name(Rounding r);

inline constexpr double kBf16Max = 3.3895313892515355e38;  // 0x1.FEp127
inline constexpr double kFp8E4m3Max = 448.0;
inline constexpr double kFp4E2m1Max = 6.0;

// Round one finite double onto the grid of `f`. All modes saturate at
// max_finite; subnormals are exact grid members down to the format's
// smallest step. Stochastic mode draws one uniform from `rng` only when the
// value is strictly between two grid points. Throws on non-finite input.
double round_value(double x, Format f, Rounding mode, RngStream* rng = nullptr);

// True when x is already a grid member of `f`.
bool is_representable(double x, Format f);

// Fast branch-light bf16 rounding for accumulation loops. Saturates at
// +-kBf16Max (no inf/nan production for finite input); agrees with
// round_value(x, Bf16, NearestEven) everywhere, which a test enforces.
inline double bf16_round(double x) noexcept {
    x = std::fmin(std::fmax(x, -kBf16Max), kBf16Max);
    const uint64_t b = std::bit_cast<uint64_t>(x);
    // Round-to-nearest-even on the top 8 significand bits of the double
    // encoding, valid while the result stays a normal binary32 exponent.
    const uint64_t lsb = (b >> 45) & 1u;
    const uint64_t rn = (b + 0x00000fffffffffffull + lsb) & 0xffffe00000000000ull;
    const double y_norm = std::bit_cast<double>(rn);
    // Below the normal range the grid step is fixed at 2^-133; the
    // add-subtract trick lets the FPU do the even-tie rounding.
    const double shift = std::copysign(0x1.8p-81, x);
    const double y_sub = (x + shift) - shift;
    return std::abs(x) < 0x1p-126 ? y_sub : y_norm;
}

// Row-major dense matrix of doubles with a tag recording which grid its
// entries are guaranteed to lie on. The tag is bookkeeping: operations that
// round attach the right tag, nothing re-checks it on access.
class DenseMatrix {
  public:
    DenseMatrix() = default;
    DenseMatrix(Index rows, Index cols, Format tag = Format::Wide);

    Index rows() const { return rows_; }
    Index cols() const { return cols_; }
    Index size() const { return rows_ * cols_; }

    double operator()(Index i, Index j) const { return data_[i * cols_ + j]; }
    double& operator()(Index i, Index j) { return data_[i * cols_ + j]; }

    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }

    Format format_tag() const { return tag_; }
    void set_format_tag(Format f) { tag_ = f; }

    bool all_finite() const;

  private:
    Index rows_ = 0;
    Index cols_ = 0;
    Format tag_ = Format::Wide;
    std::vector<double> data_;
};

DenseMatrix matrix_from_rows(std::initializer_list<std::initializer_list<double>> rows);

// Elementwise rounding of a whole matrix. Stochastic mode derives one
// stream per row from (seed, row) so row-parallel evaluation would match.
DenseMatrix cast_matrix(const DenseMatrix& m, Format f, Rounding mode, uint64_t seed = 0);

DenseMatrix transpose(const DenseMatrix& m);
double frobenius_norm(const DenseMatrix& m);
double max_abs(const DenseMatrix& m);

// Gaussian and uniform fills, stream keyed by (seed, row).
DenseMatrix random_gaussian(Index rows, Index cols, uint64_t seed, double stddev = 1.0);

void require(bool cond, const std::string& msg);

} // namespace metis
