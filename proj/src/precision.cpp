// SPDX-License-Identifier: Apache-2.0
#include "metis/precision.hpp"

#include <algorithm>
#include <stdexcept>

namespace metis {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

const FormatSpec& format_spec(Format f) {
    // min_normal_exp checks: bf16 shares the binary32 range (2^-126); fp8
    // e4m3 bottoms out at 2^-6 with subnormal step 2^-9; fp4 e2m1 has min
    // normal 1.0 and a single subnormal at 0.5.
    static const FormatSpec kWide{53, -1022, 1.7976931348623157e308};
    static const FormatSpec kBf16{8, -126, kBf16Max};
    static const FormatSpec kFp8{4, -6, kFp8E4m3Max};
    static const FormatSpec kFp4{2, 0, kFp4E2m1Max};
    switch (f) {
        case Format::Wide: return kWide;
        case Format::Bf16: return kBf16;
        case Format::Fp8E4m3: return kFp8;
        case Format::Fp4E2m1: return kFp4;
    }
    throw std::invalid_argument("format_spec: unknown format");
}

const char* format_name(Format f) {
    switch (f) {
        case Format::Wide: return "wide";
        case Format::Bf16: return "bf16";
        case Format::Fp8E4m3: return "fp8_e4m3";
        case Format::Fp4E2m1: return "fp4_e2m1";
    }
    return "?";
}

const char* rounding_name(Rounding r) {
    switch (r) {
        case Rounding::NearestEven: return "rtn";
        case Rounding::Stochastic: return "sr";
        case Rounding::UpMagnitude: return "rup";
    }
    return "?";
}

namespace {

// Largest grid member <= x and smallest >= x, for finite in-range x.
// Works on the scaled significand so one code path covers every binade;
// the subnormal region is a single fixed-step grid.
template <typename IntRound>
double grid_round(double x, const FormatSpec& spec, IntRound int_round) {
    if (x == 0.0) return x;
    const double ax = std::abs(x);
    const double min_normal = std::ldexp(1.0, spec.min_normal_exp);
    if (ax < min_normal) {
        const double step = std::ldexp(1.0, spec.min_normal_exp - (spec.sig_bits - 1));
        return int_round(x / step) * step;
    }
    int e = 0;
    const double m = std::frexp(x, &e);  // x = m * 2^e, |m| in [0.5, 1)
    const double scaled = std::ldexp(m, spec.sig_bits);
    const double y = std::ldexp(int_round(scaled), e - spec.sig_bits);
    // Carry out of the top binade lands past max_finite: saturate.
    return std::abs(y) > spec.max_finite ? std::copysign(spec.max_finite, x) : y;
}

double round_nearest(double x, const FormatSpec& spec) {
    return grid_round(x, spec, [](double v) { return std::nearbyint(v); });
}

double round_down_mag(double x, const FormatSpec& spec) {
    return grid_round(x, spec, [](double v) { return std::trunc(v); });
}

double round_up_mag(double x, const FormatSpec& spec) {
    return grid_round(x, spec,
                      [](double v) { return v >= 0.0 ? std::ceil(v) : std::floor(v); });
}

} // namespace

double round_value(double x, Format f, Rounding mode, RngStream* rng) {
    if (!std::isfinite(x)) throw std::invalid_argument("round_value: non-finite input");
    if (f == Format::Wide) return x;
    const FormatSpec& spec = format_spec(f);
    if (std::abs(x) >= spec.max_finite) return std::copysign(spec.max_finite, x);
    switch (mode) {
        case Rounding::NearestEven:
            return round_nearest(x, spec);
        case Rounding::UpMagnitude:
            return round_up_mag(x, spec);
        case Rounding::Stochastic: {
            const double lo = round_down_mag(x, spec);
            const double hi = round_up_mag(x, spec);
            if (lo == hi) return lo;
            if (rng == nullptr)
                throw std::invalid_argument("round_value: stochastic mode needs a stream");
            // P(hi) proportional to the distance from lo keeps E[result] = x.
            const double p = (x - lo) / (hi - lo);
            return rng->next_double() < p ? hi : lo;
        }
    }
    throw std::invalid_argument("round_value: unknown rounding mode");
}

bool is_representable(double x, Format f) {
    if (!std::isfinite(x)) return false;
    if (f == Format::Wide) return true;
    return round_value(x, f, Rounding::NearestEven) == x;
}

DenseMatrix::DenseMatrix(Index rows, Index cols, Format tag)
    : rows_(rows), cols_(cols), tag_(tag) {
    require(rows >= 0 && cols >= 0, "DenseMatrix: negative dimension");
    data_.assign(static_cast<size_t>(rows) * static_cast<size_t>(cols), 0.0);
}

bool DenseMatrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
}

DenseMatrix matrix_from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const Index r = static_cast<Index>(rows.size());
    const Index c = r > 0 ? static_cast<Index>(rows.begin()->size()) : 0;
    DenseMatrix m(r, c);
    Index i = 0;
    for (const auto& row : rows) {
        require(static_cast<Index>(row.size()) == c, "matrix_from_rows: ragged rows");
        Index j = 0;
        for (double v : row) m(i, j++) = v;
        ++i;
    }
    return m;
}

DenseMatrix cast_matrix(const DenseMatrix& m, Format f, Rounding mode, uint64_t seed) {
    DenseMatrix out(m.rows(), m.cols(), f);
    for (Index i = 0; i < m.rows(); ++i) {
        RngStream rng(derive_seed(seed, static_cast<uint64_t>(i)));
        for (Index j = 0; j < m.cols(); ++j)
            out(i, j) = round_value(m(i, j), f, mode, &rng);
    }
    return out;
}

DenseMatrix transpose(const DenseMatrix& m) {
    DenseMatrix out(m.cols(), m.rows(), m.format_tag());
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
    return out;
}

double frobenius_norm(const DenseMatrix& m) {
    double s = 0.0;
    for (double v : m.data()) s += v * v;
    return std::sqrt(s);
}

double max_abs(const DenseMatrix& m) {
    double s = 0.0;
    for (double v : m.data()) s = std::max(s, std::abs(v));
    return s;
}

DenseMatrix random_gaussian(Index rows, Index cols, uint64_t seed, double stddev) {
    DenseMatrix out(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        RngStream rng(derive_seed(seed, static_cast<uint64_t>(i)));
        for (Index j = 0; j < cols; ++j) out(i, j) = stddev * rng.next_normal();
    }
    return out;
}

} // namespace metis
