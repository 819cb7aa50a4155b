// SPDX-License-Identifier: Apache-2.0
#include "metis/gemm.hpp"

#include <stdexcept>

#if defined(__AVX2__)
#include <immintrin.h>
#endif

namespace metis {

namespace {

#if defined(__AVX2__)
// 4-lane bf16_round, same bit tricks as the scalar version; every lane op
// is IEEE-exact so results match the scalar path bit for bit.
inline __m256d bf16_round_pd(__m256d x) noexcept {
    x = _mm256_min_pd(_mm256_max_pd(x, _mm256_set1_pd(-kBf16Max)),
                      _mm256_set1_pd(kBf16Max));
    const __m256i b = _mm256_castpd_si256(x);
    const __m256i lsb = _mm256_and_si256(_mm256_srli_epi64(b, 45), _mm256_set1_epi64x(1));
    const __m256i rn = _mm256_and_si256(
        _mm256_add_epi64(_mm256_add_epi64(b, _mm256_set1_epi64x(0x00000fffffffffffll)), lsb),
        _mm256_set1_epi64x(static_cast<int64_t>(0xffffe00000000000ull)));
    const __m256i signbit = _mm256_set1_epi64x(static_cast<int64_t>(0x8000000000000000ull));
    const __m256d shift = _mm256_castsi256_pd(_mm256_or_si256(
        _mm256_and_si256(b, signbit), _mm256_set1_epi64x(0x3ae8000000000000ll)));
    const __m256d y_sub = _mm256_sub_pd(_mm256_add_pd(x, shift), shift);
    const __m256d absx = _mm256_andnot_pd(_mm256_castsi256_pd(signbit), x);
    const __m256d is_sub = _mm256_cmp_pd(absx, _mm256_set1_pd(0x1p-126), _CMP_LT_OQ);
    return _mm256_blendv_pd(_mm256_castsi256_pd(rn), y_sub, is_sub);
}
#endif

// i-k-j loop order keeps the b row contiguous. In bf16 mode the partial sum
// matrix is re-rounded after each rank-1 update, same result as rounding
// after every scalar add since each entry gets exactly one add per k.
// The vector body uses separate multiply and add (no fma) so it rounds
// exactly like the scalar tail.
DenseMatrix gemm_impl(const DenseMatrix& a, const DenseMatrix& b, AccumMode mode) {
    const Index l = a.rows(), m = a.cols(), n = b.cols();
    DenseMatrix c(l, n, mode == AccumMode::Bf16 ? Format::Bf16 : Format::Wide);
    if (c.size() == 0) return c;
    double* cd = c.data().data();
    const double* bd = b.data().data();
    for (Index i = 0; i < l; ++i) {
        double* ci = cd + i * n;
        for (Index k = 0; k < m; ++k) {
            const double aik = a(i, k);
            const double* bk = bd + k * n;
            if (mode == AccumMode::Bf16) {
                Index j = 0;
#if defined(__AVX2__)
                const __m256d av = _mm256_set1_pd(aik);
                for (; j + 4 <= n; j += 4) {
                    const __m256d bv = _mm256_loadu_pd(bk + j);
                    const __m256d cv = _mm256_loadu_pd(ci + j);
                    _mm256_storeu_pd(
                        ci + j,
                        bf16_round_pd(_mm256_add_pd(cv, _mm256_mul_pd(av, bv))));
                }
#endif
                for (; j < n; ++j) ci[j] = bf16_round(ci[j] + aik * bk[j]);
            } else {
                for (Index j = 0; j < n; ++j) ci[j] += aik * bk[j];
            }
        }
    }
    return c;
}

} // namespace

DenseMatrix gemm(const DenseMatrix& a, const DenseMatrix& b, AccumMode mode,
                 OpCounter* counter) {
    require(a.cols() == b.rows(), "gemm: inner dimensions disagree");
    if (counter != nullptr) counter->add(a.rows(), a.cols(), b.cols());
    return gemm_impl(a, b, mode);
}

DenseMatrix add_rounded(const DenseMatrix& a, const DenseMatrix& b, AccumMode mode) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "add_rounded: shape mismatch");
    DenseMatrix c(a.rows(), a.cols(), mode == AccumMode::Bf16 ? Format::Bf16 : Format::Wide);
    auto out = c.data();
    auto pa = a.data();
    auto pb = b.data();
    for (size_t t = 0; t < out.size(); ++t) {
        const double s = pa[t] + pb[t];
        out[t] = mode == AccumMode::Bf16 ? bf16_round(s) : s;
    }
    return c;
}

DenseMatrix scale_cols(const DenseMatrix& m, const std::vector<double>& d) {
    require(static_cast<Index>(d.size()) == m.cols(), "scale_cols: diagonal length mismatch");
    DenseMatrix out(m.rows(), m.cols());
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) out(i, j) = m(i, j) * d[j];
    return out;
}

DenseMatrix scale_rows(const DenseMatrix& m, const std::vector<double>& d) {
    require(static_cast<Index>(d.size()) == m.rows(), "scale_rows: diagonal length mismatch");
    DenseMatrix out(m.rows(), m.cols());
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) out(i, j) = m(i, j) * d[i];
    return out;
}

} // namespace metis
