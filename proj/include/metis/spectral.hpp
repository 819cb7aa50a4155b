// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "metis/precision.hpp"

namespace metis {

// Rank-k split of a matrix M into left * diag(values) * right^T + residual.
// For SVD-computed splits, left and right have orthonormal columns and
// values are the leading singular values in descending order. Splits folded
// through a fixed basis keep right orthonormal while left is only
// column-normalized.
struct SpectralSplit {
    DenseMatrix left;            // rows x k
    std::vector<double> values;  // k, descending, nonnegative
    DenseMatrix right;           // cols x k
    DenseMatrix residual;        // rows x cols
};

struct SvdResult {
    DenseMatrix left;            // rows x r
    std::vector<double> values;  // r = min(rows, cols), descending
    DenseMatrix right;           // cols x r
};

// Controls for the randomized decomposition path.
struct SketchPlan {
    Index k = 1;                // target rank
    Index oversample = 8;       // sketch width = k + oversample
    double sample_ratio = 1.0;  // fraction of sequences fed to the sketch
    int power_iters = 1;        // subspace iteration rounds on the sketch
    uint64_t seed = 0;
};

// Full SVD in double precision. Column signs are fixed so the largest-
// magnitude entry of each left vector is positive; the paired right vector
// flips with it, keeping the reconstruction unchanged.
SvdResult svd_full(const DenseMatrix& m);

// Exact truncated-SVD split. Requires 1 <= k <= min(rows, cols).
SpectralSplit split_rank_k(const DenseMatrix& m, Index k);

// Halko-style randomized split: Gaussian sketch of width k + oversample,
// thin QR, optional power iterations, small SVD of the projected matrix.
// Requires k >= 1 and k + oversample <= min(rows, cols).
SpectralSplit randomized_split(const DenseMatrix& m, const SketchPlan& plan);

// Estimate the dominant right singular subspace of x from a sparse sample
// of its sequences (contiguous groups of seq_len rows; a short final group
// counts as a sequence). Selection is a seeded partial Fisher-Yates draw
// without replacement of round(sample_ratio * n_sequences) sequences.
// Returns a cols x k_eff orthonormal basis; k_eff < plan.k only when the
// sampled row count cannot support k columns.
DenseMatrix sampled_subspace(const DenseMatrix& x, const SketchPlan& plan, Index seq_len);

// Fold x through a fixed orthonormal basis: left = normalize(x * basis),
// values = the removed column norms, right = the basis columns, residual
// exact. Components are sorted by value; zero-norm components are dropped.
SpectralSplit split_from_basis(const DenseMatrix& x, const DenseMatrix& basis);

// Mean squared canonical correlation between the column spans of two
// orthonormal bases with a shared row dimension. 1 = identical spans,
// 0 = orthogonal. Non-orthonormal input is re-orthonormalized with a
// warning on stderr.
double subspace_alignment(const DenseMatrix& a, const DenseMatrix& b);

struct ElbowResult {
    Index k_star = 0;        // 1-based index of maximum discrete curvature
    double fraction = 0.0;   // k_star / spectrum length
    double curvature = 0.0;  // the maximum curvature value
    bool flat = false;       // no meaningful elbow (near-flat spectrum)
};

// Knee of a singular value spectrum: maximum discrete curvature of the
// normalized log-spectrum against normalized index, interior points only,
// ties broken toward the smallest index. Requires >= 3 positive values in
// non-increasing order.
ElbowResult elbow_fraction(const std::vector<double>& values);

struct DistortionResult {
    std::vector<double> value_rel_error;  // per component, |s_hat - s| / s
    std::vector<double> vector_cosine;    // |<u_i, u_hat_i>|
    std::vector<bool> skipped;            // true where s_i was too small to compare
};

// Compare the leading k singular values and left singular vectors of a
// perturbed matrix against a reference of the same shape.
DistortionResult spectral_distortion(const DenseMatrix& reference,
                                     const DenseMatrix& perturbed, Index k);

// Matrix with orthonormal columns drawn from a seeded Gaussian, rows x cols,
// cols <= rows.
DenseMatrix random_orthonormal(Index rows, Index cols, uint64_t seed);

} // namespace metis
