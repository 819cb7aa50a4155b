// SPDX-License-Identifier: Apache-2.0
// Independent reference implementations the tests check library results
// against. Everything here is deliberately naive: enumeration, textbook
// Jacobi, dense matrix products. No library internals are reused.
#pragma once

#include <utility>
#include <vector>

#include "metis/precision.hpp"

namespace oracle {

using metis::DenseMatrix;
using metis::Index;

// All finite grid values of a format together with the evenness of their
// significand, built by direct bit-pattern enumeration.
struct GridPoint {
    double value;
    bool even;
};
std::vector<GridPoint> e2m1_grid();
std::vector<GridPoint> e4m3_grid();

// Nearest grid value with ties to the even significand.
double nearest_even_on_grid(double v, const std::vector<GridPoint>& grid);

struct JacobiSvd {
    DenseMatrix left;            // rows x min(rows, cols)
    std::vector<double> values;  // descending
    DenseMatrix right;           // cols x min(rows, cols)
};

// One-sided cyclic Jacobi SVD. Converges for any finite matrix; columns of
// `left` with zero singular value are left as zeros.
JacobiSvd jacobi_svd(const DenseMatrix& m);

// Dense Sylvester Hadamard matrix, entries +-1, p a power of two.
DenseMatrix hadamard_dense(Index p);

// Central finite difference of scalar() with respect to *x.
template <class F>
double central_diff(F scalar, double* x, double h) {
    const double x0 = *x;
    *x = x0 + h;
    const double fp = scalar();
    *x = x0 - h;
    const double fm = scalar();
    *x = x0;
    return (fp - fm) / (2.0 * h);
}

} // namespace oracle
