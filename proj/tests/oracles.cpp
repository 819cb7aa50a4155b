// SPDX-License-Identifier: Apache-2.0
#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace oracle {

std::vector<GridPoint> e2m1_grid() {
    std::vector<GridPoint> g;
    for (int sign = 0; sign < 2; ++sign) {
        const double s = sign == 0 ? 1.0 : -1.0;
        for (int e = 0; e < 4; ++e)
            for (int m = 0; m < 2; ++m) {
                const double mag = e == 0 ? 0.5 * m : (1.0 + 0.5 * m) * std::ldexp(1.0, e - 1);
                g.push_back(GridPoint{s * mag, m == 0});
            }
    }
    return g;
}

std::vector<GridPoint> e4m3_grid() {
    std::vector<GridPoint> g;
    for (int sign = 0; sign < 2; ++sign) {
        const double s = sign == 0 ? 1.0 : -1.0;
        for (int e = 0; e < 16; ++e)
            for (int m = 0; m < 8; ++m) {
                if (e == 15 && m == 7) continue;  // nan pattern
                const double frac = static_cast<double>(m) / 8.0;
                const double mag = e == 0 ? frac * std::ldexp(1.0, -6)
                                          : (1.0 + frac) * std::ldexp(1.0, e - 7);
                g.push_back(GridPoint{s * mag, m % 2 == 0});
            }
    }
    return g;
}

double nearest_even_on_grid(double v, const std::vector<GridPoint>& grid) {
    double best = grid.front().value;
    double best_dist = std::abs(v - best);
    bool best_even = grid.front().even;
    for (const GridPoint& p : grid) {
        const double d = std::abs(v - p.value);
        if (d < best_dist || (d == best_dist && p.even && !best_even)) {
            best = p.value;
            best_dist = d;
            best_even = p.even;
        }
    }
    return best;
}

JacobiSvd jacobi_svd(const DenseMatrix& m) {
    const bool tall = m.rows() >= m.cols();
    const Index rows = tall ? m.rows() : m.cols();
    const Index cols = tall ? m.cols() : m.rows();
    DenseMatrix b(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) b(i, j) = tall ? m(i, j) : m(j, i);
    DenseMatrix v(cols, cols);
    for (Index i = 0; i < cols; ++i) v(i, i) = 1.0;

    const double eps = 1e-14;
    for (int sweep = 0; sweep < 60; ++sweep) {
        bool rotated = false;
        for (Index p = 0; p < cols; ++p)
            for (Index q = p + 1; q < cols; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (Index i = 0; i < rows; ++i) {
                    app += b(i, p) * b(i, p);
                    aqq += b(i, q) * b(i, q);
                    apq += b(i, p) * b(i, q);
                }
                if (std::abs(apq) <= eps * std::sqrt(app * aqq) || apq == 0.0) continue;
                rotated = true;
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double cs = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = cs * t;
                for (Index i = 0; i < rows; ++i) {
                    const double bp = b(i, p), bq = b(i, q);
                    b(i, p) = cs * bp - sn * bq;
                    b(i, q) = sn * bp + cs * bq;
                }
                for (Index i = 0; i < cols; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = cs * vp - sn * vq;
                    v(i, q) = sn * vp + cs * vq;
                }
            }
        if (!rotated) break;
    }

    std::vector<double> norms(static_cast<size_t>(cols), 0.0);
    for (Index j = 0; j < cols; ++j) {
        double s = 0.0;
        for (Index i = 0; i < rows; ++i) s += b(i, j) * b(i, j);
        norms[static_cast<size_t>(j)] = std::sqrt(s);
    }
    std::vector<Index> order(static_cast<size_t>(cols));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index c) {
        return norms[static_cast<size_t>(a)] > norms[static_cast<size_t>(c)];
    });

    JacobiSvd out;
    out.left = DenseMatrix(rows, cols);
    out.right = DenseMatrix(cols, cols);
    out.values.resize(static_cast<size_t>(cols));
    for (Index j = 0; j < cols; ++j) {
        const Index src = order[static_cast<size_t>(j)];
        const double s = norms[static_cast<size_t>(src)];
        out.values[static_cast<size_t>(j)] = s;
        for (Index i = 0; i < rows; ++i)
            out.left(i, j) = s > 0.0 ? b(i, src) / s : 0.0;
        for (Index i = 0; i < cols; ++i) out.right(i, j) = v(i, src);
    }
    if (!tall) std::swap(out.left, out.right);
    return out;
}

DenseMatrix hadamard_dense(Index p) {
    metis::require(p >= 1 && (p & (p - 1)) == 0, "hadamard_dense: p must be a power of two");
    DenseMatrix h(p, p);
    h(0, 0) = 1.0;
    for (Index half = 1; half < p; half *= 2)
        for (Index i = 0; i < half; ++i)
            for (Index j = 0; j < half; ++j) {
                h(i, j + half) = h(i, j);
                h(i + half, j) = h(i, j);
                h(i + half, j + half) = -h(i, j);
            }
    return h;
}

} // namespace oracle
