// SPDX-License-Identifier: Apache-2.0
#include "metis/spectral.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <stdexcept>

namespace metis {

namespace {

using EMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

EMatrix to_eigen(const DenseMatrix& m) {
    return Eigen::Map<const EMatrix>(m.data().data(), m.rows(), m.cols());
}

DenseMatrix from_eigen(const Eigen::Ref<const EMatrix>& e) {
    DenseMatrix m(e.rows(), e.cols());
    Eigen::Map<EMatrix>(m.data().data(), e.rows(), e.cols()) = e;
    return m;
}

// Largest-magnitude entry of each left column made positive; the paired
// right column flips with it so the product is unchanged.
void fix_signs(EMatrix& u, EMatrix& v) {
    for (Eigen::Index c = 0; c < u.cols(); ++c) {
        Eigen::Index r = 0;
        u.col(c).cwiseAbs().maxCoeff(&r);
        if (u(r, c) < 0.0) {
            u.col(c) = -u.col(c);
            if (c < v.cols()) v.col(c) = -v.col(c);
        }
    }
}

EMatrix thin_q(const EMatrix& m) {
    Eigen::HouseholderQR<EMatrix> qr(m);
    return qr.householderQ() * EMatrix::Identity(m.rows(), std::min(m.rows(), m.cols()));
}

SpectralSplit split_from_factors(const DenseMatrix& m, const EMatrix& u,
                                 const Eigen::VectorXd& s, const EMatrix& v, Index k) {
    SpectralSplit out;
    out.left = from_eigen(u.leftCols(k));
    out.right = from_eigen(v.leftCols(k));
    out.values.assign(s.data(), s.data() + k);
    const EMatrix recon =
        u.leftCols(k) * s.head(k).asDiagonal() * v.leftCols(k).transpose();
    out.residual = from_eigen(to_eigen(m) - recon);
    return out;
}

} // namespace

SvdResult svd_full(const DenseMatrix& m) {
    require(m.rows() > 0 && m.cols() > 0, "svd_full: empty matrix");
    require(m.all_finite(), "svd_full: non-finite input");
    Eigen::BDCSVD<EMatrix> svd(to_eigen(m), Eigen::ComputeThinU | Eigen::ComputeThinV);
    EMatrix u = svd.matrixU();
    EMatrix v = svd.matrixV();
    fix_signs(u, v);
    SvdResult out;
    out.left = from_eigen(u);
    out.right = from_eigen(v);
    const auto& s = svd.singularValues();
    out.values.assign(s.data(), s.data() + s.size());
    return out;
}

SpectralSplit split_rank_k(const DenseMatrix& m, Index k) {
    require(k >= 1 && k <= std::min(m.rows(), m.cols()),
            "split_rank_k: rank out of range");
    Eigen::BDCSVD<EMatrix> svd(to_eigen(m), Eigen::ComputeThinU | Eigen::ComputeThinV);
    EMatrix u = svd.matrixU();
    EMatrix v = svd.matrixV();
    fix_signs(u, v);
    return split_from_factors(m, u, svd.singularValues(), v, k);
}

SpectralSplit randomized_split(const DenseMatrix& m, const SketchPlan& plan) {
    const Index mindim = std::min(m.rows(), m.cols());
    require(plan.k >= 1, "randomized_split: rank must be >= 1");
    require(plan.k + plan.oversample <= mindim,
            "randomized_split: sketch width exceeds matrix dimensions");
    require(m.all_finite(), "randomized_split: non-finite input");

    const Index width = plan.k + plan.oversample;
    const EMatrix a = to_eigen(m);
    const EMatrix omega =
        to_eigen(random_gaussian(m.cols(), width, derive_seed(plan.seed, 0x5eedull)));

    EMatrix h = thin_q(a * omega);
    // Subspace iteration sharpens the sketch when the spectrum decays
    // slowly; re-orthonormalizing each half-step keeps it stable.
    for (int it = 0; it < plan.power_iters; ++it) {
        const EMatrix g = thin_q(a.transpose() * h);
        h = thin_q(a * g);
    }

    Eigen::BDCSVD<EMatrix> svd(EMatrix(h.transpose() * a),
                               Eigen::ComputeThinU | Eigen::ComputeThinV);
    EMatrix u = h * svd.matrixU();
    EMatrix v = svd.matrixV();
    fix_signs(u, v);
    return split_from_factors(m, u, svd.singularValues(), v, plan.k);
}

DenseMatrix sampled_subspace(const DenseMatrix& x, const SketchPlan& plan, Index seq_len) {
    require(seq_len >= 1, "sampled_subspace: seq_len must be >= 1");
    require(x.rows() >= 1, "sampled_subspace: empty input");
    require(plan.sample_ratio > 0.0 && plan.sample_ratio <= 1.0,
            "sampled_subspace: sample_ratio outside (0, 1]");
    const Index n_seq = (x.rows() + seq_len - 1) / seq_len;
    const Index n_take = static_cast<Index>(std::llround(plan.sample_ratio * n_seq));
    require(n_take >= 1, "sampled_subspace: empty sample, raise sample_ratio");

    // Partial Fisher-Yates: the first n_take entries are a uniform draw
    // without replacement.
    std::vector<Index> order(n_seq);
    std::iota(order.begin(), order.end(), Index{0});
    RngStream rng(derive_seed(plan.seed, 0x5a71eull));
    for (Index i = 0; i < n_take; ++i) {
        const Index j = i + static_cast<Index>(rng.next_below(n_seq - i));
        std::swap(order[i], order[j]);
    }

    Index sampled_rows = 0;
    for (Index t = 0; t < n_take; ++t)
        sampled_rows += std::min(seq_len, x.rows() - order[t] * seq_len);
    DenseMatrix sample(sampled_rows, x.cols());
    Index r = 0;
    for (Index t = 0; t < n_take; ++t) {
        const Index r0 = order[t] * seq_len;
        const Index r1 = std::min(r0 + seq_len, x.rows());
        for (Index i = r0; i < r1; ++i, ++r)
            for (Index j = 0; j < x.cols(); ++j) sample(r, j) = x(i, j);
    }

    // The sample may be too thin for the requested rank; shrink instead of
    // failing, callers treat the basis width as the effective rank.
    const Index mindim = std::min(sample.rows(), sample.cols());
    SketchPlan p = plan;
    p.k = std::min(plan.k, mindim);
    p.oversample = std::min(plan.oversample, mindim - p.k);
    const SpectralSplit split = randomized_split(sample, p);
    return split.right;
}

SpectralSplit split_from_basis(const DenseMatrix& x, const DenseMatrix& basis) {
    require(basis.rows() == x.cols(), "split_from_basis: basis rows must match x cols");
    require(basis.cols() >= 1, "split_from_basis: empty basis");

    const EMatrix xe = to_eigen(x);
    const EMatrix be = to_eigen(basis);
    const EMatrix proj = xe * be;  // rows x k
    // Residual from the unnormalized projection; normalize-then-rescale
    // would round twice for nothing.
    const EMatrix resid = xe - proj * be.transpose();

    const Index k = basis.cols();
    std::vector<Index> idx(k);
    std::iota(idx.begin(), idx.end(), Index{0});
    std::vector<double> norms(k);
    for (Index c = 0; c < k; ++c) norms[c] = proj.col(c).norm();
    std::stable_sort(idx.begin(), idx.end(),
                     [&](Index a, Index b) { return norms[a] > norms[b]; });

    Index kept = 0;
    for (Index c = 0; c < k; ++c)
        if (norms[idx[c]] > 0.0) ++kept;

    SpectralSplit out;
    out.values.resize(kept);
    EMatrix left = EMatrix::Zero(x.rows(), kept);
    EMatrix right = EMatrix::Zero(basis.rows(), kept);
    for (Index c = 0; c < kept; ++c) {
        const Index s = idx[c];
        out.values[c] = norms[s];
        left.col(c) = proj.col(s) / norms[s];
        right.col(c) = be.col(s);
    }
    out.left = from_eigen(left);
    out.right = from_eigen(right);
    out.residual = from_eigen(resid);
    return out;
}

double subspace_alignment(const DenseMatrix& a, const DenseMatrix& b) {
    require(a.rows() == b.rows(), "subspace_alignment: bases live in different spaces");
    require(a.cols() >= 1 && b.cols() >= 1, "subspace_alignment: empty basis");
    require(a.cols() <= a.rows() && b.cols() <= b.rows(),
            "subspace_alignment: more columns than dimensions");

    auto orthonormalize = [](const DenseMatrix& m, const char* name) {
        EMatrix e = to_eigen(m);
        const double dev =
            (e.transpose() * e - EMatrix::Identity(e.cols(), e.cols())).cwiseAbs().maxCoeff();
        if (dev > 1e-6) {
            std::cerr << "subspace_alignment: " << name
                      << " basis not orthonormal (deviation " << dev
                      << "), re-orthonormalizing\n";
            e = thin_q(e);
        }
        return e;
    };

    const EMatrix ae = orthonormalize(a, "left");
    const EMatrix be = orthonormalize(b, "right");
    Eigen::BDCSVD<EMatrix> svd(EMatrix(ae.transpose() * be));
    const auto& s = svd.singularValues();
    const Index k = std::min<Index>(ae.cols(), be.cols());
    double acc = 0.0;
    for (Index i = 0; i < k; ++i) {
        const double c = std::clamp(s(i), 0.0, 1.0);
        acc += c * c;
    }
    return acc / static_cast<double>(k);
}

ElbowResult elbow_fraction(const std::vector<double>& values) {
    const Index n = static_cast<Index>(values.size());
    require(n >= 3, "elbow_fraction: need at least 3 values");
    for (Index i = 0; i < n; ++i) {
        require(values[i] > 0.0, "elbow_fraction: values must be positive");
        if (i > 0)
            require(values[i] <= values[i - 1] * (1.0 + 1e-12),
                    "elbow_fraction: values must be non-increasing");
    }

    // Normalized log-spectrum on a normalized index axis, so the curvature
    // is scale free in both directions.
    std::vector<double> y(n);
    const double y0 = std::log(values[0]);
    const double yn = std::log(values[n - 1]);
    const double span = y0 - yn;
    ElbowResult out;
    if (span < 1e-12) {
        out.k_star = 2;
        out.fraction = 2.0 / static_cast<double>(n);
        out.flat = true;
        return out;
    }
    for (Index i = 0; i < n; ++i) y[i] = (std::log(values[i]) - yn) / span;

    const double h = 1.0 / static_cast<double>(n - 1);
    double best = -1.0;
    Index best_i = 1;
    for (Index i = 1; i + 1 < n; ++i) {
        const double d1 = (y[i + 1] - y[i - 1]) / (2.0 * h);
        const double d2 = (y[i + 1] - 2.0 * y[i] + y[i - 1]) / (h * h);
        const double kappa = std::abs(d2) / std::pow(1.0 + d1 * d1, 1.5);
        if (kappa > best) {  // strict: ties keep the smallest index
            best = kappa;
            best_i = i;
        }
    }
    out.k_star = best_i + 1;  // 1-based component count
    out.fraction = static_cast<double>(out.k_star) / static_cast<double>(n);
    out.curvature = best;
    out.flat = best < 1e-9;
    return out;
}

DistortionResult spectral_distortion(const DenseMatrix& reference,
                                     const DenseMatrix& perturbed, Index k) {
    require(reference.rows() == perturbed.rows() && reference.cols() == perturbed.cols(),
            "spectral_distortion: shape mismatch");
    require(k >= 1 && k <= std::min(reference.rows(), reference.cols()),
            "spectral_distortion: k out of range");
    const SvdResult ref = svd_full(reference);
    const SvdResult pert = svd_full(perturbed);

    DistortionResult out;
    out.value_rel_error.resize(k);
    out.vector_cosine.resize(k);
    out.skipped.resize(k);
    const double tiny = ref.values[0] * 1e-13;
    for (Index i = 0; i < k; ++i) {
        if (ref.values[i] <= tiny) {
            out.value_rel_error[i] = 0.0;
            out.vector_cosine[i] = 0.0;
            out.skipped[i] = true;
            continue;
        }
        out.skipped[i] = false;
        out.value_rel_error[i] =
            std::abs(pert.values[i] - ref.values[i]) / ref.values[i];
        double dot = 0.0;
        for (Index r = 0; r < reference.rows(); ++r)
            dot += ref.left(r, i) * pert.left(r, i);
        out.vector_cosine[i] = std::min(std::abs(dot), 1.0);
    }
    return out;
}

DenseMatrix random_orthonormal(Index rows, Index cols, uint64_t seed) {
    require(cols >= 1 && cols <= rows, "random_orthonormal: need 1 <= cols <= rows");
    const EMatrix g = to_eigen(random_gaussian(rows, cols, seed));
    return from_eigen(thin_q(g));
}

} // namespace metis
