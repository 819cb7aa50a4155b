// SPDX-License-Identifier: Apache-2.0
#include "metis/engine.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "metis/baselines.hpp"

namespace metis {

MetisWeight make_metis_weight(const DenseMatrix& w, Index k, Format master) {
    require(k >= 0 && k <= std::min(w.rows(), w.cols()),
            "make_metis_weight: rank out of range");
    MetisWeight out;
    if (k == 0) {
        out.u = DenseMatrix(w.rows(), 0);
        out.v = DenseMatrix(w.cols(), 0);
        out.residual = cast_matrix(w, master, Rounding::NearestEven);
        return out;
    }
    const SpectralSplit split = split_rank_k(w, k);
    out.u = cast_matrix(split.left, master, Rounding::NearestEven);
    out.v = cast_matrix(split.right, master, Rounding::NearestEven);
    out.residual = cast_matrix(split.residual, master, Rounding::NearestEven);
    out.s = split.values;  // diagonal master stays wide
    return out;
}

DenseMatrix effective_weight(const MetisWeight& w) {
    DenseMatrix eff = w.residual;
    for (Index i = 0; i < eff.rows(); ++i)
        for (Index j = 0; j < eff.cols(); ++j) {
            double acc = eff(i, j);
            for (Index c = 0; c < w.rank(); ++c) acc += w.u(i, c) * w.s[c] * w.v(j, c);
            eff(i, j) = acc;
        }
    eff.set_format_tag(Format::Wide);
    return eff;
}

namespace {

struct QOperand {
    DenseMatrix hat;
    std::optional<QuantizedBlockTensor> q;
    double zfrac = 0.0;
};

QOperand quantize_operand(const DenseMatrix& m, const EngineConfig& cfg, QuantRole role) {
    if (!cfg.quantize) {
        require(m.all_finite(), "engine: non-finite operand");
        return {m, std::nullopt, 0.0};
    }
    QuantizedBlockTensor q = quantize_nvfp4(
        m, cfg.block_size, cfg.rounding,
        quant_stream_seed(cfg.seed, cfg.step, cfg.layer, role));
    QOperand out;
    out.hat = dequantize(q);
    out.zfrac = zero_fraction(m, q);
    out.q = std::move(q);
    return out;
}

// Decompose a large tensor into low-rank + residual for quantization.
// Sparse sampling estimates the right basis from a few sequences and folds
// the full tensor through it; otherwise the sketch runs on the whole
// tensor. Rank and oversampling shrink to whatever the data can support;
// returns an empty optional when no split is possible.
std::optional<SpectralSplit> decompose_operand(const DenseMatrix& t, const SketchPlan& plan,
                                               const EngineConfig& cfg, uint64_t side_id) {
    const Index mindim = std::min(t.rows(), t.cols());
    if (plan.k < 1 || mindim < 1) return std::nullopt;
    SketchPlan p = plan;
    p.seed = derive_seed(cfg.seed, cfg.step, cfg.layer, side_id);
    p.k = std::min(plan.k, mindim);
    if (cfg.sparse_sampling) {
        const DenseMatrix basis = sampled_subspace(t, p, cfg.seq_len);
        if (basis.cols() < 1) return std::nullopt;
        return split_from_basis(t, basis);
    }
    p.oversample = std::min(p.oversample, mindim - p.k);
    return randomized_split(t, p);
}

constexpr uint64_t kActSide = 101;
constexpr uint64_t kGradSide = 102;

} // namespace

ForwardResult engine_forward(const DenseMatrix& x, const MetisWeight& w,
                             const SketchPlan& plan, const EngineConfig& cfg,
                             OpCounter* counter) {
    require(x.cols() == w.in_dim(), "engine_forward: x columns must match weight rows");
    require(x.rows() >= 1, "engine_forward: empty batch");

    ForwardResult out;
    QuantizedOperandSet& cache = out.cache;
    cache.x_input = x;
    cache.s = w.s;

    // Activation side: composite X = A diag(lambda) B^T + X_r, every factor
    // quantized in its written orientation. Without decomposition X is a
    // single directly quantized tensor.
    std::optional<SpectralSplit> act;
    if (cfg.decompose_activations)
        act = decompose_operand(x, plan, cfg, kActSide);
    if (act.has_value()) {
        cache.act_rank = static_cast<Index>(act->values.size());
        cache.lambda = act->values;
        QOperand a = quantize_operand(act->left, cfg, QuantRole::AK);
        QOperand bt = quantize_operand(transpose(act->right), cfg, QuantRole::BT);
        QOperand xr = quantize_operand(act->residual, cfg, QuantRole::XR);
        cache.act_zero_fraction = xr.zfrac;
        // Rank-axis contraction stays wide; the composite assembles through
        // the configured accumulation path.
        const DenseMatrix xk =
            gemm(a.hat, scale_rows(bt.hat, act->values), AccumMode::Wide, counter);
        cache.x_composite = add_rounded(xk, xr.hat, cfg.accum);
        cache.a_k = std::move(a.q);
        cache.b_t = std::move(bt.q);
        cache.x_r = std::move(xr.q);
    } else {
        QOperand xq = quantize_operand(x, cfg, QuantRole::X);
        cache.act_zero_fraction = xq.zfrac;
        cache.x_composite = xq.hat;
        cache.x_r = std::move(xq.q);
    }

    // Weight side: factors were split once at init; quantize each per step.
    if (w.rank() > 0) {
        QOperand u = quantize_operand(w.u, cfg, QuantRole::U);
        QOperand vt = quantize_operand(transpose(w.v), cfg, QuantRole::VT);
        QOperand wr = quantize_operand(w.residual, cfg, QuantRole::WR);
        cache.u_hat = u.hat;
        cache.vt_hat = vt.hat;
        cache.wr_hat = wr.hat;
        cache.u_q = std::move(u.q);
        cache.vt_q = std::move(vt.q);
        cache.wr_q = std::move(wr.q);
        cache.weight_zero_fraction = wr.zfrac;
        const DenseMatrix c = gemm(cache.x_composite, cache.u_hat, cfg.accum, counter);
        const DenseMatrix y1 =
            gemm(scale_cols(c, w.s), cache.vt_hat, AccumMode::Wide, counter);
        const DenseMatrix y2 = gemm(cache.x_composite, cache.wr_hat, cfg.accum, counter);
        out.y = add_rounded(y1, y2, cfg.accum);
    } else {
        QOperand wq = quantize_operand(w.residual, cfg, QuantRole::W);
        cache.u_hat = DenseMatrix(w.in_dim(), 0);
        cache.vt_hat = DenseMatrix(0, w.out_dim());
        cache.wr_hat = wq.hat;
        cache.wr_q = std::move(wq.q);
        cache.weight_zero_fraction = wq.zfrac;
        out.y = gemm(cache.x_composite, cache.wr_hat, cfg.accum, counter);
    }
    return out;
}

MetisGradients engine_backward(const DenseMatrix& d, const QuantizedOperandSet& cache,
                               const MetisWeight& w, const SketchPlan& plan,
                               const EngineConfig& cfg, OpCounter* counter) {
    const Index l = cache.x_composite.rows();
    const Index m = cache.x_composite.cols();
    const Index kw = w.rank();
    require(d.rows() == l && d.cols() == w.out_dim(),
            "engine_backward: gradient shape mismatch");

    MetisGradients g;

    // Gradient side decomposition mirrors the activation side.
    std::optional<SpectralSplit> gs;
    if (cfg.decompose_gradients)
        gs = decompose_operand(d, plan, cfg, kGradSide);
    DenseMatrix p_hat, qt_hat, dr_hat;
    std::vector<double> tvals;
    Index kg = 0;
    if (gs.has_value()) {
        kg = static_cast<Index>(gs->values.size());
        tvals = gs->values;
        p_hat = quantize_operand(gs->left, cfg, QuantRole::P).hat;
        qt_hat = quantize_operand(transpose(gs->right), cfg, QuantRole::QT).hat;
        const QOperand dr = quantize_operand(gs->residual, cfg, QuantRole::DR);
        g.grad_zero_fraction = dr.zfrac;
        dr_hat = dr.hat;
    } else {
        const QOperand dq = quantize_operand(d, cfg, QuantRole::D);
        g.grad_zero_fraction = dq.zfrac;
        dr_hat = dq.hat;
    }
    g.grad_rank = kg;

    // The fully undecomposed configuration is the direct baseline: the
    // transposed operands are re-quantized from the raw saved tensors with
    // the baseline roles, which keeps the two paths bit-identical.
    const bool direct_path = cache.act_rank == 0 && kg == 0 && kw == 0;
    DenseMatrix xbt, wrt;
    if (direct_path) {
        xbt = quantize_operand(transpose(cache.x_input), cfg, QuantRole::XT).hat;
        wrt = quantize_operand(transpose(w.residual), cfg, QuantRole::WT).hat;
    } else {
        // The composite is re-quantized transposed (fresh blocking along its
        // row axis); factor values are reused transposed without requantizing.
        xbt = quantize_operand(transpose(cache.x_composite), cfg, QuantRole::XBT).hat;
        wrt = transpose(cache.wr_hat);
    }
    const DenseMatrix ut = transpose(cache.u_hat);    // kw x m
    const DenseMatrix v_hat = transpose(cache.vt_hat);  // n x kw

    // Shared contractions. XtDr doubles as the dense part of dW_r.
    const DenseMatrix x_t_dr = gemm(xbt, dr_hat, cfg.accum, counter);  // m x n
    DenseMatrix x_t_p, qt_v, p_t;  // m x kg, kg x kw, l x kg
    if (kg > 0) {
        x_t_p = gemm(xbt, p_hat, cfg.accum, counter);
        p_t = scale_cols(p_hat, tvals);
        if (kw > 0) qt_v = gemm(qt_hat, v_hat, cfg.accum, counter);
    }

    // dX: up to four terms, each ending in a rank-axis (wide) or dense
    // (accum) contraction, summed through the accumulation path.
    std::optional<DenseMatrix> dx;
    auto add_term = [&](const DenseMatrix& t) {
        dx = dx.has_value() ? add_rounded(*dx, t, cfg.accum) : t;
    };
    if (kg > 0 && kw > 0) {
        const DenseMatrix t1 =
            gemm(scale_cols(gemm(p_t, qt_v, AccumMode::Wide, counter), w.s), ut,
                 AccumMode::Wide, counter);
        add_term(t1);
    }
    if (kg > 0) {
        const DenseMatrix qt_wrt = gemm(qt_hat, wrt, cfg.accum, counter);  // kg x m
        add_term(gemm(p_t, qt_wrt, AccumMode::Wide, counter));
    }
    if (kw > 0) {
        const DenseMatrix dr_v = gemm(dr_hat, v_hat, cfg.accum, counter);  // l x kw
        add_term(gemm(scale_cols(dr_v, w.s), ut, AccumMode::Wide, counter));
    }
    add_term(gemm(dr_hat, wrt, cfg.accum, counter));
    g.dx = *dx;

    // Parameter gradients.
    if (kw > 0) {
        const DenseMatrix base_p = kg > 0 ? gemm(ut, x_t_p, cfg.accum, counter)
                                          : DenseMatrix(kw, 0);  // kw x kg
        const DenseMatrix base_d = gemm(ut, x_t_dr, cfg.accum, counter);  // kw x n

        DenseMatrix du = scale_cols(gemm(x_t_dr, v_hat, cfg.accum, counter), w.s);
        DenseMatrix ds_full = gemm(base_d, v_hat, cfg.accum, counter);  // kw x kw
        DenseMatrix dvt = scale_rows(base_d, w.s);                      // kw x n
        if (kg > 0) {
            const DenseMatrix xp_t = scale_cols(x_t_p, tvals);  // m x kg
            du = add_rounded(scale_cols(gemm(xp_t, qt_v, AccumMode::Wide, counter), w.s),
                             du, cfg.accum);
            const DenseMatrix bp_t = scale_cols(base_p, tvals);  // kw x kg
            ds_full = add_rounded(gemm(bp_t, qt_v, AccumMode::Wide, counter), ds_full,
                                  cfg.accum);
            dvt = add_rounded(scale_rows(gemm(bp_t, qt_hat, AccumMode::Wide, counter), w.s),
                              dvt, cfg.accum);
        }
        g.du = du;
        g.ds.resize(kw);
        for (Index i = 0; i < kw; ++i) g.ds[i] = ds_full(i, i);
        g.dv = transpose(dvt);
    } else {
        g.du = DenseMatrix(m, 0);
        g.dv = DenseMatrix(w.out_dim(), 0);
    }
    if (kg > 0) {
        const DenseMatrix w1 =
            gemm(scale_cols(x_t_p, tvals), qt_hat, AccumMode::Wide, counter);
        g.dw_r = add_rounded(w1, x_t_dr, cfg.accum);
    } else {
        g.dw_r = x_t_dr;
    }
    return g;
}

void sgd_step(std::span<double> w, std::span<const double> g, double lr, Format master) {
    require(w.size() == g.size(), "sgd_step: size mismatch");
    for (size_t i = 0; i < w.size(); ++i) {
        const double nw = w[i] - lr * g[i];
        w[i] = master == Format::Wide ? nw : round_value(nw, master, Rounding::NearestEven);
    }
}

void adam_step(std::span<double> w, std::span<const double> g, AdamState& st, uint64_t t,
               const OptimizerConfig& opt) {
    require(w.size() == g.size(), "adam_step: size mismatch");
    if (st.m.size() != w.size()) {
        st.m.assign(w.size(), 0.0);
        st.v.assign(w.size(), 0.0);
    }
    const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t));
    for (size_t i = 0; i < w.size(); ++i) {
        st.m[i] = opt.beta1 * st.m[i] + (1.0 - opt.beta1) * g[i];
        st.v[i] = opt.beta2 * st.v[i] + (1.0 - opt.beta2) * g[i] * g[i];
        const double mhat = st.m[i] / c1;
        const double vhat = st.v[i] / c2;
        const double nw = w[i] - opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
        w[i] = opt.master == Format::Wide ? nw
                                          : round_value(nw, opt.master, Rounding::NearestEven);
    }
}

namespace {

void check_finite(const std::span<const double> g, uint64_t t, const char* name) {
    for (double v : g)
        if (!std::isfinite(v))
            throw std::runtime_error(std::string("apply_updates: non-finite gradient for ") +
                                     name + " at optimizer step " + std::to_string(t));
}

void tensor_update(std::span<double> w, std::span<const double> g, const OptimizerConfig& opt,
                   AdamState& st, uint64_t t, Format master) {
    if (opt.kind == OptimizerConfig::Kind::Adam) {
        OptimizerConfig o = opt;
        o.master = master;
        adam_step(w, g, st, t, o);
    } else {
        sgd_step(w, g, opt.lr, master);
    }
}

} // namespace

void apply_updates(MetisWeight& w, const MetisGradients& g, const OptimizerConfig& opt,
                   MetisOptState& state) {
    state.t += 1;
    check_finite(g.du.data(), state.t, "U");
    check_finite(g.ds, state.t, "S");
    check_finite(g.dv.data(), state.t, "V");
    check_finite(g.dw_r.data(), state.t, "W_r");
    require(g.du.rows() == w.u.rows() && g.du.cols() == w.u.cols() &&
                g.dv.rows() == w.v.rows() && g.dv.cols() == w.v.cols() &&
                static_cast<Index>(g.ds.size()) == w.rank() &&
                g.dw_r.rows() == w.residual.rows() && g.dw_r.cols() == w.residual.cols(),
            "apply_updates: gradient shapes do not match weight");
    tensor_update(w.u.data(), g.du.data(), opt, state.u, state.t, opt.master);
    tensor_update(w.v.data(), g.dv.data(), opt, state.v, state.t, opt.master);
    tensor_update(w.residual.data(), g.dw_r.data(), opt, state.r, state.t, opt.master);
    // The diagonal master stays wide whatever the factor master format is.
    tensor_update(w.s, g.ds, opt, state.s, state.t, Format::Wide);
}

CostReport op_counter(const GemmShapes& shapes, const SketchPlan& plan, Index seq_len) {
    require(shapes.l >= 1 && shapes.m >= 1 && shapes.n >= 1, "op_counter: bad shapes");
    require(seq_len >= 1, "op_counter: seq_len must be >= 1");
    const double l = static_cast<double>(shapes.l);
    const double m = static_cast<double>(shapes.m);
    const double n = static_cast<double>(shapes.n);
    const double k = static_cast<double>(plan.k);

    CostReport r;
    r.k = plan.k;
    r.baseline = 3.0 * l * m * n;
    r.forward_mixed = l * m * k + m * n * k + l * n * k;
    r.backward_mixed = r.forward_mixed;
    const Index n_seq = (shapes.l + seq_len - 1) / seq_len;
    const Index n_take =
        std::max<Index>(1, static_cast<Index>(std::llround(plan.sample_ratio * n_seq)));
    r.sampled_rows = std::min(shapes.l, n_take * seq_len);
    r.decomposition = static_cast<double>(r.sampled_rows) * (m + n) * k;
    r.overhead = r.forward_mixed + r.backward_mixed + r.decomposition;
    r.ratio = r.overhead / r.baseline;
    return r;
}

} // namespace metis
