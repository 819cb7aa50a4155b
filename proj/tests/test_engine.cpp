// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <vector>

#include "doctest.h"
#include "metis/baselines.hpp"
#include "metis/datasets.hpp"
#include "metis/engine.hpp"
#include "oracles.hpp"

using namespace metis;

namespace {

EngineConfig oracle_config(uint64_t seed) {
    EngineConfig cfg;
    cfg.quantize = false;
    cfg.accum = AccumMode::Wide;
    cfg.rounding = Rounding::NearestEven;
    cfg.seed = seed;
    cfg.step = 3;
    cfg.layer = 1;
    return cfg;
}

double weighted_sum(const DenseMatrix& y, const DenseMatrix& c) {
    double s = 0.0;
    for (Index i = 0; i < y.rows(); ++i)
        for (Index j = 0; j < y.cols(); ++j) s += y(i, j) * c(i, j);
    return s;
}

double rel_err(double got, double want) {
    const double scale = std::max(std::abs(want), 1e-6);
    return std::abs(got - want) / scale;
}

} // namespace

TEST_SUITE("engine") {

TEST_CASE("oracle forward equals x times the effective weight") {
    for (uint64_t seed : {401ull, 402ull, 403ull}) {
        const Index l = 12, m = 10, n = 7, k = 2;
        const DenseMatrix x = random_gaussian(l, m, seed, 1.4);
        const DenseMatrix w0 = random_gaussian(m, n, seed + 50, 0.8);
        const MetisWeight w = make_metis_weight(w0, k, Format::Wide);
        SketchPlan plan;
        plan.k = 2;
        plan.oversample = 4;
        plan.seed = seed;
        for (bool act : {true, false})
            for (bool sampling : {true, false}) {
                EngineConfig cfg = oracle_config(seed);
                cfg.decompose_activations = act;
                cfg.sparse_sampling = sampling;
                cfg.seq_len = 3;
                const ForwardResult fr = engine_forward(x, w, plan, cfg, nullptr);
                const DenseMatrix ref = gemm(x, effective_weight(w), AccumMode::Wide, nullptr);
                for (Index i = 0; i < l; ++i)
                    for (Index j = 0; j < n; ++j)
                        CHECK(fr.y(i, j) == doctest::Approx(ref(i, j)).epsilon(1e-9));
                if (act) CHECK(fr.cache.act_rank == 2);
            }
    }
}

TEST_CASE("oracle gradients match central finite differences on all five outputs") {
    RngStream dims(derive_seed(404));
    for (int trial = 0; trial < 6; ++trial) {
        const Index l = 2 + static_cast<Index>(dims.next_below(8));
        const Index m = 2 + static_cast<Index>(dims.next_below(10));
        const Index n = 2 + static_cast<Index>(dims.next_below(10));
        const Index k = std::min<Index>(static_cast<Index>(dims.next_below(4)),
                                        std::min(m, n) - 1);
        DenseMatrix x = random_gaussian(l, m, 500 + trial, 1.1);
        const DenseMatrix w0 = random_gaussian(m, n, 600 + trial, 0.9);
        MetisWeight w = make_metis_weight(w0, std::max<Index>(k, 0), Format::Wide);
        const DenseMatrix c = random_gaussian(l, n, 700 + trial, 1.0);
        SketchPlan plan;
        plan.k = std::max<Index>(1, std::min<Index>(2, std::min(l, m)));
        plan.oversample = 2;
        plan.seed = 40 + static_cast<uint64_t>(trial);
        EngineConfig cfg = oracle_config(800 + static_cast<uint64_t>(trial));
        cfg.decompose_activations = trial % 2 == 0;
        cfg.decompose_gradients = trial % 3 != 0;
        cfg.sparse_sampling = false;
        cfg.seq_len = 1 + static_cast<Index>(trial % 3);

        auto loss = [&]() {
            return weighted_sum(engine_forward(x, w, plan, cfg, nullptr).y, c);
        };
        const ForwardResult fr = engine_forward(x, w, plan, cfg, nullptr);
        const MetisGradients g = engine_backward(c, fr.cache, w, plan, cfg, nullptr);
        const double h = 1e-5;
        CAPTURE(trial);

        REQUIRE(g.dx.rows() == l);
        for (Index i = 0; i < l; ++i)
            for (Index j = 0; j < m; ++j) {
                const double fd = oracle::central_diff(loss, &x(i, j), h);
                CHECK(rel_err(g.dx(i, j), fd) < 1e-4);
            }
        REQUIRE(g.dw_r.rows() == m);
        for (Index i = 0; i < m; ++i)
            for (Index j = 0; j < n; ++j) {
                const double fd = oracle::central_diff(loss, &w.residual(i, j), h);
                CHECK(rel_err(g.dw_r(i, j), fd) < 1e-4);
            }
        REQUIRE(g.du.cols() == w.rank());
        REQUIRE(g.dv.cols() == w.rank());
        REQUIRE(static_cast<Index>(g.ds.size()) == w.rank());
        for (Index i = 0; i < w.u.rows(); ++i)
            for (Index j = 0; j < w.rank(); ++j) {
                const double fd = oracle::central_diff(loss, &w.u(i, j), h);
                CHECK(rel_err(g.du(i, j), fd) < 1e-4);
            }
        for (Index i = 0; i < w.v.rows(); ++i)
            for (Index j = 0; j < w.rank(); ++j) {
                const double fd = oracle::central_diff(loss, &w.v(i, j), h);
                CHECK(rel_err(g.dv(i, j), fd) < 1e-4);
            }
        for (Index j = 0; j < w.rank(); ++j) {
            const double fd =
                oracle::central_diff(loss, &w.s[static_cast<size_t>(j)], h);
            CHECK(rel_err(g.ds[static_cast<size_t>(j)], fd) < 1e-4);
        }
    }
}

TEST_CASE("zero upstream gradient produces zero parameter gradients") {
    const DenseMatrix x = random_gaussian(8, 32, 405, 1.0);
    const MetisWeight w = make_metis_weight(random_gaussian(32, 6, 406), 2);
    SketchPlan plan;
    plan.k = 2;
    plan.oversample = 2;
    EngineConfig cfg;
    cfg.seed = 9;
    const ForwardResult fr = engine_forward(x, w, plan, cfg, nullptr);
    const DenseMatrix zero(8, 6);
    const MetisGradients g = engine_backward(zero, fr.cache, w, plan, cfg, nullptr);
    CHECK(max_abs(g.dx) == 0.0);
    CHECK(max_abs(g.du) == 0.0);
    CHECK(max_abs(g.dv) == 0.0);
    CHECK(max_abs(g.dw_r) == 0.0);
    for (double v : g.ds) CHECK(v == 0.0);
}

TEST_CASE("fully degenerate engine is bit-identical to the direct baseline") {
    const Index l = 24, m = 32, n = 16;
    const DenseMatrix x = random_gaussian(l, m, 407, 1.2);
    const DenseMatrix w0 = random_gaussian(m, n, 408, 0.7);
    const MetisWeight w = make_metis_weight(w0, 0);  // bf16 master
    SketchPlan plan;
    plan.k = 0;
    EngineConfig cfg;
    cfg.quantize = true;
    cfg.accum = AccumMode::Bf16;
    cfg.rounding = Rounding::Stochastic;
    cfg.decompose_activations = false;
    cfg.decompose_gradients = false;
    cfg.seed = 21;
    cfg.step = 17;
    cfg.layer = 4;

    const ForwardResult fr = engine_forward(x, w, plan, cfg, nullptr);
    const uint64_t sx = quant_stream_seed(cfg.seed, cfg.step, cfg.layer, QuantRole::X);
    const uint64_t sw = quant_stream_seed(cfg.seed, cfg.step, cfg.layer, QuantRole::W);
    const DenseMatrix y_ref =
        quantized_gemm(x, w.residual, cfg.block_size, cfg.rounding, sx, sw, cfg.accum);
    for (Index i = 0; i < l; ++i)
        for (Index j = 0; j < n; ++j) CHECK(fr.y(i, j) == y_ref(i, j));

    const DenseMatrix d = random_gaussian(l, n, 409, 0.4);
    const MetisGradients g = engine_backward(d, fr.cache, w, plan, cfg, nullptr);
    const uint64_t sd = quant_stream_seed(cfg.seed, cfg.step, cfg.layer, QuantRole::D);
    const uint64_t swt = quant_stream_seed(cfg.seed, cfg.step, cfg.layer, QuantRole::WT);
    const uint64_t sxt = quant_stream_seed(cfg.seed, cfg.step, cfg.layer, QuantRole::XT);
    const DenseMatrix dx_ref = quantized_gemm(d, transpose(w.residual), cfg.block_size,
                                              cfg.rounding, sd, swt, cfg.accum);
    const DenseMatrix dw_ref = quantized_gemm(transpose(x), d, cfg.block_size,
                                              cfg.rounding, sxt, sd, cfg.accum);
    for (Index i = 0; i < l; ++i)
        for (Index j = 0; j < m; ++j) CHECK(g.dx(i, j) == dx_ref(i, j));
    for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < n; ++j) CHECK(g.dw_r(i, j) == dw_ref(i, j));
    CHECK(g.du.cols() == 0);
    CHECK(g.ds.empty());
}

TEST_CASE("quantized forward is deterministic in (seed, step, layer)") {
    const DenseMatrix x = random_gaussian(16, 32, 410, 1.0);
    const MetisWeight w = make_metis_weight(random_gaussian(32, 8, 411), 1);
    SketchPlan plan;
    plan.k = 1;
    plan.oversample = 2;
    EngineConfig cfg;
    cfg.seed = 5;
    cfg.step = 2;
    cfg.layer = 1;
    cfg.rounding = Rounding::Stochastic;
    const ForwardResult a = engine_forward(x, w, plan, cfg, nullptr);
    const ForwardResult b = engine_forward(x, w, plan, cfg, nullptr);
    for (Index i = 0; i < a.y.rows(); ++i)
        for (Index j = 0; j < a.y.cols(); ++j) CHECK(a.y(i, j) == b.y(i, j));
    cfg.step = 3;
    const ForwardResult c = engine_forward(x, w, plan, cfg, nullptr);
    bool identical = true;
    for (Index i = 0; i < a.y.rows(); ++i)
        for (Index j = 0; j < a.y.cols(); ++j) identical = identical && a.y(i, j) == c.y(i, j);
    CHECK_FALSE(identical);
}

TEST_CASE("quantized metis forward beats direct on an anisotropic instance") {
    // One representative instance; the 100-trial statistical version lives
    // in the acceptance run.
    const Index l = 128, m = 64, n = 32;
    const DenseMatrix x = planted_sequence_activations(l, m, 4, 20.0, 4, 0.7, 412);
    const DenseMatrix w0 = planted_anisotropic_matrix(m, n, 3, 25.0, 0.5, 0.05, 413);
    const DenseMatrix ref = gemm(x, w0, AccumMode::Wide, nullptr);

    const MetisWeight wm = make_metis_weight(w0, 3);
    SketchPlan plan;
    plan.k = 4;
    plan.oversample = 4;
    plan.seed = 7;
    EngineConfig cfg;
    cfg.seed = 31;
    cfg.seq_len = 4;
    cfg.accum = AccumMode::Bf16;
    cfg.rounding = Rounding::NearestEven;
    const DenseMatrix y_metis = engine_forward(x, wm, plan, cfg, nullptr).y;

    const MetisWeight wd = make_metis_weight(w0, 0);
    EngineConfig dcfg = cfg;
    dcfg.decompose_activations = false;
    dcfg.decompose_gradients = false;
    const DenseMatrix y_direct = engine_forward(x, wd, plan, dcfg, nullptr).y;

    double err_m = 0.0, err_d = 0.0;
    for (Index i = 0; i < l; ++i)
        for (Index j = 0; j < n; ++j) {
            err_m += std::pow(y_metis(i, j) - ref(i, j), 2);
            err_d += std::pow(y_direct(i, j) - ref(i, j), 2);
        }
    CHECK(err_m < err_d);
}

TEST_CASE("make_metis_weight split reconstructs the dense weight") {
    const DenseMatrix w0 = random_gaussian(24, 16, 414, 0.6);
    const MetisWeight wide = make_metis_weight(w0, 4, Format::Wide);
    const DenseMatrix rec = effective_weight(wide);
    for (Index i = 0; i < 24; ++i)
        for (Index j = 0; j < 16; ++j)
            CHECK(rec(i, j) == doctest::Approx(w0(i, j)).epsilon(1e-10));
    CHECK(wide.rank() == 4);
    // bf16 masters reconstruct within grid error.
    const MetisWeight narrow = make_metis_weight(w0, 4, Format::Bf16);
    CHECK(narrow.u.format_tag() == Format::Bf16);
    const DenseMatrix rec2 = effective_weight(narrow);
    for (Index i = 0; i < 24; ++i)
        for (Index j = 0; j < 16; ++j)
            CHECK(rec2(i, j) == doctest::Approx(w0(i, j)).epsilon(0.05));
    const MetisWeight flat = make_metis_weight(w0, 0);
    CHECK(flat.rank() == 0);
    CHECK(flat.u.cols() == 0);
}

TEST_CASE("sgd step updates and re-rounds to the master grid") {
    MetisWeight w = make_metis_weight(random_gaussian(8, 4, 415), 2);
    MetisGradients g;
    g.dx = DenseMatrix(1, 8);
    g.du = DenseMatrix(8, 2);
    g.dv = DenseMatrix(4, 2);
    g.dw_r = DenseMatrix(8, 4);
    g.ds = {0.5, -0.25};
    g.du(3, 1) = 2.0;
    g.dw_r(2, 2) = -1.0;
    OptimizerConfig opt;
    opt.kind = OptimizerConfig::Kind::Sgd;
    opt.lr = 0.5;
    MetisOptState st;
    const double u_before = w.u(3, 1);
    const double r_before = w.residual(2, 2);
    const double s_before = w.s[0];
    apply_updates(w, g, opt, st);
    CHECK(w.u(3, 1) == bf16_round(u_before - 1.0));
    CHECK(w.residual(2, 2) == bf16_round(r_before + 0.5));
    CHECK(w.s[0] == s_before - 0.25);  // diagonal stays wide, no rounding
    CHECK(w.s[1] == doctest::Approx(w.s[1]));
}

TEST_CASE("adam step matches a scalar reference implementation") {
    std::vector<double> w{1.0, -2.0, 0.5};
    std::vector<double> g{0.3, -0.1, 0.02};
    AdamState st;
    OptimizerConfig opt;
    opt.lr = 0.01;
    opt.master = Format::Wide;
    adam_step(std::span<double>(w), std::span<const double>(g), st, 1, opt);
    for (size_t i = 0; i < w.size(); ++i) {
        const double m = 0.1 * g[i];
        const double v = 0.001 * g[i] * g[i];
        const double mh = m / (1.0 - 0.9);
        const double vh = v / (1.0 - 0.999);
        const double want =
            (i == 0 ? 1.0 : i == 1 ? -2.0 : 0.5) - 0.01 * mh / (std::sqrt(vh) + 1e-8);
        CHECK(w[i] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("non-finite gradients are rejected with the tensor named") {
    MetisWeight w = make_metis_weight(random_gaussian(4, 4, 416), 1);
    MetisGradients g;
    g.dx = DenseMatrix(1, 4);
    g.du = DenseMatrix(4, 1);
    g.dv = DenseMatrix(4, 1);
    g.dw_r = DenseMatrix(4, 4);
    g.ds = {0.0};
    g.dw_r(1, 1) = std::nan("");
    OptimizerConfig opt;
    MetisOptState st;
    CHECK_THROWS_WITH_AS(apply_updates(w, g, opt, st),
                         doctest::Contains("W_r"), std::runtime_error);
}

TEST_CASE("op counter: overhead ratio small at scale, zero when k is zero") {
    SketchPlan plan;
    plan.k = 15;  // 1.5% of 1024
    plan.oversample = 8;
    plan.sample_ratio = 0.01;
    const CostReport big = op_counter(GemmShapes{4096, 1024, 1024}, plan, 1);
    CHECK(big.ratio < 0.05);
    CHECK(big.ratio > 0.0);
    CHECK(big.baseline == doctest::Approx(3.0 * 4096 * 1024 * 1024));
    CHECK(big.sampled_rows == 41);  // round(0.01 * 4096)

    SketchPlan none;
    none.k = 0;
    const CostReport zero = op_counter(GemmShapes{512, 64, 32}, none, 1);
    CHECK(zero.overhead == 0.0);
    CHECK(zero.ratio == 0.0);

    // Sampling counts whole sequences.
    SketchPlan seq = plan;
    seq.k = 4;
    const CostReport grouped = op_counter(GemmShapes{4096, 64, 32}, seq, 64);
    CHECK(grouped.sampled_rows == 64);  // one sequence of 64 rows
}

TEST_CASE("forward cost model matches the measured multiply count at rank 0") {
    const DenseMatrix x = random_gaussian(32, 32, 417);
    const MetisWeight w = make_metis_weight(random_gaussian(32, 16, 418), 0);
    SketchPlan plan;
    plan.k = 0;
    EngineConfig cfg;
    cfg.decompose_activations = false;
    cfg.decompose_gradients = false;
    OpCounter counter;
    engine_forward(x, w, plan, cfg, &counter);
    CHECK(counter.multiplies == 32ull * 32ull * 16ull);
}

} // TEST_SUITE
