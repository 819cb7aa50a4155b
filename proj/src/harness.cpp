// SPDX-License-Identifier: Apache-2.0
#include "metis/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <initializer_list>
#include <utility>

#include "json.hpp"

#include "metis/report_io.hpp"

namespace metis {

namespace {

constexpr double kDivergeLimit = 1e30;

[[noreturn]] void bad_config(const std::string& msg) { throw ConfigError("config: " + msg); }

Index rank_from_fraction(double fraction, Index a, Index b) {
    const double k = fraction * static_cast<double>(std::min(a, b));
    return std::max<Index>(1, static_cast<Index>(std::llround(k)));
}

void validate(const ExperimentConfig& cfg) {
    if (cfg.steps < 1) bad_config("steps must be >= 1");
    if (!std::isfinite(cfg.lr) || cfg.lr < 0.0) bad_config("lr must be finite and >= 0");
    if (cfg.eval_batches < 1) bad_config("eval_batches must be >= 1");
    if (!(cfg.rank_fraction > 0.0) || cfg.rank_fraction > 0.5)
        bad_config("rank_fraction must be in (0, 0.5]");
    if (!(cfg.plan.sample_ratio > 0.0) || cfg.plan.sample_ratio > 1.0)
        bad_config("plan.sample_ratio must be in (0, 1]");
    if (cfg.plan.oversample < 0) bad_config("plan.oversample must be >= 0");
    if (cfg.plan.power_iters < 0) bad_config("plan.power_iters must be >= 0");
    if (cfg.model == ModelKind::Mlp) {
        const AnisoDataConfig& d = cfg.data;
        if (d.input_dim < 1 || d.hidden_dim < 1 || d.output_dim < 1 || d.latent_dim < 1)
            bad_config("data dims must be positive");
        if (d.batch_rows < 1 || d.seq_len < 1)
            bad_config("data.batch_rows and data.seq_len must be >= 1");
        if (!(d.rho > -1.0 && d.rho < 1.0)) bad_config("data.rho must be in (-1, 1)");
        if (!(d.noise >= 0.0)) bad_config("data.noise must be >= 0");
    } else {
        if (cfg.layers < 1 || cfg.dim < 1 || cfg.ffn < 1 || cfg.heads < 1 || cfg.seq < 1 ||
            cfg.batch < 1)
            bad_config("transformer dims must be positive");
        if (cfg.dim % cfg.heads != 0) bad_config("transformer dim must divide into heads");
        if (cfg.text_path.empty() && cfg.vocab < 2)
            bad_config("transformer vocab must be >= 2");
    }
}

EngineConfig engine_for(const ExperimentConfig& cfg) {
    EngineConfig e;
    e.quantize = cfg.regime != Regime::Bf16;
    e.accum = cfg.accum;
    e.rounding = cfg.rounding;
    e.block_size = 16;
    e.decompose_activations = cfg.flags.decompose_activations;
    e.decompose_gradients = cfg.flags.decompose_gradients;
    e.sparse_sampling = cfg.flags.sparse_sampling;
    e.seq_len = cfg.model == ModelKind::Mlp ? cfg.data.seq_len : cfg.seq;
    e.seed = cfg.seed;
    return e;
}

OptimizerConfig optimizer_for(const ExperimentConfig& cfg, const EngineConfig& engine) {
    OptimizerConfig opt;
    opt.kind = cfg.optimizer;
    opt.lr = cfg.lr;
    opt.master = param_master(engine);
    return opt;
}

// Distortion, alignment, cost and underflow statistics for one trained
// layer, probed with the activation distribution it actually saw.
LayerReport probe_layer(QuantLinear& layer, const std::string& name,
                        const ExperimentConfig& cfg, Index seq_len, Index plan_k,
                        Index expected_rows, uint64_t probe_step, bool skip_probe) {
    LayerReport r;
    r.name = name;
    r.in_dim = layer.in_dim();
    r.out_dim = layer.out_dim();
    r.weight_rank = layer.weight().rank();
    r.act_zero_fraction = layer.act_zero_fraction();
    r.grad_zero_fraction = layer.grad_zero_fraction();

    const Index rows = layer.input_cache().size() > 0 ? layer.input_cache().rows()
                                                      : expected_rows;
    SketchPlan lp = cfg.plan;
    lp.k = plan_k;
    r.cost = op_counter(GemmShapes{rows, r.in_dim, r.out_dim}, lp, seq_len);

    if (skip_probe || layer.input_cache().size() == 0) return r;
    const DenseMatrix input = layer.input_cache();
    const DenseMatrix y_hat = layer.forward(input, probe_step);
    const DenseMatrix y_ref = gemm(input, layer.dense_weight(), AccumMode::Wide, nullptr);
    const Index kd = std::min<Index>(8, std::min(y_ref.rows(), y_ref.cols()));
    if (kd >= 1 && frobenius_norm(y_ref) > 0.0) {
        const DistortionResult d = spectral_distortion(y_ref, y_hat, kd);
        double err = 0.0, cos = 0.0;
        Index n = 0;
        for (size_t i = 0; i < d.skipped.size(); ++i) {
            if (d.skipped[i]) continue;
            err += d.value_rel_error[i];
            cos += d.vector_cosine[i];
            n += 1;
        }
        if (n > 0) {
            r.value_rel_error = err / static_cast<double>(n);
            r.vector_cosine = cos / static_cast<double>(n);
        }
    }

    if (cfg.regime == Regime::Fp4Metis && cfg.flags.decompose_activations && plan_k >= 1) {
        SketchPlan ps = lp;
        ps.seed = derive_seed(cfg.seed, 0xa119ull, static_cast<uint64_t>(r.in_dim),
                              static_cast<uint64_t>(r.out_dim));
        ps.k = std::min(ps.k, std::min(input.rows(), input.cols()));
        const DenseMatrix sub = sampled_subspace(input, ps, seq_len);
        SketchPlan pf = ps;
        pf.sample_ratio = 1.0;
        const DenseMatrix full = sampled_subspace(input, pf, seq_len);
        if (sub.cols() >= 1 && sub.cols() == full.cols())
            r.alignment = subspace_alignment(sub, full);
    }
    return r;
}

RunReport run_mlp(const ExperimentConfig& cfg) {
    AnisoDataConfig dc = cfg.data;
    dc.seed = derive_seed(cfg.seed, 0xdaull);
    const AnisoRegressionData data(dc);

    const EngineConfig engine = engine_for(cfg);
    MlpConfig mc;
    mc.in_dim = dc.input_dim;
    mc.hidden_dim = dc.hidden_dim;
    mc.out_dim = dc.output_dim;
    mc.regime = cfg.regime;
    const bool metis = cfg.regime == Regime::Fp4Metis;
    const bool split_w = metis && cfg.flags.decompose_weights;
    mc.metis_rank_hidden =
        split_w ? rank_from_fraction(cfg.rank_fraction, mc.in_dim, mc.hidden_dim) : 0;
    mc.metis_rank_out =
        split_w ? rank_from_fraction(cfg.rank_fraction, mc.hidden_dim, mc.out_dim) : 0;
    mc.plan = cfg.plan;
    mc.plan.k = rank_from_fraction(cfg.rank_fraction, mc.in_dim, mc.hidden_dim);
    mc.engine = engine;
    mc.seed = cfg.seed;
    // The benchmark trains from a teacher-aligned warm start: dominant read
    // path and head column at full strength, weak output gains scaled down.
    // The dominant structure is therefore present at the init-time weight
    // split, and the remaining learning is the part each regime's rounding
    // floor can hide.
    constexpr double kWarmStart = 0.4;
    const auto init = data.warm_init(kWarmStart);
    mc.init_w1 = init.first;
    mc.init_w2 = init.second;
    MlpModel model(mc);
    const OptimizerConfig opt = optimizer_for(cfg, engine);

    RunReport report;
    report.config = cfg;
    for (uint64_t step = 0; step < cfg.steps; ++step) {
        try {
            const MlpBatch batch = data.batch(step);
            const DenseMatrix y = model.forward(batch.x, step);
            const double loss = model.backward_mse(y, batch.target);
            if (!std::isfinite(loss) || loss > kDivergeLimit) {
                report.diverged_at_step = step;
                break;
            }
            report.loss_series.push_back(loss);
            model.apply_grads(opt);
        } catch (const std::exception&) {
            // Quantizing a non-finite operand or applying a non-finite
            // gradient is a divergence, not a crash.
            report.diverged_at_step = step;
            break;
        }
    }
    if (!report.loss_series.empty()) report.final_train_loss = report.loss_series.back();

    const bool diverged = report.diverged_at_step.has_value();
    if (!diverged) {
        double total = 0.0;
        for (Index i = 0; i < cfg.eval_batches; ++i) {
            const uint64_t step = cfg.steps + static_cast<uint64_t>(i);
            const MlpBatch batch = data.batch(step);
            const DenseMatrix y = model.forward(batch.x, step);
            double mse = 0.0;
            for (Index r = 0; r < y.rows(); ++r)
                for (Index c = 0; c < y.cols(); ++c) {
                    const double e = y(r, c) - batch.target(r, c);
                    mse += e * e;
                }
            total += mse / static_cast<double>(y.size());
        }
        report.final_eval_loss = total / static_cast<double>(cfg.eval_batches);
    }

    report.total_multiplies = model.layer1().multiplies() + model.layer2().multiplies();
    const uint64_t probe_step = cfg.steps + 10000;
    report.layers.push_back(probe_layer(model.layer1(), "l1", cfg, dc.seq_len, mc.plan.k,
                                        dc.batch_rows, probe_step, diverged));
    report.layers.push_back(probe_layer(model.layer2(), "l2", cfg, dc.seq_len, mc.plan.k,
                                        dc.batch_rows, probe_step, diverged));
    return report;
}

RunReport run_transformer(const ExperimentConfig& cfg) {
    const TokenData tokens =
        cfg.text_path.empty()
            ? TokenData(cfg.vocab, cfg.seq, cfg.batch, derive_seed(cfg.seed, 0xdbull))
            : TokenData(cfg.text_path, cfg.seq, cfg.batch, derive_seed(cfg.seed, 0xdbull));

    const EngineConfig engine = engine_for(cfg);
    TransformerConfig tc;
    tc.vocab = tokens.vocab();
    tc.dim = cfg.dim;
    tc.heads = cfg.heads;
    tc.ffn = cfg.ffn;
    tc.seq = cfg.seq;
    tc.batch = cfg.batch;
    tc.layers = cfg.layers;
    tc.regime = cfg.regime;
    tc.rank_fraction = cfg.rank_fraction;
    tc.decompose_weights = cfg.flags.decompose_weights;
    tc.plan = cfg.plan;
    tc.engine = engine;
    tc.seed = cfg.seed;
    TransformerModel model(tc);
    const OptimizerConfig opt = optimizer_for(cfg, engine);

    RunReport report;
    report.config = cfg;
    for (uint64_t step = 0; step < cfg.steps; ++step) {
        try {
            const TokenBatch batch = tokens.batch(step);
            const double loss = model.train_step_loss(batch.tokens, step);
            if (!std::isfinite(loss) || loss > kDivergeLimit) {
                report.diverged_at_step = step;
                break;
            }
            report.loss_series.push_back(loss);
            model.apply_grads(opt);
        } catch (const std::exception&) {
            report.diverged_at_step = step;
            break;
        }
    }
    if (!report.loss_series.empty()) report.final_train_loss = report.loss_series.back();

    const bool diverged = report.diverged_at_step.has_value();
    if (!diverged) {
        double total = 0.0;
        for (Index i = 0; i < cfg.eval_batches; ++i) {
            const uint64_t step = cfg.steps + static_cast<uint64_t>(i);
            total += model.eval_loss(tokens.batch(step).tokens, step);
        }
        report.final_eval_loss = total / static_cast<double>(cfg.eval_batches);
    }

    static const char* kSlotNames[4] = {"qkv", "attn_out", "ff1", "ff2"};
    const std::vector<QuantLinear*> layers = model.quant_layers();
    for (QuantLinear* l : layers) report.total_multiplies += l->multiplies();
    const uint64_t probe_step = cfg.steps + 10000;
    const bool metis = cfg.regime == Regime::Fp4Metis;
    for (size_t i = 0; i < layers.size(); ++i) {
        QuantLinear* l = layers[i];
        const std::string name =
            "block" + std::to_string(i / 4) + "." + kSlotNames[i % 4];
        const Index plan_k =
            metis ? rank_from_fraction(cfg.rank_fraction, l->in_dim(), l->out_dim()) : 0;
        report.layers.push_back(probe_layer(*l, name, cfg, cfg.seq, plan_k,
                                            cfg.batch * cfg.seq, probe_step, diverged));
    }
    return report;
}

} // namespace

const char* model_kind_name(ModelKind k) {
    switch (k) {
    case ModelKind::Mlp: return "mlp";
    case ModelKind::TinyTransformer: return "tiny_transformer";
    }
    return "unknown";
}

ExperimentConfig standard_benchmark(uint64_t seed, Regime regime) {
    ExperimentConfig cfg;
    cfg.model = ModelKind::Mlp;
    cfg.regime = regime;
    cfg.data = AnisoDataConfig{};
    cfg.rank_fraction = 0.015;
    cfg.plan.oversample = 8;
    cfg.plan.sample_ratio = 0.01;
    cfg.plan.power_iters = 1;
    cfg.rounding = Rounding::Stochastic;
    cfg.accum = AccumMode::Bf16;
    cfg.steps = 2000;
    cfg.lr = 2e-3;
    cfg.optimizer = OptimizerConfig::Kind::Adam;
    cfg.seed = seed;
    cfg.eval_batches = 4;
    return cfg;
}

RunReport run_experiment(const ExperimentConfig& cfg) {
    validate(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    RunReport report =
        cfg.model == ModelKind::Mlp ? run_mlp(cfg) : run_transformer(cfg);
    const auto t1 = std::chrono::steady_clock::now();
    report.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
    return report;
}

RegimeComparison compare_regimes(const ExperimentConfig& base) {
    RegimeComparison out;
    for (Regime r : {Regime::Bf16, Regime::Fp4Direct, Regime::Fp4Hadamard, Regime::Fp4Metis}) {
        ExperimentConfig cfg = base;
        cfg.regime = r;
        out.runs.push_back(run_experiment(cfg));
    }
    const double base_loss = out.runs[0].final_eval_loss;
    out.gap_direct = out.runs[1].final_eval_loss - base_loss;
    out.gap_hadamard = out.runs[2].final_eval_loss - base_loss;
    out.gap_metis = out.runs[3].final_eval_loss - base_loss;
    return out;
}

RankSweepReport rank_sweep(const ExperimentConfig& base, const std::vector<double>& fractions,
                           double tolerance) {
    if (fractions.empty()) bad_config("rank sweep needs at least one fraction");
    for (double f : fractions)
        if (!(f > 0.0) || f > 0.5) bad_config("rank fractions must be in (0, 0.5]");
    RankSweepReport out;
    out.tolerance = tolerance;
    for (double f : fractions) {
        ExperimentConfig cfg = base;
        cfg.rank_fraction = f;
        out.entries.push_back(RankSweepEntry{f, run_experiment(cfg)});
    }
    double lo = 0.0, hi = 0.0;
    Index banded = 0;
    for (const RankSweepEntry& e : out.entries) {
        if (e.fraction < out.band_floor - 1e-12) continue;
        if (e.report.diverged_at_step.has_value()) {
            out.within_band = false;
            continue;
        }
        const double v = e.report.final_train_loss;
        if (banded == 0) {
            lo = hi = v;
        } else {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        banded += 1;
    }
    if (banded >= 2) {
        out.max_rel_spread = (hi - lo) / std::max(std::abs(lo), 1e-12);
        if (out.max_rel_spread > tolerance) out.within_band = false;
    }
    return out;
}

HistogramSummary histogram(std::span<const double> values, int bins) {
    require(bins >= 1, "histogram: bins must be >= 1");
    HistogramSummary h;
    h.count = values.size();
    if (values.empty()) return h;

    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    h.min = sorted.front();
    h.max = sorted.back();
    double sum = 0.0;
    for (double v : sorted) sum += v;
    h.mean = sum / static_cast<double>(sorted.size());
    double var = 0.0;
    for (double v : sorted) var += (v - h.mean) * (v - h.mean);
    h.stddev = std::sqrt(var / static_cast<double>(sorted.size()));
    auto quantile = [&](double t) {
        const double pos = t * static_cast<double>(sorted.size() - 1);
        const size_t lo = static_cast<size_t>(pos);
        const size_t hi = std::min(lo + 1, sorted.size() - 1);
        const double frac = pos - static_cast<double>(lo);
        return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
    };
    h.p10 = quantile(0.10);
    h.p90 = quantile(0.90);

    if (h.max == h.min) {
        h.edges = {h.min, h.max};
        h.counts = {h.count};
        return h;
    }
    h.edges.resize(static_cast<size_t>(bins) + 1);
    for (int i = 0; i <= bins; ++i)
        h.edges[static_cast<size_t>(i)] =
            h.min + (h.max - h.min) * static_cast<double>(i) / static_cast<double>(bins);
    h.counts.assign(static_cast<size_t>(bins), 0);
    const double scale = static_cast<double>(bins) / (h.max - h.min);
    for (double v : values) {
        auto idx = static_cast<int64_t>((v - h.min) * scale);
        idx = std::clamp<int64_t>(idx, 0, bins - 1);
        h.counts[static_cast<size_t>(idx)] += 1;
    }
    return h;
}

namespace {

double range_of(const HistogramSummary& h) { return h.max - h.min; }

// Ratio guarded against an exactly-empty residual; capped so reports stay
// finite.
double safe_ratio(double num, double den) {
    if (num <= 0.0 && den <= 0.0) return 1.0;
    if (den < num * 1e-15) den = num * 1e-15;
    return num / den;
}

} // namespace

TensorAnalysis analyze_tensor(const DenseMatrix& m, Index k) {
    require(m.rows() >= 1 && m.cols() >= 1, "analyze_tensor: empty matrix");
    require(m.all_finite(), "analyze_tensor: non-finite entries");
    require(k >= 0, "analyze_tensor: negative rank");

    TensorAnalysis a;
    a.rows = m.rows();
    a.cols = m.cols();
    const SvdResult svd = svd_full(m);
    a.spectrum = svd.values;

    std::vector<double> positive;
    for (double v : svd.values) {
        if (!(v > 0.0)) break;  // descending, zeros trail
        positive.push_back(v);
    }
    if (positive.size() >= 3) {
        a.elbow = elbow_fraction(positive);
    } else {
        a.elbow.flat = true;
    }

    a.full = histogram(m.data());

    const Index r = static_cast<Index>(svd.values.size());
    for (Index idx : {Index{0}, Index{16}, Index{128}, Index{1024}}) {
        if (idx >= r) continue;
        DenseMatrix comp(m.rows(), m.cols());
        for (Index i = 0; i < m.rows(); ++i)
            for (Index j = 0; j < m.cols(); ++j)
                comp(i, j) = svd.values[static_cast<size_t>(idx)] * svd.left(i, idx) *
                             svd.right(j, idx);
        a.components.push_back(
            ComponentReport{idx, svd.values[static_cast<size_t>(idx)], histogram(comp.data())});
    }

    a.k = std::clamp<Index>(k, 0, r);
    if (a.k >= 1) {
        const SpectralSplit split = split_rank_k(m, a.k);
        a.residual = histogram(split.residual.data());
    } else {
        a.residual = a.full;
    }
    a.range_ratio = safe_ratio(range_of(a.full), range_of(a.residual));
    a.interdecile_ratio = safe_ratio(a.full.p90 - a.full.p10, a.residual.p90 - a.residual.p10);
    return a;
}

namespace {

const char* rounding_tag(Rounding r) {
    return r == Rounding::Stochastic ? "sr" : "rtn";
}

const char* accum_tag(AccumMode m) { return m == AccumMode::Wide ? "wide" : "bf16"; }

const char* optimizer_tag(OptimizerConfig::Kind k) {
    return k == OptimizerConfig::Kind::Adam ? "adam" : "sgd";
}

void write_config_fields(JsonWriter& jw, const ExperimentConfig& cfg) {
    jw.field("model", model_kind_name(cfg.model));
    jw.field("regime", regime_name(cfg.regime));
    jw.field("steps", cfg.steps);
    jw.field("lr", cfg.lr);
    jw.field("seed", cfg.seed);
    jw.field("optimizer", optimizer_tag(cfg.optimizer));
    jw.field("rounding", rounding_tag(cfg.rounding));
    jw.field("accum", accum_tag(cfg.accum));
    jw.field("rank_fraction", cfg.rank_fraction);
    jw.field("eval_batches", static_cast<int64_t>(cfg.eval_batches));
    jw.key("flags").begin_object();
    jw.field("decompose_weights", cfg.flags.decompose_weights);
    jw.field("decompose_activations", cfg.flags.decompose_activations);
    jw.field("decompose_gradients", cfg.flags.decompose_gradients);
    jw.field("sparse_sampling", cfg.flags.sparse_sampling);
    jw.end_object();
    jw.key("plan").begin_object();
    jw.field("oversample", static_cast<int64_t>(cfg.plan.oversample));
    jw.field("sample_ratio", cfg.plan.sample_ratio);
    jw.field("power_iters", cfg.plan.power_iters);
    jw.end_object();
    jw.key("data").begin_object();
    jw.field("input_dim", static_cast<int64_t>(cfg.data.input_dim));
    jw.field("hidden_dim", static_cast<int64_t>(cfg.data.hidden_dim));
    jw.field("output_dim", static_cast<int64_t>(cfg.data.output_dim));
    jw.field("latent_dim", static_cast<int64_t>(cfg.data.latent_dim));
    jw.field("batch_rows", static_cast<int64_t>(cfg.data.batch_rows));
    jw.field("seq_len", static_cast<int64_t>(cfg.data.seq_len));
    jw.field("rho", cfg.data.rho);
    jw.field("noise", cfg.data.noise);
    jw.field("label_noise", cfg.data.label_noise);
    jw.field("direction_support", static_cast<int64_t>(cfg.data.direction_support));
    jw.number_array("amplitudes", cfg.data.amplitudes);
    jw.end_object();
    jw.key("transformer").begin_object();
    jw.field("layers", static_cast<int64_t>(cfg.layers));
    jw.field("dim", static_cast<int64_t>(cfg.dim));
    jw.field("ffn", static_cast<int64_t>(cfg.ffn));
    jw.field("heads", static_cast<int64_t>(cfg.heads));
    jw.field("seq", static_cast<int64_t>(cfg.seq));
    jw.field("vocab", static_cast<int64_t>(cfg.vocab));
    jw.field("batch", static_cast<int64_t>(cfg.batch));
    jw.field("text_path", cfg.text_path);
    jw.end_object();
}

void write_histogram(JsonWriter& jw, const std::string& key, const HistogramSummary& h) {
    jw.key(key).begin_object();
    jw.field("count", h.count);
    jw.field("min", h.min);
    jw.field("max", h.max);
    jw.field("mean", h.mean);
    jw.field("stddev", h.stddev);
    jw.field("p10", h.p10);
    jw.field("p90", h.p90);
    jw.number_array("edges", h.edges);
    jw.begin_array("counts");
    for (uint64_t c : h.counts) jw.value(c);
    jw.end_array();
    jw.end_object();
}

void write_run_report(JsonWriter& jw, const RunReport& r) {
    jw.begin_object();
    jw.key("config").begin_object();
    write_config_fields(jw, r.config);
    jw.end_object();
    jw.field("diverged", r.diverged_at_step.has_value());
    if (r.diverged_at_step.has_value())
        jw.field("diverged_at_step", *r.diverged_at_step);
    jw.number_array("loss_series", r.loss_series);
    jw.field("final_train_loss", r.final_train_loss);
    jw.field("final_eval_loss", r.final_eval_loss);
    jw.field("total_multiplies", r.total_multiplies);
    jw.field("wall_seconds", r.wall_seconds);
    jw.begin_array("layers");
    for (const LayerReport& l : r.layers) {
        jw.begin_object();
        jw.field("name", l.name);
        jw.field("in_dim", static_cast<int64_t>(l.in_dim));
        jw.field("out_dim", static_cast<int64_t>(l.out_dim));
        jw.field("weight_rank", static_cast<int64_t>(l.weight_rank));
        jw.field("act_zero_fraction", l.act_zero_fraction);
        jw.field("grad_zero_fraction", l.grad_zero_fraction);
        jw.field("value_rel_error", l.value_rel_error);
        jw.field("vector_cosine", l.vector_cosine);
        jw.field("alignment", l.alignment);
        jw.key("cost").begin_object();
        jw.field("baseline", l.cost.baseline);
        jw.field("forward_mixed", l.cost.forward_mixed);
        jw.field("backward_mixed", l.cost.backward_mixed);
        jw.field("decomposition", l.cost.decomposition);
        jw.field("overhead", l.cost.overhead);
        jw.field("ratio", l.cost.ratio);
        jw.field("k", static_cast<int64_t>(l.cost.k));
        jw.field("sampled_rows", static_cast<int64_t>(l.cost.sampled_rows));
        jw.end_object();
        jw.end_object();
    }
    jw.end_array();
    jw.end_object();
}

std::string config_hash(const ExperimentConfig& cfg) {
    return fnv1a_hex(experiment_config_json(cfg));
}

} // namespace

std::string experiment_config_json(const ExperimentConfig& cfg) {
    JsonWriter jw;
    jw.begin_object();
    write_config_fields(jw, cfg);
    jw.end_object();
    return jw.str();
}

std::string run_report_json(const RunReport& r) {
    JsonWriter jw;
    write_run_report(jw, r);
    return envelope_json("run_report", config_hash(r.config), jw.str());
}

std::string regime_comparison_json(const RegimeComparison& r) {
    JsonWriter jw;
    jw.begin_object();
    jw.field("gap_direct", r.gap_direct);
    jw.field("gap_hadamard", r.gap_hadamard);
    jw.field("gap_metis", r.gap_metis);
    jw.begin_array("runs");
    for (const RunReport& run : r.runs) write_run_report(jw, run);
    jw.end_array();
    jw.end_object();
    const std::string hash =
        r.runs.empty() ? fnv1a_hex("") : config_hash(r.runs.front().config);
    return envelope_json("regime_comparison", hash, jw.str());
}

std::string rank_sweep_json(const RankSweepReport& r) {
    JsonWriter jw;
    jw.begin_object();
    jw.field("tolerance", r.tolerance);
    jw.field("band_floor", r.band_floor);
    jw.field("max_rel_spread", r.max_rel_spread);
    jw.field("within_band", r.within_band);
    jw.begin_array("entries");
    for (const RankSweepEntry& e : r.entries) {
        jw.begin_object();
        jw.field("fraction", e.fraction);
        jw.key("report");
        write_run_report(jw, e.report);
        jw.end_object();
    }
    jw.end_array();
    jw.end_object();
    const std::string hash =
        r.entries.empty() ? fnv1a_hex("") : config_hash(r.entries.front().report.config);
    return envelope_json("rank_sweep", hash, jw.str());
}

std::string tensor_analysis_json(const TensorAnalysis& a) {
    JsonWriter jw;
    jw.begin_object();
    jw.field("rows", static_cast<int64_t>(a.rows));
    jw.field("cols", static_cast<int64_t>(a.cols));
    jw.number_array("spectrum", a.spectrum);
    jw.key("elbow").begin_object();
    jw.field("k_star", static_cast<int64_t>(a.elbow.k_star));
    jw.field("fraction", a.elbow.fraction);
    jw.field("curvature", a.elbow.curvature);
    jw.field("flat", a.elbow.flat);
    jw.end_object();
    write_histogram(jw, "full", a.full);
    jw.begin_array("components");
    for (const ComponentReport& c : a.components) {
        jw.begin_object();
        jw.field("index", static_cast<int64_t>(c.index));
        jw.field("value", c.value);
        write_histogram(jw, "hist", c.hist);
        jw.end_object();
    }
    jw.end_array();
    jw.field("k", static_cast<int64_t>(a.k));
    write_histogram(jw, "residual", a.residual);
    jw.field("range_ratio", a.range_ratio);
    jw.field("interdecile_ratio", a.interdecile_ratio);
    jw.end_object();
    return envelope_json("tensor_analysis", fnv1a_hex(""), jw.str());
}

std::string loss_series_csv(const RunReport& r) {
    std::vector<double> steps(r.loss_series.size());
    for (size_t i = 0; i < steps.size(); ++i) steps[i] = static_cast<double>(i);
    return csv_series({"step", "loss"}, {steps, r.loss_series});
}

namespace {

using nlohmann::json;

void check_keys(const json& j, const char* where,
                std::initializer_list<const char*> allowed) {
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (item.key() == a) {
                ok = true;
                break;
            }
        if (!ok) bad_config("unknown key '" + item.key() + "' in " + where);
    }
}

ModelKind parse_model_kind(const std::string& s) {
    if (s == "mlp") return ModelKind::Mlp;
    if (s == "tiny_transformer") return ModelKind::TinyTransformer;
    bad_config("unknown model '" + s + "'");
}

Regime parse_regime(const std::string& s) {
    if (s == "bf16") return Regime::Bf16;
    if (s == "fp4_direct") return Regime::Fp4Direct;
    if (s == "fp4_hadamard") return Regime::Fp4Hadamard;
    if (s == "fp4_metis") return Regime::Fp4Metis;
    bad_config("unknown regime '" + s + "'");
}

Rounding parse_rounding(const std::string& s) {
    if (s == "sr") return Rounding::Stochastic;
    if (s == "rtn") return Rounding::NearestEven;
    bad_config("unknown rounding '" + s + "' (expected sr or rtn)");
}

AccumMode parse_accum(const std::string& s) {
    if (s == "bf16") return AccumMode::Bf16;
    if (s == "wide") return AccumMode::Wide;
    bad_config("unknown accum '" + s + "' (expected bf16 or wide)");
}

OptimizerConfig::Kind parse_optimizer(const std::string& s) {
    if (s == "adam") return OptimizerConfig::Kind::Adam;
    if (s == "sgd") return OptimizerConfig::Kind::Sgd;
    bad_config("unknown optimizer '" + s + "' (expected adam or sgd)");
}

} // namespace

ExperimentConfig parse_experiment_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        bad_config(std::string("JSON parse failed: ") + e.what());
    }
    ExperimentConfig cfg;
    try {
        if (!j.is_object()) bad_config("top level must be an object");
        check_keys(j, "config",
                   {"model", "regime", "steps", "lr", "seed", "optimizer", "rounding",
                    "accum", "rank_fraction", "eval_batches", "flags", "plan", "data",
                    "transformer"});
        if (j.contains("model")) cfg.model = parse_model_kind(j["model"].get<std::string>());
        if (j.contains("regime")) cfg.regime = parse_regime(j["regime"].get<std::string>());
        if (j.contains("steps")) cfg.steps = j["steps"].get<uint64_t>();
        if (j.contains("lr")) cfg.lr = j["lr"].get<double>();
        if (j.contains("seed")) cfg.seed = j["seed"].get<uint64_t>();
        if (j.contains("optimizer"))
            cfg.optimizer = parse_optimizer(j["optimizer"].get<std::string>());
        if (j.contains("rounding"))
            cfg.rounding = parse_rounding(j["rounding"].get<std::string>());
        if (j.contains("accum")) cfg.accum = parse_accum(j["accum"].get<std::string>());
        if (j.contains("rank_fraction")) cfg.rank_fraction = j["rank_fraction"].get<double>();
        if (j.contains("eval_batches")) cfg.eval_batches = j["eval_batches"].get<Index>();
        if (j.contains("flags")) {
            const json& f = j["flags"];
            check_keys(f, "flags",
                       {"decompose_weights", "decompose_activations", "decompose_gradients",
                        "sparse_sampling"});
            if (f.contains("decompose_weights"))
                cfg.flags.decompose_weights = f["decompose_weights"].get<bool>();
            if (f.contains("decompose_activations"))
                cfg.flags.decompose_activations = f["decompose_activations"].get<bool>();
            if (f.contains("decompose_gradients"))
                cfg.flags.decompose_gradients = f["decompose_gradients"].get<bool>();
            if (f.contains("sparse_sampling"))
                cfg.flags.sparse_sampling = f["sparse_sampling"].get<bool>();
        }
        if (j.contains("plan")) {
            const json& p = j["plan"];
            check_keys(p, "plan", {"oversample", "sample_ratio", "power_iters"});
            if (p.contains("oversample")) cfg.plan.oversample = p["oversample"].get<Index>();
            if (p.contains("sample_ratio"))
                cfg.plan.sample_ratio = p["sample_ratio"].get<double>();
            if (p.contains("power_iters")) cfg.plan.power_iters = p["power_iters"].get<int>();
        }
        if (j.contains("data")) {
            const json& d = j["data"];
            check_keys(d, "data",
                       {"input_dim", "hidden_dim", "output_dim", "latent_dim", "batch_rows",
                        "seq_len", "rho", "noise", "label_noise", "direction_support",
                        "amplitudes"});
            if (d.contains("input_dim")) cfg.data.input_dim = d["input_dim"].get<Index>();
            if (d.contains("hidden_dim")) cfg.data.hidden_dim = d["hidden_dim"].get<Index>();
            if (d.contains("output_dim")) cfg.data.output_dim = d["output_dim"].get<Index>();
            if (d.contains("latent_dim")) cfg.data.latent_dim = d["latent_dim"].get<Index>();
            if (d.contains("batch_rows")) cfg.data.batch_rows = d["batch_rows"].get<Index>();
            if (d.contains("seq_len")) cfg.data.seq_len = d["seq_len"].get<Index>();
            if (d.contains("rho")) cfg.data.rho = d["rho"].get<double>();
            if (d.contains("noise")) cfg.data.noise = d["noise"].get<double>();
            if (d.contains("label_noise"))
                cfg.data.label_noise = d["label_noise"].get<double>();
            if (d.contains("direction_support"))
                cfg.data.direction_support = d["direction_support"].get<Index>();
            if (d.contains("amplitudes"))
                cfg.data.amplitudes = d["amplitudes"].get<std::vector<double>>();
        }
        if (j.contains("transformer")) {
            const json& t = j["transformer"];
            check_keys(t, "transformer",
                       {"layers", "dim", "ffn", "heads", "seq", "vocab", "batch", "text_path"});
            if (t.contains("layers")) cfg.layers = t["layers"].get<Index>();
            if (t.contains("dim")) cfg.dim = t["dim"].get<Index>();
            if (t.contains("ffn")) cfg.ffn = t["ffn"].get<Index>();
            if (t.contains("heads")) cfg.heads = t["heads"].get<Index>();
            if (t.contains("seq")) cfg.seq = t["seq"].get<Index>();
            if (t.contains("vocab")) cfg.vocab = t["vocab"].get<Index>();
            if (t.contains("batch")) cfg.batch = t["batch"].get<Index>();
            if (t.contains("text_path")) cfg.text_path = t["text_path"].get<std::string>();
        }
    } catch (const json::exception& e) {
        bad_config(std::string("bad field type: ") + e.what());
    }
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    if (path.size() >= 5 && path.substr(path.size() - 5) == ".toml")
        throw ConfigError("config: TOML is not supported; provide a JSON file with the "
                          "same field names (see experiment_config_json)");
    std::string text;
    try {
        text = read_text_file(path);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return parse_experiment_config(text);
}

} // namespace metis
