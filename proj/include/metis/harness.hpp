// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "metis/datasets.hpp"
#include "metis/models.hpp"
#include "metis/spectral.hpp"

namespace metis {

// Invalid or unparseable experiment configuration. The CLI maps this to its
// config-error exit code.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class ModelKind : uint8_t { Mlp = 0, TinyTransformer = 1 };
const char* model_kind_name(ModelKind k);

// Per-tensor decomposition switches. Only the Metis regime reads them; the
// other regimes have nothing to toggle.
struct AblationFlags {
    bool decompose_weights = true;
    bool decompose_activations = true;
    bool decompose_gradients = true;
    bool sparse_sampling = true;
};

struct ExperimentConfig {
    ModelKind model = ModelKind::Mlp;
    Regime regime = Regime::Fp4Metis;

    // Regression task: dims and generator knobs. The generator seed is
    // always derived from `seed`; a seed set here is ignored.
    AnisoDataConfig data;

    // Transformer dims.
    Index layers = 2;
    Index dim = 128;
    Index ffn = 256;
    Index heads = 4;
    Index seq = 64;
    Index vocab = 64;
    Index batch = 8;
    std::string text_path;  // byte corpus; empty = planted Markov stream

    double rank_fraction = 0.015;  // of min(fan_in, fan_out), weights and sketch alike
    AblationFlags flags;
    SketchPlan plan;  // oversample / sample_ratio / power_iters; k derived per layer
    Rounding rounding = Rounding::Stochastic;
    AccumMode accum = AccumMode::Bf16;
    uint64_t steps = 2000;
    double lr = 2e-3;
    OptimizerConfig::Kind optimizer = OptimizerConfig::Kind::Adam;
    uint64_t seed = 1;
    Index eval_batches = 4;
};

// The desk-scale regression benchmark every loss-gap number quotes:
// 64-wide anisotropic inputs with a planted realizable teacher, 512 rows
// per step, 2000 Adam steps.
ExperimentConfig standard_benchmark(uint64_t seed, Regime regime);

struct LayerReport {
    std::string name;
    Index in_dim = 0;
    Index out_dim = 0;
    Index weight_rank = 0;
    double act_zero_fraction = 0.0;   // from the final evaluation forward
    double grad_zero_fraction = 0.0;  // from the last training backward
    double value_rel_error = 0.0;     // forward-product spectral distortion vs wide
    double vector_cosine = 1.0;
    double alignment = 1.0;           // sampled vs full activation subspace
    CostReport cost;
};

struct RunReport {
    ExperimentConfig config;
    std::vector<double> loss_series;  // one entry per completed step
    // Last recorded losses. On divergence these hold the last finite values
    // (0 when no step completed); diverged_at_step carries the abort index.
    double final_train_loss = 0.0;
    double final_eval_loss = 0.0;
    std::vector<LayerReport> layers;
    uint64_t total_multiplies = 0;  // quantized-path GeMM multiplies
    double wall_seconds = 0.0;
    std::optional<uint64_t> diverged_at_step;
};

// Train under the configured regime. Deterministic given the config;
// non-finite or exploding (> 1e30) loss aborts the run with the step index
// recorded instead of throwing.
RunReport run_experiment(const ExperimentConfig& cfg);

struct RegimeComparison {
    std::vector<RunReport> runs;  // bf16, fp4_direct, fp4_hadamard, fp4_metis
    double gap_direct = 0.0;      // final eval loss minus the bf16 run's
    double gap_hadamard = 0.0;
    double gap_metis = 0.0;
};
RegimeComparison compare_regimes(const ExperimentConfig& base);

struct RankSweepEntry {
    double fraction = 0.0;
    RunReport report;
};
struct RankSweepReport {
    std::vector<RankSweepEntry> entries;
    double tolerance = 0.02;
    double band_floor = 0.015;    // fractions below this are reported, not banded
    double max_rel_spread = 0.0;  // over final train losses of banded entries
    bool within_band = true;
};
RankSweepReport rank_sweep(const ExperimentConfig& base, const std::vector<double>& fractions,
                           double tolerance = 0.02);

struct HistogramSummary {
    uint64_t count = 0;
    double min = 0.0, max = 0.0;
    double mean = 0.0, stddev = 0.0;
    double p10 = 0.0, p90 = 0.0;
    std::vector<double> edges;  // bins + 1 monotone values
    std::vector<uint64_t> counts;
};
HistogramSummary histogram(std::span<const double> values, int bins = 64);

struct ComponentReport {
    Index index = 0;    // 0-based component number
    double value = 0.0; // its singular value
    HistogramSummary hist;
};

struct TensorAnalysis {
    Index rows = 0, cols = 0;
    std::vector<double> spectrum;
    ElbowResult elbow;
    HistogramSummary full;
    std::vector<ComponentReport> components;  // indices {0,16,128,1024} within range
    Index k = 0;
    HistogramSummary residual;       // after removing the top k components
    double range_ratio = 0.0;        // full (max-min) over residual (max-min)
    double interdecile_ratio = 0.0;  // full (p90-p10) over residual (p90-p10)
};
TensorAnalysis analyze_tensor(const DenseMatrix& m, Index k);

// JSON payload emitters; report kinds are wrapped in the envelope with a
// config fingerprint. All numeric fields print at 17 significant digits.
std::string experiment_config_json(const ExperimentConfig& cfg);
std::string run_report_json(const RunReport& r);
std::string regime_comparison_json(const RegimeComparison& r);
std::string rank_sweep_json(const RankSweepReport& r);
std::string tensor_analysis_json(const TensorAnalysis& a);
std::string loss_series_csv(const RunReport& r);

// Config files use the same field names experiment_config_json emits.
// Unknown keys are errors; .toml paths get a clear pointer at JSON.
ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::string& path);

} // namespace metis
