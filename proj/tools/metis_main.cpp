// SPDX-License-Identifier: Apache-2.0
// Command-line front end: tensor analysis, standalone quantization, the
// training harness and its sweep/comparison drivers. Exit codes: 0 ok,
// 2 run diverged, 3 bad config, 1 anything else.
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "metis/fp4_quant.hpp"
#include "metis/harness.hpp"
#include "metis/report_io.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitDiverged = 2;
constexpr int kExitConfig = 3;

bool has_suffix(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

metis::DenseMatrix load_any_matrix(const std::string& path) {
    return has_suffix(path, ".csv") ? metis::read_matrix_csv(path)
                                    : metis::read_matrix(path);
}

void emit(const std::string& text, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << text << "\n";
    } else {
        metis::write_text_file(out_path, text);
    }
}

// METIS_SEED overrides the config seed for every run-producing command.
std::optional<uint64_t> env_seed() {
    const char* v = std::getenv("METIS_SEED");
    if (v == nullptr || *v == '\0') return std::nullopt;
    try {
        return std::stoull(v);
    } catch (const std::exception&) {
        throw metis::ConfigError("config: METIS_SEED is not an unsigned integer");
    }
}

metis::ExperimentConfig load_config_with_env(const std::string& path) {
    metis::ExperimentConfig cfg = metis::load_experiment_config(path);
    if (const auto s = env_seed()) cfg.seed = *s;
    return cfg;
}

int cmd_analyze(const std::string& path, double rank_frac, const std::string& out) {
    if (!(rank_frac > 0.0) || rank_frac > 0.5)
        throw metis::ConfigError("config: --rank-frac must be in (0, 0.5]");
    const metis::DenseMatrix m = load_any_matrix(path);
    const metis::Index k = std::max<metis::Index>(
        1, static_cast<metis::Index>(std::llround(rank_frac * std::min(m.rows(), m.cols()))));
    emit(metis::tensor_analysis_json(metis::analyze_tensor(m, k)), out);
    return kExitOk;
}

int cmd_quantize(const std::string& path, const std::string& mode,
                 const std::string& rounding, int block, uint64_t seed,
                 const std::string& out, const std::string& report) {
    if (mode != "nvfp4") throw metis::ConfigError("config: unknown --mode '" + mode + "'");
    metis::Rounding r;
    if (rounding == "rtn") {
        r = metis::Rounding::NearestEven;
    } else if (rounding == "sr") {
        r = metis::Rounding::Stochastic;
    } else {
        throw metis::ConfigError("config: --rounding must be rtn or sr");
    }
    if (block < 1) throw metis::ConfigError("config: --block must be >= 1");

    const metis::DenseMatrix m = load_any_matrix(path);
    const metis::QuantizedBlockTensor q = metis::quantize_nvfp4(m, block, r, seed);
    if (!out.empty()) metis::write_qtensor(out, q);

    const metis::DenseMatrix back = metis::dequantize(q);
    double err2 = 0.0, ref2 = 0.0, max_abs_err = 0.0;
    for (metis::Index i = 0; i < m.rows(); ++i)
        for (metis::Index j = 0; j < m.cols(); ++j) {
            const double e = back(i, j) - m(i, j);
            err2 += e * e;
            ref2 += m(i, j) * m(i, j);
            max_abs_err = std::max(max_abs_err, std::abs(e));
        }
    double scale_min = 0.0, scale_max = 0.0;
    if (!q.scales.empty()) {
        scale_min = scale_max = q.scales.front();
        for (double s : q.scales) {
            scale_min = std::min(scale_min, s);
            scale_max = std::max(scale_max, s);
        }
    }

    metis::JsonWriter jw;
    jw.begin_object();
    jw.field("rows", static_cast<int64_t>(q.rows));
    jw.field("cols", static_cast<int64_t>(q.cols));
    jw.field("block_size", static_cast<int64_t>(q.block_size));
    jw.field("rounding", rounding);
    jw.field("zero_fraction", metis::zero_fraction(m, q));
    jw.field("rel_error_fro", ref2 > 0.0 ? std::sqrt(err2 / ref2) : 0.0);
    jw.field("max_abs_error", max_abs_err);
    jw.field("scale_min", scale_min);
    jw.field("scale_max", scale_max);
    jw.end_object();
    emit(metis::envelope_json("quantize_report", metis::fnv1a_hex(path), jw.str()), report);
    return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& out,
              const std::string& csv) {
    const metis::ExperimentConfig cfg = load_config_with_env(config_path);
    const metis::RunReport report = metis::run_experiment(cfg);
    emit(metis::run_report_json(report), out);
    if (!csv.empty()) metis::write_text_file(csv, metis::loss_series_csv(report));
    return report.diverged_at_step.has_value() ? kExitDiverged : kExitOk;
}

int cmd_sweep_rank(const std::string& config_path, const std::vector<double>& ranks,
                   double tolerance, const std::string& out) {
    const metis::ExperimentConfig cfg = load_config_with_env(config_path);
    const metis::RankSweepReport report = metis::rank_sweep(cfg, ranks, tolerance);
    emit(metis::rank_sweep_json(report), out);
    for (const metis::RankSweepEntry& e : report.entries)
        if (e.report.diverged_at_step.has_value()) return kExitDiverged;
    return kExitOk;
}

int cmd_compare_regimes(const std::string& config_path, const std::string& out) {
    const metis::ExperimentConfig cfg = load_config_with_env(config_path);
    const metis::RegimeComparison report = metis::compare_regimes(cfg);
    emit(metis::regime_comparison_json(report), out);
    for (const metis::RunReport& r : report.runs)
        if (r.diverged_at_step.has_value()) return kExitDiverged;
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Spectral-domain low-bit quantization toolkit"};
    app.require_subcommand(1);

    std::string an_path, an_out;
    double an_frac = 0.015;
    CLI::App* analyze = app.add_subcommand("analyze", "Spectrum and histogram analysis");
    analyze->add_option("matrix-file", an_path, "Input matrix (.csv or binary)")->required();
    analyze->add_option("--rank-frac", an_frac, "Residual split rank as a fraction");
    analyze->add_option("--out", an_out, "Write JSON here instead of stdout");

    std::string q_path, q_mode = "nvfp4", q_rounding = "rtn", q_out, q_report;
    int q_block = 16;
    uint64_t q_seed = 0;
    CLI::App* quantize = app.add_subcommand("quantize", "Block-quantize a matrix");
    quantize->add_option("matrix-file", q_path, "Input matrix (.csv or binary)")->required();
    quantize->add_option("--mode", q_mode, "Quantization mode (nvfp4)");
    quantize->add_option("--rounding", q_rounding, "rtn or sr");
    quantize->add_option("--block", q_block, "Elements per scale block");
    quantize->add_option("--seed", q_seed, "Stochastic rounding seed");
    quantize->add_option("--out", q_out, "Write the quantized tensor here");
    quantize->add_option("--report", q_report, "Write the JSON report here");

    std::string t_config, t_out, t_csv;
    CLI::App* train = app.add_subcommand("train", "Run one training experiment");
    train->add_option("--config", t_config, "Experiment config JSON")->required();
    train->add_option("--out", t_out, "Write the run report here");
    train->add_option("--csv", t_csv, "Write the loss series CSV here");

    std::string s_config, s_out;
    std::vector<double> s_ranks;
    double s_tolerance = 0.02;
    CLI::App* sweep = app.add_subcommand("sweep-rank", "Train across rank fractions");
    sweep->add_option("--config", s_config, "Experiment config JSON")->required();
    sweep->add_option("--ranks", s_ranks, "Rank fractions to sweep")
        ->required()
        ->delimiter(',');
    sweep->add_option("--tolerance", s_tolerance, "Relative loss band");
    sweep->add_option("--out", s_out, "Write the sweep report here");

    std::string c_config, c_out;
    CLI::App* compare = app.add_subcommand("compare-regimes", "Train all four regimes");
    compare->add_option("--config", c_config, "Experiment config JSON")->required();
    compare->add_option("--out", c_out, "Write the comparison report here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (analyze->parsed()) return cmd_analyze(an_path, an_frac, an_out);
        if (quantize->parsed())
            return cmd_quantize(q_path, q_mode, q_rounding, q_block, q_seed, q_out, q_report);
        if (train->parsed()) return cmd_train(t_config, t_out, t_csv);
        if (sweep->parsed()) return cmd_sweep_rank(s_config, s_ranks, s_tolerance, s_out);
        if (compare->parsed()) return cmd_compare_regimes(c_config, c_out);
    } catch (const metis::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
    return kExitError;
}
