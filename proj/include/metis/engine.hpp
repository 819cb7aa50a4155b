// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "metis/fp4_quant.hpp"
#include "metis/gemm.hpp"
#include "metis/spectral.hpp"

namespace metis {

// Decomposed weight state: W = U diag(s) V^T + R. Factor matrices and the
// residual live on the bf16 grid as training masters; the diagonal stays
// wide and is never quantized. The split happens once at initialization,
// afterwards every tensor trains directly through its own gradient.
struct MetisWeight {
    DenseMatrix u;               // m x k
    std::vector<double> s;       // k, wide diagonal
    DenseMatrix v;               // n x k
    DenseMatrix residual;        // m x n

    Index in_dim() const { return residual.rows(); }
    Index out_dim() const { return residual.cols(); }
    Index rank() const { return static_cast<Index>(s.size()); }
};

// Build a MetisWeight from a dense matrix. k = 0 keeps everything in the
// residual (the degenerate configuration that reproduces the direct
// baseline). Masters are rounded to `master` after the split.
MetisWeight make_metis_weight(const DenseMatrix& w, Index k, Format master = Format::Bf16);

DenseMatrix effective_weight(const MetisWeight& w);  // wide reconstruction

struct EngineConfig {
    bool quantize = true;        // false: oracle numerics, no fp4 anywhere
    AccumMode accum = AccumMode::Bf16;
    Rounding rounding = Rounding::Stochastic;
    int block_size = 16;
    bool decompose_activations = true;
    bool decompose_gradients = true;
    bool sparse_sampling = true; // estimate activation/gradient bases from samples
    Index seq_len = 1;           // sampling unit for sparse sampling
    uint64_t seed = 0;
    uint64_t step = 0;
    uint64_t layer = 0;
};

// Everything the backward pass reuses from forward: the quantized form of
// each low-bit factor, the wide diagonals, and dequantized views. Factor
// values are reused transposed in backward; only the composite activation
// is re-quantized in transposed orientation, since the weight-gradient pass
// consumes it as a fresh operand blocked along its own last axis.
struct QuantizedOperandSet {
    DenseMatrix x_input;       // l x m, raw saved activation
    DenseMatrix x_composite;   // l x m, the value the forward pass consumed

    // Activation factors (engaged when the activation was decomposed).
    std::optional<QuantizedBlockTensor> a_k;  // l x ka
    std::optional<QuantizedBlockTensor> b_t;  // ka x m
    std::optional<QuantizedBlockTensor> x_r;  // l x m (or X itself when ka = 0)
    std::vector<double> lambda;               // ka, wide

    // Weight factors (engaged when w.rank() > 0; w_r always engaged).
    std::optional<QuantizedBlockTensor> u_q;   // m x k
    std::optional<QuantizedBlockTensor> vt_q;  // k x n
    std::optional<QuantizedBlockTensor> wr_q;  // m x n
    std::vector<double> s;                     // k, wide

    // Dequantized views of the weight factors (identity in oracle mode).
    DenseMatrix u_hat;
    DenseMatrix vt_hat;
    DenseMatrix wr_hat;

    Index act_rank = 0;
    double act_zero_fraction = 0.0;
    double weight_zero_fraction = 0.0;
};

struct ForwardResult {
    DenseMatrix y;               // l x n
    QuantizedOperandSet cache;
};

struct MetisGradients {
    DenseMatrix dx;              // l x m
    DenseMatrix du;              // m x k
    std::vector<double> ds;      // k
    DenseMatrix dv;              // n x k
    DenseMatrix dw_r;            // m x n
    double grad_zero_fraction = 0.0;
    Index grad_rank = 0;
};

// Forward: x is split into a low-rank part plus residual (per plan, from a
// sampled basis when sparse sampling is on), every factor is block
// quantized, and y = (A L B^T + X_r)(U S V^T + W_r) is assembled from
// quantized GeMMs. Contractions over the rank axis accumulate wide; the
// large contractions and the term sums follow cfg.accum.
ForwardResult engine_forward(const DenseMatrix& x, const MetisWeight& w,
                             const SketchPlan& plan, const EngineConfig& cfg,
                             OpCounter* counter = nullptr);

// Backward for dY = d: gradient is split like the activations, then
// dX, dU, dS, dV, dW_r are assembled from quantized GeMMs mirroring the
// forward factorization. The diagonal gradient keeps only the k x k
// diagonal of its full product.
MetisGradients engine_backward(const DenseMatrix& d, const QuantizedOperandSet& cache,
                               const MetisWeight& w, const SketchPlan& plan,
                               const EngineConfig& cfg, OpCounter* counter = nullptr);

struct OptimizerConfig {
    enum class Kind : uint8_t { Sgd = 0, Adam = 1 };
    Kind kind = Kind::Adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    Format master = Format::Bf16;  // params re-round here after each update
};

// Adam moments stay wide; one state per parameter tensor.
struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
};

struct MetisOptState {
    AdamState u, s, v, r;
    uint64_t t = 0;
};

// One optimizer step over all four trainable tensors. Throws on non-finite
// gradients, naming the step.
void apply_updates(MetisWeight& w, const MetisGradients& g, const OptimizerConfig& opt,
                   MetisOptState& state);

// Flat-span optimizer kernels shared with the model layers.
void sgd_step(std::span<double> w, std::span<const double> g, double lr, Format master);
void adam_step(std::span<double> w, std::span<const double> g, AdamState& st, uint64_t t,
               const OptimizerConfig& opt);

struct GemmShapes {
    Index l = 0;  // batch rows
    Index m = 0;  // input width
    Index n = 0;  // output width
};

struct CostReport {
    double baseline = 0.0;       // 3 * l * m * n, one forward + two backward
    double forward_mixed = 0.0;  // lmk + mnk + lnk
    double backward_mixed = 0.0;
    double decomposition = 0.0;  // sampled sketch work, l_k (m + n) k
    double overhead = 0.0;
    double ratio = 0.0;
    Index k = 0;
    Index sampled_rows = 0;
};

// Analytic per-step cost of the decomposition machinery relative to the
// three baseline GeMMs, using the same sampling arithmetic as
// sampled_subspace.
CostReport op_counter(const GemmShapes& shapes, const SketchPlan& plan, Index seq_len = 1);

} // namespace metis
