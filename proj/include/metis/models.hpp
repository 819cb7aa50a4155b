// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "metis/baselines.hpp"
#include "metis/engine.hpp"

namespace metis {

enum class Regime : uint8_t {
    Bf16 = 0,        // bf16 operands and accumulation, no quantization
    Fp4Direct = 1,   // quantize every GeMM operand directly
    Fp4Hadamard = 2, // random Hadamard rotation on the contraction axis, then quantize
    Fp4Metis = 3,    // decomposed low-rank + residual quantization
};

const char* regime_name(Regime r);

// One trainable linear layer routed through the regime-appropriate GeMM
// path. The weight always lives as a MetisWeight; non-Metis regimes keep
// rank 0 so the dense tensor is the residual branch. Forward caches what
// backward needs; backward caches gradients until apply_grads.
class QuantLinear {
  public:
    QuantLinear(Index in_dim, Index out_dim, uint64_t layer_id, Regime regime,
                const DenseMatrix& init_w, Index metis_rank, const SketchPlan& plan,
                const EngineConfig& engine_template);

    DenseMatrix forward(const DenseMatrix& x, uint64_t step);
    DenseMatrix backward(const DenseMatrix& d);
    void apply_grads(const OptimizerConfig& opt);

    const MetisWeight& weight() const { return w_; }
    MetisWeight& weight() { return w_; }
    DenseMatrix dense_weight() const { return effective_weight(w_); }
    Index in_dim() const { return w_.in_dim(); }
    Index out_dim() const { return w_.out_dim(); }

    double act_zero_fraction() const { return act_zf_; }
    double grad_zero_fraction() const { return grad_zf_; }
    uint64_t multiplies() const { return counter_.multiplies; }
    const MetisGradients* pending_grads() const {
        return pending_.has_value() ? &*pending_ : nullptr;
    }
    // Input saved by the last forward call; the harness probes layers with
    // their own observed activation distribution.
    const DenseMatrix& input_cache() const { return x_cache_; }

  private:
    EngineConfig step_config(uint64_t step) const;

    Regime regime_;
    uint64_t layer_id_ = 0;
    MetisWeight w_;
    SketchPlan plan_;
    EngineConfig engine_;
    MetisOptState opt_state_;
    OpCounter counter_;

    // Hadamard rotations per GeMM role, built on first use (the batch
    // dimension is only known then) and fixed for the rest of the run.
    std::optional<HadamardPlan> had_fwd_, had_dgrad_, had_wgrad_;

    // Per-step caches.
    DenseMatrix x_cache_;
    QuantizedOperandSet operand_cache_;
    std::optional<MetisGradients> pending_;
    uint64_t step_ = 0;
    double act_zf_ = 0.0;
    double grad_zf_ = 0.0;
};

// Two-layer tanh MLP for the regression benchmark.
struct MlpConfig {
    Index in_dim = 64;
    Index hidden_dim = 32;
    Index out_dim = 16;
    Regime regime = Regime::Bf16;
    Index metis_rank_hidden = 1;  // rank for the in->hidden layer
    Index metis_rank_out = 1;     // rank for the hidden->out layer
    SketchPlan plan;
    EngineConfig engine;          // quantize/accum/rounding/flags template
    uint64_t seed = 1;
    DenseMatrix init_w1;          // optional explicit init; empty -> gaussian
    DenseMatrix init_w2;
};

class MlpModel {
  public:
    explicit MlpModel(const MlpConfig& cfg);
    const MlpConfig& config() const { return cfg_; }

    DenseMatrix forward(const DenseMatrix& x, uint64_t step);
    // Mean squared error against target; fills gradients through both
    // layers. Returns the wide-precision loss.
    double backward_mse(const DenseMatrix& y, const DenseMatrix& target);
    void apply_grads(const OptimizerConfig& opt);

    QuantLinear& layer1() { return l1_; }
    QuantLinear& layer2() { return l2_; }

  private:
    MlpConfig cfg_;
    QuantLinear l1_, l2_;
    DenseMatrix x_, act_, y_;
    AccumMode accum_;
};

// Byte/token causal transformer. Attention internals, layer norms, the
// embedding and the vocabulary head stay on the bf16 oracle path in every
// regime; only QKV, attention-out and the two FFN projections quantize.
struct TransformerConfig {
    Index vocab = 64;
    Index dim = 128;
    Index heads = 4;
    Index ffn = 256;
    Index seq = 64;
    Index batch = 8;
    Index layers = 2;
    Regime regime = Regime::Bf16;
    double rank_fraction = 0.015;     // per quantized layer, of min(fan_in, fan_out)
    bool decompose_weights = true;    // false keeps Metis weights rank 0
    SketchPlan plan;
    EngineConfig engine;
    uint64_t seed = 1;
};

class TransformerModel {
  public:
    explicit TransformerModel(const TransformerConfig& cfg);

    // Tokens laid out batch-major with seq+1 entries per row (input window
    // plus shifted target). Returns mean cross-entropy and fills gradients.
    double train_step_loss(const std::vector<int>& tokens, uint64_t step);
    void apply_grads(const OptimizerConfig& opt);
    double eval_loss(const std::vector<int>& tokens, uint64_t step);

    const TransformerConfig& config() const { return cfg_; }
    std::vector<QuantLinear*> quant_layers();

    // Flat parameter access for gradient checking.
    std::vector<std::pair<std::string, std::span<double>>> named_params();
    std::vector<std::pair<std::string, std::span<const double>>> named_grads();

  private:
    struct LayerNorm {
        std::vector<double> gamma, beta, dgamma, dbeta;
        AdamState st_g, st_b;
    };
    struct Block {
        LayerNorm ln1, ln2;
        QuantLinear qkv, attn_out, ff1, ff2;
        Block(const TransformerConfig& cfg, uint64_t base_layer_id, uint64_t seed);
    };

    double run(const std::vector<int>& tokens, uint64_t step, bool accumulate_grads);

    TransformerConfig cfg_;
    AccumMode accum_;
    DenseMatrix embed_, dembed_;
    DenseMatrix pos_, dpos_;
    DenseMatrix head_, dhead_;
    LayerNorm ln_f_;
    std::vector<Block> blocks_;
    AdamState st_embed_, st_pos_, st_head_;
    uint64_t opt_t_ = 0;
};

// Elementwise rounding helper shared by the model plumbing: identity in
// wide mode, bf16 nearest-even otherwise.
DenseMatrix round_accum(const DenseMatrix& m, AccumMode mode);

// Master format the models hold trainable parameters in: wide only for the
// oracle configuration (no quantization, wide accumulation), bf16 otherwise.
Format param_master(const EngineConfig& engine);

} // namespace metis
