// SPDX-License-Identifier: Apache-2.0
#include "metis/models.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

namespace metis {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInvSqrt2 = 0.70710678118654752;
constexpr double kInvSqrt2Pi = 0.39894228040143268;
constexpr double kMaskValue = -1e30;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
           x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

DenseMatrix slice(const DenseMatrix& m, Index r0, Index rows, Index c0, Index cols) {
    DenseMatrix out(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) out(i, j) = m(r0 + i, c0 + j);
    return out;
}

void place(DenseMatrix& dst, const DenseMatrix& src, Index r0, Index c0) {
    for (Index i = 0; i < src.rows(); ++i)
        for (Index j = 0; j < src.cols(); ++j) dst(r0 + i, c0 + j) = src(i, j);
}

struct LnCache {
    DenseMatrix nhat;           // wide normalized rows
    std::vector<double> rstd;   // 1 / sqrt(var + eps) per row
};

// Layer norms run on the wide oracle path in every regime; only the result
// is rounded into the accumulation grid.
template <class LN>
DenseMatrix ln_forward(const DenseMatrix& x, const LN& ln, LnCache& c, AccumMode accum) {
    const Index rows = x.rows(), cols = x.cols();
    c.nhat = DenseMatrix(rows, cols);
    c.rstd.assign(rows, 0.0);
    DenseMatrix out(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        double mu = 0.0;
        for (Index j = 0; j < cols; ++j) mu += x(i, j);
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (Index j = 0; j < cols; ++j) {
            const double e = x(i, j) - mu;
            var += e * e;
        }
        var /= static_cast<double>(cols);
        const double r = 1.0 / std::sqrt(var + kLnEps);
        c.rstd[i] = r;
        for (Index j = 0; j < cols; ++j) {
            const double nh = (x(i, j) - mu) * r;
            c.nhat(i, j) = nh;
            out(i, j) = ln.gamma[j] * nh + ln.beta[j];
        }
    }
    return round_accum(out, accum);
}

template <class LN>
DenseMatrix ln_backward(const DenseMatrix& dout, const LnCache& c, LN& ln,
                        AccumMode accum) {
    const Index rows = dout.rows(), cols = dout.cols();
    DenseMatrix dx(rows, cols);
    std::vector<double> dn(cols);
    for (Index i = 0; i < rows; ++i) {
        double m1 = 0.0, m2 = 0.0;
        for (Index j = 0; j < cols; ++j) {
            const double g = dout(i, j);
            ln.dgamma[j] += g * c.nhat(i, j);
            ln.dbeta[j] += g;
            dn[j] = g * ln.gamma[j];
            m1 += dn[j];
            m2 += dn[j] * c.nhat(i, j);
        }
        m1 /= static_cast<double>(cols);
        m2 /= static_cast<double>(cols);
        for (Index j = 0; j < cols; ++j)
            dx(i, j) = c.rstd[i] * (dn[j] - m1 - c.nhat(i, j) * m2);
    }
    return round_accum(dx, accum);
}

} // namespace

const char* regime_name(Regime r) {
    switch (r) {
    case Regime::Bf16: return "bf16";
    case Regime::Fp4Direct: return "fp4_direct";
    case Regime::Fp4Hadamard: return "fp4_hadamard";
    case Regime::Fp4Metis: return "fp4_metis";
    }
    return "unknown";
}

QuantLinear::QuantLinear(Index in_dim, Index out_dim, uint64_t layer_id, Regime regime,
                         const DenseMatrix& init_w, Index metis_rank, const SketchPlan& plan,
                         const EngineConfig& engine_template)
    : regime_(regime), layer_id_(layer_id), plan_(plan), engine_(engine_template) {
    require(init_w.rows() == in_dim && init_w.cols() == out_dim,
            "QuantLinear: init weight shape mismatch");
    Index k = regime == Regime::Fp4Metis ? metis_rank : 0;
    k = std::min(k, std::min(in_dim, out_dim));
    w_ = make_metis_weight(init_w, k, param_master(engine_));
}

EngineConfig QuantLinear::step_config(uint64_t step) const {
    EngineConfig cfg = engine_;
    cfg.step = step;
    cfg.layer = layer_id_;
    return cfg;
}

DenseMatrix QuantLinear::forward(const DenseMatrix& x, uint64_t step) {
    require(x.cols() == w_.in_dim(), "QuantLinear: input width mismatch");
    step_ = step;
    x_cache_ = x;
    const EngineConfig cfg = step_config(step);
    switch (regime_) {
    case Regime::Bf16: {
        act_zf_ = 0.0;
        return gemm(x, w_.residual, cfg.accum, &counter_);
    }
    case Regime::Fp4Direct: {
        const uint64_t sx = quant_stream_seed(cfg.seed, step, layer_id_, QuantRole::X);
        const uint64_t sw = quant_stream_seed(cfg.seed, step, layer_id_, QuantRole::W);
        act_zf_ = zero_fraction(x, quantize_nvfp4(x, cfg.block_size, cfg.rounding, sx));
        return quantized_gemm(x, w_.residual, cfg.block_size, cfg.rounding, sx, sw,
                              cfg.accum, &counter_);
    }
    case Regime::Fp4Hadamard: {
        if (!had_fwd_)
            had_fwd_ = make_hadamard_plan(
                w_.in_dim(),
                derive_seed(cfg.seed, layer_id_, static_cast<uint64_t>(QuantRole::X)));
        const uint64_t sx = quant_stream_seed(cfg.seed, step, layer_id_, QuantRole::X);
        const uint64_t sw = quant_stream_seed(cfg.seed, step, layer_id_, QuantRole::W);
        const DenseMatrix xr = hadamard_rotate_rows(x, *had_fwd_);
        act_zf_ = zero_fraction(xr, quantize_nvfp4(xr, cfg.block_size, cfg.rounding, sx));
        return hadamard_gemm(x, w_.residual, *had_fwd_, cfg.block_size, cfg.rounding, sx,
                             sw, cfg.accum, &counter_);
    }
    case Regime::Fp4Metis: {
        ForwardResult r = engine_forward(x, w_, plan_, cfg, &counter_);
        operand_cache_ = std::move(r.cache);
        act_zf_ = operand_cache_.act_zero_fraction;
        return std::move(r.y);
    }
    }
    throw std::logic_error("QuantLinear: unknown regime");
}

DenseMatrix QuantLinear::backward(const DenseMatrix& d) {
    require(d.rows() == x_cache_.rows() && d.cols() == w_.out_dim(),
            "QuantLinear: gradient shape mismatch");
    const EngineConfig cfg = step_config(step_);

    if (regime_ == Regime::Fp4Metis) {
        MetisGradients g = engine_backward(d, operand_cache_, w_, plan_, cfg, &counter_);
        grad_zf_ = g.grad_zero_fraction;
        DenseMatrix dx = g.dx;
        pending_ = std::move(g);
        return dx;
    }

    const DenseMatrix wt = transpose(w_.residual);
    const DenseMatrix xt = transpose(x_cache_);
    DenseMatrix dx, dw;
    switch (regime_) {
    case Regime::Bf16: {
        grad_zf_ = 0.0;
        dx = gemm(d, wt, cfg.accum, &counter_);
        dw = gemm(xt, d, cfg.accum, &counter_);
        break;
    }
    case Regime::Fp4Direct: {
        const uint64_t sd = quant_stream_seed(cfg.seed, step_, layer_id_, QuantRole::D);
        const uint64_t swt = quant_stream_seed(cfg.seed, step_, layer_id_, QuantRole::WT);
        const uint64_t sxt = quant_stream_seed(cfg.seed, step_, layer_id_, QuantRole::XT);
        grad_zf_ = zero_fraction(d, quantize_nvfp4(d, cfg.block_size, cfg.rounding, sd));
        dx = quantized_gemm(d, wt, cfg.block_size, cfg.rounding, sd, swt, cfg.accum,
                            &counter_);
        dw = quantized_gemm(xt, d, cfg.block_size, cfg.rounding, sxt, sd, cfg.accum,
                            &counter_);
        break;
    }
    case Regime::Fp4Hadamard: {
        if (!had_dgrad_)
            had_dgrad_ = make_hadamard_plan(
                w_.out_dim(),
                derive_seed(cfg.seed, layer_id_, static_cast<uint64_t>(QuantRole::D)));
        // Contraction dim of the weight-gradient GeMM is the batch row
        // count, so this plan pins the batch size for the rest of the run.
        if (!had_wgrad_)
            had_wgrad_ = make_hadamard_plan(
                x_cache_.rows(),
                derive_seed(cfg.seed, layer_id_, static_cast<uint64_t>(QuantRole::XT)));
        const uint64_t sd = quant_stream_seed(cfg.seed, step_, layer_id_, QuantRole::D);
        const uint64_t swt = quant_stream_seed(cfg.seed, step_, layer_id_, QuantRole::WT);
        const uint64_t sxt = quant_stream_seed(cfg.seed, step_, layer_id_, QuantRole::XT);
        const DenseMatrix dr = hadamard_rotate_rows(d, *had_dgrad_);
        grad_zf_ = zero_fraction(dr, quantize_nvfp4(dr, cfg.block_size, cfg.rounding, sd));
        dx = hadamard_gemm(d, wt, *had_dgrad_, cfg.block_size, cfg.rounding, sd, swt,
                           cfg.accum, &counter_);
        dw = hadamard_gemm(xt, d, *had_wgrad_, cfg.block_size, cfg.rounding, sxt, sd,
                           cfg.accum, &counter_);
        break;
    }
    default:
        throw std::logic_error("QuantLinear: unknown regime");
    }

    MetisGradients g;
    g.dx = dx;
    g.du = DenseMatrix(w_.in_dim(), 0);
    g.dv = DenseMatrix(w_.out_dim(), 0);
    g.dw_r = std::move(dw);
    g.grad_zero_fraction = grad_zf_;
    pending_ = std::move(g);
    return dx;
}

void QuantLinear::apply_grads(const OptimizerConfig& opt) {
    require(pending_.has_value(), "QuantLinear: apply_grads without a backward pass");
    apply_updates(w_, *pending_, opt, opt_state_);
    pending_.reset();
}

namespace {

EngineConfig mlp_engine(const MlpConfig& cfg) {
    EngineConfig e = cfg.engine;  // cfg.seed is the run seed, template wins elsewhere
    e.seed = cfg.seed;
    return e;
}

DenseMatrix linear_init(Index in, Index out, uint64_t seed) {
    return random_gaussian(in, out, seed, 1.0 / std::sqrt(static_cast<double>(in)));
}

} // namespace

MlpModel::MlpModel(const MlpConfig& cfg)
    : cfg_(cfg),
      l1_(cfg.in_dim, cfg.hidden_dim, 1, cfg.regime,
          cfg.init_w1.size() > 0
              ? cfg.init_w1
              : linear_init(cfg.in_dim, cfg.hidden_dim, derive_seed(cfg.seed, 0x11ull)),
          cfg.metis_rank_hidden, cfg.plan, mlp_engine(cfg)),
      l2_(cfg.hidden_dim, cfg.out_dim, 2, cfg.regime,
          cfg.init_w2.size() > 0
              ? cfg.init_w2
              : linear_init(cfg.hidden_dim, cfg.out_dim, derive_seed(cfg.seed, 0x12ull)),
          cfg.metis_rank_out, cfg.plan, mlp_engine(cfg)),
      accum_(cfg.engine.accum) {}

DenseMatrix MlpModel::forward(const DenseMatrix& x, uint64_t step) {
    x_ = x;
    const DenseMatrix h = l1_.forward(x, step);
    DenseMatrix a(h.rows(), h.cols());
    for (Index i = 0; i < h.rows(); ++i)
        for (Index j = 0; j < h.cols(); ++j) a(i, j) = std::tanh(h(i, j));
    act_ = round_accum(a, accum_);
    y_ = l2_.forward(act_, step);
    return y_;
}

double MlpModel::backward_mse(const DenseMatrix& y, const DenseMatrix& target) {
    require(y.rows() == target.rows() && y.cols() == target.cols(),
            "backward_mse: shape mismatch");
    const double n = static_cast<double>(y.size());
    double loss = 0.0;
    DenseMatrix d(y.rows(), y.cols());
    for (Index i = 0; i < y.rows(); ++i)
        for (Index j = 0; j < y.cols(); ++j) {
            const double e = y(i, j) - target(i, j);
            loss += e * e;
            d(i, j) = 2.0 * e / n;
        }
    loss /= n;
    const DenseMatrix da = l2_.backward(round_accum(d, accum_));
    DenseMatrix dh(da.rows(), da.cols());
    for (Index i = 0; i < da.rows(); ++i)
        for (Index j = 0; j < da.cols(); ++j)
            dh(i, j) = da(i, j) * (1.0 - act_(i, j) * act_(i, j));
    l1_.backward(round_accum(dh, accum_));
    return loss;
}

void MlpModel::apply_grads(const OptimizerConfig& opt) {
    l1_.apply_grads(opt);
    l2_.apply_grads(opt);
}

namespace {

Index metis_rank_for(const TransformerConfig& cfg, Index in, Index out) {
    if (cfg.regime != Regime::Fp4Metis) return 0;
    const double k = cfg.rank_fraction * static_cast<double>(std::min(in, out));
    return std::max<Index>(1, static_cast<Index>(std::llround(k)));
}

// Weight rank honors the decompose_weights ablation; the sketch rank for
// activations and gradients does not, the engine flags gate those.
Index weight_rank_for(const TransformerConfig& cfg, Index in, Index out) {
    return cfg.decompose_weights ? metis_rank_for(cfg, in, out) : 0;
}

} // namespace

TransformerModel::Block::Block(const TransformerConfig& cfg, uint64_t base_layer_id,
                               uint64_t seed)
    : ln1{std::vector<double>(cfg.dim, 1.0), std::vector<double>(cfg.dim, 0.0),
          std::vector<double>(cfg.dim, 0.0), std::vector<double>(cfg.dim, 0.0)},
      ln2{std::vector<double>(cfg.dim, 1.0), std::vector<double>(cfg.dim, 0.0),
          std::vector<double>(cfg.dim, 0.0), std::vector<double>(cfg.dim, 0.0)},
      qkv(cfg.dim, 3 * cfg.dim, base_layer_id + 0, cfg.regime,
          linear_init(cfg.dim, 3 * cfg.dim, derive_seed(seed, 0x31ull, base_layer_id + 0)),
          weight_rank_for(cfg, cfg.dim, 3 * cfg.dim),
          [&] {
              SketchPlan p = cfg.plan;
              p.k = metis_rank_for(cfg, cfg.dim, 3 * cfg.dim);
              return p;
          }(),
          [&] {
              EngineConfig e = cfg.engine;
              e.seed = seed;
              e.seq_len = cfg.seq;
              return e;
          }()),
      attn_out(cfg.dim, cfg.dim, base_layer_id + 1, cfg.regime,
               linear_init(cfg.dim, cfg.dim, derive_seed(seed, 0x31ull, base_layer_id + 1)),
               weight_rank_for(cfg, cfg.dim, cfg.dim),
               [&] {
                   SketchPlan p = cfg.plan;
                   p.k = metis_rank_for(cfg, cfg.dim, cfg.dim);
                   return p;
               }(),
               [&] {
                   EngineConfig e = cfg.engine;
                   e.seed = seed;
                   e.seq_len = cfg.seq;
                   return e;
               }()),
      ff1(cfg.dim, cfg.ffn, base_layer_id + 2, cfg.regime,
          linear_init(cfg.dim, cfg.ffn, derive_seed(seed, 0x31ull, base_layer_id + 2)),
          weight_rank_for(cfg, cfg.dim, cfg.ffn),
          [&] {
              SketchPlan p = cfg.plan;
              p.k = metis_rank_for(cfg, cfg.dim, cfg.ffn);
              return p;
          }(),
          [&] {
              EngineConfig e = cfg.engine;
              e.seed = seed;
              e.seq_len = cfg.seq;
              return e;
          }()),
      ff2(cfg.ffn, cfg.dim, base_layer_id + 3, cfg.regime,
          linear_init(cfg.ffn, cfg.dim, derive_seed(seed, 0x31ull, base_layer_id + 3)),
          weight_rank_for(cfg, cfg.ffn, cfg.dim),
          [&] {
              SketchPlan p = cfg.plan;
              p.k = metis_rank_for(cfg, cfg.ffn, cfg.dim);
              return p;
          }(),
          [&] {
              EngineConfig e = cfg.engine;
              e.seed = seed;
              e.seq_len = cfg.seq;
              return e;
          }()) {}

TransformerModel::TransformerModel(const TransformerConfig& cfg)
    : cfg_(cfg), accum_(cfg.engine.accum) {
    require(cfg.vocab >= 2 && cfg.dim >= 1 && cfg.heads >= 1 && cfg.ffn >= 1 &&
                cfg.seq >= 1 && cfg.batch >= 1 && cfg.layers >= 1,
            "transformer: dimensions must be positive");
    require(cfg.dim % cfg.heads == 0, "transformer: dim must divide into heads");
    const Format master = param_master(cfg.engine);
    embed_ = cast_matrix(random_gaussian(cfg.vocab, cfg.dim, derive_seed(cfg.seed, 0x21ull), 0.05),
                         master, Rounding::NearestEven);
    pos_ = cast_matrix(random_gaussian(cfg.seq, cfg.dim, derive_seed(cfg.seed, 0x22ull), 0.02),
                       master, Rounding::NearestEven);
    head_ = cast_matrix(linear_init(cfg.dim, cfg.vocab, derive_seed(cfg.seed, 0x23ull)),
                        master, Rounding::NearestEven);
    dembed_ = DenseMatrix(cfg.vocab, cfg.dim);
    dpos_ = DenseMatrix(cfg.seq, cfg.dim);
    dhead_ = DenseMatrix(cfg.dim, cfg.vocab);
    ln_f_ = LayerNorm{std::vector<double>(cfg.dim, 1.0), std::vector<double>(cfg.dim, 0.0),
                      std::vector<double>(cfg.dim, 0.0), std::vector<double>(cfg.dim, 0.0)};
    blocks_.reserve(static_cast<size_t>(cfg.layers));
    for (Index i = 0; i < cfg.layers; ++i)
        blocks_.emplace_back(cfg_, 10 + 4 * static_cast<uint64_t>(i), cfg.seed);
}

double TransformerModel::run(const std::vector<int>& tokens, uint64_t step,
                             bool accumulate_grads) {
    const Index B = cfg_.batch, S = cfg_.seq, D = cfg_.dim, H = cfg_.heads;
    const Index V = cfg_.vocab, F = cfg_.ffn;
    const Index dh = D / H;
    const Index L = B * S;
    require(static_cast<Index>(tokens.size()) == B * (S + 1),
            "transformer: token buffer must hold batch * (seq + 1) entries");
    for (int t : tokens)
        require(t >= 0 && t < V, "transformer: token id out of vocabulary range");

    if (accumulate_grads) {
        std::fill(dembed_.data().begin(), dembed_.data().end(), 0.0);
        std::fill(dpos_.data().begin(), dpos_.data().end(), 0.0);
        std::fill(dhead_.data().begin(), dhead_.data().end(), 0.0);
        auto zero_ln = [](LayerNorm& ln) {
            std::fill(ln.dgamma.begin(), ln.dgamma.end(), 0.0);
            std::fill(ln.dbeta.begin(), ln.dbeta.end(), 0.0);
        };
        zero_ln(ln_f_);
        for (Block& b : blocks_) {
            zero_ln(b.ln1);
            zero_ln(b.ln2);
        }
    }

    DenseMatrix h(L, D);
    for (Index b = 0; b < B; ++b)
        for (Index t = 0; t < S; ++t) {
            const Index row = b * S + t;
            const int tok = tokens[b * (S + 1) + t];
            for (Index j = 0; j < D; ++j) h(row, j) = embed_(tok, j) + pos_(t, j);
        }
    h = round_accum(h, accum_);

    struct BlockCache {
        DenseMatrix x_in;
        LnCache ln1c, ln2c;
        DenseMatrix qkv_out;
        std::vector<DenseMatrix> probs;  // batch * heads entries, seq x seq
        DenseMatrix a;                   // post-attention residual
        DenseMatrix f1;                  // pre-gelu
    };
    std::vector<BlockCache> caches(blocks_.size());
    const double inv_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    for (size_t bi = 0; bi < blocks_.size(); ++bi) {
        Block& blk = blocks_[bi];
        BlockCache& c = caches[bi];
        c.x_in = h;
        const DenseMatrix n1 = ln_forward(h, blk.ln1, c.ln1c, accum_);
        c.qkv_out = blk.qkv.forward(n1, step);
        c.probs.assign(static_cast<size_t>(B * H), DenseMatrix());
        DenseMatrix ctx(L, D);
        for (Index b = 0; b < B; ++b)
            for (Index hh = 0; hh < H; ++hh) {
                const DenseMatrix q = slice(c.qkv_out, b * S, S, hh * dh, dh);
                const DenseMatrix k = slice(c.qkv_out, b * S, S, D + hh * dh, dh);
                const DenseMatrix v = slice(c.qkv_out, b * S, S, 2 * D + hh * dh, dh);
                DenseMatrix s = gemm(q, transpose(k), accum_, nullptr);
                for (Index i = 0; i < S; ++i)
                    for (Index j = 0; j < S; ++j)
                        s(i, j) = j <= i ? s(i, j) * inv_dh : kMaskValue;
                s = round_accum(s, accum_);
                DenseMatrix p(S, S);
                for (Index i = 0; i < S; ++i) {
                    double mx = s(i, 0);
                    for (Index j = 1; j <= i; ++j) mx = std::max(mx, s(i, j));
                    double sum = 0.0;
                    for (Index j = 0; j <= i; ++j) {
                        p(i, j) = std::exp(s(i, j) - mx);
                        sum += p(i, j);
                    }
                    for (Index j = 0; j <= i; ++j) p(i, j) /= sum;
                }
                p = round_accum(p, accum_);
                c.probs[static_cast<size_t>(b * H + hh)] = p;
                place(ctx, gemm(p, v, accum_, nullptr), b * S, hh * dh);
            }
        const DenseMatrix attn_y = blk.attn_out.forward(ctx, step);
        c.a = add_rounded(h, attn_y, accum_);
        const DenseMatrix n2 = ln_forward(c.a, blk.ln2, c.ln2c, accum_);
        c.f1 = blk.ff1.forward(n2, step);
        DenseMatrix g(L, F);
        for (Index i = 0; i < L; ++i)
            for (Index j = 0; j < F; ++j) g(i, j) = gelu(c.f1(i, j));
        g = round_accum(g, accum_);
        const DenseMatrix f2 = blk.ff2.forward(g, step);
        h = add_rounded(c.a, f2, accum_);
    }

    LnCache lnfc;
    const DenseMatrix hf = ln_forward(h, ln_f_, lnfc, accum_);
    const DenseMatrix logits = gemm(hf, head_, accum_, nullptr);

    DenseMatrix pfull(L, V);
    double loss = 0.0;
    for (Index b = 0; b < B; ++b)
        for (Index t = 0; t < S; ++t) {
            const Index row = b * S + t;
            double mx = logits(row, 0);
            for (Index j = 1; j < V; ++j) mx = std::max(mx, logits(row, j));
            double sum = 0.0;
            for (Index j = 0; j < V; ++j) {
                pfull(row, j) = std::exp(logits(row, j) - mx);
                sum += pfull(row, j);
            }
            for (Index j = 0; j < V; ++j) pfull(row, j) /= sum;
            const int target = tokens[b * (S + 1) + t + 1];
            loss -= std::log(std::max(pfull(row, target), 1e-300));
        }
    loss /= static_cast<double>(L);
    if (!accumulate_grads) return loss;

    DenseMatrix dlogits = pfull;
    for (Index b = 0; b < B; ++b)
        for (Index t = 0; t < S; ++t) {
            const Index row = b * S + t;
            const int target = tokens[b * (S + 1) + t + 1];
            dlogits(row, target) -= 1.0;
            for (Index j = 0; j < V; ++j) dlogits(row, j) /= static_cast<double>(L);
        }
    dlogits = round_accum(dlogits, accum_);
    dhead_ = gemm(transpose(hf), dlogits, accum_, nullptr);
    const DenseMatrix dhf = gemm(dlogits, transpose(head_), accum_, nullptr);
    DenseMatrix dcur = ln_backward(dhf, lnfc, ln_f_, accum_);

    for (size_t ri = blocks_.size(); ri-- > 0;) {
        Block& blk = blocks_[ri];
        BlockCache& c = caches[ri];

        const DenseMatrix dgelu_out = blk.ff2.backward(dcur);
        DenseMatrix df1(L, F);
        for (Index i = 0; i < L; ++i)
            for (Index j = 0; j < F; ++j)
                df1(i, j) = dgelu_out(i, j) * gelu_grad(c.f1(i, j));
        df1 = round_accum(df1, accum_);
        const DenseMatrix dn2 = blk.ff1.backward(df1);
        const DenseMatrix da_ln = ln_backward(dn2, c.ln2c, blk.ln2, accum_);
        const DenseMatrix da = add_rounded(dcur, da_ln, accum_);

        const DenseMatrix dctx = blk.attn_out.backward(da);
        DenseMatrix dqkv(L, 3 * D);
        for (Index b = 0; b < B; ++b)
            for (Index hh = 0; hh < H; ++hh) {
                const DenseMatrix q = slice(c.qkv_out, b * S, S, hh * dh, dh);
                const DenseMatrix k = slice(c.qkv_out, b * S, S, D + hh * dh, dh);
                const DenseMatrix v = slice(c.qkv_out, b * S, S, 2 * D + hh * dh, dh);
                const DenseMatrix& p = c.probs[static_cast<size_t>(b * H + hh)];
                const DenseMatrix dcx = slice(dctx, b * S, S, hh * dh, dh);
                const DenseMatrix dp = gemm(dcx, transpose(v), accum_, nullptr);
                const DenseMatrix dv = gemm(transpose(p), dcx, accum_, nullptr);
                DenseMatrix ds(S, S);
                for (Index i = 0; i < S; ++i) {
                    double dot = 0.0;
                    for (Index j = 0; j <= i; ++j) dot += dp(i, j) * p(i, j);
                    for (Index j = 0; j <= i; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot);
                }
                ds = round_accum(ds, accum_);
                DenseMatrix dq = gemm(ds, k, accum_, nullptr);
                DenseMatrix dk = gemm(transpose(ds), q, accum_, nullptr);
                for (Index i = 0; i < S; ++i)
                    for (Index j = 0; j < dh; ++j) {
                        dq(i, j) *= inv_dh;
                        dk(i, j) *= inv_dh;
                    }
                place(dqkv, round_accum(dq, accum_), b * S, hh * dh);
                place(dqkv, round_accum(dk, accum_), b * S, D + hh * dh);
                place(dqkv, dv, b * S, 2 * D + hh * dh);
            }
        const DenseMatrix dn1 = blk.qkv.backward(dqkv);
        const DenseMatrix dx_ln = ln_backward(dn1, c.ln1c, blk.ln1, accum_);
        dcur = add_rounded(da, dx_ln, accum_);
    }

    for (Index b = 0; b < B; ++b)
        for (Index t = 0; t < S; ++t) {
            const Index row = b * S + t;
            const int tok = tokens[b * (S + 1) + t];
            for (Index j = 0; j < D; ++j) {
                dembed_(tok, j) += dcur(row, j);
                dpos_(t, j) += dcur(row, j);
            }
        }
    return loss;
}

double TransformerModel::train_step_loss(const std::vector<int>& tokens, uint64_t step) {
    return run(tokens, step, true);
}

double TransformerModel::eval_loss(const std::vector<int>& tokens, uint64_t step) {
    return run(tokens, step, false);
}

void TransformerModel::apply_grads(const OptimizerConfig& opt) {
    opt_t_ += 1;
    const Format master = param_master(cfg_.engine);
    auto update = [&](std::span<double> w, std::span<const double> g, AdamState& st,
                      Format fmt) {
        if (opt.kind == OptimizerConfig::Kind::Adam) {
            OptimizerConfig o = opt;
            o.master = fmt;
            adam_step(w, g, st, opt_t_, o);
        } else {
            sgd_step(w, g, opt.lr, fmt);
        }
    };
    update(embed_.data(), dembed_.data(), st_embed_, master);
    update(pos_.data(), dpos_.data(), st_pos_, master);
    update(head_.data(), dhead_.data(), st_head_, master);
    // Norm parameters stay wide in every regime, as mixed-precision
    // training keeps them in the high-precision domain.
    auto update_ln = [&](LayerNorm& ln) {
        update(ln.gamma, ln.dgamma, ln.st_g, Format::Wide);
        update(ln.beta, ln.dbeta, ln.st_b, Format::Wide);
    };
    update_ln(ln_f_);
    for (Block& b : blocks_) {
        update_ln(b.ln1);
        update_ln(b.ln2);
        b.qkv.apply_grads(opt);
        b.attn_out.apply_grads(opt);
        b.ff1.apply_grads(opt);
        b.ff2.apply_grads(opt);
    }
}

std::vector<QuantLinear*> TransformerModel::quant_layers() {
    std::vector<QuantLinear*> out;
    for (Block& b : blocks_) {
        out.push_back(&b.qkv);
        out.push_back(&b.attn_out);
        out.push_back(&b.ff1);
        out.push_back(&b.ff2);
    }
    return out;
}

std::vector<std::pair<std::string, std::span<double>>> TransformerModel::named_params() {
    std::vector<std::pair<std::string, std::span<double>>> out;
    out.emplace_back("embed", embed_.data());
    out.emplace_back("pos", pos_.data());
    out.emplace_back("head", head_.data());
    out.emplace_back("ln_f.gamma", std::span<double>(ln_f_.gamma));
    out.emplace_back("ln_f.beta", std::span<double>(ln_f_.beta));
    for (size_t i = 0; i < blocks_.size(); ++i) {
        Block& b = blocks_[i];
        const std::string pre = "block" + std::to_string(i) + ".";
        out.emplace_back(pre + "ln1.gamma", std::span<double>(b.ln1.gamma));
        out.emplace_back(pre + "ln1.beta", std::span<double>(b.ln1.beta));
        out.emplace_back(pre + "ln2.gamma", std::span<double>(b.ln2.gamma));
        out.emplace_back(pre + "ln2.beta", std::span<double>(b.ln2.beta));
        auto layer_params = [&](const std::string& name, QuantLinear& l) {
            MetisWeight& w = l.weight();
            if (w.rank() > 0) {
                out.emplace_back(pre + name + ".u", w.u.data());
                out.emplace_back(pre + name + ".s", std::span<double>(w.s));
                out.emplace_back(pre + name + ".v", w.v.data());
            }
            out.emplace_back(pre + name + ".w", w.residual.data());
        };
        layer_params("qkv", b.qkv);
        layer_params("attn_out", b.attn_out);
        layer_params("ff1", b.ff1);
        layer_params("ff2", b.ff2);
    }
    return out;
}

std::vector<std::pair<std::string, std::span<const double>>> TransformerModel::named_grads() {
    std::vector<std::pair<std::string, std::span<const double>>> out;
    out.emplace_back("embed", dembed_.data());
    out.emplace_back("pos", dpos_.data());
    out.emplace_back("head", dhead_.data());
    out.emplace_back("ln_f.gamma", std::span<const double>(ln_f_.dgamma));
    out.emplace_back("ln_f.beta", std::span<const double>(ln_f_.dbeta));
    for (size_t i = 0; i < blocks_.size(); ++i) {
        Block& b = blocks_[i];
        const std::string pre = "block" + std::to_string(i) + ".";
        out.emplace_back(pre + "ln1.gamma", std::span<const double>(b.ln1.dgamma));
        out.emplace_back(pre + "ln1.beta", std::span<const double>(b.ln1.dbeta));
        out.emplace_back(pre + "ln2.gamma", std::span<const double>(b.ln2.dgamma));
        out.emplace_back(pre + "ln2.beta", std::span<const double>(b.ln2.dbeta));
        auto layer_grads = [&](const std::string& name, QuantLinear& l) {
            const MetisGradients* g = l.pending_grads();
            require(g != nullptr, "named_grads: layer has no pending gradients");
            if (l.weight().rank() > 0) {
                out.emplace_back(pre + name + ".u", g->du.data());
                out.emplace_back(pre + name + ".s", std::span<const double>(g->ds));
                out.emplace_back(pre + name + ".v", g->dv.data());
            }
            out.emplace_back(pre + name + ".w", g->dw_r.data());
        };
        layer_grads("qkv", b.qkv);
        layer_grads("attn_out", b.attn_out);
        layer_grads("ff1", b.ff1);
        layer_grads("ff2", b.ff2);
    }
    return out;
}

DenseMatrix round_accum(const DenseMatrix& m, AccumMode mode) {
    if (mode == AccumMode::Wide) return m;
    DenseMatrix out = m;
    for (double& v : out.data()) v = bf16_round(v);
    out.set_format_tag(Format::Bf16);
    return out;
}

// Oracle configurations keep wide parameter masters so finite-difference
// checks see a smooth function; everything else trains on the bf16 grid.
Format param_master(const EngineConfig& engine) {
    return (!engine.quantize && engine.accum == AccumMode::Wide) ? Format::Wide
                                                                 : Format::Bf16;
}

} // namespace metis
