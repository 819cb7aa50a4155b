// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "metis/precision.hpp"

namespace metis {

struct MlpBatch {
    DenseMatrix x;       // rows x input_dim
    DenseMatrix target;  // rows x output_dim
};

// Planted low-rank regression data for the training benchmark. Latent AR(1)
// sequences are mixed into observation space through sparse directions, one
// of which dwarfs the rest, so block maxima lock the quantization step onto
// the dominant component and push the weak structure toward the rounding
// floor. The fixed two-layer tanh teacher reads every latent back at
// comparable output variance (read gain inversely proportional to the
// latent's amplitude), so most of the target is carried by exactly the
// structure a whole-tensor quantizer resolves worst. The first output
// channel additionally carries heavy per-row label noise the teacher itself
// cannot predict, which keeps the gradient matrices dominated by one column
// for the whole run instead of only during early training.
struct AnisoDataConfig {
    Index input_dim = 64;
    Index hidden_dim = 32;   // teacher hidden width
    Index output_dim = 16;
    Index latent_dim = 8;
    Index batch_rows = 512;
    Index seq_len = 1;       // rows per AR sequence
    double rho = 0.7;        // AR(1) coefficient
    double noise = 0.02;     // isotropic observation noise
    double label_noise = 2.0;     // aleatoric noise on output channel 0
    Index direction_support = 16;  // nonzero coordinates per latent direction
    std::vector<double> amplitudes;  // per latent; default one-dominant profile
    uint64_t seed = 1;
};

class AnisoRegressionData {
  public:
    explicit AnisoRegressionData(const AnisoDataConfig& cfg);

    // Deterministic in (cfg.seed, step); consecutive steps are fresh draws.
    MlpBatch batch(uint64_t step) const;

    // Teacher-aligned warm start: dominant read path and head column at full
    // strength, weak output gains scaled by weak_scale, plus a small seeded
    // jitter. Benchmarks train from here so the initial weights already hold
    // the dominant structure while the weak structure remains to be learned.
    std::pair<DenseMatrix, DenseMatrix> warm_init(double weak_scale) const;

    const AnisoDataConfig& config() const { return cfg_; }
    const DenseMatrix& mixing() const { return directions_; }  // latent x input
    const DenseMatrix& teacher_w1() const { return w1_; }
    const DenseMatrix& teacher_w2() const { return w2_; }

  private:
    AnisoDataConfig cfg_;
    DenseMatrix directions_;  // latent_dim x input_dim, row i scaled by amplitude i
    DenseMatrix hidden_dirs_; // latent_dim x hidden, unit read pattern per latent
    DenseMatrix w1_;          // input x hidden
    DenseMatrix w2_;          // hidden x output
    DenseMatrix w2_weak_;     // weak-latent part of w2, scaled by warm_init
};

// Activation-like matrix with a planted dominant right subspace: rows carry
// AR(1) sequence structure, the top-k directions dominate the rest by at
// least `gap` in singular value. Used by the subspace preservation checks.
DenseMatrix planted_sequence_activations(Index rows, Index cols, Index k, double gap,
                                         Index seq_len, double rho, uint64_t seed);

// Spectrally anisotropic matrix: k_dom planted components with singular
// values dominance * decay^c and exactly orthogonal two-tier singular
// vectors (scattered sign-masked Hadamard rows), plus isotropic noise of
// scale `tail`. Raw entries land on a ladder of signed amplitude sums that
// straddles the block-quantization grid, while each planted direction
// alone sits on fp4 codes under an exactly representable block scale, so a
// spectral split is far easier to quantize than the assembled matrix.
DenseMatrix planted_anisotropic_matrix(Index rows, Index cols, Index k_dom,
                                       double dominance, double decay, double tail,
                                       uint64_t seed);

// Token stream for the transformer mode: either a planted low-rank Markov
// chain over the vocabulary or byte tokens from a text file.
struct TokenBatch {
    std::vector<int> tokens;   // batch * (seq + 1), row-major; last is target
    Index batch = 0;
    Index seq = 0;

    int token(Index b, Index t) const { return tokens[b * (seq + 1) + t]; }
};

class TokenData {
  public:
    // Markov mode. Transition structure is low-rank so contexts carry a
    // dominant subspace, mirroring the regression generator.
    TokenData(Index vocab, Index seq, Index batch, uint64_t seed);
    // Byte mode over a text corpus, vocab fixed at 256.
    TokenData(const std::string& text_path, Index seq, Index batch, uint64_t seed);

    TokenBatch batch(uint64_t step) const;
    Index vocab() const { return vocab_; }

  private:
    Index vocab_ = 0;
    Index seq_ = 0;
    Index batch_ = 0;
    uint64_t seed_ = 0;
    std::vector<double> transition_;  // vocab x vocab row-stochastic, Markov mode
    std::vector<uint8_t> text_;       // byte mode
};

} // namespace metis
