#pragma once

#include <vector>

#include "nse/random.hpp"
#include "nse/tensor.hpp"

namespace nse {

// Uniform [-0.1, 0.1) init, shared by every parameter in the model.
inline Mat init_uniform(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  return rng.uniform_matrix(rows, cols, -0.1, 0.1);
}

struct DropoutSpec {
  double rate = 0.0;  // in [0, 1)
  bool training = false;

  bool active() const { return training && rate > 0.0; }
};

// ---- embedding --------------------------------------------------------------

struct EmbeddingTable {
  Mat weights;  // |V| x dim

  Eigen::Index vocab() const { return weights.rows(); }
  Eigen::Index dim() const { return weights.cols(); }

  static EmbeddingTable init(Rng& rng, Eigen::Index vocab, Eigen::Index dim) {
    return {init_uniform(rng, vocab, dim)};
  }
};

// Column j is the embedding of token j (dim x len). Inverted dropout: when
// active, surviving entries are scaled by 1/(1-rate) so evaluation is a pure
// forward pass. `rng` is required only when dropout is active.
Tensor embed_sequence(Tensor table, const std::vector<int>& ids,
                      const DropoutSpec& drop, Rng* rng = nullptr);

// ---- LSTM -------------------------------------------------------------------

// Gate order in the stacked matrices: input, forget, output, candidate.
struct LstmParams {
  Mat w_x;  // 4h x in
  Mat w_h;  // 4h x h
  Mat b;    // 4h x 1

  Eigen::Index hidden() const { return w_h.cols(); }
  Eigen::Index input() const { return w_x.cols(); }

  static LstmParams init(Rng& rng, Eigen::Index in, Eigen::Index hidden) {
    return {init_uniform(rng, 4 * hidden, in),
            init_uniform(rng, 4 * hidden, hidden),
            init_uniform(rng, 4 * hidden, 1)};
  }
};

struct TapedLstm {
  Tensor w_x, w_h, b;
};
TapedLstm put_on_tape(Tape& tape, const LstmParams& p);

struct LstmState {
  Tensor h, c;
};
LstmState lstm_zero_state(Tape& tape, Eigen::Index hidden);
LstmState lstm_step(Tensor x, const LstmState& prev, const TapedLstm& p);

// ---- BiLSTM encoder ---------------------------------------------------------

// Forward and backward directions of width k/2 each; concatenated per-token
// output has width k.
struct BiLstmParams {
  LstmParams fwd, bwd;

  Eigen::Index out_width() const { return 2 * fwd.hidden(); }

  static BiLstmParams init(Rng& rng, Eigen::Index in, Eigen::Index k) {
    if (k % 2 != 0) throw ShapeError("BiLstmParams: k must be even");
    return {LstmParams::init(rng, in, k / 2), LstmParams::init(rng, in, k / 2)};
  }
};

struct TapedBiLstm {
  TapedLstm fwd, bwd;
};
TapedBiLstm put_on_tape(Tape& tape, const BiLstmParams& p);

struct EncodedSequence {
  Tensor memory;      // k x len
  Tensor last_state;  // k x 1: [fwd hidden at last pos; bwd hidden at pos 1]
};
EncodedSequence bilstm_encode(Tensor embedded, const TapedBiLstm& enc);

// ---- single-layer MLP (tanh) ------------------------------------------------

struct MlpParams {
  Mat w;  // k x 3k
  Mat b;  // k x 1

  static MlpParams init(Rng& rng, Eigen::Index k) {
    return {init_uniform(rng, k, 3 * k), init_uniform(rng, k, 1)};
  }
};

struct TapedMlp {
  Tensor w, b;
};
TapedMlp put_on_tape(Tape& tape, const MlpParams& p);

// tanh(W [s_q; s_d; r] + b)
Tensor mlp_forward(Tensor s_q, Tensor s_d, Tensor r, const TapedMlp& p);

}  // namespace nse
