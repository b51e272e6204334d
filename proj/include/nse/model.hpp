#pragma once

#include <map>
#include <string>
#include <vector>

#include "nse/layers.hpp"
#include "nse/tensor.hpp"

namespace nse {

enum class HaltingVariant { QueryGating, AdaptiveComputation };

struct HaltingMode {
  HaltingVariant variant = HaltingVariant::QueryGating;
  int max_steps = 1;  // T

  static HaltingMode gating(int t) {
    if (t < 1) throw ShapeError("HaltingMode: T must be >= 1");
    return {HaltingVariant::QueryGating, t};
  }
  static HaltingMode adaptive(int t) {
    if (t < 1) throw ShapeError("HaltingMode: T must be >= 1");
    return {HaltingVariant::AdaptiveComputation, t};
  }
};

struct ModelConfig {
  Eigen::Index vocab = 0;
  Eigen::Index embed_dim = 300;
  Eigen::Index k = 436;  // controller / BiLSTM output width, must be even
};

// Every trainable weight in the model. Iteration order of for_each is fixed
// and shared by the optimizer and the checkpoint format.
struct ModelParams {
  ModelConfig config;
  EmbeddingTable embedding;
  BiLstmParams query_encoder;
  BiLstmParams doc_encoder;
  LstmParams read_lstm;   // input 2k, hidden k
  LstmParams write_lstm;  // input k, hidden k
  MlpParams compose;
  Mat termination;  // k x 1 projection behind the termination head

  static ModelParams init(Rng& rng, const ModelConfig& cfg);

  template <typename F>
  void for_each(F&& f) {
    f("embedding", embedding.weights);
    f("query_enc.fwd.w_x", query_encoder.fwd.w_x);
    f("query_enc.fwd.w_h", query_encoder.fwd.w_h);
    f("query_enc.fwd.b", query_encoder.fwd.b);
    f("query_enc.bwd.w_x", query_encoder.bwd.w_x);
    f("query_enc.bwd.w_h", query_encoder.bwd.w_h);
    f("query_enc.bwd.b", query_encoder.bwd.b);
    f("doc_enc.fwd.w_x", doc_encoder.fwd.w_x);
    f("doc_enc.fwd.w_h", doc_encoder.fwd.w_h);
    f("doc_enc.fwd.b", doc_encoder.fwd.b);
    f("doc_enc.bwd.w_x", doc_encoder.bwd.w_x);
    f("doc_enc.bwd.w_h", doc_encoder.bwd.w_h);
    f("doc_enc.bwd.b", doc_encoder.bwd.b);
    f("read.w_x", read_lstm.w_x);
    f("read.w_h", read_lstm.w_h);
    f("read.b", read_lstm.b);
    f("write.w_x", write_lstm.w_x);
    f("write.w_h", write_lstm.w_h);
    f("write.b", write_lstm.b);
    f("compose.w", compose.w);
    f("compose.b", compose.b);
    f("termination", termination);
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<ModelParams*>(this)->for_each(
        [&f](const char* n, Mat& m) { f(n, static_cast<const Mat&>(m)); });
  }
};

using GradMap = std::map<std::string, Mat>;

// Parameters registered as leaves on one tape for one forward pass.
struct TapedModel {
  Tensor embedding;
  TapedBiLstm query_encoder, doc_encoder;
  TapedLstm read_lstm, write_lstm;
  TapedMlp compose;
  Tensor termination;

  static TapedModel put_on_tape(Tape& tape, const ModelParams& p);
  // Adds this pass's parameter grads into `out` (creating zero entries on
  // first use), in the same naming scheme as ModelParams::for_each.
  void accumulate_grads(GradMap& out) const;
};

// One example, already padded: pad positions form a suffix and are marked 0
// in the masks.
struct ModelInput {
  std::vector<int> doc_ids;
  std::vector<int> query_ids;
  Vec doc_mask;    // |D|, 1 = real token
  Vec query_mask;  // |Q|

  Eigen::Index doc_len() const { return doc_mask.size(); }
  Eigen::Index query_len() const { return query_mask.size(); }
};

struct ControllerState {
  Tensor s_q, s_d;
  LstmState read_state, write_state;
};

// Value-level record of one loop step, for tracing and tests.
struct StepTrace {
  Vec l_q, l_d, z_q;
  Vec attention_d;   // softmax(l_d)
  Vec g_q;           // gating mode only
  double e = -1.0;   // adaptive mode, steps 1..T-1
  double p = -1.0;   // adaptive mode halting probability
};

struct ForwardResult {
  std::vector<StepTrace> steps;
  std::vector<Tensor> doc_attention;  // taped softmax(l_d), one per step
  std::vector<Tensor> halting;        // taped p_t, adaptive mode only
};

// ---- loop pieces (exposed for tests; forward_pass composes them) ------------

ControllerState init_states(Tape& tape, Tensor query_last, Tensor doc_last,
                            Eigen::Index k);

struct ReadOutput {
  Tensor l_q, s_q, z_q, l_d, s_d, r;
  LstmState read_state;
};
ReadOutput read_step(const ControllerState& state, Tensor query_memory,
                     Tensor doc_memory, const TapedLstm& read_lstm,
                     const Vec& query_mask, const Vec& doc_mask);

// Column j of the result is M_prev(:,j) * z(j) + s_d * (1 - z(j)).
Tensor write_memory(Tensor m_prev, Tensor z, Tensor s_d);

struct GateOutput {
  Tensor memory, g_q;
  LstmState write_state;
};
GateOutput gate_memory(Tensor m_new, Tensor m_prev, Tensor c,
                       const LstmState& write_state,
                       const TapedLstm& write_lstm, const Vec& query_mask);

struct TerminationOutput {
  Tensor e;
  LstmState write_state;
};
TerminationOutput termination_score(Tensor c, Tensor projection,
                                    const LstmState& write_state,
                                    const TapedLstm& write_lstm);

// Stick-breaking halting distribution. `e` holds scores for steps
// 1..T-1 (a length-T list is accepted; the last entry is the unused forced
// step). p_T is the remainder, so the result sums to 1.
std::vector<Tensor> halting_distribution(Tape& tape,
                                         const std::vector<Tensor>& e, int T);

// ---- full pass --------------------------------------------------------------

ForwardResult forward_pass(Tape& tape, const TapedModel& model,
                           const ModelInput& input, const HaltingMode& mode,
                           const DropoutSpec& drop = {}, Rng* rng = nullptr);

}  // namespace nse
