#include "nse/model.hpp"

#include <cmath>

namespace nse {

ModelParams ModelParams::init(Rng& rng, const ModelConfig& cfg) {
  if (cfg.vocab < 1) throw ShapeError("ModelParams: empty vocabulary");
  if (cfg.k < 2 || cfg.k % 2 != 0) throw ShapeError("ModelParams: k must be even");
  ModelParams p;
  p.config = cfg;
  p.embedding = EmbeddingTable::init(rng, cfg.vocab, cfg.embed_dim);
  p.query_encoder = BiLstmParams::init(rng, cfg.embed_dim, cfg.k);
  p.doc_encoder = BiLstmParams::init(rng, cfg.embed_dim, cfg.k);
  p.read_lstm = LstmParams::init(rng, 2 * cfg.k, cfg.k);
  p.write_lstm = LstmParams::init(rng, cfg.k, cfg.k);
  p.compose = MlpParams::init(rng, cfg.k);
  p.termination = init_uniform(rng, cfg.k, 1);
  return p;
}

TapedModel TapedModel::put_on_tape(Tape& tape, const ModelParams& p) {
  TapedModel m;
  m.embedding = tape.leaf(p.embedding.weights);
  m.query_encoder = nse::put_on_tape(tape, p.query_encoder);
  m.doc_encoder = nse::put_on_tape(tape, p.doc_encoder);
  m.read_lstm = nse::put_on_tape(tape, p.read_lstm);
  m.write_lstm = nse::put_on_tape(tape, p.write_lstm);
  m.compose = nse::put_on_tape(tape, p.compose);
  m.termination = tape.leaf(p.termination);
  return m;
}

void TapedModel::accumulate_grads(GradMap& out) const {
  auto acc = [&out](const char* name, const Tensor& t) {
    auto it = out.find(name);
    if (it == out.end())
      out.emplace(name, t.grad());
    else
      it->second += t.grad();
  };
  acc("embedding", embedding);
  acc("query_enc.fwd.w_x", query_encoder.fwd.w_x);
  acc("query_enc.fwd.w_h", query_encoder.fwd.w_h);
  acc("query_enc.fwd.b", query_encoder.fwd.b);
  acc("query_enc.bwd.w_x", query_encoder.bwd.w_x);
  acc("query_enc.bwd.w_h", query_encoder.bwd.w_h);
  acc("query_enc.bwd.b", query_encoder.bwd.b);
  acc("doc_enc.fwd.w_x", doc_encoder.fwd.w_x);
  acc("doc_enc.fwd.w_h", doc_encoder.fwd.w_h);
  acc("doc_enc.fwd.b", doc_encoder.fwd.b);
  acc("doc_enc.bwd.w_x", doc_encoder.bwd.w_x);
  acc("doc_enc.bwd.w_h", doc_encoder.bwd.w_h);
  acc("doc_enc.bwd.b", doc_encoder.bwd.b);
  acc("read.w_x", read_lstm.w_x);
  acc("read.w_h", read_lstm.w_h);
  acc("read.b", read_lstm.b);
  acc("write.w_x", write_lstm.w_x);
  acc("write.w_h", write_lstm.w_h);
  acc("write.b", write_lstm.b);
  acc("compose.w", compose.w);
  acc("compose.b", compose.b);
  acc("termination", termination);
}

ControllerState init_states(Tape& tape, Tensor query_last, Tensor doc_last,
                            Eigen::Index k) {
  if (query_last.rows() != k || doc_last.rows() != k)
    throw ShapeError("init_states: width mismatch");
  return {query_last, doc_last, lstm_zero_state(tape, k),
          lstm_zero_state(tape, k)};
}

namespace {

// Overrides the sigmoid output at padded positions with 1 (preserve column).
Tensor force_preserved_at_pads(Tensor gate, const Vec& mask) {
  Mat a = mask;
  Mat b = (1.0 - mask.array()).matrix();
  return elem_affine(gate, a, b);
}

}  // namespace

ReadOutput read_step(const ControllerState& state, Tensor query_memory,
                     Tensor doc_memory, const TapedLstm& read_lstm,
                     const Vec& query_mask, const Vec& doc_mask) {
  const Eigen::Index k = state.s_q.rows();
  if (query_memory.rows() != k || doc_memory.rows() != k)
    throw ShapeError("read_step: memory width mismatch");
  ReadOutput out;
  out.read_state =
      lstm_step(concat_rows({state.s_q, state.s_d}), state.read_state,
                read_lstm);
  out.r = out.read_state.h;
  out.l_q = matmul(transpose(query_memory), out.r);
  Tensor a_q = softmax(out.l_q, &query_mask);
  out.s_q = matmul(query_memory, a_q);
  Tensor z = sigmoid(out.l_q);
  out.z_q = force_preserved_at_pads(z, query_mask);
  out.l_d = matmul(transpose(doc_memory), out.s_q);
  Tensor a_d = softmax(out.l_d, &doc_mask);
  out.s_d = matmul(doc_memory, a_d);
  return out;
}

Tensor write_memory(Tensor m_prev, Tensor z, Tensor s_d) {
  if (z.rows() != m_prev.cols() || z.cols() != 1 ||
      s_d.rows() != m_prev.rows() || s_d.cols() != 1)
    throw ShapeError("write_memory: shape mismatch");
  const Mat& zv = z.value();
  if (zv.minCoeff() < 0.0 || zv.maxCoeff() > 1.0)
    throw ShapeError("write_memory: key values outside [0, 1]");
  return add(scale_columns(m_prev, z),
             matmul(s_d, transpose(one_minus(z))));
}

GateOutput gate_memory(Tensor m_new, Tensor m_prev, Tensor c,
                       const LstmState& write_state,
                       const TapedLstm& write_lstm, const Vec& query_mask) {
  if (m_new.rows() != m_prev.rows() || m_new.cols() != m_prev.cols())
    throw ShapeError("gate_memory: memory shape mismatch");
  GateOutput out;
  out.write_state = lstm_step(c, write_state, write_lstm);
  Tensor g = sigmoid(matmul(transpose(m_prev), out.write_state.h));
  out.g_q = force_preserved_at_pads(g, query_mask);
  out.memory = add(scale_columns(m_new, one_minus(out.g_q)),
                   scale_columns(m_prev, out.g_q));
  return out;
}

TerminationOutput termination_score(Tensor c, Tensor projection,
                                    const LstmState& write_state,
                                    const TapedLstm& write_lstm) {
  if (projection.cols() != 1 || projection.rows() != c.rows())
    throw ShapeError("termination_score: projection width mismatch");
  TerminationOutput out;
  out.write_state = lstm_step(c, write_state, write_lstm);
  out.e = sigmoid(dot(projection, out.write_state.h));
  return out;
}

std::vector<Tensor> halting_distribution(Tape& tape,
                                         const std::vector<Tensor>& e, int T) {
  if (T < 1) throw ShapeError("halting_distribution: T must be >= 1");
  const int given = static_cast<int>(e.size());
  if (given != T - 1 && given != T)
    throw ShapeError("halting_distribution: need T-1 (or T) scores");
  std::vector<Tensor> p;
  p.reserve(T);
  if (T == 1) {
    p.push_back(tape.leaf(Mat::Ones(1, 1)));
    return p;
  }
  Tensor remainder = tape.leaf(Mat::Ones(1, 1));
  for (int t = 0; t < T - 1; ++t) {
    p.push_back(mul(e[t], remainder));
    remainder = sub(remainder, p.back());
  }
  p.push_back(remainder);  // forced final step
  return p;
}

ForwardResult forward_pass(Tape& tape, const TapedModel& model,
                           const ModelInput& input, const HaltingMode& mode,
                           const DropoutSpec& drop, Rng* rng) {
  const Eigen::Index k = model.read_lstm.w_h.cols();
  const Eigen::Index lq = input.query_len();
  const Eigen::Index ld = input.doc_len();
  if (static_cast<Eigen::Index>(input.query_ids.size()) != lq ||
      static_cast<Eigen::Index>(input.doc_ids.size()) != ld)
    throw ShapeError("forward_pass: mask/id length mismatch");

  // Pads must form a suffix; encode the real prefix only and zero-pad the
  // memory columns, which the masked softmaxes then skip.
  auto real_len = [](const Vec& mask) {
    Eigen::Index n = 0;
    while (n < mask.size() && mask(n) != 0.0) ++n;
    for (Eigen::Index i = n; i < mask.size(); ++i)
      if (mask(i) != 0.0) throw ShapeError("forward_pass: pads must be a suffix");
    if (n == 0) throw ShapeError("forward_pass: empty sequence");
    return n;
  };
  const Eigen::Index nq = real_len(input.query_mask);
  const Eigen::Index nd = real_len(input.doc_mask);

  std::vector<int> q_ids(input.query_ids.begin(), input.query_ids.begin() + nq);
  std::vector<int> d_ids(input.doc_ids.begin(), input.doc_ids.begin() + nd);

  EncodedSequence q_enc = bilstm_encode(
      embed_sequence(model.embedding, q_ids, drop, rng), model.query_encoder);
  EncodedSequence d_enc = bilstm_encode(
      embed_sequence(model.embedding, d_ids, drop, rng), model.doc_encoder);

  Tensor query_memory = pad_columns(q_enc.memory, lq);
  Tensor doc_memory = pad_columns(d_enc.memory, ld);

  ControllerState state =
      init_states(tape, q_enc.last_state, d_enc.last_state, k);

  const bool adaptive = mode.variant == HaltingVariant::AdaptiveComputation;
  const int T = mode.max_steps;

  ForwardResult result;
  std::vector<Tensor> term_scores;
  for (int t = 0; t < T; ++t) {
    ReadOutput read = read_step(state, query_memory, doc_memory,
                                model.read_lstm, input.query_mask,
                                input.doc_mask);
    state.read_state = read.read_state;
    state.s_q = read.s_q;
    state.s_d = read.s_d;

    Tensor c = mlp_forward(read.s_q, read.s_d, read.r, model.compose);
    Tensor m_new = write_memory(query_memory, read.z_q, read.s_d);

    StepTrace trace;
    trace.l_q = read.l_q.value().col(0);
    trace.l_d = read.l_d.value().col(0);
    trace.z_q = read.z_q.value().col(0);
    Tensor attention = softmax(read.l_d, &input.doc_mask);
    trace.attention_d = attention.value().col(0);
    result.doc_attention.push_back(attention);

    if (adaptive) {
      query_memory = m_new;
      TerminationOutput term = termination_score(
          c, model.termination, state.write_state, model.write_lstm);
      state.write_state = term.write_state;
      if (t < T - 1) {
        term_scores.push_back(term.e);
        trace.e = term.e.scalar();
      }
    } else {
      GateOutput gate = gate_memory(m_new, query_memory, c, state.write_state,
                                    model.write_lstm, input.query_mask);
      state.write_state = gate.write_state;
      query_memory = gate.memory;
      trace.g_q = gate.g_q.value().col(0);
    }
    result.steps.push_back(std::move(trace));
  }

  if (adaptive) {
    result.halting = halting_distribution(tape, term_scores, T);
    for (int t = 0; t < T; ++t)
      result.steps[t].p = result.halting[t].scalar();
  }
  return result;
}

}  // namespace nse
