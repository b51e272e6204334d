#include "nse/layers.hpp"

namespace nse {

Tensor embed_sequence(Tensor table, const std::vector<int>& ids,
                      const DropoutSpec& drop, Rng* rng) {
  Tensor x = embed_rows(table, ids);
  if (!drop.active()) return x;
  if (!rng) throw ShapeError("embed_sequence: dropout needs an rng");
  const double keep = 1.0 - drop.rate;
  Mat mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask.rows(); ++i)
    for (Eigen::Index j = 0; j < mask.cols(); ++j)
      mask(i, j) = rng->uniform() < keep ? 1.0 / keep : 0.0;
  return elem_affine(x, mask, Mat::Zero(x.rows(), x.cols()));
}

TapedLstm put_on_tape(Tape& tape, const LstmParams& p) {
  return {tape.leaf(p.w_x), tape.leaf(p.w_h), tape.leaf(p.b)};
}

LstmState lstm_zero_state(Tape& tape, Eigen::Index hidden) {
  return {tape.leaf(Mat::Zero(hidden, 1)), tape.leaf(Mat::Zero(hidden, 1))};
}

LstmState lstm_step(Tensor x, const LstmState& prev, const TapedLstm& p) {
  const Eigen::Index h = p.w_h.cols();
  if (x.rows() != p.w_x.cols() || x.cols() != 1 || prev.h.rows() != h)
    throw ShapeError("lstm_step: width mismatch");
  Tensor pre = add(add(matmul(p.w_x, x), matmul(p.w_h, prev.h)), p.b);
  Tensor i = sigmoid(rows(pre, 0, h));
  Tensor f = sigmoid(rows(pre, h, h));
  Tensor o = sigmoid(rows(pre, 2 * h, h));
  Tensor cand = tanh_t(rows(pre, 3 * h, h));
  Tensor c = add(mul(f, prev.c), mul(i, cand));
  return {mul(o, tanh_t(c)), c};
}

TapedBiLstm put_on_tape(Tape& tape, const BiLstmParams& p) {
  return {put_on_tape(tape, p.fwd), put_on_tape(tape, p.bwd)};
}

EncodedSequence bilstm_encode(Tensor embedded, const TapedBiLstm& enc) {
  const Eigen::Index len = embedded.cols();
  if (len < 1) throw ShapeError("bilstm_encode: empty sequence");
  Tape& tape = *embedded.tape;
  const Eigen::Index h = enc.fwd.w_h.cols();

  std::vector<Tensor> fwd(len), bwd(len);
  LstmState s = lstm_zero_state(tape, h);
  for (Eigen::Index j = 0; j < len; ++j) {
    s = lstm_step(column(embedded, j), s, enc.fwd);
    fwd[j] = s.h;
  }
  Tensor fwd_last = s.h;

  s = lstm_zero_state(tape, h);
  for (Eigen::Index j = len - 1; j >= 0; --j) {
    s = lstm_step(column(embedded, j), s, enc.bwd);
    bwd[j] = s.h;
  }
  Tensor bwd_first = bwd[0];

  // Assemble k x len memory column by column.
  Mat mem_v(2 * h, len);
  std::vector<Tensor> cols(len);
  for (Eigen::Index j = 0; j < len; ++j)
    cols[j] = concat_rows({fwd[j], bwd[j]});
  // Pack columns into one node so downstream ops see a single matrix.
  for (Eigen::Index j = 0; j < len; ++j) mem_v.col(j) = cols[j].value();
  std::vector<int> ids(len);
  for (Eigen::Index j = 0; j < len; ++j) ids[j] = cols[j].id;
  Tensor memory = tape.emplace(std::move(mem_v), [ids](Tape& t, int self) {
    const Mat& dy = t.grad_of(self);
    for (std::size_t j = 0; j < ids.size(); ++j)
      t.grad_ref(ids[j]) += dy.col(static_cast<Eigen::Index>(j));
  });

  return {memory, concat_rows({fwd_last, bwd_first})};
}

TapedMlp put_on_tape(Tape& tape, const MlpParams& p) {
  return {tape.leaf(p.w), tape.leaf(p.b)};
}

Tensor mlp_forward(Tensor s_q, Tensor s_d, Tensor r, const TapedMlp& p) {
  if (s_q.rows() != s_d.rows() || s_q.rows() != r.rows())
    throw ShapeError("mlp_forward: width mismatch");
  Tensor in = concat_rows({s_q, s_d, r});
  return tanh_t(add(matmul(p.w, in), p.b));
}

}  // namespace nse
