#include <cmath>

#include "doctest.h"
#include "nse/model.hpp"
#include "nse/prediction.hpp"

using namespace nse;

namespace {

// Plain-Eigen re-derivation of one read/compose/write/gate step, kept free
// of the tape machinery so it can serve as an independent oracle.
struct OracleStep {
  Vec l_q, s_q, z_q, l_d, s_d, r, c, g_q;
  Mat m_written, m_gated;
};

Vec plain_softmax(const Vec& x) {
  Vec y = (x.array() - x.maxCoeff()).exp();
  return y / y.sum();
}

Vec plain_sigmoid(const Vec& x) {
  return (1.0 / (1.0 + (-x.array()).exp())).matrix();
}

Vec plain_lstm(const Vec& x, Vec& h, Vec& c, const LstmParams& p) {
  const Eigen::Index n = p.w_h.cols();
  Vec pre = p.w_x * x + p.w_h * h + p.b.col(0);
  Vec i = plain_sigmoid(pre.segment(0, n));
  Vec f = plain_sigmoid(pre.segment(n, n));
  Vec o = plain_sigmoid(pre.segment(2 * n, n));
  Vec cand = pre.segment(3 * n, n).array().tanh();
  c = f.cwiseProduct(c) + i.cwiseProduct(cand);
  h = o.cwiseProduct(c.array().tanh().matrix());
  return h;
}

OracleStep oracle_step(const Mat& m_q, const Mat& m_d, const Vec& s_q0,
                       const Vec& s_d0, const LstmParams& read_p,
                       const LstmParams& write_p, const MlpParams& mlp_p) {
  OracleStep o;
  Vec cat(s_q0.size() + s_d0.size());
  cat << s_q0, s_d0;
  Vec rh = Vec::Zero(read_p.w_h.cols());
  Vec rc = Vec::Zero(read_p.w_h.cols());
  o.r = plain_lstm(cat, rh, rc, read_p);
  o.l_q = m_q.transpose() * o.r;
  o.s_q = m_q * plain_softmax(o.l_q);
  o.z_q = plain_sigmoid(o.l_q);
  o.l_d = m_d.transpose() * o.s_q;
  o.s_d = m_d * plain_softmax(o.l_d);
  Vec mlp_in(3 * o.s_q.size());
  mlp_in << o.s_q, o.s_d, o.r;
  o.c = (mlp_p.w * mlp_in + mlp_p.b.col(0)).array().tanh();
  o.m_written = Mat(m_q.rows(), m_q.cols());
  for (Eigen::Index j = 0; j < m_q.cols(); ++j)
    o.m_written.col(j) = m_q.col(j) * o.z_q(j) + o.s_d * (1.0 - o.z_q(j));
  Vec wh = Vec::Zero(write_p.w_h.cols());
  Vec wc = Vec::Zero(write_p.w_h.cols());
  Vec w = plain_lstm(o.c, wh, wc, write_p);
  o.g_q = plain_sigmoid(m_q.transpose() * w);
  o.m_gated = Mat(m_q.rows(), m_q.cols());
  for (Eigen::Index j = 0; j < m_q.cols(); ++j)
    o.m_gated.col(j) =
        o.m_written.col(j) * (1.0 - o.g_q(j)) + m_q.col(j) * o.g_q(j);
  return o;
}

}  // namespace

TEST_CASE("init_states") {
  Tape tape;
  SUBCASE("zero inputs give an all-zero state") {
    ControllerState s = init_states(tape, tape.leaf(Mat::Zero(3, 1)),
                                    tape.leaf(Mat::Zero(3, 1)), 3);
    CHECK(s.s_q.value().isZero(0.0));
    CHECK(s.s_d.value().isZero(0.0));
    CHECK(s.read_state.c.value().isZero(0.0));
    CHECK(s.write_state.c.value().isZero(0.0));
  }
  SUBCASE("passes encoder last states through verbatim") {
    Mat q = Mat::Random(3, 1), d = Mat::Random(3, 1);
    ControllerState s = init_states(tape, tape.leaf(q), tape.leaf(d), 3);
    CHECK(s.s_q.value() == q);
    CHECK(s.s_d.value() == d);
  }
  SUBCASE("width mismatch rejected") {
    Tensor q = tape.leaf(Mat::Zero(3, 1));
    Tensor d = tape.leaf(Mat::Zero(4, 1));
    CHECK_THROWS_AS(init_states(tape, q, d, 3), ShapeError);
  }
}

TEST_CASE("read_step basics") {
  Rng rng(3);
  const Eigen::Index k = 2;
  LstmParams read_p = LstmParams::init(rng, 2 * k, k);
  Tape tape;
  TapedLstm read = put_on_tape(tape, read_p);

  SUBCASE("|Q| = 1 collapses the query softmax") {
    Mat m_q = rng.uniform_matrix(k, 1, -1, 1);
    Mat m_d = rng.uniform_matrix(k, 3, -1, 1);
    Vec qmask = Vec::Ones(1), dmask = Vec::Ones(3);
    ControllerState s = init_states(tape, tape.leaf(rng.uniform_matrix(k, 1, -1, 1)),
                                    tape.leaf(rng.uniform_matrix(k, 1, -1, 1)), k);
    ReadOutput out = read_step(s, tape.leaf(m_q), tape.leaf(m_d), read,
                               qmask, dmask);
    CHECK(out.s_q.value().isApprox(m_q, 1e-14));
  }
  SUBCASE("zero query memory gives z = 0.5 everywhere") {
    Mat m_q = Mat::Zero(k, 4);
    Mat m_d = rng.uniform_matrix(k, 3, -1, 1);
    Vec qmask = Vec::Ones(4), dmask = Vec::Ones(3);
    ControllerState s = init_states(tape, tape.leaf(rng.uniform_matrix(k, 1, -1, 1)),
                                    tape.leaf(rng.uniform_matrix(k, 1, -1, 1)), k);
    ReadOutput out = read_step(s, tape.leaf(m_q), tape.leaf(m_d), read,
                               qmask, dmask);
    for (int j = 0; j < 4; ++j)
      CHECK(out.z_q.value()(j, 0) == doctest::Approx(0.5));
  }
}

TEST_CASE("full step matches the independent hand-arithmetic oracle") {
  Rng rng(41);
  const Eigen::Index k = 2;
  LstmParams read_p = LstmParams::init(rng, 2 * k, k);
  LstmParams write_p = LstmParams::init(rng, k, k);
  MlpParams mlp_p = MlpParams::init(rng, k);
  Mat m_q = rng.uniform_matrix(k, 2, -1, 1);
  Mat m_d = rng.uniform_matrix(k, 3, -1, 1);
  Vec s_q0 = rng.uniform_matrix(k, 1, -1, 1).col(0);
  Vec s_d0 = rng.uniform_matrix(k, 1, -1, 1).col(0);

  OracleStep o = oracle_step(m_q, m_d, s_q0, s_d0, read_p, write_p, mlp_p);

  Tape tape;
  Vec qmask = Vec::Ones(2), dmask = Vec::Ones(3);
  ControllerState s = init_states(tape, tape.leaf(s_q0), tape.leaf(s_d0), k);
  Tensor mq_t = tape.leaf(m_q);
  ReadOutput read = read_step(s, mq_t, tape.leaf(m_d),
                              put_on_tape(tape, read_p), qmask, dmask);
  CHECK(read.l_q.value().col(0).isApprox(o.l_q, 1e-10));
  CHECK(read.s_q.value().col(0).isApprox(o.s_q, 1e-10));
  CHECK(read.z_q.value().col(0).isApprox(o.z_q, 1e-10));
  CHECK(read.l_d.value().col(0).isApprox(o.l_d, 1e-10));
  CHECK(read.s_d.value().col(0).isApprox(o.s_d, 1e-10));

  TapedMlp mlp = put_on_tape(tape, mlp_p);
  Tensor c = mlp_forward(read.s_q, read.s_d, read.r, mlp);
  CHECK(c.value().col(0).isApprox(o.c, 1e-10));

  Tensor m_new = write_memory(mq_t, read.z_q, read.s_d);
  CHECK(m_new.value().isApprox(o.m_written, 1e-10));

  GateOutput gate = gate_memory(m_new, mq_t, c, s.write_state,
                                put_on_tape(tape, write_p), qmask);
  CHECK(gate.g_q.value().col(0).isApprox(o.g_q, 1e-10));
  CHECK(gate.memory.value().isApprox(o.m_gated, 1e-10));
}

TEST_CASE("write_memory") {
  Tape tape;
  SUBCASE("z = 1 preserves the memory") {
    Mat m = Mat::Random(3, 4);
    Tensor out = write_memory(tape.leaf(m), tape.leaf(Mat::Ones(4, 1)),
                              tape.leaf(Mat::Random(3, 1)));
    CHECK(out.value() == m);
  }
  SUBCASE("hand example") {
    Mat m(2, 2);
    m << 1, 2, 3, 4;
    Mat z(2, 1);
    z << 1, 0;
    Mat sd(2, 1);
    sd << 5, 6;
    Tensor out = write_memory(tape.leaf(m), tape.leaf(z), tape.leaf(sd));
    Mat want(2, 2);
    want << 1, 5, 3, 6;
    CHECK(out.value() == want);
  }
  SUBCASE("z = 0 writes s_d into every column") {
    Mat sd = Mat::Random(3, 1);
    Tensor out = write_memory(tape.leaf(Mat::Random(3, 4)),
                              tape.leaf(Mat::Zero(4, 1)), tape.leaf(sd));
    for (int j = 0; j < 4; ++j) CHECK(out.value().col(j) == sd);
  }
  SUBCASE("z outside [0,1] rejected") {
    Tensor m = tape.leaf(Mat::Random(2, 2));
    Tensor z = tape.leaf(Mat::Constant(2, 1, 1.5));
    Tensor sd = tape.leaf(Mat::Random(2, 1));
    CHECK_THROWS_AS(write_memory(m, z, sd), ShapeError);
  }
  SUBCASE("result is a per-column convex combination") {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
      Mat m = rng.uniform_matrix(3, 5, -2, 2);
      Mat z = rng.uniform_matrix(5, 1, 0, 1);
      Mat sd = rng.uniform_matrix(3, 1, -2, 2);
      Tensor out =
          write_memory(tape.leaf(m), tape.leaf(z), tape.leaf(sd));
      for (int j = 0; j < 5; ++j)
        for (int i = 0; i < 3; ++i) {
          double lo = std::min(m(i, j), sd(i, 0));
          double hi = std::max(m(i, j), sd(i, 0));
          CHECK(out.value()(i, j) >= lo - 1e-15);
          CHECK(out.value()(i, j) <= hi + 1e-15);
        }
    }
  }
}

TEST_CASE("gate_memory") {
  Rng rng(12);
  const Eigen::Index k = 2;
  LstmParams write_p = LstmParams::init(rng, k, k);
  Vec qmask = Vec::Ones(3);

  SUBCASE("identical memories are a fixed point regardless of the gate") {
    Tape tape;
    Mat m = rng.uniform_matrix(k, 3, -1, 1);
    TapedLstm wl = put_on_tape(tape, write_p);
    LstmState ws = lstm_zero_state(tape, k);
    Tensor mt = tape.leaf(m);
    GateOutput out = gate_memory(mt, tape.leaf(m),
                                 tape.leaf(rng.uniform_matrix(k, 1, -1, 1)),
                                 ws, wl, qmask);
    CHECK(out.memory.value().isApprox(m, 1e-15));
  }
  SUBCASE("zero write params give a half/half blend") {
    Tape tape;
    LstmParams zero_p{Mat::Zero(4 * k, k), Mat::Zero(4 * k, k),
                      Mat::Zero(4 * k, 1)};
    Mat m_new = rng.uniform_matrix(k, 3, -1, 1);
    Mat m_prev = rng.uniform_matrix(k, 3, -1, 1);
    TapedLstm wl = put_on_tape(tape, zero_p);
    LstmState ws = lstm_zero_state(tape, k);
    GateOutput out = gate_memory(tape.leaf(m_new), tape.leaf(m_prev),
                                 tape.leaf(rng.uniform_matrix(k, 1, -1, 1)),
                                 ws, wl, qmask);
    CHECK(out.memory.value().isApprox(0.5 * (m_new + m_prev), 1e-12));
  }
}

TEST_CASE("termination_score") {
  Rng rng(19);
  const Eigen::Index k = 3;
  LstmParams write_p = LstmParams::init(rng, k, k);

  SUBCASE("zero projection gives e = 0.5") {
    Tape tape;
    TapedLstm wl = put_on_tape(tape, write_p);
    LstmState ws = lstm_zero_state(tape, k);
    TerminationOutput out = termination_score(
        tape.leaf(rng.uniform_matrix(k, 1, -1, 1)),
        tape.leaf(Mat::Zero(k, 1)), ws, wl);
    CHECK(out.e.scalar() == doctest::Approx(0.5));
  }
  SUBCASE("e stays strictly inside (0,1)") {
    for (int trial = 0; trial < 10; ++trial) {
      Tape tape;
      TapedLstm wl = put_on_tape(tape, write_p);
      LstmState ws = lstm_zero_state(tape, k);
      TerminationOutput out = termination_score(
          tape.leaf(rng.uniform_matrix(k, 1, -3, 3)),
          tape.leaf(rng.uniform_matrix(k, 1, -3, 3)), ws, wl);
      CHECK(out.e.scalar() > 0.0);
      CHECK(out.e.scalar() < 1.0);
    }
  }
  SUBCASE("gradient of e w.r.t. the projection matches finite differences") {
    Mat c0 = rng.uniform_matrix(k, 1, -1, 1);
    Mat o0 = rng.uniform_matrix(k, 1, -1, 1);
    auto f = [&](Tape& t, Tensor o) {
      TapedLstm wl = put_on_tape(t, write_p);
      LstmState ws = lstm_zero_state(t, k);
      return termination_score(t.leaf(c0), o, ws, wl).e;
    };
    auto rep = grad_check("termination projection", f, o0, 1e-5, 3, 5);
    CHECK(rep.max_rel_error < 1e-6);
  }
}

TEST_CASE("halting_distribution") {
  Tape tape;
  auto leaf = [&tape](double v) { return tape.leaf(Mat::Constant(1, 1, v)); };

  SUBCASE("near-one first score halts immediately") {
    auto p = halting_distribution(tape, {leaf(1.0 - 1e-9), leaf(0.5)}, 3);
    CHECK(p[0].scalar() == doctest::Approx(1.0));
    CHECK(p[1].scalar() == doctest::Approx(0.0).epsilon(1e-8));
    CHECK(p[2].scalar() == doctest::Approx(0.0).epsilon(1e-8));
  }
  SUBCASE("hand example T=3, e=(0.5, 0.5)") {
    auto p = halting_distribution(tape, {leaf(0.5), leaf(0.5)}, 3);
    CHECK(p[0].scalar() == doctest::Approx(0.5));
    CHECK(p[1].scalar() == doctest::Approx(0.25));
    CHECK(p[2].scalar() == doctest::Approx(0.25));
  }
  SUBCASE("T = 1 is the forced final step") {
    auto p = halting_distribution(tape, {}, 1);
    REQUIRE(p.size() == 1);
    CHECK(p[0].scalar() == 1.0);
  }
  SUBCASE("T = 0 rejected") {
    CHECK_THROWS_AS(halting_distribution(tape, {}, 0), ShapeError);
  }
  SUBCASE("sums to one for random scores, T in 1..16") {
    Rng rng(55);
    for (int T = 1; T <= 16; ++T) {
      for (int trial = 0; trial < 20; ++trial) {
        std::vector<Tensor> e;
        for (int t = 0; t < T - 1; ++t)
          e.push_back(leaf(rng.uniform(1e-6, 1.0 - 1e-6)));
        auto p = halting_distribution(tape, e, T);
        double total = 0.0;
        for (const Tensor& pt : p) {
          CHECK(pt.scalar() >= 0.0);
          CHECK(pt.scalar() <= 1.0);
          total += pt.scalar();
        }
        CHECK(std::abs(total - 1.0) <= 1e-12);
      }
    }
  }
}

namespace {

ModelInput tiny_input(Rng& rng, Eigen::Index vocab, Eigen::Index lq,
                      Eigen::Index ld) {
  ModelInput in;
  for (Eigen::Index i = 0; i < ld; ++i)
    in.doc_ids.push_back(static_cast<int>(rng.below(vocab - 3)) + 3);
  for (Eigen::Index i = 0; i < lq; ++i)
    in.query_ids.push_back(static_cast<int>(rng.below(vocab - 3)) + 3);
  in.query_ids[lq / 2] = 1;  // placeholder
  in.doc_mask = Vec::Ones(ld);
  in.query_mask = Vec::Ones(lq);
  return in;
}

}  // namespace

TEST_CASE("forward_pass") {
  Rng rng(71);
  ModelConfig cfg{12, 5, 4};
  ModelParams params = ModelParams::init(rng, cfg);
  ModelInput in = tiny_input(rng, cfg.vocab, 3, 6);

  SUBCASE("T=1 gating and adaptive modes coincide") {
    Tape t1, t2;
    ForwardResult a = forward_pass(t1, TapedModel::put_on_tape(t1, params),
                                   in, HaltingMode::gating(1));
    ForwardResult b = forward_pass(t2, TapedModel::put_on_tape(t2, params),
                                   in, HaltingMode::adaptive(1));
    CHECK(a.steps[0].l_d.isApprox(b.steps[0].l_d, 0.0));
    CHECK(b.halting.size() == 1);
    CHECK(b.halting[0].scalar() == 1.0);
  }
  SUBCASE("trace shapes and ranges") {
    for (HaltingMode mode : {HaltingMode::gating(3), HaltingMode::adaptive(3)}) {
      Tape tape;
      ForwardResult r = forward_pass(
          tape, TapedModel::put_on_tape(tape, params), in, mode);
      CHECK(r.steps.size() == 3);
      for (const StepTrace& s : r.steps) {
        CHECK(s.z_q.size() == 3);
        CHECK(s.z_q.minCoeff() > 0.0);
        CHECK(s.z_q.maxCoeff() < 1.0);
        if (mode.variant == HaltingVariant::QueryGating) {
          CHECK(s.g_q.minCoeff() > 0.0);
          CHECK(s.g_q.maxCoeff() < 1.0);
        }
      }
      if (mode.variant == HaltingVariant::AdaptiveComputation) {
        double total = 0.0;
        for (const Tensor& p : r.halting) total += p.scalar();
        CHECK(std::abs(total - 1.0) <= 1e-12);
      }
    }
  }
  SUBCASE("deterministic with dropout off") {
    Tape t1, t2;
    ForwardResult a = forward_pass(t1, TapedModel::put_on_tape(t1, params),
                                   in, HaltingMode::gating(2));
    ForwardResult b = forward_pass(t2, TapedModel::put_on_tape(t2, params),
                                   in, HaltingMode::gating(2));
    for (std::size_t t = 0; t < a.steps.size(); ++t) {
      CHECK(a.steps[t].l_d == b.steps[t].l_d);
      CHECK(a.steps[t].z_q == b.steps[t].z_q);
      CHECK(a.steps[t].g_q == b.steps[t].g_q);
    }
  }
  SUBCASE("padded suffix positions carry no attention and stay preserved") {
    ModelInput padded = in;
    padded.doc_ids.resize(9, 0);
    padded.doc_mask = Vec::Zero(9);
    padded.doc_mask.head(6).setOnes();
    padded.query_ids.resize(5, 0);
    padded.query_mask = Vec::Zero(5);
    padded.query_mask.head(3).setOnes();
    Tape tape;
    ForwardResult r = forward_pass(
        tape, TapedModel::put_on_tape(tape, params), in, HaltingMode::gating(2));
    Tape tape2;
    ForwardResult rp = forward_pass(tape2,
                                    TapedModel::put_on_tape(tape2, params),
                                    padded, HaltingMode::gating(2));
    for (std::size_t t = 0; t < r.steps.size(); ++t) {
      // Padding must not change the real positions' attention.
      CHECK(rp.steps[t].attention_d.head(6).isApprox(r.steps[t].attention_d,
                                                     1e-12));
      CHECK(rp.steps[t].attention_d.tail(3).isZero(0.0));
      CHECK(rp.steps[t].z_q.tail(2).isApproxToConstant(1.0, 1e-15));
      CHECK(rp.steps[t].g_q.tail(2).isApproxToConstant(1.0, 1e-15));
    }
  }
}

TEST_CASE("full-loop gradients match finite differences (spot check)") {
  Rng rng(91);
  ModelConfig cfg{10, 3, 4};
  ModelParams params = ModelParams::init(rng, cfg);
  // The default init range leaves some gradients near the finite-difference
  // noise floor; scaling up keeps the probes meaningful.
  params.for_each([](const char*, Mat& m) { m *= 5.0; });
  ModelInput in = tiny_input(rng, cfg.vocab, 3, 6);
  Vec cand = Vec::Zero(6);
  cand(1) = 1.0;
  cand(4) = 1.0;

  for (HaltingMode mode : {HaltingMode::gating(3), HaltingMode::adaptive(3)}) {
    auto loss_of = [&](const ModelParams& p) {
      Tape tape;
      TapedModel m = TapedModel::put_on_tape(tape, p);
      ForwardResult r = forward_pass(tape, m, in, mode);
      std::vector<Tensor> probs = candidate_probabilities(r, {cand}, mode);
      return cross_entropy_loss(probs[0]).scalar();
    };
    // Analytic grads.
    GradMap grads;
    {
      Tape tape;
      TapedModel m = TapedModel::put_on_tape(tape, params);
      ForwardResult r = forward_pass(tape, m, in, mode);
      std::vector<Tensor> probs = candidate_probabilities(r, {cand}, mode);
      tape.backward(cross_entropy_loss(probs[0]));
      m.accumulate_grads(grads);
    }
    // Probe a few coordinates in two representative groups.
    for (const char* group : {"read.w_x", "compose.w"}) {
      Mat* target = nullptr;
      params.for_each([&](const char* name, Mat& m) {
        if (std::string(name) == group) target = &m;
      });
      REQUIRE(target);
      for (int probe = 0; probe < 5; ++probe) {
        Eigen::Index idx = static_cast<Eigen::Index>(
            rng.below(static_cast<std::uint64_t>(target->size())));
        const double eps = 1e-5;
        const double orig = (*target)(idx);
        (*target)(idx) = orig + eps;
        double up = loss_of(params);
        (*target)(idx) = orig - eps;
        double down = loss_of(params);
        (*target)(idx) = orig;
        const double numeric = (up - down) / (2 * eps);
        const double analytic = grads.at(group)(idx);
        const double denom =
            std::max({std::abs(numeric), std::abs(analytic), 1e-6});
        CHECK(std::abs(numeric - analytic) / denom < 1e-4);
      }
    }
  }
}
