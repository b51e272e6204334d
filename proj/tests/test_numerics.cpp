#include "doctest.h"
#include "nse/random.hpp"
#include "nse/tensor.hpp"

using namespace nse;

TEST_CASE("matmul basics") {
  Tape tape;
  SUBCASE("identity") {
    Tensor i2 = tape.leaf(Mat::Identity(2, 2));
    Mat a(2, 2);
    a << 1, 2, 3, 4;
    Tensor at = tape.leaf(a);
    CHECK(matmul(i2, at).value() == a);
  }
  SUBCASE("hand arithmetic") {
    Mat a(1, 2), b(2, 1);
    a << 1, 2;
    b << 3, 4;
    Tensor r = matmul(tape.leaf(a), tape.leaf(b));
    CHECK(r.scalar() == doctest::Approx(11.0));
  }
  SUBCASE("zero annihilates") {
    Mat b = Mat::Random(3, 4);
    Tensor r = matmul(tape.leaf(Mat::Zero(2, 3)), tape.leaf(b));
    CHECK(r.value().isZero(0.0));
  }
  SUBCASE("shape mismatch rejected") {
    Tensor a = tape.leaf(Mat::Zero(2, 3));
    Tensor b = tape.leaf(Mat::Zero(2, 3));
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
  }
}

TEST_CASE("softmax") {
  Tape tape;
  SUBCASE("symmetry") {
    Tensor y = softmax(tape.leaf(Mat::Zero(2, 1)));
    CHECK(y.value()(0, 0) == doctest::Approx(0.5));
    CHECK(y.value()(1, 0) == doctest::Approx(0.5));
  }
  SUBCASE("large inputs do not overflow") {
    Mat x = Mat::Constant(3, 1, 1000.0);
    Tensor y = softmax(tape.leaf(x));
    for (int i = 0; i < 3; ++i)
      CHECK(y.value()(i, 0) == doctest::Approx(1.0 / 3.0));
  }
  SUBCASE("mask zeroes positions") {
    Vec mask(3);
    mask << 1, 1, 0;
    Tensor y = softmax(tape.leaf(Mat::Zero(3, 1)), &mask);
    CHECK(y.value()(0, 0) == doctest::Approx(0.5));
    CHECK(y.value()(1, 0) == doctest::Approx(0.5));
    CHECK(y.value()(2, 0) == 0.0);
  }
  SUBCASE("all-masked rejected") {
    Vec mask = Vec::Zero(3);
    Tensor x = tape.leaf(Mat::Zero(3, 1));
    CHECK_THROWS_AS(softmax(x, &mask), ShapeError);
  }
  SUBCASE("sums to one for random finite input") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
      Mat x = rng.uniform_matrix(7, 1, -50.0, 50.0);
      Tensor y = softmax(tape.leaf(x));
      CHECK(y.value().minCoeff() >= 0.0);
      CHECK(std::abs(y.value().sum() - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("sigmoid") {
  Tape tape;
  CHECK(sigmoid(tape.leaf(Mat::Zero(1, 1))).scalar() == doctest::Approx(0.5));
  CHECK(sigmoid(tape.leaf(Mat::Constant(1, 1, 1e4))).scalar() ==
        doctest::Approx(1.0));
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    Mat x = rng.uniform_matrix(1, 1, -30.0, 30.0);
    double sp = sigmoid(tape.leaf(x)).scalar();
    double sn = sigmoid(tape.leaf((-x.array()).matrix())).scalar();
    CHECK(sp > 0.0);
    CHECK(sp < 1.0);
    CHECK(sp + sn == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("backward") {
  SUBCASE("sum gradient is ones") {
    Tape tape;
    Tensor x = tape.leaf(Mat::Random(3, 1));
    tape.backward(sum(x));
    CHECK(x.grad() == Mat::Ones(3, 1));
  }
  SUBCASE("product rule") {
    Tape tape;
    Tensor x = tape.leaf(Mat::Constant(1, 1, 3.0));
    Tensor y = tape.leaf(Mat::Constant(1, 1, 5.0));
    tape.backward(mul(x, y));
    CHECK(x.grad()(0, 0) == doctest::Approx(5.0));
    CHECK(y.grad()(0, 0) == doctest::Approx(3.0));
  }
  SUBCASE("non-scalar loss rejected") {
    Tape tape;
    Tensor x = tape.leaf(Mat::Zero(2, 1));
    CHECK_THROWS_AS(tape.backward(x), ShapeError);
  }
  SUBCASE("accumulation without reset") {
    Tape tape;
    Tensor x = tape.leaf(Mat::Constant(1, 1, 2.0));
    Tensor loss = mul(x, x);
    tape.backward(loss);
    tape.backward(loss);
    CHECK(x.grad()(0, 0) == doctest::Approx(8.0));  // 2 * d(x^2)/dx
  }
}

TEST_CASE("grad_check on closed forms") {
  SUBCASE("quadratic form") {
    Rng rng(7);
    Mat a = rng.uniform_matrix(4, 4, -1.0, 1.0);
    Mat x0 = rng.uniform_matrix(4, 1, -1.0, 1.0);
    auto f = [&a](Tape& t, Tensor x) {
      Tensor at = t.leaf(a);
      return matmul(matmul(transpose(x), at), x);
    };
    auto rep = grad_check("quadratic", f, x0, 1e-5, 16, 1);
    CHECK(rep.max_rel_error < 1e-7);
  }
  SUBCASE("softmax cross entropy") {
    Rng rng(9);
    Mat x0 = rng.uniform_matrix(4, 1, -2.0, 2.0);
    auto f = [](Tape& t, Tensor x) {
      Mat v = Mat::Zero(4, 1);
      v(2, 0) = 1.0;
      Tensor p = dot(t.leaf(v), softmax(x));
      return scale(log_t(p), -1.0);
    };
    auto rep = grad_check("softmax-xent", f, x0, 1e-5, 16, 2);
    CHECK(rep.max_rel_error < 1e-5);
  }
  SUBCASE("constant function") {
    auto f = [](Tape& t, Tensor x) {
      return add_const(scale(sum(x), 0.0), 4.0);
    };
    auto rep = grad_check("constant", f, Mat::Random(3, 1), 1e-5, 8, 3);
    CHECK(rep.max_rel_error < 1e-8);
  }
}

TEST_CASE("every primitive matches finite differences at random probes") {
  Rng rng(42);
  auto check = [&](const char* name,
                   const std::function<Tensor(Tape&, Tensor)>& f,
                   Eigen::Index rows, Eigen::Index cols, double lo,
                   double hi) {
    Mat x0 = rng.uniform_matrix(rows, cols, lo, hi);
    auto rep = grad_check(name, f, x0, 1e-5, 100, rng.next_u64());
    INFO(name);
    CHECK(rep.max_rel_error < 1e-4);
  };

  Mat w = rng.uniform_matrix(3, 5, -1.0, 1.0);
  check("matmul", [&](Tape& t, Tensor x) {
    return sum(tanh_t(matmul(t.leaf(w), x)));
  }, 5, 4, -1.0, 1.0);
  check("sigmoid", [](Tape& t, Tensor x) { return sum(sigmoid(x)); },
        4, 3, -3.0, 3.0);
  check("tanh", [](Tape& t, Tensor x) { return sum(tanh_t(x)); },
        4, 3, -3.0, 3.0);
  check("softmax", [](Tape& t, Tensor x) {
    Tensor y = softmax(x);
    return sum(mul(y, y));
  }, 6, 1, -2.0, 2.0);
  Mat m43 = rng.uniform_matrix(4, 3, -1.0, 1.0);
  check("scale_columns (z)", [&](Tape& t, Tensor x) {
    return sum(tanh_t(scale_columns(t.leaf(m43), x)));
  }, 3, 1, -1.0, 1.0);
  Mat z3 = rng.uniform_matrix(3, 1, -1.0, 1.0);
  check("scale_columns (m)", [&](Tape& t, Tensor x) {
    return sum(tanh_t(scale_columns(x, t.leaf(z3))));
  }, 4, 3, -1.0, 1.0);
  check("log", [](Tape& t, Tensor x) { return sum(log_t(x)); },
        3, 2, 0.5, 2.0);
  check("elementwise", [](Tape& t, Tensor x) {
    return sum(mul(add_const(x, 0.5), one_minus(x)));
  }, 4, 2, -1.0, 1.0);
  check("concat/rows/column", [](Tape& t, Tensor x) {
    Tensor a = column(x, 0);
    Tensor b = column(x, 1);
    Tensor c = concat_rows({a, b});
    return sum(mul(rows(c, 1, 3), rows(c, 3, 3)));
  }, 4, 2, -1.0, 1.0);
  check("embed", [](Tape& t, Tensor x) {
    Tensor e = embed_rows(x, {0, 2, 1, 2});
    return sum(tanh_t(e));
  }, 3, 4, -1.0, 1.0);
  check("dot/transpose", [](Tape& t, Tensor x) {
    Tensor a = rows(x, 0, 3);
    Tensor b = rows(x, 3, 3);
    return dot(a, sigmoid(b));
  }, 6, 1, -1.0, 1.0);
}

TEST_CASE("forward+backward is deterministic") {
  auto run = [](std::uint64_t seed, Mat* grad_out) {
    Rng rng(seed);
    Mat x0 = rng.uniform_matrix(5, 1, -1.0, 1.0);
    Mat w = rng.uniform_matrix(5, 5, -1.0, 1.0);
    Tape tape;
    Tensor x = tape.leaf(x0);
    Tensor loss = sum(sigmoid(matmul(tape.leaf(w), tanh_t(x))));
    tape.backward(loss);
    *grad_out = x.grad();
    return loss.scalar();
  };
  Mat g1, g2;
  double l1 = run(123, &g1);
  double l2 = run(123, &g2);
  CHECK(l1 == l2);
  CHECK(g1 == g2);
}
