#include <doctest.h>

#include <cmath>
#include <limits>

#include "nsrf/fields.hpp"
#include "nsrf/tape.hpp"
#include "support.hpp"

using namespace nsrf;

namespace {

Mat row(std::initializer_list<double> v) {
  Mat m(1, static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

Mat col(std::initializer_list<double> v) { return row(v).transpose(); }

}  // namespace

TEST_CASE("forward values of elementary ops") {
  Tape t;
  CHECK(softplus(constant(t, 0.0), 100.0).scalar() == doctest::Approx(std::log(2.0) / 100.0).epsilon(1e-12));
  CHECK(sigmoid(constant(t, 0.0)).scalar() == 0.5);
  const Var v = matvec(constant(t, Mat::Identity(3, 3)), constant(t, col({1, 2, 3})));
  CHECK(v.value() == col({1, 2, 3}));
  // Large arguments stay finite.
  CHECK(std::isfinite(softplus(constant(t, 1e4), 100.0).scalar()));
  CHECK(sigmoid(constant(t, -800.0)).scalar() == 0.0);
}

TEST_CASE("reverse mode on small expressions") {
  Tape t;
  const Var x = leaf(t, Mat::Constant(1, 1, 3.0));
  const Var y = leaf(t, Mat::Constant(1, 1, 4.0));
  const Grad g = backward(t, (x * y).id);
  CHECK(g.of(x.id)(0, 0) == 4.0);
  CHECK(g.of(y.id)(0, 0) == 3.0);

  Tape t2;
  const Var v = leaf(t2, col({3, 4}));
  const Mat gv = backward(t2, sum(norm2(v)).id).of(v.id);
  CHECK(gv(0, 0) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(gv(1, 0) == doctest::Approx(0.8).epsilon(1e-15));

  Tape t3;
  const Var s = leaf(t3, Mat::Constant(1, 1, 0.01));
  const double slope = backward(t3, softplus(s, 100.0).id).of(s.id)(0, 0);
  CHECK(slope == doctest::Approx(0.7310585786300049).epsilon(1e-12));
}

TEST_CASE("leaves the output does not touch get zero adjoints") {
  Tape t;
  const Var a = leaf(t, col({1, 2}));
  const Var b = leaf(t, col({5, 6}));
  const Var out = sum(square(a));
  const Grad g = backward(t, out.id);
  CHECK(g.of(b.id).isZero());
  CHECK_THROWS_AS(g.of(out.id), TapeError);
}

TEST_CASE("shape errors are reported") {
  Tape t;
  const Var a = leaf(t, Mat::Zero(2, 3));
  const Var b = leaf(t, Mat::Zero(3, 2));
  CHECK_THROWS_AS(a + b, ShapeError);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  CHECK_THROWS_AS(backward(t, a.id), ShapeError);
}

TEST_CASE("spatial gradient of simple fields") {
  Tape t;
  const Var x = leaf(t, col({1, 2, 3}));
  const Var g = spatial_gradient(sum_rows(square(x)), x);
  CHECK(g.value() == col({2, 4, 6}));

  Tape t2;
  const Var x2 = leaf(t2, col({0, 0, 2}));
  const Var n = spatial_gradient(norm2(x2), x2);
  CHECK((n.value() - col({0, 0, 1})).norm() < 1e-15);
}

TEST_CASE("spatial gradient of the fourier encoding matches the closed form") {
  Tape t;
  Mat pts(3, 2);
  pts << 0.3, -0.7, 0.1, 0.4, -0.2, 0.9;
  const Var x = leaf(t, pts);
  const Var f = sum_rows(fourier(x, 3));
  const Mat g = spatial_gradient(f, x).value();
  for (Index j = 0; j < 2; ++j) {
    for (Index d = 0; d < 3; ++d) {
      double expect = 1.0;
      for (int k = 0; k < 3; ++k) {
        const double w = std::ldexp(M_PI, k);
        expect += w * (std::cos(w * pts(d, j)) - std::sin(w * pts(d, j)));
      }
      CHECK(g(d, j) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("double backprop through the eikonal term matches finite differences") {
  // Tiny 2-layer MLP f(x) = w2 . softplus(W1 x + b1); loss = mean (|grad_x f| - 1)^2.
  Mat w1(4, 3), b1(4, 1), w2(1, 4);
  w1 << 0.3, -0.5, 0.2, 0.7, 0.1, -0.4, -0.6, 0.8, 0.3, 0.2, 0.2, -0.9;
  b1 << 0.1, -0.2, 0.05, 0.3;
  w2 << 0.5, -0.4, 0.9, 0.6;
  Mat pts(3, 5);
  pts << 0.1, -0.3, 0.5, 0.7, -0.6, 0.2, 0.4, -0.1, 0.3, 0.2, -0.5, 0.0, 0.6, -0.2, 0.4;
  Eigen::VectorXd point(w1.size() + b1.size() + w2.size());
  point << w1.reshaped(), b1, w2.reshaped();
  auto fn = [&](Tape& t, const Var& p) {
    const Var W1 = reshape(slice_rows(p, 0, 12), 4, 3);
    const Var B1 = slice_rows(p, 12, 16);
    const Var W2 = reshape(slice_rows(p, 16, 20), 1, 4);
    const Var x = constant(t, pts);
    const Var f = matmul(W2, softplus(bias_add(matmul(W1, x), B1), 10.0));
    const Var g = spatial_gradient(f, x);
    return mean(square(norm2(g) - 1.0));
  };
  const GradCheckReport r = grad_check(fn, point, 1e-5);
  CHECK(r.ok);
  CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("grad_check on a sum of squares and on a NaN forward") {
  auto squares = [](Tape&, const Var& p) { return sum(square(p)); };
  const GradCheckReport ok = grad_check(squares, Eigen::Vector3d(0.5, -1.0, 2.0), 1e-4);
  CHECK(ok.ok);
  CHECK(ok.max_rel_error <= 1e-8);

  auto bad = [](Tape&, const Var& p) { return sum(log(p)); };
  const GradCheckReport nan = grad_check(bad, Eigen::Vector2d(-1.0, 1.0), 1e-4);
  CHECK_FALSE(nan.ok);
  CHECK_FALSE(nan.message.empty());
}

TEST_CASE("full render loss on one ray passes the gradient check") {
  auto problem = test::grad_check_problem(1, 6, 4);
  const GradCheckReport r =
      grad_check([&](Tape&, const Var& p) { return problem.loss(p); }, problem.point(), 1e-6);
  CHECK(r.ok);
  CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("every op has a name") {
  for (int k = 0; k < static_cast<int>(Op::Count_); ++k) {
    CHECK(std::string(op_name(static_cast<Op>(k))) != "");
  }
}
