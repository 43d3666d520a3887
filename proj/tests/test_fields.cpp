#include <doctest.h>

#include <cmath>

#include "nsrf/dataio.hpp"
#include "nsrf/fields.hpp"
#include "support.hpp"

using namespace nsrf;

TEST_CASE("positional encoding") {
  PositionalEncoding none{0};
  const Mat v = (Mat(2, 1) << 1.0, 2.0).finished();
  CHECK(none.encode(v) == v);

  PositionalEncoding one{1};
  const Mat e = one.encode(Mat::Zero(1, 1));
  CHECK(e.rows() == 3);
  CHECK(e(0, 0) == 0.0);
  CHECK(e(1, 0) == 0.0);
  CHECK(e(2, 0) == 1.0);

  PositionalEncoding six{6};
  CHECK(six.output_dim(3) == 39);
  Mat x(3, 4);
  x << 0.1, -0.9, 0.33, 0.71, 0.5, 0.25, -0.6, 0.0, -0.45, 0.8, 0.05, -1.0;
  const Mat enc = six.encode(x);
  CHECK(enc.rows() == 39);
  for (int k = 0; k < 6; ++k) {
    const double w = std::ldexp(M_PI, k);
    const Mat s = enc.middleRows(3 + 6 * k, 3);
    const Mat c = enc.middleRows(6 + 6 * k, 3);
    CHECK((s.array() - (w * x.array()).sin()).abs().maxCoeff() <= 1e-13);
    CHECK((c.array() - (w * x.array()).cos()).abs().maxCoeff() <= 1e-13);
  }

  Tape t;
  const Var xv = constant(t, x);
  CHECK((six.encode(xv).value() - enc).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("geometric init starts near a sphere") {
  SdfConfig c;
  c.hidden_layers = 4;
  c.width = 64;
  c.feature_dim = 16;
  c.skip_layer = 2;
  SdfNetwork net(c, 3);
  const SdfBatch centre = net.evaluate(Mat::Zero(3, 1), false);
  CHECK(centre.sdf(0, 0) < 0.0);
  CHECK(std::abs(centre.sdf(0, 0) + c.init_radius) <= 0.2);

  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  Mat dirs(3, 1000);
  for (Index j = 0; j < dirs.cols(); ++j) dirs.col(j) = Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized();
  CHECK(net.evaluate(c.init_radius * dirs, false).sdf.cwiseAbs().mean() <= 0.2);

  Mat prev = net.evaluate(0.3 * dirs, false).sdf;
  for (double r : {0.5, 0.7, 0.9}) {
    const Mat next = net.evaluate(r * dirs, false).sdf;
    CHECK((next.array() > prev.array()).all());
    prev = next;
  }

  const Mat pts = 0.6 * dirs.leftCols(50);
  const Mat a = net.evaluate(pts, false).sdf;
  const Mat b = net.evaluate(-pts, false).sdf;
  CHECK((a - b).cwiseAbs().maxCoeff() <= 0.1);
  CHECK(net.evaluate(pts, false).sdf == a);
}

TEST_CASE("analytic gradient matches finite differences of the network") {
  SdfConfig c;
  c.hidden_layers = 3;
  c.width = 16;
  c.feature_dim = 8;
  c.skip_layer = 2;
  c.frequencies = 3;
  SdfNetwork net(c, 8);
  Mat x(3, 3);
  x << 0.1, -0.4, 0.6, 0.3, 0.2, -0.5, -0.2, 0.7, 0.1;
  const SdfBatch b = net.evaluate(x, true);
  const double h = 1e-6;
  for (int d = 0; d < 3; ++d) {
    Mat xp = x, xm = x;
    xp.row(d).array() += h;
    xm.row(d).array() -= h;
    const Mat fd = (net.evaluate(xp, false).sdf - net.evaluate(xm, false).sdf) / (2 * h);
    CHECK((fd - b.gradient.row(d)).cwiseAbs().maxCoeff() <= 1e-5);
  }

  Tape t;
  auto leaves = bind_leaves(t, net.parameters());
  const TapeSdf ts = net.evaluate(leaves, constant(t, x));
  CHECK((ts.sdf.value() - b.sdf).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK((ts.feature.value() - b.feature).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("normals") {
  SyntheticSceneSpec spec;
  const Eigen::Vector3d n = analytic_gradient(spec, Eigen::Vector3d(0, 0, 0.5));
  CHECK((n - Eigen::Vector3d::UnitZ()).norm() <= 1e-15);

  Mat g(3, 3);
  g << 0, 3, 0, 0, 4, 0, 0, 0, 2;
  CHECK(normalize_normals(g) == 1);
  CHECK(g.col(0) == Eigen::Vector3d::UnitZ());
  CHECK((g.col(1) - Eigen::Vector3d(0.6, 0.8, 0)).norm() <= 1e-15);

  Tape t;
  std::size_t degenerate = 0;
  const Var nv = normalized_normals(constant(t, Mat::Zero(3, 1)), &degenerate);
  CHECK(degenerate == 1);
  CHECK(nv.value().col(0) == Eigen::Vector3d::UnitZ());
}

TEST_CASE("colour network") {
  ColorConfig cc;
  cc.hidden_layers = 2;
  cc.width = 8;
  cc.view_frequencies = 2;
  ColorNetwork zero(cc, 4, 1);
  for (ParamRef& p : zero.parameters()) p.map().setZero();
  const Mat x = Mat::Random(3, 2), v = Mat::Random(3, 2), n = Mat::Random(3, 2), f = Mat::Random(4, 2);
  CHECK((zero.evaluate(x, v, n, f).array() == 0.5).all());

  ColorNetwork net(cc, 4, 2);
  const Mat rgb = net.evaluate(x, v, n, f);
  CHECK((rgb.array() > 0.0).all());
  CHECK((rgb.array() < 1.0).all());

  Eigen::Vector3d dir = Eigen::Vector3d(0.3, -0.5, 0.8).normalized();
  auto view_fn = [&](Tape& t, const Var& d) {
    auto leaves = bind_leaves(t, net.parameters());
    const Var out = net.evaluate(leaves, constant(t, Mat(x.col(0))), d, constant(t, Mat(n.col(0))),
                                 constant(t, Mat(f.col(0))));
    return sum(out * constant(t, Mat((Mat(3, 1) << 1.0, -0.5, 2.0).finished())));
  };
  const GradCheckReport r = grad_check(view_fn, dir, 1e-6);
  CHECK(r.ok);
  CHECK(r.max_rel_error <= 1e-5);
}

TEST_CASE("neural field parameters and sharpness") {
  FieldConfig fc = test::tiny_field(8);
  NeuralField field(fc, 4);
  const auto params = field.parameters();
  CHECK(params.back().name == "sharpness.variance");
  CHECK(field.sharpness() == doctest::Approx(std::exp(10.0 * 0.3)));
  CHECK(total_size(params) ==
        field.sdf_network().parameter_count() + field.color_network().parameter_count() + 1);
  for (std::size_t i = 1; i < params.size(); ++i) CHECK(params[i].name != params[i - 1].name);

  NeuralField again(fc, 4);
  CHECK(flatten(again.parameters()) == flatten(field.parameters()));
  NeuralField other(fc, 5);
  CHECK(flatten(other.parameters()) != flatten(field.parameters()));
}

TEST_CASE("sdf gradient components pass the gradient check") {
  SdfConfig c;
  c.hidden_layers = 2;
  c.width = 6;
  c.feature_dim = 4;
  c.skip_layer = 1;
  c.frequencies = 2;
  SdfNetwork net(c, 12);
  const Mat pts = (Mat(3, 2) << 0.2, -0.3, 0.5, 0.1, -0.4, 0.6).finished();
  const Eigen::VectorXd point = flatten(net.parameters());
  for (int d = 0; d < 3; ++d) {
    auto fn = [&](Tape& t, const Var& p) {
      std::vector<Var> leaves;
      Index k = 0;
      for (const ParamRef& r : net.parameters()) {
        leaves.push_back(reshape(slice_rows(p, k, k + r.size()), r.rows, r.cols));
        k += r.size();
      }
      const Var x = constant(t, pts);
      const Var g = spatial_gradient(net.evaluate(leaves, x).sdf, x);
      return sum(slice_rows(g, d, d + 1));
    };
    const GradCheckReport r = grad_check(fn, point, 1e-6);
    CHECK(r.ok);
    CHECK(r.max_rel_error <= 1e-5);
  }
}
