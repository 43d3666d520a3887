#include <doctest.h>

#include <Eigen/Geometry>
#include <cmath>
#include <random>

#include "nsrf/cameras.hpp"

using namespace nsrf;

TEST_CASE("so3_exp fixtures") {
  CHECK(so3_exp(Eigen::Vector3d::Zero().eval()) == Eigen::Matrix3d::Identity());

  Eigen::Matrix3d expect;
  expect << 1, 0, 0, 0, 0, -1, 0, 1, 0;
  const Eigen::Matrix3d r = so3_exp(Eigen::Vector3d(M_PI / 2, 0, 0));
  CHECK((r - expect).cwiseAbs().maxCoeff() <= 1e-12);

  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 20; ++i) {
    const Eigen::Vector3d w = Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized() * 0.3;
    const Eigen::Matrix3d q = so3_exp(w);
    CHECK((q.transpose() * q - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= 1e-12);
    // Eigen's angle-axis is an independent Rodrigues implementation.
    const Eigen::Matrix3d e = Eigen::AngleAxisd(w.norm(), w.normalized()).toRotationMatrix();
    CHECK((q - e).cwiseAbs().maxCoeff() <= 1e-15);
  }
  CHECK_THROWS_AS(so3_exp(Eigen::Vector3d(NAN, 0, 0)), ValidationError);
}

TEST_CASE("so3_log fixtures") {
  CHECK(so3_log(Eigen::Matrix3d::Identity().eval()).norm() == 0.0);
  const Eigen::Vector3d w(0.1, -0.2, 0.3);
  CHECK((so3_log(so3_exp(w)) - w).norm() <= 1e-9);

  const double angle = M_PI - 1e-4;
  const Eigen::Matrix3d near_pi = Eigen::AngleAxisd(angle, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  const Eigen::Vector3d l = so3_log(near_pi);
  CHECK(std::abs(l.norm() - angle) <= 1e-7);
  CHECK(std::abs(l.z()) == doctest::Approx(angle).epsilon(1e-7));

  // Quaternion oracle on random axes near the branch cut.
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    const Eigen::Vector3d axis = Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized();
    const double a = M_PI - 1e-3 * (i + 1) / 50.0;
    const Eigen::Quaterniond q(Eigen::AngleAxisd(a, axis));
    const Eigen::Vector3d got = so3_log(q.toRotationMatrix());
    CHECK((got - a * axis).norm() <= 1e-6);
  }

  Eigen::Matrix3d reflect = Eigen::Matrix3d::Identity();
  reflect(2, 2) = -1.0;
  CHECK_THROWS_AS(so3_log(reflect), ValidationError);
}

TEST_CASE("so3 round trips over the principal ball") {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const Eigen::Vector3d axis = Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized();
    const Eigen::Vector3d w = axis * (M_PI - 1e-3) * std::cbrt(u(rng));
    worst = std::max(worst, (so3_log(so3_exp(w)) - w).norm());
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("canonical_omega wraps onto the principal branch") {
  const Eigen::Vector3d w(0.0, 0.0, 2 * M_PI + 0.25);
  const Eigen::Vector3d c = canonical_omega(w);
  CHECK(c.norm() < M_PI);
  CHECK((so3_exp(c) - so3_exp(w)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("extrinsics matrix round trip") {
  Extrinsics e;
  e.omega = Eigen::Vector3d(0.4, -1.1, 0.7);
  e.t = Eigen::Vector3d(0.5, 2.0, -1.0);
  const Extrinsics back = Extrinsics::from_matrix(e.matrix());
  CHECK((back.omega - e.omega).norm() <= 1e-12);
  CHECK((back.t - e.t).norm() == 0.0);
}

TEST_CASE("ray generation") {
  Intrinsics intr;
  intr.focal = 50.0;
  intr.width = 64;
  intr.height = 48;
  const Extrinsics id;
  const Ray centre = generate_ray(id, intr, Eigen::Vector2d(intr.cx(), intr.cy()));
  CHECK((centre.direction - Eigen::Vector3d::UnitZ()).norm() <= 1e-15);
  const Ray side = generate_ray(id, intr, Eigen::Vector2d(intr.cx() + intr.focal, intr.cy()));
  CHECK((side.direction - Eigen::Vector3d(1, 0, 1) / std::sqrt(2.0)).norm() <= 1e-15);
  const Ray down = generate_ray(id, intr, Eigen::Vector2d(intr.cx(), intr.cy() + intr.focal));
  CHECK(down.direction.y() > 0.0);

  Extrinsics far;
  far.t = Eigen::Vector3d(0, 2, -2);
  CHECK(generate_ray(far, intr, Eigen::Vector2d(intr.cx(), intr.cy())).background);
  Extrinsics front;
  front.t = Eigen::Vector3d(0, 0, -2);
  const Ray hit = generate_ray(front, intr, Eigen::Vector2d(intr.cx(), intr.cy()));
  CHECK_FALSE(hit.background);
  CHECK(hit.near == doctest::Approx(1.0));
  CHECK(hit.far == doctest::Approx(3.0));
}

TEST_CASE("tape ray directions are differentiable in the focal length") {
  Intrinsics intr;
  intr.focal = 40.0;
  intr.width = 32;
  intr.height = 32;
  const std::vector<Eigen::Vector2d> px = {Eigen::Vector2d(3.5, 20.5), Eigen::Vector2d(28.5, 9.5)};
  const Eigen::Vector3d w(0.2, -0.3, 0.1), tv(0.1, 0.2, -2.0);
  auto dirs_sum = [&](Tape& t, const Var& f) {
    const RayVars r = generate_rays(constant(t, Mat(w)), constant(t, Mat(tv)), f, intr, px);
    const Mat weights = (Mat(3, 2) << 1.0, -2.0, 0.5, 3.0, -1.0, 0.7).finished();
    return sum(r.directions * constant(t, weights));
  };
  const GradCheckReport rep = grad_check(dirs_sum, Eigen::VectorXd::Constant(1, 40.0), 1e-4);
  CHECK(rep.ok);
  CHECK(rep.max_rel_error <= 1e-6);

  // The tape rays agree with the scalar path.
  Tape t;
  const RayVars r = generate_rays(constant(t, Mat(w)), constant(t, Mat(tv)), constant(t, 40.0), intr, px);
  Extrinsics e;
  e.omega = w;
  e.t = tv;
  for (std::size_t j = 0; j < px.size(); ++j) {
    const Ray ray = generate_ray(e, intr, px[j]);
    CHECK((r.directions.value().col(static_cast<Index>(j)) - ray.direction).norm() <= 1e-14);
    CHECK((r.origin.value() - ray.origin).norm() == 0.0);
  }
}

TEST_CASE("perturb statistics") {
  CameraRig rig;
  rig.intrinsics.focal = 500.0;
  rig.intrinsics.width = 640;
  rig.intrinsics.height = 480;
  rig.frames.resize(10000);
  for (std::size_t i = 0; i < rig.frames.size(); ++i) rig.frames[i].t = Eigen::Vector3d(0, 0, 3.0);

  NoiseSpec none;
  none.extrinsic_sigma = 0.0;
  none.intrinsic_sigma_ratio = 0.0;
  const PerturbResult same = perturb(rig, none);
  for (std::size_t i = 0; i < rig.frames.size(); i += 997) {
    CHECK(same.rig.frames[i].omega == rig.frames[i].omega);
    CHECK(same.rig.frames[i].t == rig.frames[i].t);
  }
  CHECK(same.rig.intrinsics.focal == rig.intrinsics.focal);

  NoiseSpec spec;
  spec.extrinsic_sigma = 0.1;
  spec.rng_seed = 2024;
  const PerturbResult p = perturb(rig, spec);
  for (int c = 0; c < 6; ++c) {
    Eigen::VectorXd s(rig.frames.size());
    for (std::size_t i = 0; i < rig.frames.size(); ++i) {
      s(static_cast<Index>(i)) = c < 3 ? p.report.cameras[i].d_omega(c) : p.report.cameras[i].d_t(c - 3);
    }
    const double mean = s.mean();
    const double sd = std::sqrt((s.array() - mean).square().sum() / (s.size() - 1));
    CHECK(std::abs(mean) <= 0.003);
    CHECK(sd >= 0.097);
    CHECK(sd <= 0.103);
  }
  CHECK(p.report.focal_sigma == 100.0);

  CameraRig one = rig;
  one.frames.resize(1);
  Eigen::VectorXd df(10000);
  for (Index k = 0; k < df.size(); ++k) {
    NoiseSpec ks = spec;
    ks.rng_seed = static_cast<std::uint64_t>(k);
    df(k) = perturb(one, ks).rig.intrinsics.focal - 500.0;
  }
  const double mean = df.mean();
  const double sd = std::sqrt((df.array() - mean).square().sum() / (df.size() - 1));
  CHECK(std::abs(mean) <= 3.0);
  CHECK(sd >= 97.0);
  CHECK(sd <= 103.0);
}

TEST_CASE("camera errors") {
  CameraRig gt;
  gt.intrinsics.focal = 100.0;
  gt.frames.resize(3);
  gt.frames[1].omega = Eigen::Vector3d(0.2, 0.1, -0.4);
  gt.frames[2].t = Eigen::Vector3d(1, 2, 3);
  for (const CameraError& e : camera_errors(gt, gt)) {
    CHECK(e.rot_err_deg == 0.0);
    CHECK(e.trans_err == 0.0);
    CHECK(e.focal_err_ratio == 0.0);
  }

  CameraRig turned = gt;
  for (Extrinsics& f : turned.frames) {
    const Eigen::Matrix3d r = Eigen::AngleAxisd(5.0 * M_PI / 180.0, Eigen::Vector3d::UnitY()) * f.rotation();
    f.omega = so3_log(r);
  }
  for (const CameraError& e : camera_errors(turned, gt)) CHECK(e.rot_err_deg == doctest::Approx(5.0).epsilon(1e-8));

  CameraRig shorter = gt;
  shorter.frames.pop_back();
  CHECK_THROWS_AS(camera_errors(shorter, gt), ValidationError);
}

TEST_CASE("mean rotation error of omega noise matches a Monte-Carlo oracle") {
  // Oracle: 1e5 draws of the angle between exp(w0 + d) and exp(w0), d ~ N(0, 0.1^2 I),
  // w0 = (0.3, -0.2, 0.5): 9.0376 deg, standard error 0.012 deg.
  CameraRig rig;
  rig.intrinsics.focal = 100.0;
  rig.frames.resize(20000);
  for (Extrinsics& f : rig.frames) f.omega = Eigen::Vector3d(0.3, -0.2, 0.5);
  NoiseSpec spec;
  spec.extrinsic_sigma = 0.1;
  spec.intrinsic_sigma_ratio = 0.0;
  spec.rng_seed = 77;
  const PerturbResult p = perturb(rig, spec);
  const CameraErrorSummary s = summarize(camera_errors(p.rig, rig));
  CHECK(s.rot_err_deg_mean == doctest::Approx(9.0376).epsilon(0.15 / 9.0376));
}
