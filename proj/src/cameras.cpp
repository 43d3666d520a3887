#include "nsrf/cameras.hpp"

#include <random>
#include <string>

#include "nsrf/renderer.hpp"

namespace nsrf {

Eigen::Matrix4d Extrinsics::matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation();
  m.topRightCorner<3, 1>() = t;
  return m;
}

Extrinsics Extrinsics::from_matrix(const Eigen::Matrix4d& t_wc) {
  Extrinsics e;
  e.omega = so3_log<double>(t_wc.topLeftCorner<3, 3>());
  e.t = t_wc.topRightCorner<3, 1>();
  return e;
}

Eigen::Vector3d canonical_omega(const Eigen::Vector3d& omega) {
  if (omega.norm() < std::numbers::pi) return omega;
  return so3_log<double>(so3_exp<double>(omega));
}

Eigen::Vector3d camera_direction(const Intrinsics& intr, const Eigen::Vector2d& px) {
  return Eigen::Vector3d((px.x() - intr.cx()) / intr.focal, (px.y() - intr.cy()) / intr.focal, 1.0)
      .normalized();
}

Ray generate_ray(const Extrinsics& ext, const Intrinsics& intr, const Eigen::Vector2d& px) {
  Ray ray;
  ray.origin = ext.t;
  ray.direction = (ext.rotation() * camera_direction(intr, px)).normalized();
  if (const auto interval = near_far(ray.origin, ray.direction)) {
    ray.near = interval->first;
    ray.far = interval->second;
    ray.background = false;
  }
  return ray;
}

PerturbResult perturb(const CameraRig& rig, const NoiseSpec& spec) {
  if (!(spec.extrinsic_sigma >= 0.0) || !(spec.intrinsic_sigma_ratio >= 0.0)) {
    throw ValidationError("perturb: noise sigmas must be non-negative");
  }
  PerturbResult out{rig, {}};
  std::mt19937_64 rng(spec.rng_seed);
  std::normal_distribution<double> unit(0.0, 1.0);

  out.report.cameras.reserve(rig.frames.size());
  for (std::size_t i = 0; i < rig.frames.size(); ++i) {
    CameraDelta delta;
    for (int k = 0; k < 3; ++k) delta.d_omega[k] = spec.extrinsic_sigma * unit(rng);
    for (int k = 0; k < 3; ++k) delta.d_t[k] = spec.extrinsic_sigma * unit(rng);
    if (spec.extrinsic_sigma > 0.0) {
      Extrinsics& e = out.rig.frames[i];
      const Eigen::Matrix3d before = e.rotation();
      e.omega = canonical_omega(e.omega + delta.d_omega);
      e.t += delta.d_t;
      delta.rot_deg = rotation_angle<double>(e.rotation(), before) * 180.0 / std::numbers::pi;
      delta.trans = delta.d_t.norm();
    } else {
      delta.d_omega.setZero();
      delta.d_t.setZero();
    }
    out.report.cameras.push_back(delta);
  }

  // Only the focal length is learnable, so its mean is the focal itself.
  out.report.focal_sigma = spec.intrinsic_sigma_ratio * rig.intrinsics.focal;
  const double z = unit(rng);
  if (out.report.focal_sigma > 0.0) {
    out.report.d_focal = out.report.focal_sigma * z;
    out.rig.intrinsics.focal =
        std::max(rig.intrinsics.focal + out.report.d_focal, 1e-3 * rig.intrinsics.focal);
  }
  return out;
}

std::vector<CameraError> camera_errors(const CameraRig& rig, const CameraRig& ground_truth) {
  if (rig.frames.size() != ground_truth.frames.size()) {
    throw ValidationError("camera_errors: camera count mismatch (" +
                          std::to_string(rig.frames.size()) + " vs " +
                          std::to_string(ground_truth.frames.size()) + ")");
  }
  const double f_gt = ground_truth.intrinsics.focal;
  const double focal_ratio = std::abs(rig.intrinsics.focal - f_gt) / f_gt;
  std::vector<CameraError> out;
  out.reserve(rig.frames.size());
  for (std::size_t i = 0; i < rig.frames.size(); ++i) {
    const Extrinsics& e = rig.frames[i];
    const Extrinsics& g = ground_truth.frames[i];
    CameraError err;
    err.rot_err_deg = rotation_angle<double>(g.rotation(), e.rotation()) * 180.0 / std::numbers::pi;
    err.trans_err = (e.t - g.t).norm();
    err.focal_err_ratio = focal_ratio;
    out.push_back(err);
  }
  return out;
}

CameraErrorSummary summarize(std::span<const CameraError> errors) {
  CameraErrorSummary s;
  if (errors.empty()) return s;
  for (const CameraError& e : errors) {
    s.rot_err_deg_mean += e.rot_err_deg;
    s.trans_err_mean += e.trans_err;
  }
  s.rot_err_deg_mean /= static_cast<double>(errors.size());
  s.trans_err_mean /= static_cast<double>(errors.size());
  s.focal_err_ratio = errors.front().focal_err_ratio;
  return s;
}

Var so3_exp(const Var& omega) {
  if (omega.rows() != 3 || omega.cols() != 1) throw ShapeError("so3_exp: omega must be 3x1");
  if (!omega.value().allFinite()) throw ValidationError("so3_exp: non-finite input");
  Tape& tape = *omega.tape;

  // vec(K) = G * omega, column-major 3x3 skew matrix.
  Mat g = Mat::Zero(9, 3);
  g(1, 2) = 1.0;   // K(1,0) =  wz
  g(2, 1) = -1.0;  // K(2,0) = -wy
  g(3, 2) = -1.0;  // K(0,1) = -wz
  g(5, 0) = 1.0;   // K(2,1) =  wx
  g(6, 1) = 1.0;   // K(0,2) =  wy
  g(7, 0) = -1.0;  // K(1,2) = -wx
  const Var k = reshape(matmul(constant(tape, std::move(g)), omega), 3, 3);

  const Var theta_sq = sum(square(omega));
  Var a;
  Var b;
  if (theta_sq.scalar() < 1e-6) {
    const Var t4 = square(theta_sq);
    a = 1.0 - theta_sq * (1.0 / 6.0) + t4 * (1.0 / 120.0);
    b = 0.5 - theta_sq * (1.0 / 24.0) + t4 * (1.0 / 720.0);
  } else {
    const Var theta = sqrt(theta_sq);
    a = sin(theta) / theta;
    b = (1.0 - cos(theta)) / theta_sq;
  }
  return constant(tape, Mat::Identity(3, 3)) + a * k + b * matmul(k, k);
}

RayVars generate_rays(const Var& omega, const Var& t, const Var& focal, const Intrinsics& intr,
                      std::span<const Eigen::Vector2d> pixels) {
  Tape& tape = *omega.tape;
  const auto n = static_cast<Index>(pixels.size());
  Mat offsets(2, n);
  for (Index j = 0; j < n; ++j) {
    offsets(0, j) = pixels[static_cast<std::size_t>(j)].x() - intr.cx();
    offsets(1, j) = pixels[static_cast<std::size_t>(j)].y() - intr.cy();
  }
  const Var cam = concat_rows({constant(tape, std::move(offsets)) / focal,
                               constant(tape, Mat::Ones(1, n))});
  const Var world = matmul(so3_exp(omega), cam);
  const Var dirs = world / broadcast_rows(norm2(world), 3);
  return {t, dirs};
}

}  // namespace nsrf
