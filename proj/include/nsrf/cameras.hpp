#pragma once

// Learnable pinhole cameras: axis-angle + translation per frame and one
// shared focal length. Camera space is x right, y down, z forward.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "nsrf/errors.hpp"
#include "nsrf/tape.hpp"

namespace nsrf {

template <class Scalar>
using Vector3 = Eigen::Matrix<Scalar, 3, 1>;
template <class Scalar>
using Matrix3 = Eigen::Matrix<Scalar, 3, 3>;

template <class Scalar>
Matrix3<Scalar> skew(const Vector3<Scalar>& w) {
  Matrix3<Scalar> k;
  k << Scalar(0), -w.z(), w.y(),
       w.z(), Scalar(0), -w.x(),
       -w.y(), w.x(), Scalar(0);
  return k;
}

// sin(t)/t and (1 - cos(t))/t^2, with series below |t| = 1e-3.
template <class Scalar>
std::pair<Scalar, Scalar> rodrigues_coefficients(Scalar theta_sq) {
  using std::cos;
  using std::sin;
  using std::sqrt;
  if (theta_sq < Scalar(1e-6)) {
    const Scalar t4 = theta_sq * theta_sq;
    return {Scalar(1) - theta_sq / Scalar(6) + t4 / Scalar(120),
            Scalar(0.5) - theta_sq / Scalar(24) + t4 / Scalar(720)};
  }
  const Scalar theta = sqrt(theta_sq);
  return {sin(theta) / theta, (Scalar(1) - cos(theta)) / theta_sq};
}

/// Rodrigues formula.
template <class Scalar>
Matrix3<Scalar> so3_exp(const Vector3<Scalar>& omega) {
  if (!omega.allFinite()) throw ValidationError("so3_exp: non-finite input");
  const auto [a, b] = rodrigues_coefficients(omega.squaredNorm());
  const Matrix3<Scalar> k = skew(omega);
  return Matrix3<Scalar>::Identity() + a * k + b * k * k;
}

template <class Scalar>
bool is_rotation(const Matrix3<Scalar>& r, Scalar tol) {
  if (!r.allFinite()) return false;
  const Scalar ortho = (r.transpose() * r - Matrix3<Scalar>::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tol && std::abs(r.determinant() - Scalar(1)) <= tol;
}

/// Principal-branch axis-angle of a rotation matrix.
template <class Scalar>
Vector3<Scalar> so3_log(const Matrix3<Scalar>& r) {
  using std::atan2;
  using std::sqrt;
  if (!is_rotation(r, Scalar(1e-6))) throw ValidationError("so3_log: input is not a rotation");
  const Vector3<Scalar> v(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  const Scalar sin_theta = Scalar(0.5) * v.norm();
  const Scalar cos_theta = Scalar(0.5) * (r.trace() - Scalar(1));
  const Scalar theta = atan2(sin_theta, cos_theta);

  if (theta < Scalar(1e-3)) {
    const Scalar t2 = theta * theta;
    // theta / sin(theta)
    return Scalar(0.5) * (Scalar(1) + t2 / Scalar(6) + Scalar(7) * t2 * t2 / Scalar(360)) * v;
  }
  if (sin_theta > Scalar(1e-6)) return (theta / (Scalar(2) * sin_theta)) * v;

  // Near pi: k k^T = (R_sym - cos I) / (1 - cos); take the dominant column.
  const Matrix3<Scalar> sym = Scalar(0.5) * (r + r.transpose());
  const Matrix3<Scalar> kkt =
      (sym - cos_theta * Matrix3<Scalar>::Identity()) / (Scalar(1) - cos_theta);
  Eigen::Index col = 0;
  kkt.diagonal().maxCoeff(&col);
  Vector3<Scalar> axis = kkt.col(col) / sqrt(kkt(col, col));
  if (axis.dot(v) < Scalar(0)) axis = -axis;
  return theta * axis;
}

/// Geodesic angle between two rotations, radians.
template <class Scalar>
Scalar rotation_angle(const Matrix3<Scalar>& a, const Matrix3<Scalar>& b) {
  if (a == b) return Scalar(0);
  const Matrix3<Scalar> d = a * b.transpose();
  const Vector3<Scalar> v(d(2, 1) - d(1, 2), d(0, 2) - d(2, 0), d(1, 0) - d(0, 1));
  return std::atan2(Scalar(0.5) * v.norm(), Scalar(0.5) * (d.trace() - Scalar(1)));
}

struct Extrinsics {
  Eigen::Vector3d omega = Eigen::Vector3d::Zero();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  Eigen::Matrix3d rotation() const { return so3_exp(omega); }
  /// Camera-to-world 4x4 transform.
  Eigen::Matrix4d matrix() const;
  static Extrinsics from_matrix(const Eigen::Matrix4d& t_wc);
};

struct Intrinsics {
  double focal = 1.0;
  int width = 1;
  int height = 1;

  double cx() const { return 0.5 * width; }
  double cy() const { return 0.5 * height; }
};

struct Ray {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d direction = Eigen::Vector3d::UnitZ();
  double near = 0.0;
  double far = 0.0;
  bool background = true;
};

struct CameraRig {
  std::vector<Extrinsics> frames;
  Intrinsics intrinsics;
};

struct NoiseSpec {
  double extrinsic_sigma = 0.1;
  double intrinsic_sigma_ratio = 0.2;
  std::uint64_t rng_seed = 0;
};

struct CameraDelta {
  Eigen::Vector3d d_omega = Eigen::Vector3d::Zero();
  Eigen::Vector3d d_t = Eigen::Vector3d::Zero();
  double rot_deg = 0.0;
  double trans = 0.0;
};

struct NoiseReport {
  std::vector<CameraDelta> cameras;
  double d_focal = 0.0;
  double focal_sigma = 0.0;
};

struct PerturbResult {
  CameraRig rig;
  NoiseReport report;
};

struct CameraError {
  double rot_err_deg = 0.0;
  double trans_err = 0.0;
  double focal_err_ratio = 0.0;
};

/// Wraps omega onto the principal branch, |omega| < pi.
Eigen::Vector3d canonical_omega(const Eigen::Vector3d& omega);

/// Continuous pixel coordinates; pixel (col, row) has its centre at (col + 0.5, row + 0.5).
Eigen::Vector3d camera_direction(const Intrinsics& intr, const Eigen::Vector2d& px);
Ray generate_ray(const Extrinsics& ext, const Intrinsics& intr, const Eigen::Vector2d& px);

/// Adds N(0, sigma^2) to every omega/t component and N(0, (ratio * focal)^2) to the focal.
PerturbResult perturb(const CameraRig& rig, const NoiseSpec& spec);

std::vector<CameraError> camera_errors(const CameraRig& rig, const CameraRig& ground_truth);

struct CameraErrorSummary {
  double rot_err_deg_mean = 0.0;
  double trans_err_mean = 0.0;
  double focal_err_ratio = 0.0;
};
CameraErrorSummary summarize(std::span<const CameraError> errors);

// Tape-side camera model --------------------------------------------------

/// R = exp([omega]_x) as a 3x3 node.
Var so3_exp(const Var& omega);

struct RayVars {
  Var origin;      // 3 x 1
  Var directions;  // 3 x B, unit columns
};

/// World rays for pixels of one frame, differentiable in omega, t and focal.
RayVars generate_rays(const Var& omega, const Var& t, const Var& focal, const Intrinsics& intr,
                      std::span<const Eigen::Vector2d> pixels);

}  // namespace nsrf
