#pragma once

// Vectorised element-wise kernels shared by the tape and the networks.

#include <Eigen/Core>

#include <cmath>
#include <numbers>

namespace nsrf::detail {

/// log(1 + e) for e >= 0, accurate for tiny e without a scalar log1p call.
inline Eigen::ArrayXXd log1p_nonneg(const Eigen::ArrayXXd& e) {
  const Eigen::ArrayXXd u = 1.0 + e;
  return (u == 1.0).select(e, u.log() * e / (u - 1.0));
}

/// 1 / (1 + exp(-x)) without overflow for large |x|.
inline Eigen::MatrixXd sigmoid(const Eigen::MatrixXd& x) {
  const Eigen::ArrayXXd e = (-x.array().abs()).exp();
  const Eigen::ArrayXXd r = (1.0 + e).inverse();
  return (x.array() >= 0.0).select(r, e * r).matrix();
}

/// log(1 + exp(beta x)) / beta.
inline Eigen::MatrixXd softplus(const Eigen::MatrixXd& x, double beta) {
  const Eigen::ArrayXXd bx = beta * x.array();
  return ((bx.max(0.0) + log1p_nonneg((-bx.abs()).exp())) / beta).matrix();
}

/// softplus(x) and its slope sigmoid(beta x), sharing one exp.
inline void softplus_with_slope(const Eigen::MatrixXd& x, double beta, Eigen::MatrixXd& value,
                                Eigen::MatrixXd& slope) {
  const Eigen::ArrayXXd bx = beta * x.array();
  const Eigen::ArrayXXd e = (-bx.abs()).exp();
  value = ((bx.max(0.0) + log1p_nonneg(e)) / beta).matrix();
  const Eigen::ArrayXXd r = (1.0 + e).inverse();
  slope = (bx >= 0.0).select(r, e * r).matrix();
}

inline double fourier_weight(int k) { return std::ldexp(std::numbers::pi, k); }

/// [v; sin(w_0 v); cos(w_0 v); ...; sin(w_{F-1} v); cos(w_{F-1} v)] with w_k = pi 2^k.
/// Higher octaves come from the double-angle identities.
inline Eigen::MatrixXd fourier_features(const Eigen::MatrixXd& v, int frequencies) {
  const Eigen::Index d = v.rows();
  Eigen::MatrixXd out(d * (2 * frequencies + 1), v.cols());
  out.topRows(d) = v;
  if (frequencies == 0) return out;
  Eigen::ArrayXXd s = (std::numbers::pi * v.array()).sin();
  Eigen::ArrayXXd c = (std::numbers::pi * v.array()).cos();
  for (int k = 0; k < frequencies; ++k) {
    if (k > 0) {
      const Eigen::ArrayXXd s2 = 2.0 * s * c;
      c = (c - s) * (c + s);
      s = s2;
    }
    out.middleRows(d * (2 * k + 1), d) = s.matrix();
    out.middleRows(d * (2 * k + 2), d) = c.matrix();
  }
  return out;
}

}  // namespace nsrf::detail
