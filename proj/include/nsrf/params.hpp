#pragma once

#include <Eigen/Core>

#include <span>
#include <string>
#include <vector>

#include "nsrf/tape.hpp"

namespace nsrf {

/// Non-owning view of one learnable array.
struct ParamRef {
  std::string name;
  double* data = nullptr;
  Index rows = 0;
  Index cols = 0;

  Eigen::Map<Mat> map() const { return Eigen::Map<Mat>(data, rows, cols); }
  Index size() const { return rows * cols; }
};

inline ParamRef param_ref(std::string name, Mat& m) {
  return ParamRef{std::move(name), m.data(), m.rows(), m.cols()};
}

template <int Rows>
ParamRef param_ref(std::string name, Eigen::Matrix<double, Rows, 1>& v) {
  return ParamRef{std::move(name), v.data(), Rows, 1};
}

inline ParamRef param_ref(std::string name, double& x) { return ParamRef{std::move(name), &x, 1, 1}; }

inline Index total_size(std::span<const ParamRef> params) {
  Index n = 0;
  for (const ParamRef& p : params) n += p.size();
  return n;
}

inline Eigen::VectorXd flatten(std::span<const ParamRef> params) {
  Eigen::VectorXd out(total_size(params));
  Index k = 0;
  for (const ParamRef& p : params) {
    out.segment(k, p.size()) = p.map().reshaped();
    k += p.size();
  }
  return out;
}

inline void unflatten(const Eigen::VectorXd& flat, std::span<const ParamRef> params) {
  Index k = 0;
  for (const ParamRef& p : params) {
    p.map().reshaped() = flat.segment(k, p.size());
    k += p.size();
  }
}

/// One tape leaf per parameter, in order.
inline std::vector<Var> bind_leaves(Tape& tape, std::span<const ParamRef> params) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (const ParamRef& p : params) out.push_back(leaf(tape, p.map()));
  return out;
}

}  // namespace nsrf
