#pragma once

// Reverse-mode differentiation over dense column-major double matrices.
//
// Every node holds an eagerly evaluated Eigen::MatrixXd. Columns are treated
// as independent samples by the column-wise ops (norm2, sum_rows, ...), which
// is what lets spatial_gradient() push three tangent directions through a
// batch of points in one pass.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nsrf {

using Index = Eigen::Index;
using Mat = Eigen::MatrixXd;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct NodeId {
  std::int32_t value = -1;
  bool valid() const { return value >= 0; }
  friend bool operator==(NodeId, NodeId) = default;
};

enum class Op : std::uint8_t {
  Leaf,        // parameter or constant
  Add,         // a + b, b may be 1x1
  Sub,         // a - b, b may be 1x1
  Mul,         // a .* b, either may be 1x1
  Div,         // a ./ b, b may be 1x1
  Scale,       // c * a
  Offset,      // a + c
  MatMul,      // a * b
  BiasAdd,     // a + b * 1^T, b is rows x 1
  Sum,         // 1x1 total
  Mean,        // 1x1 mean
  SumRows,     // column sums, 1 x cols
  Softplus,    // (1/beta) log(1 + exp(beta a))
  Relu,
  Sigmoid,
  Sin,
  Cos,
  Sqrt,
  Square,
  Abs,
  Log,
  Exp,
  Norm2,       // column-wise euclidean norm, 1 x cols
  ClampMin,    // max(a, c)
  ClampMax,    // min(a, c)
  Step,        // 1[a > 0], zero derivative
  Sign,        // sign(a), zero derivative
  ConcatRows,
  SliceRows,   // rows [i0, i1)
  SliceCols,   // cols [i0, i1)
  GatherCols,  // out.col(j) = a.col(idx[j])
  Reshape,     // column-major reinterpretation to i0 x i1
  SegmentSum,  // sum columns within segments given by offsets idx
  SegmentCumprodExclusive,  // per-row exclusive running product within segments
  Fourier,     // [a; sin(w_k a); cos(w_k a)] for w_k = pi 2^k, k < i0
  Count_
};

const char* op_name(Op op);

/// Constant arguments attached to a node.
struct Payload {
  double c = 0.0;
  Index i0 = 0;
  Index i1 = 0;
  std::vector<Index> idx;
};

struct Node {
  Op op = Op::Leaf;
  std::vector<NodeId> inputs;
  Payload payload;
  Mat value;
  bool constant = false;
};

class Tape;

/// Adjoints d(output)/d(node) of the leaves, same shape as the value.
class Grad {
 public:
  Grad() = default;
  Grad(std::vector<Mat> adj, std::vector<bool> touched, const Tape* tape)
      : adj_(std::move(adj)), touched_(std::move(touched)), tape_(tape) {}

  /// Zeros for leaves the output does not depend on; throws for interior nodes.
  Mat of(NodeId id) const;
  std::size_t size() const { return adj_.size(); }

 private:
  std::vector<Mat> adj_;
  std::vector<bool> touched_;
  const Tape* tape_ = nullptr;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  NodeId leaf(Mat value);
  NodeId constant(Mat value);

  /// Appends a node, evaluates it eagerly and returns its id.
  NodeId record(Op op, std::span<const NodeId> inputs, Payload payload = {});

  const Mat& value(NodeId id) const;
  const Node& node(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }
  bool is_constant(NodeId id) const { return node(id).constant; }

 private:
  void check(NodeId id) const;
  std::vector<Node> nodes_;
};

/// Reverse sweep from a 1x1 output. Adjoints accumulate in reverse node order.
Grad backward(const Tape& tape, NodeId output);

/// Lightweight handle so tape expressions read like math.
struct Var {
  Tape* tape = nullptr;
  NodeId id;

  const Mat& value() const { return tape->value(id); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;
};

Var leaf(Tape& tape, Mat value);
Var constant(Tape& tape, Mat value);
Var constant(Tape& tape, double value);

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);  // element-wise
Var operator/(const Var& a, const Var& b);
Var operator*(double c, const Var& a);
Var operator*(const Var& a, double c);
Var operator+(const Var& a, double c);
Var operator+(double c, const Var& a);
Var operator-(const Var& a, double c);
Var operator-(double c, const Var& a);
Var operator-(const Var& a);

Var matmul(const Var& a, const Var& b);
Var matvec(const Var& a, const Var& v);
Var bias_add(const Var& x, const Var& bias);
Var sum(const Var& a);
Var mean(const Var& a);
Var sum_rows(const Var& a);
Var softplus(const Var& a, double beta);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var sin(const Var& a);
Var cos(const Var& a);
Var sqrt(const Var& a);
Var square(const Var& a);
Var abs(const Var& a);
Var log(const Var& a);
Var exp(const Var& a);
Var norm2(const Var& a);
Var clamp_min(const Var& a, double c);
Var clamp_max(const Var& a, double c);
Var step(const Var& a);
Var sign(const Var& a);
Var concat_rows(std::span<const Var> parts);
Var concat_rows(std::initializer_list<Var> parts);
Var slice_rows(const Var& a, Index begin, Index end);
Var slice_cols(const Var& a, Index begin, Index end);
Var gather_cols(const Var& a, std::vector<Index> idx);
Var reshape(const Var& a, Index rows, Index cols);
Var segment_sum(const Var& a, std::vector<Index> offsets);
Var segment_cumprod_exclusive(const Var& a, std::vector<Index> offsets);
Var fourier(const Var& a, int frequencies);

/// Repeats a 1 x n row into k x n.
Var broadcast_rows(const Var& row, Index k);
/// Each column repeated `times` consecutively.
Var repeat_cols(const Var& a, Index times);
/// Whole matrix repeated `times` side by side.
Var tile_cols(const Var& a, Index times);

/// Returns nabla_x f as a 3 x N node for f (1 x N) and x (3 x N), built from
/// ordinary tape nodes so it can itself be differentiated. Column j of f may
/// only depend on column j of x.
Var spatial_gradient(const Var& f, const Var& x);

struct GradCheckReport {
  bool ok = false;
  double max_rel_error = 0.0;
  Index worst_index = -1;
  std::string message;
};

/// Compares backward() against central differences. Relative error uses
/// max(1, |analytic|) as denominator.
GradCheckReport grad_check(const std::function<Var(Tape&, const Var&)>& fn,
                           const Eigen::VectorXd& point, double h);

}  // namespace nsrf
