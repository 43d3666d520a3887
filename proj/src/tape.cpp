#include "nsrf/tape.hpp"

#include "kernels.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <unordered_map>

namespace nsrf {

namespace {

constexpr std::array<const char*, static_cast<std::size_t>(Op::Count_)> kOpNames = {
    "leaf",    "add",        "sub",      "mul",      "div",        "scale",
    "offset",  "matmul",     "bias_add", "sum",      "mean",       "sum_rows",
    "softplus", "relu",      "sigmoid",  "sin",      "cos",        "sqrt",
    "square",  "abs",        "log",      "exp",      "norm2",      "clamp_min",
    "clamp_max", "step",     "sign",     "concat_rows", "slice_rows", "slice_cols",
    "gather_cols", "reshape", "segment_sum", "segment_cumprod_exclusive", "fourier"};

std::string shape_str(const Mat& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

[[noreturn]] void shape_fail(Op op, const Mat& a, const Mat& b) {
  throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + shape_str(a) + " vs " +
                   shape_str(b));
}

bool is_scalar(const Mat& m) { return m.rows() == 1 && m.cols() == 1; }

// Element-wise binary op where either operand may be a 1x1 scalar. f is
// applied to whole arrays, or to an array and a double.
template <class F>
Mat binary(Op op, const Mat& a, const Mat& b, F f) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return f(a.array(), b.array()).matrix();
  if (is_scalar(b)) return f(a.array(), b(0, 0)).matrix();
  if (is_scalar(a)) return f(Eigen::ArrayXXd::Constant(b.rows(), b.cols(), a(0, 0)), b.array()).matrix();
  shape_fail(op, a, b);
}

// Reduces an adjoint of the broadcast shape back onto an operand's shape.
void accumulate(Mat& dst, const Mat& contrib) {
  if (dst.rows() == contrib.rows() && dst.cols() == contrib.cols()) {
    dst += contrib;
  } else {
    dst(0, 0) += contrib.sum();
  }
}

void check_segments(Op op, const std::vector<Index>& offsets, Index cols) {
  if (offsets.size() < 1 || offsets.front() != 0 || offsets.back() != cols) {
    throw ShapeError(std::string(op_name(op)) + ": segment offsets must span [0, cols]");
  }
  for (std::size_t k = 1; k < offsets.size(); ++k) {
    if (offsets[k] < offsets[k - 1]) {
      throw ShapeError(std::string(op_name(op)) + ": segment offsets must be ascending");
    }
  }
}

Mat evaluate(Op op, const std::vector<const Mat*>& in, const Payload& p) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      throw ShapeError(std::string(op_name(op)) + ": expected " + std::to_string(n) +
                       " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (op) {
    case Op::Leaf:
      throw TapeError("leaf nodes are created with Tape::leaf/constant");
    case Op::Add:
      arity(2);
      return binary(op, *in[0], *in[1], [](const auto& x, const auto& y) { return x + y; });
    case Op::Sub:
      arity(2);
      return binary(op, *in[0], *in[1], [](const auto& x, const auto& y) { return x - y; });
    case Op::Mul:
      arity(2);
      return binary(op, *in[0], *in[1], [](const auto& x, const auto& y) { return x * y; });
    case Op::Div:
      arity(2);
      return binary(op, *in[0], *in[1], [](const auto& x, const auto& y) { return x / y; });
    case Op::Scale:
      arity(1);
      return p.c * *in[0];
    case Op::Offset:
      arity(1);
      return (in[0]->array() + p.c).matrix();
    case Op::MatMul:
      arity(2);
      if (in[0]->cols() != in[1]->rows()) shape_fail(op, *in[0], *in[1]);
      return (*in[0]) * (*in[1]);
    case Op::BiasAdd: {
      arity(2);
      const Mat& x = *in[0];
      const Mat& b = *in[1];
      if (b.cols() != 1 || b.rows() != x.rows()) shape_fail(op, x, b);
      return x.colwise() + b.col(0);
    }
    case Op::Sum:
      arity(1);
      return Mat::Constant(1, 1, in[0]->sum());
    case Op::Mean:
      arity(1);
      if (in[0]->size() == 0) throw ShapeError("mean: empty input");
      return Mat::Constant(1, 1, in[0]->mean());
    case Op::SumRows:
      arity(1);
      return in[0]->colwise().sum();
    case Op::Softplus: {
      arity(1);
      const double beta = p.c;
      return detail::softplus(*in[0], beta);
    }
    case Op::Relu:
      arity(1);
      return in[0]->cwiseMax(0.0);
    case Op::Sigmoid:
      arity(1);
      return detail::sigmoid(*in[0]);
    case Op::Sin:
      arity(1);
      return in[0]->array().sin().matrix();
    case Op::Cos:
      arity(1);
      return in[0]->array().cos().matrix();
    case Op::Sqrt:
      arity(1);
      return in[0]->array().sqrt().matrix();
    case Op::Square:
      arity(1);
      return in[0]->array().square().matrix();
    case Op::Abs:
      arity(1);
      return in[0]->cwiseAbs();
    case Op::Log:
      arity(1);
      return in[0]->array().log().matrix();
    case Op::Exp:
      arity(1);
      return in[0]->array().exp().matrix();
    case Op::Norm2:
      arity(1);
      return in[0]->colwise().norm();
    case Op::ClampMin:
      arity(1);
      return in[0]->cwiseMax(p.c);
    case Op::ClampMax:
      arity(1);
      return in[0]->cwiseMin(p.c);
    case Op::Step:
      arity(1);
      return in[0]->unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; });
    case Op::Sign:
      arity(1);
      return in[0]->unaryExpr([](double x) { return double((x > 0.0) - (x < 0.0)); });
    case Op::ConcatRows: {
      if (in.empty()) throw ShapeError("concat_rows: no inputs");
      Index rows = 0;
      const Index cols = in[0]->cols();
      for (const Mat* m : in) {
        if (m->cols() != cols) shape_fail(op, *in[0], *m);
        rows += m->rows();
      }
      Mat out(rows, cols);
      Index r = 0;
      for (const Mat* m : in) {
        out.middleRows(r, m->rows()) = *m;
        r += m->rows();
      }
      return out;
    }
    case Op::SliceRows:
      arity(1);
      if (p.i0 < 0 || p.i1 > in[0]->rows() || p.i0 > p.i1) {
        throw ShapeError("slice_rows: range out of bounds for " + shape_str(*in[0]));
      }
      return in[0]->middleRows(p.i0, p.i1 - p.i0);
    case Op::SliceCols:
      arity(1);
      if (p.i0 < 0 || p.i1 > in[0]->cols() || p.i0 > p.i1) {
        throw ShapeError("slice_cols: range out of bounds for " + shape_str(*in[0]));
      }
      return in[0]->middleCols(p.i0, p.i1 - p.i0);
    case Op::GatherCols: {
      arity(1);
      const Mat& a = *in[0];
      Mat out(a.rows(), static_cast<Index>(p.idx.size()));
      for (std::size_t j = 0; j < p.idx.size(); ++j) {
        if (p.idx[j] < 0 || p.idx[j] >= a.cols()) throw ShapeError("gather_cols: index out of range");
        out.col(static_cast<Index>(j)) = a.col(p.idx[j]);
      }
      return out;
    }
    case Op::Reshape:
      arity(1);
      if (p.i0 * p.i1 != in[0]->size()) {
        throw ShapeError("reshape: size mismatch for " + shape_str(*in[0]));
      }
      return in[0]->reshaped(p.i0, p.i1);
    case Op::SegmentSum: {
      arity(1);
      const Mat& a = *in[0];
      check_segments(op, p.idx, a.cols());
      const Index nseg = static_cast<Index>(p.idx.size()) - 1;
      Mat out = Mat::Zero(a.rows(), nseg);
      for (Index s = 0; s < nseg; ++s) {
        for (Index j = p.idx[s]; j < p.idx[s + 1]; ++j) out.col(s) += a.col(j);
      }
      return out;
    }
    case Op::SegmentCumprodExclusive: {
      arity(1);
      const Mat& a = *in[0];
      check_segments(op, p.idx, a.cols());
      Mat out(a.rows(), a.cols());
      for (std::size_t s = 0; s + 1 < p.idx.size(); ++s) {
        for (Index r = 0; r < a.rows(); ++r) {
          double run = 1.0;
          for (Index j = p.idx[s]; j < p.idx[s + 1]; ++j) {
            out(r, j) = run;
            run *= a(r, j);
          }
        }
      }
      return out;
    }
    case Op::Fourier:
      arity(1);
      if (p.i0 < 0) throw ShapeError("fourier: negative frequency count");
      return detail::fourier_features(*in[0], static_cast<int>(p.i0));
    case Op::Count_:
      break;
  }
  throw TapeError("unknown op kind " + std::to_string(static_cast<int>(op)));
}

}  // namespace

const char* op_name(Op op) {
  const auto i = static_cast<std::size_t>(op);
  return i < kOpNames.size() ? kOpNames[i] : "unknown";
}

Mat Grad::of(NodeId id) const {
  if (!id.valid() || static_cast<std::size_t>(id.value) >= adj_.size()) {
    throw TapeError("grad: node id out of range");
  }
  const auto k = static_cast<std::size_t>(id.value);
  const Node& node = tape_->node(id);
  if (node.op != Op::Leaf) throw TapeError("grad: adjoints are kept for leaves only");
  if (!touched_[k]) return Mat::Zero(node.value.rows(), node.value.cols());
  return adj_[k];
}

void Tape::check(NodeId id) const {
  if (!id.valid() || static_cast<std::size_t>(id.value) >= nodes_.size()) {
    throw TapeError("node id " + std::to_string(id.value) + " does not exist on the tape");
  }
}

NodeId Tape::leaf(Mat value) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return NodeId{static_cast<std::int32_t>(nodes_.size() - 1)};
}

NodeId Tape::constant(Mat value) {
  const NodeId id = leaf(std::move(value));
  nodes_.back().constant = true;
  return id;
}

NodeId Tape::record(Op op, std::span<const NodeId> inputs, Payload payload) {
  if (static_cast<std::size_t>(op) >= static_cast<std::size_t>(Op::Count_)) {
    throw TapeError("unknown op kind " + std::to_string(static_cast<int>(op)));
  }
  std::vector<const Mat*> in;
  in.reserve(inputs.size());
  bool all_constant = true;
  for (NodeId id : inputs) {
    check(id);
    in.push_back(&nodes_[static_cast<std::size_t>(id.value)].value);
    all_constant = all_constant && nodes_[static_cast<std::size_t>(id.value)].constant;
  }
  Node n;
  n.op = op;
  n.value = evaluate(op, in, payload);
  n.inputs.assign(inputs.begin(), inputs.end());
  n.payload = std::move(payload);
  n.constant = all_constant || op == Op::Step || op == Op::Sign;
  nodes_.push_back(std::move(n));
  return NodeId{static_cast<std::int32_t>(nodes_.size() - 1)};
}

const Mat& Tape::value(NodeId id) const { return node(id).value; }

const Node& Tape::node(NodeId id) const {
  check(id);
  return nodes_[static_cast<std::size_t>(id.value)];
}

Grad backward(const Tape& tape, NodeId output) {
  const Mat& out = tape.value(output);
  if (!is_scalar(out)) {
    throw ShapeError("backward: output must be 1x1, got " + shape_str(out));
  }
  const auto n = static_cast<std::size_t>(output.value) + 1;
  std::vector<Mat> adj(tape.size());
  std::vector<bool> touched(tape.size(), false);
  auto slot = [&](NodeId id) -> Mat& {
    auto k = static_cast<std::size_t>(id.value);
    if (!touched[k]) {
      const Mat& v = tape.value(id);
      adj[k] = Mat::Zero(v.rows(), v.cols());
      touched[k] = true;
    }
    return adj[k];
  };
  // Same-shape contributions; the first one is assigned instead of added to zeros.
  auto add = [&](NodeId id, const auto& contrib) {
    auto k = static_cast<std::size_t>(id.value);
    if (!touched[k]) {
      adj[k] = contrib;
      touched[k] = true;
    } else {
      adj[k] += contrib;
    }
  };
  slot(output)(0, 0) = 1.0;

  for (std::size_t k = n; k-- > 0;) {
    if (!touched[k]) continue;
    const NodeId id{static_cast<std::int32_t>(k)};
    const Node& node = tape.node(id);
    if (node.op == Op::Leaf || node.constant) continue;
    // Interior adjoints are released once propagated.
    const Mat g = std::move(adj[k]);
    adj[k] = Mat();
    const Mat& y = node.value;
    const Payload& p = node.payload;
    auto in = [&](std::size_t i) -> const Mat& { return tape.value(node.inputs[i]); };
    auto needs = [&](std::size_t i) { return !tape.is_constant(node.inputs[i]); };

    switch (node.op) {
      case Op::Add:
        if (needs(0)) accumulate(slot(node.inputs[0]), g);
        if (needs(1)) accumulate(slot(node.inputs[1]), g);
        break;
      case Op::Sub:
        if (needs(0)) accumulate(slot(node.inputs[0]), g);
        if (needs(1)) accumulate(slot(node.inputs[1]), -g);
        break;
      case Op::Mul: {
        const Mat& a = in(0);
        const Mat& b = in(1);
        if (needs(0)) {
          accumulate(slot(node.inputs[0]),
                     binary(Op::Mul, g, b, [](const auto& x, const auto& z) { return x * z; }));
        }
        if (needs(1)) {
          accumulate(slot(node.inputs[1]),
                     binary(Op::Mul, g, a, [](const auto& x, const auto& z) { return x * z; }));
        }
        break;
      }
      case Op::Div: {
        const Mat& b = in(1);
        if (needs(0)) {
          accumulate(slot(node.inputs[0]),
                     binary(Op::Div, g, b, [](const auto& x, const auto& z) { return x / z; }));
        }
        if (needs(1)) {
          // d(a/b)/db = -y/b
          Mat t = binary(Op::Mul, g, y, [](const auto& x, const auto& z) { return x * z; });
          accumulate(slot(node.inputs[1]),
                     binary(Op::Div, t, b, [](const auto& x, const auto& z) { return -x / z; }));
        }
        break;
      }
      case Op::Scale:
        add(node.inputs[0], p.c * g);
        break;
      case Op::Offset:
        add(node.inputs[0], g);
        break;
      case Op::MatMul:
        if (needs(0)) add(node.inputs[0], Mat(g * in(1).transpose()));
        if (needs(1)) add(node.inputs[1], Mat(in(0).transpose() * g));
        break;
      case Op::BiasAdd:
        if (needs(0)) add(node.inputs[0], g);
        if (needs(1)) add(node.inputs[1], g.rowwise().sum());
        break;
      case Op::Sum:
        slot(node.inputs[0]).array() += g(0, 0);
        break;
      case Op::Mean:
        slot(node.inputs[0]).array() += g(0, 0) / static_cast<double>(in(0).size());
        break;
      case Op::SumRows:
        slot(node.inputs[0]).rowwise() += g.row(0);
        break;
      case Op::Softplus: {
        const double beta = p.c;
        add(node.inputs[0], (g.array() * detail::sigmoid(beta * in(0)).array()).matrix());
        break;
      }
      case Op::Relu:
        add(node.inputs[0], (in(0).array() > 0.0).select(g, 0.0));
        break;
      case Op::Sigmoid:
        add(node.inputs[0], (g.array() * y.array() * (1.0 - y.array())).matrix());
        break;
      case Op::Sin:
        add(node.inputs[0], (g.array() * in(0).array().cos()).matrix());
        break;
      case Op::Cos:
        add(node.inputs[0], (-g.array() * in(0).array().sin()).matrix());
        break;
      case Op::Sqrt:
        add(node.inputs[0], (0.5 * g.array() / y.array()).matrix());
        break;
      case Op::Square:
        add(node.inputs[0], (2.0 * g.array() * in(0).array()).matrix());
        break;
      case Op::Abs:
        slot(node.inputs[0]).array() +=
            g.array() *
            in(0).unaryExpr([](double x) { return double((x > 0.0) - (x < 0.0)); }).array();
        break;
      case Op::Log:
        add(node.inputs[0], (g.array() / in(0).array()).matrix());
        break;
      case Op::Exp:
        add(node.inputs[0], (g.array() * y.array()).matrix());
        break;
      case Op::Norm2: {
        const Mat& a = in(0);
        Mat& dst = slot(node.inputs[0]);
        for (Index j = 0; j < a.cols(); ++j) {
          if (y(0, j) > 0.0) dst.col(j) += (g(0, j) / y(0, j)) * a.col(j);
        }
        break;
      }
      case Op::ClampMin: {
        const double c = p.c;
        slot(node.inputs[0]).array() +=
            g.array() * in(0).unaryExpr([c](double x) { return x > c ? 1.0 : 0.0; }).array();
        break;
      }
      case Op::ClampMax: {
        const double c = p.c;
        slot(node.inputs[0]).array() +=
            g.array() * in(0).unaryExpr([c](double x) { return x < c ? 1.0 : 0.0; }).array();
        break;
      }
      case Op::Step:
      case Op::Sign:
        break;
      case Op::ConcatRows: {
        Index r = 0;
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
          const Index rows = in(i).rows();
          if (needs(i)) add(node.inputs[i], g.middleRows(r, rows));
          r += rows;
        }
        break;
      }
      case Op::SliceRows:
        slot(node.inputs[0]).middleRows(p.i0, p.i1 - p.i0) += g;
        break;
      case Op::SliceCols:
        slot(node.inputs[0]).middleCols(p.i0, p.i1 - p.i0) += g;
        break;
      case Op::GatherCols: {
        Mat& dst = slot(node.inputs[0]);
        for (std::size_t j = 0; j < p.idx.size(); ++j) dst.col(p.idx[j]) += g.col(static_cast<Index>(j));
        break;
      }
      case Op::Reshape: {
        Mat& dst = slot(node.inputs[0]);
        dst += g.reshaped(dst.rows(), dst.cols());
        break;
      }
      case Op::SegmentSum: {
        Mat& dst = slot(node.inputs[0]);
        for (std::size_t s = 0; s + 1 < p.idx.size(); ++s) {
          for (Index j = p.idx[s]; j < p.idx[s + 1]; ++j) dst.col(j) += g.col(static_cast<Index>(s));
        }
        break;
      }
      case Op::SegmentCumprodExclusive: {
        // out_i = prod_{j<i} a_j. With R_k = sum_{i>k} g_i prod_{k<j<i} a_j,
        // d/da_k = out_k * R_k and R_k = g_{k+1} + a_{k+1} R_{k+1}.
        const Mat& a = in(0);
        Mat& dst = slot(node.inputs[0]);
        for (std::size_t s = 0; s + 1 < p.idx.size(); ++s) {
          const Index lo = p.idx[s];
          const Index hi = p.idx[s + 1];
          for (Index r = 0; r < a.rows(); ++r) {
            double acc = 0.0;
            for (Index k = hi - 1; k >= lo; --k) {
              dst(r, k) += y(r, k) * acc;
              acc = g(r, k) + a(r, k) * acc;
            }
          }
        }
        break;
      }
      case Op::Fourier: {
        const Index d = in(0).rows();
        Mat da = g.topRows(d);
        for (Index f = 0; f < p.i0; ++f) {
          const double w = detail::fourier_weight(static_cast<int>(f));
          const Index rs = d * (2 * f + 1);
          const Index rc = d * (2 * f + 2);
          da.array() += w * (g.middleRows(rs, d).array() * y.middleRows(rc, d).array() -
                             g.middleRows(rc, d).array() * y.middleRows(rs, d).array());
        }
        add(node.inputs[0], da);
        break;
      }
      case Op::Leaf:
      case Op::Count_:
        break;
    }
  }

  return Grad(std::move(adj), std::move(touched), &tape);
}

// ---------------------------------------------------------------------------
// Var expressions

double Var::scalar() const {
  const Mat& v = value();
  if (!is_scalar(v)) throw ShapeError("scalar(): node is " + shape_str(v));
  return v(0, 0);
}

namespace {

Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape == nullptr || a.tape != b.tape) throw TapeError("operands live on different tapes");
  return *a.tape;
}

Var rec1(Op op, const Var& a, Payload p = {}) {
  const std::array<NodeId, 1> in{a.id};
  return Var{a.tape, a.tape->record(op, in, std::move(p))};
}

Var rec2(Op op, const Var& a, const Var& b, Payload p = {}) {
  Tape& t = same_tape(a, b);
  const std::array<NodeId, 2> in{a.id, b.id};
  return Var{&t, t.record(op, in, std::move(p))};
}

Payload with_c(double c) {
  Payload p;
  p.c = c;
  return p;
}

Payload with_range(Index i0, Index i1) {
  Payload p;
  p.i0 = i0;
  p.i1 = i1;
  return p;
}

Payload with_idx(std::vector<Index> idx) {
  Payload p;
  p.idx = std::move(idx);
  return p;
}

}  // namespace

Var leaf(Tape& tape, Mat value) { return Var{&tape, tape.leaf(std::move(value))}; }
Var constant(Tape& tape, Mat value) { return Var{&tape, tape.constant(std::move(value))}; }
Var constant(Tape& tape, double value) { return constant(tape, Mat::Constant(1, 1, value)); }

Var operator+(const Var& a, const Var& b) { return rec2(Op::Add, a, b); }
Var operator-(const Var& a, const Var& b) { return rec2(Op::Sub, a, b); }
Var operator*(const Var& a, const Var& b) { return rec2(Op::Mul, a, b); }
Var operator/(const Var& a, const Var& b) { return rec2(Op::Div, a, b); }
Var operator*(double c, const Var& a) { return rec1(Op::Scale, a, with_c(c)); }
Var operator*(const Var& a, double c) { return c * a; }
Var operator+(const Var& a, double c) { return rec1(Op::Offset, a, with_c(c)); }
Var operator+(double c, const Var& a) { return a + c; }
Var operator-(const Var& a, double c) { return a + (-c); }
Var operator-(double c, const Var& a) { return (-1.0 * a) + c; }
Var operator-(const Var& a) { return -1.0 * a; }

Var matmul(const Var& a, const Var& b) { return rec2(Op::MatMul, a, b); }
Var matvec(const Var& a, const Var& v) {
  if (v.cols() != 1) throw ShapeError("matvec: right operand must be a column vector");
  return matmul(a, v);
}
Var bias_add(const Var& x, const Var& bias) { return rec2(Op::BiasAdd, x, bias); }
Var sum(const Var& a) { return rec1(Op::Sum, a); }
Var mean(const Var& a) { return rec1(Op::Mean, a); }
Var sum_rows(const Var& a) { return rec1(Op::SumRows, a); }
Var softplus(const Var& a, double beta) { return rec1(Op::Softplus, a, with_c(beta)); }
Var relu(const Var& a) { return rec1(Op::Relu, a); }
Var sigmoid(const Var& a) { return rec1(Op::Sigmoid, a); }
Var sin(const Var& a) { return rec1(Op::Sin, a); }
Var cos(const Var& a) { return rec1(Op::Cos, a); }
Var sqrt(const Var& a) { return rec1(Op::Sqrt, a); }
Var square(const Var& a) { return rec1(Op::Square, a); }
Var abs(const Var& a) { return rec1(Op::Abs, a); }
Var log(const Var& a) { return rec1(Op::Log, a); }
Var exp(const Var& a) { return rec1(Op::Exp, a); }
Var norm2(const Var& a) { return rec1(Op::Norm2, a); }
Var clamp_min(const Var& a, double c) { return rec1(Op::ClampMin, a, with_c(c)); }
Var clamp_max(const Var& a, double c) { return rec1(Op::ClampMax, a, with_c(c)); }
Var step(const Var& a) { return rec1(Op::Step, a); }
Var sign(const Var& a) { return rec1(Op::Sign, a); }

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  std::vector<NodeId> ids;
  ids.reserve(parts.size());
  for (const Var& v : parts) {
    same_tape(parts.front(), v);
    ids.push_back(v.id);
  }
  Tape& t = *parts.front().tape;
  return Var{&t, t.record(Op::ConcatRows, ids)};
}

Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

Var slice_rows(const Var& a, Index begin, Index end) {
  return rec1(Op::SliceRows, a, with_range(begin, end));
}
Var slice_cols(const Var& a, Index begin, Index end) {
  return rec1(Op::SliceCols, a, with_range(begin, end));
}
Var gather_cols(const Var& a, std::vector<Index> idx) {
  return rec1(Op::GatherCols, a, with_idx(std::move(idx)));
}
Var reshape(const Var& a, Index rows, Index cols) {
  return rec1(Op::Reshape, a, with_range(rows, cols));
}
Var segment_sum(const Var& a, std::vector<Index> offsets) {
  return rec1(Op::SegmentSum, a, with_idx(std::move(offsets)));
}
Var segment_cumprod_exclusive(const Var& a, std::vector<Index> offsets) {
  return rec1(Op::SegmentCumprodExclusive, a, with_idx(std::move(offsets)));
}
Var fourier(const Var& a, int frequencies) { return rec1(Op::Fourier, a, with_range(frequencies, 0)); }

Var broadcast_rows(const Var& row, Index k) {
  if (row.rows() != 1) throw ShapeError("broadcast_rows: expected a single row");
  if (k == 1) return row;
  return matmul(constant(*row.tape, Mat::Ones(k, 1)), row);
}

Var repeat_cols(const Var& a, Index times) {
  std::vector<Index> idx;
  idx.reserve(static_cast<std::size_t>(a.cols() * times));
  for (Index j = 0; j < a.cols(); ++j) {
    for (Index r = 0; r < times; ++r) idx.push_back(j);
  }
  return gather_cols(a, std::move(idx));
}

Var tile_cols(const Var& a, Index times) {
  if (times == 1) return a;
  std::vector<Index> idx;
  idx.reserve(static_cast<std::size_t>(a.cols() * times));
  for (Index r = 0; r < times; ++r) {
    for (Index j = 0; j < a.cols(); ++j) idx.push_back(j);
  }
  return gather_cols(a, std::move(idx));
}

// ---------------------------------------------------------------------------
// Forward-mode push-through, emitted as tape nodes.

Var spatial_gradient(const Var& f, const Var& x) {
  Tape& tape = same_tape(f, x);
  constexpr Index kDirs = 3;
  const Index n = x.cols();
  if (x.rows() != kDirs) throw ShapeError("spatial_gradient: x must be 3 x N");
  if (f.rows() != 1 || f.cols() != n) throw ShapeError("spatial_gradient: f must be 1 x N");
  if (f.id.value <= x.id.value) {
    throw TapeError("spatial_gradient: f is not reachable from x");
  }

  std::unordered_map<std::int32_t, Var> tangent;
  {
    Mat seed = Mat::Zero(kDirs, kDirs * n);
    for (Index d = 0; d < kDirs; ++d) seed.row(d).segment(d * n, n).setOnes();
    tangent.emplace(x.id.value, constant(tape, std::move(seed)));
  }

  auto tan = [&](NodeId id) -> const Var* {
    auto it = tangent.find(id.value);
    return it == tangent.end() ? nullptr : &it->second;
  };
  // Primal operands are tiled to the 3N tangent layout; scalars broadcast as is.
  auto tiled = [&](const Var& v) -> Var {
    if (v.rows() == 1 && v.cols() == 1) return v;
    return tile_cols(v, kDirs);
  };
  auto unsupported = [](const Node& node) {
    throw TapeError(std::string("spatial_gradient: op '") + op_name(node.op) +
                    "' mixes columns and cannot be pushed forward");
  };

  for (std::int32_t k = x.id.value + 1; k <= f.id.value; ++k) {
    const NodeId id{k};
    // Copy the record: emitting tangent nodes may reallocate the tape.
    const Node node = [&] {
      const Node& src = tape.node(id);
      Node meta;
      meta.op = src.op;
      meta.inputs = src.inputs;
      meta.payload = src.payload;
      meta.constant = src.constant;
      return meta;
    }();
    // Constant nodes still carry a tangent when x itself is constant.
    if (node.op == Op::Leaf || node.op == Op::Step || node.op == Op::Sign) continue;
    bool any = false;
    for (NodeId in : node.inputs) any = any || tan(in) != nullptr;
    if (!any) continue;

    const Var self{&tape, id};
    auto input = [&](std::size_t i) { return Var{&tape, node.inputs[i]}; };
    const Var* da = tan(node.inputs[0]);
    const Var* db = node.inputs.size() > 1 ? tan(node.inputs[1]) : nullptr;
    // Element-wise unary rule: tangent = f'(a) .* da.
    auto chain = [&](const Var& deriv) { return tiled(deriv) * *da; };
    std::optional<Var> out;

    switch (node.op) {
      case Op::Add:
      case Op::Sub: {
        const bool neg = node.op == Op::Sub;
        if (da && db) {
          out = neg ? *da - *db : *da + *db;
        } else if (da) {
          if (input(0).rows() == 1 && input(0).cols() == 1 && !(input(1).rows() == 1 && input(1).cols() == 1)) {
            unsupported(node);
          }
          out = *da;
        } else {
          if (input(1).rows() == 1 && input(1).cols() == 1 && !(input(0).rows() == 1 && input(0).cols() == 1)) {
            unsupported(node);
          }
          out = neg ? -*db : *db;
        }
        break;
      }
      case Op::Mul: {
        std::optional<Var> acc;
        if (da) acc = *da * tiled(input(1));
        if (db) {
          Var t = tiled(input(0)) * *db;
          acc = acc ? *acc + t : t;
        }
        out = acc;
        break;
      }
      case Op::Div: {
        std::optional<Var> acc;
        if (da) acc = *da / tiled(input(1));
        if (db) {
          Var t = tiled(self / input(1)) * *db;
          acc = acc ? *acc - t : -t;
        }
        out = acc;
        break;
      }
      case Op::Scale:
        out = node.payload.c * *da;
        break;
      case Op::Offset:
        out = *da;
        break;
      case Op::MatMul:
        if (da) unsupported(node);
        out = matmul(input(0), *db);
        break;
      case Op::BiasAdd:
        if (db) unsupported(node);
        out = *da;
        break;
      case Op::SumRows:
        out = sum_rows(*da);
        break;
      case Op::Softplus:
        out = chain(sigmoid(node.payload.c * input(0)));
        break;
      case Op::Relu:
        out = chain(step(input(0)));
        break;
      case Op::Sigmoid:
        out = chain(self * (1.0 - self));
        break;
      case Op::Sin:
        out = chain(cos(input(0)));
        break;
      case Op::Cos:
        out = chain(-sin(input(0)));
        break;
      case Op::Sqrt:
        out = chain(constant(tape, 0.5) / self);
        break;
      case Op::Square:
        out = chain(2.0 * input(0));
        break;
      case Op::Abs:
        out = chain(sign(input(0)));
        break;
      case Op::Log:
        out = chain(constant(tape, 1.0) / input(0));
        break;
      case Op::Exp:
        out = chain(self);
        break;
      case Op::Norm2: {
        // d|a| = sum_rows(a .* da) / |a|, zero where |a| = 0.
        const Var unit = input(0) / broadcast_rows(clamp_min(self, 1e-300), input(0).rows());
        out = sum_rows(tiled(unit) * *da);
        break;
      }
      case Op::ClampMin:
        out = chain(step(input(0) - node.payload.c));
        break;
      case Op::ClampMax:
        out = chain(step(node.payload.c - input(0)));
        break;
      case Op::Step:
      case Op::Sign:
        break;
      case Op::ConcatRows: {
        std::vector<Var> parts;
        parts.reserve(node.inputs.size());
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
          if (const Var* t = tan(node.inputs[i])) {
            parts.push_back(*t);
          } else {
            parts.push_back(constant(tape, Mat::Zero(input(i).rows(), kDirs * input(i).cols())));
          }
        }
        out = concat_rows(parts);
        break;
      }
      case Op::SliceRows:
        out = slice_rows(*da, node.payload.i0, node.payload.i1);
        break;
      case Op::Fourier: {
        // The sin and cos rows of the output are each other's derivatives.
        const Index d = input(0).rows();
        std::vector<Var> parts{*da};
        for (Index f = 0; f < node.payload.i0; ++f) {
          const double w = detail::fourier_weight(static_cast<int>(f));
          const Var s = slice_rows(self, d * (2 * f + 1), d * (2 * f + 2));
          const Var c = slice_rows(self, d * (2 * f + 2), d * (2 * f + 3));
          parts.push_back(chain(w * c));
          parts.push_back(chain(-w * s));
        }
        out = concat_rows(parts);
        break;
      }
      case Op::SliceCols:
      case Op::GatherCols: {
        const Index in_cols = input(0).cols();
        std::vector<Index> base;
        if (node.op == Op::SliceCols) {
          for (Index j = node.payload.i0; j < node.payload.i1; ++j) base.push_back(j);
        } else {
          base = node.payload.idx;
        }
        std::vector<Index> idx;
        idx.reserve(base.size() * kDirs);
        for (Index d = 0; d < kDirs; ++d) {
          for (Index j : base) idx.push_back(j + d * in_cols);
        }
        out = gather_cols(*da, std::move(idx));
        break;
      }
      default:
        unsupported(node);
    }
    if (out) tangent.emplace(k, *out);
  }

  const Var* df = tan(f.id);
  if (df == nullptr) throw TapeError("spatial_gradient: f is not reachable from x");
  return concat_rows({slice_cols(*df, 0, n), slice_cols(*df, n, 2 * n), slice_cols(*df, 2 * n, 3 * n)});
}

// ---------------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Var(Tape&, const Var&)>& fn,
                           const Eigen::VectorXd& point, double h) {
  GradCheckReport report;
  if (!(h > 0.0)) {
    report.message = "step must be positive";
    return report;
  }
  auto eval = [&](const Eigen::VectorXd& p) {
    Tape t;
    const Var x = leaf(t, p);
    return fn(t, x).scalar();
  };

  Tape tape;
  const Var x = leaf(tape, point);
  const Var y = fn(tape, x);
  if (!std::isfinite(y.scalar())) {
    report.message = "non-finite forward value";
    return report;
  }
  const Mat analytic = backward(tape, y.id).of(x.id);

  Eigen::VectorXd p = point;
  for (Index i = 0; i < point.size(); ++i) {
    p(i) = point(i) + h;
    const double fp = eval(p);
    p(i) = point(i) - h;
    const double fm = eval(p);
    p(i) = point(i);
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      report.message = "non-finite forward value at component " + std::to_string(i);
      report.worst_index = i;
      return report;
    }
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic(i, 0);
    const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
    if (report.worst_index < 0 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = i;
    }
  }
  report.ok = true;
  return report;
}

}  // namespace nsrf
