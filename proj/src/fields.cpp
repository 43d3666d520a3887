#include "nsrf/fields.hpp"

#include "kernels.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "nsrf/errors.hpp"

namespace nsrf {

namespace {

constexpr double kDegenerateNorm = 1e-12;

void check_finite(const Mat& m, const char* net, std::size_t layer) {
  if (!m.allFinite()) {
    throw NumericalError(std::string("non-finite activation in ") + net + " layer " +
                         std::to_string(layer));
  }
}

Mat normal_matrix(Index rows, Index cols, double mean, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(mean, stddev);
  Mat m(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  }
  return m;
}

Var dense(const Var& h, const Var& weight, const Var& bias) {
  return bias_add(matmul(weight, h), bias);
}

}  // namespace

// ---------------------------------------------------------------------------

Mat PositionalEncoding::encode(const Mat& v) const { return detail::fourier_features(v, frequencies); }

Var PositionalEncoding::encode(const Var& v) const {
  if (frequencies == 0) return v;
  return fourier(v, frequencies);
}

Mat PositionalEncoding::encode_tangents(const Mat& v) const { return encode_tangents(v, encode(v)); }

Mat PositionalEncoding::encode_tangents(const Mat& v, const Mat& encoded) const {
  const Index d = v.rows();
  const Index n = v.cols();
  Mat out = Mat::Zero(output_dim(d), d * n);
  for (Index axis = 0; axis < d; ++axis) {
    auto block = out.middleCols(axis * n, n);
    block.row(axis).setOnes();
    for (int k = 0; k < frequencies; ++k) {
      const double w = detail::fourier_weight(k);
      block.row(d * (2 * k + 1) + axis) = w * encoded.row(d * (2 * k + 2) + axis);
      block.row(d * (2 * k + 2) + axis) = -w * encoded.row(d * (2 * k + 1) + axis);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

SdfNetwork::SdfNetwork(const SdfConfig& config, std::uint64_t seed)
    : config_(config), encoding_{config.frequencies} {
  if (config.hidden_layers < 1 || config.width < 1 || config.feature_dim < 0) {
    throw ValidationError("sdf network: hidden_layers and width must be positive");
  }
  if (config.skip_layer < 0 || config.skip_layer > config.hidden_layers) {
    throw ValidationError("sdf network: skip layer out of range");
  }
  std::mt19937_64 rng(seed);
  const Index enc = encoded_dim();
  const auto n_linear = static_cast<std::size_t>(config.hidden_layers) + 1;
  layers_.resize(n_linear);
  for (std::size_t l = 0; l < n_linear; ++l) {
    const bool last = l + 1 == n_linear;
    Index in = l == 0 ? enc : config.width;
    if (is_skip(l)) in += enc;
    const Index out = last ? 1 + config.feature_dim : config.width;
    Linear& layer = layers_[l];
    layer.bias = Mat::Zero(out, 1);

    if (!config.geometric_init) {
      layer.weight = normal_matrix(out, in, 0.0, std::sqrt(2.0 / double(in + out)), rng);
      continue;
    }
    if (last) {
      layer.weight = normal_matrix(out, in, std::sqrt(std::numbers::pi / double(in)), 1e-4, rng);
      layer.bias.setConstant(-config.init_radius);
    } else {
      layer.weight = normal_matrix(out, in, 0.0, std::sqrt(2.0) / std::sqrt(double(out)), rng);
    }
    // The first layer sees only raw xyz, with rows in +/- pairs so that x -> -x swaps
    // the units of each pair. Equal columns in the next layer then make the whole
    // network even in x at init.
    if (l == 0) {
      layer.weight.rightCols(enc - 3).setZero();
      for (Index r = 0; r + 1 < out; r += 2) layer.weight.row(r + 1) = -layer.weight.row(r);
      if (out % 2 == 1) layer.weight.row(out - 1).setZero();
    }
    if (l == 1) {
      for (Index c = 0; c + 1 < config.width; c += 2) layer.weight.col(c + 1) = layer.weight.col(c);
    }
    if (is_skip(l)) {
      // The skipped-in encoding starts silent; undo the 1/sqrt(2) on the hidden part.
      layer.weight.rightCols(enc).setZero();
      layer.weight.leftCols(config.width) *= std::numbers::sqrt2;
    }
  }
}

std::vector<ParamRef> SdfNetwork::parameters(const std::string& prefix) {
  std::vector<ParamRef> out;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string base = prefix + ".l" + std::to_string(l);
    out.push_back(param_ref(base + ".weight", layers_[l].weight));
    out.push_back(param_ref(base + ".bias", layers_[l].bias));
  }
  return out;
}

Index SdfNetwork::parameter_count() const {
  Index n = 0;
  for (const Linear& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

SdfBatch SdfNetwork::evaluate(const Mat& x, bool with_gradient) const {
  if (x.rows() != 3) throw ShapeError("sdf network: points must be 3 x N");
  const Index n = x.cols();
  const double beta = config_.beta;
  const double skip_scale = 1.0 / std::numbers::sqrt2;

  const Mat enc = encoding_.encode(x);
  Mat enc_tan;
  Mat h = enc;
  Mat dh;  // in x 3N tangent
  if (with_gradient) {
    enc_tan = encoding_.encode_tangents(x, enc);
    dh = enc_tan;
  }

  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Linear& layer = layers_[l];
    if (is_skip(l)) {
      Mat cat(h.rows() + enc.rows(), n);
      cat << h, enc;
      h = skip_scale * cat;
      if (with_gradient) {
        Mat dcat(dh.rows() + enc_tan.rows(), 3 * n);
        dcat << dh, enc_tan;
        dh = skip_scale * dcat;
      }
    }
    Mat z = layer.weight * h;
    z.colwise() += layer.bias.col(0);
    check_finite(z, "sdf", l);
    if (with_gradient) dh = layer.weight * dh;
    if (l + 1 == layers_.size()) {
      h = std::move(z);
      break;
    }
    if (with_gradient) {
      Mat slope;
      detail::softplus_with_slope(z, beta, h, slope);
      for (int d = 0; d < 3; ++d) dh.middleCols(d * n, n).array() *= slope.array();
    } else {
      h = detail::softplus(z, beta);
    }
  }

  SdfBatch out;
  out.sdf = h.topRows(1);
  out.feature = h.bottomRows(h.rows() - 1);
  if (with_gradient) {
    out.gradient.resize(3, n);
    for (int d = 0; d < 3; ++d) out.gradient.row(d) = dh.row(0).segment(d * n, n);
  }
  return out;
}

TapeSdf SdfNetwork::evaluate(std::span<const Var> params, const Var& x) const {
  if (params.size() != 2 * layers_.size()) throw ShapeError("sdf network: parameter count mismatch");
  if (x.rows() != 3) throw ShapeError("sdf network: points must be 3 x N");
  const Var enc = encoding_.encode(x);
  Var h = enc;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    if (is_skip(l)) h = (1.0 / std::numbers::sqrt2) * concat_rows({h, enc});
    const Var z = dense(h, params[2 * l], params[2 * l + 1]);
    check_finite(z.value(), "sdf", l);
    h = l + 1 == layers_.size() ? z : softplus(z, config_.beta);
  }
  return {slice_rows(h, 0, 1), slice_rows(h, 1, h.rows())};
}

// ---------------------------------------------------------------------------

ColorNetwork::ColorNetwork(const ColorConfig& config, Index feature_dim, std::uint64_t seed)
    : config_(config), view_encoding_{config.view_frequencies} {
  if (config.hidden_layers < 1 || config.width < 1) {
    throw ValidationError("color network: hidden_layers and width must be positive");
  }
  std::mt19937_64 rng(seed);
  const Index in0 = 3 + view_encoding_.output_dim(3) + 3 + feature_dim;
  const auto n_linear = static_cast<std::size_t>(config.hidden_layers) + 1;
  layers_.resize(n_linear);
  for (std::size_t l = 0; l < n_linear; ++l) {
    const Index in = l == 0 ? in0 : config.width;
    const Index out = l + 1 == n_linear ? 3 : config.width;
    layers_[l].weight = normal_matrix(out, in, 0.0, std::sqrt(2.0 / double(in + out)), rng);
    layers_[l].bias = Mat::Zero(out, 1);
  }
}

std::vector<ParamRef> ColorNetwork::parameters(const std::string& prefix) {
  std::vector<ParamRef> out;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string base = prefix + ".l" + std::to_string(l);
    out.push_back(param_ref(base + ".weight", layers_[l].weight));
    out.push_back(param_ref(base + ".bias", layers_[l].bias));
  }
  return out;
}

Index ColorNetwork::parameter_count() const {
  Index n = 0;
  for (const Linear& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

Mat ColorNetwork::evaluate(const Mat& x, const Mat& view_dirs, const Mat& normals,
                           const Mat& feature) const {
  const Index n = x.cols();
  const Mat venc = view_encoding_.encode(view_dirs);
  Mat h(3 + venc.rows() + 3 + feature.rows(), n);
  h << x, venc, normals, feature;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Mat z = layers_[l].weight * h;
    z.colwise() += layers_[l].bias.col(0);
    check_finite(z, "color", l);
    if (l + 1 == layers_.size()) return detail::sigmoid(z);
    h = z.cwiseMax(0.0);
  }
  return h;
}

Var ColorNetwork::evaluate(std::span<const Var> params, const Var& x, const Var& view_dirs,
                           const Var& normals, const Var& feature) const {
  if (params.size() != 2 * layers_.size()) throw ShapeError("color network: parameter count mismatch");
  Var h = concat_rows({x, view_encoding_.encode(view_dirs), normals, feature});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Var z = dense(h, params[2 * l], params[2 * l + 1]);
    check_finite(z.value(), "color", l);
    h = l + 1 == layers_.size() ? sigmoid(z) : relu(z);
  }
  return h;
}

// ---------------------------------------------------------------------------

std::size_t normalize_normals(Mat& gradients) {
  std::size_t degenerate = 0;
  for (Index j = 0; j < gradients.cols(); ++j) {
    const double n = gradients.col(j).norm();
    if (n <= kDegenerateNorm) {
      gradients.col(j) = Eigen::Vector3d::UnitZ();
      ++degenerate;
    } else {
      gradients.col(j) /= n;
    }
  }
  return degenerate;
}

Var normalized_normals(const Var& gradients, std::size_t* degenerate) {
  Tape& tape = *gradients.tape;
  const Mat norms = gradients.value().colwise().norm();
  Mat fallback = Mat::Zero(3, gradients.cols());
  std::size_t count = 0;
  for (Index j = 0; j < norms.cols(); ++j) {
    if (norms(0, j) <= kDegenerateNorm) {
      fallback(2, j) = 1.0;
      ++count;
    }
  }
  if (degenerate != nullptr) *degenerate += count;
  const Var safe = count == 0 ? gradients : gradients + constant(tape, std::move(fallback));
  return safe / broadcast_rows(norm2(safe), 3);
}

Mat sdf_normal(const SdfNetwork& net, const Mat& x) { return net.evaluate(x, true).gradient; }

// ---------------------------------------------------------------------------

namespace {

class NeuralBinding : public FieldBinding {
 public:
  NeuralBinding(const NeuralField& field, std::vector<Var> leaves)
      : field_(field), leaves_(std::move(leaves)) {
    n_sdf_ = 2 * field.sdf_network().layers().size();
    n_color_ = 2 * field.color_network().layers().size();
  }

  TapeSdf sdf(const Var& x) override {
    return field_.sdf_network().evaluate(std::span<const Var>(leaves_).subspan(0, n_sdf_), x);
  }

  Var color(const Var& x, const Var& view_dirs, const Var& normals, const Var& feature) override {
    return field_.color_network().evaluate(std::span<const Var>(leaves_).subspan(n_sdf_, n_color_),
                                           x, view_dirs, normals, feature);
  }

  Var sharpness() override { return exp(kSharpnessScale * leaves_.back()); }

  std::span<const Var> leaves() const override { return leaves_; }

 private:
  const NeuralField& field_;
  std::vector<Var> leaves_;
  std::size_t n_sdf_ = 0;
  std::size_t n_color_ = 0;
};

}  // namespace

NeuralField::NeuralField(const FieldConfig& config, std::uint64_t seed)
    : config_(config),
      sdf_(config.sdf, seed),
      color_(config.color, config.sdf.feature_dim, seed + 0x9e3779b97f4a7c15ULL),
      variance_(config.init_variance) {}

std::vector<ParamRef> NeuralField::parameters() {
  std::vector<ParamRef> out = sdf_.parameters();
  for (ParamRef& p : color_.parameters()) out.push_back(std::move(p));
  out.push_back(param_ref("sharpness.variance", variance_));
  return out;
}

SdfBatch NeuralField::sdf(const Mat& x, bool with_gradient) const {
  return sdf_.evaluate(x, with_gradient);
}

Mat NeuralField::color(const Mat& x, const Mat& view_dirs, const Mat& normals,
                       const Mat& feature) const {
  return color_.evaluate(x, view_dirs, normals, feature);
}

double NeuralField::sharpness() const { return std::exp(kSharpnessScale * variance_); }

std::unique_ptr<FieldBinding> NeuralField::bind(Tape& tape) const {
  // parameters() hands out mutable views; binding only reads them.
  auto params = const_cast<NeuralField*>(this)->parameters();
  return std::make_unique<NeuralBinding>(*this, bind_leaves(tape, params));
}

std::unique_ptr<FieldBinding> NeuralField::bind(std::vector<Var> leaves) const {
  const auto params = const_cast<NeuralField*>(this)->parameters();
  if (leaves.size() != params.size()) throw ShapeError("bind: expected one node per parameter");
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    if (leaves[i].rows() != params[i].rows || leaves[i].cols() != params[i].cols) {
      throw ShapeError("bind: shape mismatch for " + params[i].name);
    }
  }
  return std::make_unique<NeuralBinding>(*this, std::move(leaves));
}

}  // namespace nsrf
