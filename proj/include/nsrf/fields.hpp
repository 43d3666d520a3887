#pragma once

// SDF and colour networks. Points are stored as columns (3 x N).

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "nsrf/params.hpp"
#include "nsrf/tape.hpp"

namespace nsrf {

/// v -> (v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)).
struct PositionalEncoding {
  int frequencies = 0;

  Index output_dim(Index input_dim) const { return input_dim * (2 * frequencies + 1); }
  Mat encode(const Mat& v) const;
  Var encode(const Var& v) const;
  /// Derivative of the encoding along each input axis, stacked as [d/dv0 | d/dv1 | d/dv2].
  Mat encode_tangents(const Mat& v) const;
  /// Same, reusing encode(v).
  Mat encode_tangents(const Mat& v, const Mat& encoded) const;
};

struct Linear {
  Mat weight;
  Mat bias;  // out x 1
};

struct SdfConfig {
  int hidden_layers = 8;
  int width = 256;
  int feature_dim = 256;
  int skip_layer = 4;  // 0 disables the skip connection
  double beta = 100.0;
  int frequencies = 6;
  bool geometric_init = true;
  double init_radius = 0.5;
};

struct ColorConfig {
  int hidden_layers = 4;
  int width = 256;
  int view_frequencies = 4;
};

struct SdfBatch {
  Mat sdf;       // 1 x N
  Mat feature;   // F x N
  Mat gradient;  // 3 x N, empty unless requested
};

struct TapeSdf {
  Var sdf;
  Var feature;
};

class SdfNetwork {
 public:
  SdfNetwork() = default;
  SdfNetwork(const SdfConfig& config, std::uint64_t seed);

  const SdfConfig& config() const { return config_; }
  Index encoded_dim() const { return encoding_.output_dim(3); }
  std::vector<ParamRef> parameters(const std::string& prefix = "sdf");
  Index parameter_count() const;

  SdfBatch evaluate(const Mat& x, bool with_gradient) const;
  TapeSdf evaluate(std::span<const Var> params, const Var& x) const;

  std::vector<Linear>& layers() { return layers_; }
  const std::vector<Linear>& layers() const { return layers_; }

 private:
  bool is_skip(std::size_t layer) const {
    return config_.skip_layer > 0 && layer == static_cast<std::size_t>(config_.skip_layer);
  }

  SdfConfig config_;
  PositionalEncoding encoding_;
  std::vector<Linear> layers_;
};

class ColorNetwork {
 public:
  ColorNetwork() = default;
  ColorNetwork(const ColorConfig& config, Index feature_dim, std::uint64_t seed);

  const ColorConfig& config() const { return config_; }
  std::vector<ParamRef> parameters(const std::string& prefix = "color");
  Index parameter_count() const;

  /// rgb in (0,1), 3 x N. view_dirs are unit columns; normals are normalized.
  Mat evaluate(const Mat& x, const Mat& view_dirs, const Mat& normals, const Mat& feature) const;
  Var evaluate(std::span<const Var> params, const Var& x, const Var& view_dirs, const Var& normals,
               const Var& feature) const;

  std::vector<Linear>& layers() { return layers_; }
  const std::vector<Linear>& layers() const { return layers_; }

 private:
  ColorConfig config_;
  PositionalEncoding view_encoding_;
  std::vector<Linear> layers_;
};

/// Normalizes gradient columns; zero columns become [0,0,1]. Returns how many fell back.
std::size_t normalize_normals(Mat& gradients);

/// Tape version of normalize_normals; the fallback columns carry no derivative.
Var normalized_normals(const Var& gradients, std::size_t* degenerate = nullptr);

/// nabla sdf at each column of x, unnormalized.
Mat sdf_normal(const SdfNetwork& net, const Mat& x);

// Field interface used by the renderer ------------------------------------

class FieldBinding {
 public:
  virtual ~FieldBinding() = default;
  virtual TapeSdf sdf(const Var& x) = 0;
  virtual Var color(const Var& x, const Var& view_dirs, const Var& normals, const Var& feature) = 0;
  /// Logistic sharpness s as a 1x1 node.
  virtual Var sharpness() = 0;
  /// Leaves matching RadianceField::parameters() order; empty for fixed fields.
  virtual std::span<const Var> leaves() const = 0;
};

class RadianceField {
 public:
  virtual ~RadianceField() = default;
  virtual SdfBatch sdf(const Mat& x, bool with_gradient) const = 0;
  virtual Mat color(const Mat& x, const Mat& view_dirs, const Mat& normals,
                    const Mat& feature) const = 0;
  virtual double sharpness() const = 0;
  virtual std::unique_ptr<FieldBinding> bind(Tape& tape) const = 0;
};

struct FieldConfig {
  SdfConfig sdf;
  ColorConfig color;
  /// s = exp(10 * variance).
  double init_variance = 0.3;
};

/// SDF network, colour network and learnable sharpness.
class NeuralField : public RadianceField {
 public:
  NeuralField(const FieldConfig& config, std::uint64_t seed);

  const FieldConfig& config() const { return config_; }
  SdfNetwork& sdf_network() { return sdf_; }
  const SdfNetwork& sdf_network() const { return sdf_; }
  ColorNetwork& color_network() { return color_; }
  const ColorNetwork& color_network() const { return color_; }
  double& variance() { return variance_; }

  /// sdf.*, color.*, then "sharpness.variance".
  std::vector<ParamRef> parameters();

  SdfBatch sdf(const Mat& x, bool with_gradient) const override;
  Mat color(const Mat& x, const Mat& view_dirs, const Mat& normals,
            const Mat& feature) const override;
  double sharpness() const override;
  std::unique_ptr<FieldBinding> bind(Tape& tape) const override;
  /// Binds caller-made nodes, one per parameters() entry with matching shapes.
  std::unique_ptr<FieldBinding> bind(std::vector<Var> leaves) const;

 private:
  FieldConfig config_;
  SdfNetwork sdf_;
  ColorNetwork color_;
  double variance_ = 0.3;
};

inline constexpr double kSharpnessScale = 10.0;

}  // namespace nsrf
