#pragma once

// SDF volume rendering along rays inside the unit sphere.

#include <Eigen/Core>

#include <functional>
#include <optional>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "nsrf/cameras.hpp"
#include "nsrf/fields.hpp"
#include "nsrf/tape.hpp"

namespace nsrf {

inline constexpr double kRenderEps = 1e-8;

struct RenderConfig {
  int n_coarse = 64;
  int importance_rounds = 4;
  int per_round = 16;
  /// Sharpness used by importance round r is base * 2^r.
  double importance_sharpness = 64.0;
  double background = 0.0;
  Index chunk_rays = 512;
  int threads = 1;
};

/// Ray/unit-sphere interval; nullopt for misses and tangent rays.
std::optional<std::pair<double, double>> near_far(const Eigen::Vector3d& origin,
                                                  const Eigen::Vector3d& direction);

/// n stratified depths in [near, far]; bin midpoints when rng is null.
std::vector<double> sample_coarse(double near, double far, int n, std::mt19937_64* rng);

/// Logistic-CDF opacity between consecutive samples, clamped to [0, 1].
double sdf_to_alpha(double sdf_i, double sdf_next, double s);

struct CompositeResult {
  Eigen::Vector3d rgb = Eigen::Vector3d::Zero();
  std::vector<double> weights;
  double opacity = 0.0;
  double depth = 0.0;
};

/// Front-to-back compositing; colors is 3 x n, depths has n entries.
CompositeResult composite(std::span<const double> alphas, const Mat& colors,
                          std::span<const double> depths);

/// Inverse-CDF draws from piecewise-constant weights over sections [edges_k, edges_k+1].
/// Deterministic quantiles (k + 0.5) / n; all-zero weights fall back to uniform.
std::vector<double> sample_pdf(std::span<const double> edges, std::span<const double> weights, int n);

/// Evaluates SDF values for a batch of depths along one ray.
using DepthSdf = std::function<std::vector<double>(std::span<const double> depths)>;

/// Hierarchical resampling: each round draws per_round depths from weights built with
/// sharpness base * 2^round, evaluates them and merges. Output stays sorted, deduplicated within 1e-9.
std::vector<double> sample_importance(std::vector<double> depths, std::vector<double> sdf, int rounds,
                                      int per_round, double base_sharpness, const DepthSdf& eval);

struct RaySamples {
  bool background = true;
  std::vector<double> depths;
  std::vector<double> sdf;
  std::vector<double> alphas;
  std::vector<double> weights;
  Eigen::Vector3d rgb = Eigen::Vector3d::Zero();
  double opacity = 0.0;
  double depth = 0.0;
};

struct RenderBatch {
  std::vector<RaySamples> rays;
  std::size_t degenerate_normals = 0;
};

/// Plans sample depths (coarse + importance) for each ray using the field in eval mode.
/// Background rays get an empty list. rng enables coarse jitter.
std::vector<std::vector<double>> plan_samples(const RadianceField& field, std::span<const Ray> rays,
                                              const RenderConfig& config, std::mt19937_64* rng);

/// Tape-free rendering of arbitrary rays.
RenderBatch render_rays(const RadianceField& field, std::span<const Ray> rays,
                        const RenderConfig& config);

/// Tape-free rendering of pixels of one frame.
RenderBatch render_rays(const RadianceField& field, const CameraRig& rig, std::size_t frame,
                        std::span<const Eigen::Vector2d> pixels, const RenderConfig& config);

struct TapeRender {
  Var rgb;        // 3 x B
  Var opacity;    // 1 x B
  Var depth;      // 1 x B
  Var gradients;  // 3 x M sdf gradients at every sample; invalid when M == 0
  Index samples = 0;
  std::size_t degenerate_normals = 0;
};

/// Records the full render of B rays on the field's tape. depths[b] empty marks a background ray.
TapeRender render_on_tape(FieldBinding& field, const RayVars& rays,
                          std::span<const std::vector<double>> depths, double background);

struct RenderedImage {
  int width = 0;
  int height = 0;
  Mat rgb;      // 3 x (width*height), row-major pixel order
  Mat opacity;  // 1 x (width*height)
  Mat depth;    // 1 x (width*height)
};

RenderedImage render_image(const RadianceField& field, const CameraRig& rig, std::size_t frame,
                           const RenderConfig& config);

}  // namespace nsrf
