#pragma once

// Scene datasets on disk and the synthetic oracle scenes.
//
// Layout of a scene directory:
//   cameras.json
//   images/000.png  images/000.f32   (8-bit RGB and float32 sidecar)
//   masks/000.png   masks/000.f32    (8-bit gray and float32 sidecar)
//   synthetic.json                   (only for generated scenes)

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nsrf/cameras.hpp"
#include "nsrf/fields.hpp"

namespace nsrf {

/// Row-major interleaved float image.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c) : width(w), height(h), channels(c), data(std::size_t(w) * h * c, 0.0f) {}

  float& at(int x, int y, int c) { return data[(std::size_t(y) * width + x) * channels + c]; }
  float at(int x, int y, int c) const { return data[(std::size_t(y) * width + x) * channels + c]; }
  std::size_t pixels() const { return std::size_t(width) * height; }
};

void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);
/// Raw float32 little-endian with a 16-byte header: "F32I", width, height, channels (u32).
void write_f32(const std::filesystem::path& path, const Image& image);
Image read_f32(const std::filesystem::path& path);

struct Frame {
  Image image;  // H x W x 3 in [0,1]
  Image mask;   // H x W x 1 in [0,1]
  Eigen::Matrix4d t_wc = Eigen::Matrix4d::Identity();
  std::string image_file;
  std::string mask_file;
};

struct SceneDataset {
  std::vector<Frame> frames;
  Intrinsics intrinsics;
  /// Object bounding sphere in dataset coordinates.
  Eigen::Vector3d bounds_center = Eigen::Vector3d::Zero();
  double bounds_radius = 0.8;

  CameraRig rig() const;
  /// Replaces camera poses and focal length.
  void set_rig(const CameraRig& rig);
};

inline constexpr double kNormalizedRadius = 0.8;

/// Loads and validates a scene; rescales it so the object bounding sphere has
/// radius 0.8 at the origin when cameras.json records a different one.
SceneDataset load_scene(const std::filesystem::path& dir);
void save_scene(const SceneDataset& dataset, const std::filesystem::path& dir);

/// Writes only cameras.json (used for perturbed camera sets).
void save_cameras(const SceneDataset& dataset, const std::filesystem::path& file);
/// Reads cameras.json poses and intrinsics without loading images.
CameraRig load_cameras(const std::filesystem::path& file);

// Synthetic scenes ------------------------------------------------------------

struct Primitive {
  enum class Kind { Sphere, Box };
  Kind kind = Kind::Sphere;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double radius = 0.5;
  Eigen::Vector3d half_extents = Eigen::Vector3d::Constant(0.3);
};

struct TextureSpec {
  enum class Kind { Checker, Octants };
  Kind kind = Kind::Checker;
  double cell = 0.25;
  /// Blend band of the checker as a fraction of the cell wave amplitude; 0 gives hard edges.
  double softness = 0.0;
  /// Lattice and octant origin; moves with the geometry under normalization.
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
};

struct RingSpec {
  int count = 16;
  double radius = 2.5;
  double elevation_deg = 20.0;
  /// Per-view elevation offsets drawn uniformly in +/- this range.
  double elevation_spread_deg = 0.0;
  double focal = 60.0;
};

struct SyntheticSceneSpec {
  std::vector<Primitive> primitives{Primitive{}};
  TextureSpec texture;
  RingSpec ring;
  int width = 64;
  int height = 64;
  std::uint64_t seed = 0;
};

SyntheticSceneSpec parse_synthetic_spec(const std::string& json_text);
std::string to_json(const SyntheticSceneSpec& spec);

/// Exact for spheres and boxes; a union is the min over primitives (exact outside,
/// a lower bound of the distance inside).
double analytic_sdf(const SyntheticSceneSpec& spec, const Eigen::Vector3d& x);
Eigen::Vector3d analytic_gradient(const SyntheticSceneSpec& spec, const Eigen::Vector3d& x);
Eigen::Vector3d texture_color(const SyntheticSceneSpec& spec, const Eigen::Vector3d& x);
/// Closed-form first ray hit, for checking the sphere tracer.
std::optional<double> analytic_intersect(const SyntheticSceneSpec& spec, const Eigen::Vector3d& origin,
                                         const Eigen::Vector3d& direction);
/// Bounding sphere (center, radius) of the object.
std::pair<Eigen::Vector3d, double> bounding_sphere(const SyntheticSceneSpec& spec);
/// Spec after x -> (x - center) * scale.
SyntheticSceneSpec transformed(const SyntheticSceneSpec& spec, const Eigen::Vector3d& center, double scale);

/// Ring of look-at cameras around the origin.
CameraRig ring_cameras(const RingSpec& ring, int width, int height, std::uint64_t seed);

struct TraceHit {
  double depth = 0.0;
  Eigen::Vector3d point = Eigen::Vector3d::Zero();
};

/// Sphere tracing of the analytic SDF.
std::optional<TraceHit> sphere_trace(const SyntheticSceneSpec& spec, const Eigen::Vector3d& origin,
                                     const Eigen::Vector3d& direction);

/// Renders the spec by sphere tracing, writes it to dir and returns the loaded dataset.
SceneDataset generate_synthetic(const SyntheticSceneSpec& spec, const std::filesystem::path& dir);

/// Analytic SDF and texture as a renderer field with a fixed sharpness.
class AnalyticField : public RadianceField {
 public:
  AnalyticField(SyntheticSceneSpec spec, double sharpness);

  SdfBatch sdf(const Mat& x, bool with_gradient) const override;
  Mat color(const Mat& x, const Mat& view_dirs, const Mat& normals, const Mat& feature) const override;
  double sharpness() const override { return sharpness_; }
  std::unique_ptr<FieldBinding> bind(Tape& tape) const override;

  const SyntheticSceneSpec& spec() const { return spec_; }

 private:
  SyntheticSceneSpec spec_;
  double sharpness_;
};

}  // namespace nsrf
