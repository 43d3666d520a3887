#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "nsrf/dataio.hpp"
#include "nsrf/training.hpp"

namespace nsrf::test {

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("nsrf_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline SyntheticSceneSpec small_sphere_spec(int views, int size) {
  SyntheticSceneSpec spec;
  spec.ring.count = views;
  spec.width = size;
  spec.height = size;
  spec.ring.focal = 60.0 * size / 64.0;
  spec.texture.cell = 0.5;
  spec.texture.softness = 0.3;
  return spec;
}

inline FieldConfig tiny_field(int width) {
  FieldConfig f;
  f.sdf.hidden_layers = 2;
  f.sdf.width = width;
  f.sdf.feature_dim = width;
  f.sdf.skip_layer = 0;
  f.sdf.frequencies = 2;
  f.color.hidden_layers = 1;
  f.color.width = width;
  f.color.view_frequencies = 1;
  return f;
}

inline TrainConfig tiny_train_config(TrainCase c, long iterations) {
  TrainConfig t;
  t.train_case = c;
  t.iterations = iterations;
  t.batch_rays = 32;
  t.eval_every = 5;
  t.eval_frames = {0};
  t.field = tiny_field(16);
  t.render.n_coarse = 8;
  t.render.importance_rounds = 1;
  t.render.per_round = 4;
  t.render.chunk_rays = 16;
  t.lr_fields = 1e-3;
  t.lr_extrinsics = 1e-3;
  t.lr_intrinsics = 1e-3;
  t.noise.extrinsic_sigma = 0.05;
  t.noise.intrinsic_sigma_ratio = 0.05;
  return t;
}

// Full weighted loss of a few pixels of one frame as a function of one flat vector
// holding every field parameter followed by omega, t and focal.
struct FlatLossProblem {
  NeuralField field;
  Extrinsics camera;
  Intrinsics intrinsics;
  std::vector<Eigen::Vector2d> pixels;
  std::vector<std::vector<double>> depths;
  Mat target_rgb;
  Mat target_mask;
  LossWeights weights;

  Eigen::VectorXd point() {
    Eigen::VectorXd field_flat = flatten(field.parameters());
    Eigen::VectorXd out(field_flat.size() + 7);
    out << field_flat, camera.omega, camera.t, intrinsics.focal;
    return out;
  }

  Var loss(const Var& flat) {
    std::vector<Var> leaves;
    Index k = 0;
    for (const ParamRef& p : field.parameters()) {
      leaves.push_back(reshape(slice_rows(flat, k, k + p.size()), p.rows, p.cols));
      k += p.size();
    }
    const Var omega = slice_rows(flat, k, k + 3);
    const Var t = slice_rows(flat, k + 3, k + 6);
    const Var focal = slice_rows(flat, k + 6, k + 7);
    auto binding = field.bind(std::move(leaves));
    BatchNormalisers norm;
    norm.colour = 3.0 * std::max<Index>(1, interior_count(target_mask));
    norm.mask = static_cast<double>(pixels.size());
    norm.eikonal = 0.0;
    for (const auto& d : depths) norm.eikonal += static_cast<double>(d.size());
    return batch_loss(*binding, omega, t, focal, intrinsics, pixels, depths, target_rgb, target_mask, weights,
                      norm, 0.0)
        .total;
  }
};

// Rays near the image centre of a ring camera, with fixed evenly spread sample depths.
inline FlatLossProblem grad_check_problem(int rays, int samples, int width) {
  FieldConfig fc = tiny_field(width);
  FlatLossProblem p{NeuralField(fc, 11), {}, {}, {}, {}, {}, {}, {}};
  const CameraRig rig = ring_cameras(RingSpec{}, 16, 16, 0);
  p.camera = rig.frames[0];
  p.intrinsics = rig.intrinsics;
  p.intrinsics.focal = 15.0;
  p.target_rgb = Mat(3, rays);
  p.target_mask = Mat(1, rays);
  for (int r = 0; r < rays; ++r) {
    const Eigen::Vector2d px(8.0 + 2.5 * r, 8.0 - 1.5 * r);
    p.pixels.push_back(px);
    const Ray ray = generate_ray(p.camera, p.intrinsics, px);
    const auto nf = near_far(ray.origin, ray.direction);
    std::vector<double> d;
    for (int s = 0; s < samples; ++s) {
      d.push_back(nf->first + (nf->second - nf->first) * (s + 0.37) / samples);
    }
    p.depths.push_back(d);
    p.target_rgb.col(r) = Eigen::Vector3d(0.2 + 0.3 * r, 0.6, 0.4 - 0.1 * r);
    p.target_mask(0, r) = r % 2 == 0 ? 1.0 : 0.0;
  }
  p.weights = LossWeights{1.0, 0.1, 0.1};
  return p;
}

// 100 rays from a camera at distance 2.5 toward the r = 0.5 sphere. Hits pass at least
// 0.05 inside the silhouette; misses keep at least 0.2 clear of the surface, and some of
// them miss the unit sphere altogether.
inline std::vector<Ray> oracle_rays() {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Ray> rays;
  const Eigen::Vector3d origin(0.0, 0.0, -2.5);
  while (rays.size() < 100) {
    const bool want_hit = rays.size() % 2 == 0;
    const Eigen::Vector3d target(u(rng) * 1.3, u(rng) * 1.3, 0.0);
    const Eigen::Vector3d dir = (target - origin).normalized();
    const double impact = origin.cross(dir).norm();
    if (want_hit ? impact > 0.45 : impact < 0.7) continue;
    Ray r;
    r.origin = origin;
    r.direction = dir;
    if (const auto nf = near_far(origin, dir)) {
      r.near = nf->first;
      r.far = nf->second;
      r.background = false;
    }
    rays.push_back(r);
  }
  return rays;
}

}  // namespace nsrf::test
