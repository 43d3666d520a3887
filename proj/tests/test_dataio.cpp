#include <doctest.h>

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "nsrf/dataio.hpp"
#include "nsrf/errors.hpp"
#include "nsrf/evalreport.hpp"
#include "support.hpp"

using namespace nsrf;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void rewrite_cameras(const fs::path& dir, const std::function<void(nlohmann::json&)>& edit) {
  nlohmann::json j = nlohmann::json::parse(slurp(dir / "cameras.json"));
  edit(j);
  std::ofstream(dir / "cameras.json") << j.dump(2);
}

}  // namespace

TEST_CASE("image files round trip") {
  const fs::path dir = test::scratch_dir("images");
  Image img(5, 3, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(i % 17) / 16.0f;
  write_f32(dir / "a.f32", img);
  const Image f = read_f32(dir / "a.f32");
  CHECK(f.width == 5);
  CHECK(f.height == 3);
  CHECK(f.data == img.data);

  write_png(dir / "a.png", img);
  const Image p = read_png(dir / "a.png");
  CHECK(p.channels == 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(std::abs(p.data[i] - img.data[i]) <= 0.5f / 255.0f + 1e-7f);

  CHECK_THROWS_AS(read_png(dir / "missing.png"), ValidationError);
  std::ofstream(dir / "bad.f32") << "nope";
  CHECK_THROWS_AS(read_f32(dir / "bad.f32"), ValidationError);
}

TEST_CASE("analytic sdf fixtures") {
  SyntheticSceneSpec sphere;
  CHECK(analytic_sdf(sphere, Eigen::Vector3d(0, 0, 0.7)) == doctest::Approx(0.2).epsilon(1e-15));

  SyntheticSceneSpec box;
  box.primitives[0].kind = Primitive::Kind::Box;
  CHECK(analytic_sdf(box, Eigen::Vector3d::Zero()) == doctest::Approx(-0.3).epsilon(1e-15));

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    Eigen::Vector3d x(u(rng), u(rng), u(rng));
    if (x.norm() < 1e-3) continue;
    CHECK(std::abs(analytic_gradient(sphere, x).norm() - 1.0) <= 1e-9);
  }
}

TEST_CASE("synthetic masks match the projected disc") {
  SyntheticSceneSpec spec = test::small_sphere_spec(4, 64);
  spec.ring.radius = 2.0;
  spec.ring.elevation_deg = 0.0;
  const fs::path dir = test::scratch_dir("disc");
  const SceneDataset ds = generate_synthetic(spec, dir / "scene");
  REQUIRE(ds.frames.size() == 4);
  const double r = 0.5, d = 2.0;
  const double rho = spec.ring.focal * r / std::sqrt(d * d - r * r);
  const double expect = M_PI * rho * rho / (64.0 * 64.0);
  for (const Frame& f : ds.frames) {
    double fg = 0.0;
    for (float v : f.mask.data) fg += v >= 0.5f ? 1.0 : 0.0;
    fg /= static_cast<double>(f.mask.pixels());
    CHECK(fg == doctest::Approx(expect).epsilon(0.02));
  }

  const CameraRig rig = ring_cameras(spec.ring, spec.width, spec.height, spec.seed);
  for (const Extrinsics& e : rig.frames) {
    const Ray ray = generate_ray(e, rig.intrinsics, Eigen::Vector2d(rig.intrinsics.cx(), rig.intrinsics.cy()));
    const auto hit = sphere_trace(spec, ray.origin, ray.direction);
    REQUIRE(hit);
    CHECK(std::abs(hit->depth - (d - r)) <= 1e-6);
  }
}

TEST_CASE("scenes round trip and generation is deterministic") {
  const fs::path dir = test::scratch_dir("roundtrip");
  const SyntheticSceneSpec spec = test::small_sphere_spec(3, 16);
  const SceneDataset a = generate_synthetic(spec, dir / "a");
  generate_synthetic(spec, dir / "b");
  for (const char* f : {"cameras.json", "images/000.png", "images/002.f32", "masks/001.png", "masks/001.f32"}) {
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  }

  save_scene(a, dir / "c");
  const SceneDataset c = load_scene(dir / "c");
  REQUIRE(c.frames.size() == a.frames.size());
  CHECK(c.intrinsics.focal == a.intrinsics.focal);
  for (std::size_t i = 0; i < a.frames.size(); ++i) {
    CHECK(c.frames[i].t_wc == a.frames[i].t_wc);
    CHECK(c.frames[i].image.data == a.frames[i].image.data);
    CHECK(c.frames[i].mask.data == a.frames[i].mask.data);
  }
  CHECK(a.bounds_radius == kNormalizedRadius);
}

TEST_CASE("loading scenes rejects broken inputs") {
  const fs::path dir = test::scratch_dir("broken");
  const SyntheticSceneSpec spec = test::small_sphere_spec(3, 8);
  generate_synthetic(spec, dir / "scene");

  fs::copy(dir / "scene", dir / "two", fs::copy_options::recursive);
  rewrite_cameras(dir / "two", [](nlohmann::json& j) { j["frames"].erase(2); });
  CHECK_THROWS_WITH_AS(load_scene(dir / "two"), doctest::Contains("count mismatch"), ValidationError);

  fs::copy(dir / "scene", dir / "flip", fs::copy_options::recursive);
  rewrite_cameras(dir / "flip", [](nlohmann::json& j) {
    auto& m = j["frames"][1]["T_wc"];
    for (int c = 0; c < 3; ++c) m[c] = -m[c].get<double>();
  });
  CHECK_THROWS_WITH_AS(load_scene(dir / "flip"), doctest::Contains("frame 1"), ValidationError);

  CHECK_THROWS_AS(load_scene(dir / "nowhere"), ValidationError);

  SyntheticSceneSpec outside = spec;
  outside.primitives[0].center = Eigen::Vector3d(0.8, 0, 0);
  CHECK_THROWS_AS(generate_synthetic(outside, dir / "outside"), ValidationError);
  CHECK_THROWS_AS(parse_synthetic_spec("{\"primitives\": [{\"type\": \"sphere\", \"radius\": 1.5}]}"),
                  ValidationError);
}

TEST_CASE("normalisation rescales cameras and depth consistently") {
  SyntheticSceneSpec spec = test::small_sphere_spec(2, 16);
  spec.primitives[0].radius = 0.4;
  const fs::path dir = test::scratch_dir("normalise");
  const SceneDataset ds = generate_synthetic(spec, dir / "scene");
  const double scale = kNormalizedRadius / 0.4;
  const CameraRig raw = ring_cameras(spec.ring, spec.width, spec.height, spec.seed);
  for (std::size_t i = 0; i < ds.frames.size(); ++i) {
    CHECK((ds.rig().frames[i].t - raw.frames[i].t * scale).norm() <= 1e-12);
    CHECK((ds.rig().frames[i].rotation() - raw.frames[i].rotation()).norm() <= 1e-12);
  }

  const CameraRig loaded = load_cameras(dir / "scene" / "cameras.json");
  CHECK(loaded.frames.size() == 2);
}

TEST_CASE("analytic field binds to the tape") {
  SyntheticSceneSpec spec;
  AnalyticField field(spec, 100.0);
  Mat x = (Mat(3, 2) << 0.1, 0.6, -0.2, 0.0, 0.3, 0.2).finished();
  const SdfBatch b = field.sdf(x, true);
  for (Index j = 0; j < 2; ++j) {
    CHECK(b.sdf(0, j) == doctest::Approx(x.col(j).norm() - 0.5).epsilon(1e-15));
    CHECK((b.gradient.col(j) - x.col(j).normalized()).norm() <= 1e-15);
  }
  Tape t;
  auto bound = field.bind(t);
  CHECK(bound->leaves().empty());
  CHECK(bound->sharpness().scalar() == 100.0);
}
