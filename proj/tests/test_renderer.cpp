#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "nsrf/dataio.hpp"
#include "nsrf/renderer.hpp"
#include "support.hpp"

using namespace nsrf;

TEST_CASE("near_far against the unit sphere") {
  const auto hit = near_far(Eigen::Vector3d(0, 0, -2), Eigen::Vector3d(0, 0, 1));
  REQUIRE(hit);
  CHECK(hit->first == doctest::Approx(1.0));
  CHECK(hit->second == doctest::Approx(3.0));
  CHECK_FALSE(near_far(Eigen::Vector3d(0, 2, -2), Eigen::Vector3d(0, 0, 1)));
  CHECK_FALSE(near_far(Eigen::Vector3d(0, 1, -2), Eigen::Vector3d(0, 0, 1)));
}

TEST_CASE("coarse sampling") {
  CHECK(sample_coarse(0.0, 1.0, 4, nullptr) == std::vector<double>{0.125, 0.375, 0.625, 0.875});

  std::mt19937_64 rng(17);
  const int n = 4, draws = 10000;
  std::vector<double> mean(n, 0.0);
  for (int k = 0; k < draws; ++k) {
    const auto d = sample_coarse(0.0, 1.0, n, &rng);
    for (int i = 0; i < n; ++i) {
      CHECK_MESSAGE((d[i] >= 0.25 * i && d[i] <= 0.25 * (i + 1)), "sample left its stratum");
      mean[i] += d[i] / draws;
    }
  }
  // Uniform on a 0.25 bin: std 0.25 / sqrt(12).
  const double bound = 3.0 * 0.25 / std::sqrt(12.0) / std::sqrt(static_cast<double>(draws));
  for (int i = 0; i < n; ++i) CHECK(std::abs(mean[i] - 0.25 * (i + 0.5)) <= bound);
}

TEST_CASE("alpha from consecutive sdf values") {
  CHECK(sdf_to_alpha(0.3, 0.3, 64.0) == 0.0);
  CHECK(sdf_to_alpha(0.1, -0.1, 1e4) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(sdf_to_alpha(0.05, -0.05, 64.0) == doctest::Approx(0.9592377960216338).epsilon(1e-14));
  CHECK(sdf_to_alpha(-50.0, -60.0, 64.0) == 0.0);
  CHECK(sdf_to_alpha(-0.1, 0.1, 64.0) == 0.0);
}

TEST_CASE("compositing") {
  const Mat colors = (Mat(3, 3) << 0.1, 0.5, 0.9, 0.2, 0.6, 0.3, 0.3, 0.7, 0.4).finished();
  const std::vector<double> depths{1.0, 2.0, 3.0};
  const std::vector<double> opaque{1.0, 0.5, 0.5};
  const CompositeResult a = composite(opaque, colors, depths);
  CHECK(a.weights == std::vector<double>{1.0, 0.0, 0.0});
  CHECK(a.rgb == Eigen::Vector3d(colors.col(0)));
  CHECK(a.depth == 1.0);

  const std::vector<double> clear{0.0, 0.0, 0.0};
  const CompositeResult b = composite(clear, colors, depths);
  CHECK(b.rgb.isZero());
  CHECK(b.opacity == 0.0);

  const std::vector<double> halves{0.5, 0.5};
  const CompositeResult c = composite(halves, colors.leftCols(2), std::vector<double>{1.0, 2.0});
  CHECK(c.weights == std::vector<double>{0.5, 0.25});
  CHECK(c.opacity == 0.75);
}

TEST_CASE("inverse-cdf resampling") {
  const std::vector<double> edges{0.0, 1.0, 2.0, 3.0, 4.0};
  const std::vector<double> flat{1.0, 1.0, 1.0, 1.0};
  const auto u = sample_pdf(edges, flat, 10000);
  double ks = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double cdf = u[i] / 4.0;
    ks = std::max({ks, std::abs(cdf - static_cast<double>(i) / u.size()),
                   std::abs(cdf - static_cast<double>(i + 1) / u.size())});
  }
  CHECK(ks <= 0.05);

  const std::vector<double> spike{0.0, 0.0, 3.0, 0.0};
  for (double d : sample_pdf(edges, spike, 50)) {
    CHECK(d >= 2.0);
    CHECK(d <= 3.0);
  }
  const std::vector<double> zeros{0.0, 0.0, 0.0, 0.0};
  const auto fallback = sample_pdf(edges, zeros, 4);
  CHECK(fallback == sample_pdf(edges, flat, 4));
}

TEST_CASE("hierarchical resampling") {
  const std::vector<double> d{0.5, 1.5, 2.5, 3.5};
  auto sdf_of = [](std::span<const double> depths) {
    std::vector<double> out;
    for (double x : depths) out.push_back(2.2 - x);
    return out;
  };
  const auto s = sdf_of(d);
  CHECK(sample_importance(d, s, 0, 8, 64.0, sdf_of) == d);
  const auto more = sample_importance(d, s, 2, 8, 64.0, sdf_of);
  CHECK(more.size() > d.size());
  CHECK(std::is_sorted(more.begin(), more.end()));
  const auto near_surface = std::count_if(more.begin(), more.end(), [](double x) { return x > 1.5 && x < 2.5; });
  CHECK(near_surface >= 16);
}

TEST_CASE("renderer oracle with the analytic sphere") {
  SyntheticSceneSpec spec;
  const AnalyticField field(spec, 256.0);
  RenderConfig rc;
  rc.n_coarse = 64;
  rc.importance_rounds = 4;
  rc.per_round = 16;
  const auto rays = test::oracle_rays();
  const RenderBatch out = render_rays(field, rays, rc);
  for (std::size_t i = 0; i < rays.size(); ++i) {
    const auto hit = analytic_intersect(spec, rays[i].origin, rays[i].direction);
    if (hit) {
      const double spacing = (rays[i].far - rays[i].near) / rc.n_coarse;
      CHECK(out.rays[i].opacity >= 0.99);
      CHECK(std::abs(out.rays[i].depth - *hit) <= 2.0 * spacing);
    } else {
      CHECK(out.rays[i].opacity == 0.0);
    }
  }

  int background = 0;
  for (const Ray& r : rays) background += r.background ? 1 : 0;
  CHECK(background > 0);
  CHECK(background < 50);

  const RenderBatch low = render_rays(AnalyticField(spec, 16.0), rays, rc);
  for (std::size_t i = 0; i < rays.size(); i += 2) CHECK(out.rays[i].opacity >= low.rays[i].opacity);
}

TEST_CASE("tape render agrees with the tape-free render") {
  NeuralField field(test::tiny_field(8), 2);
  const CameraRig rig = ring_cameras(RingSpec{}, 16, 16, 0);
  RenderConfig rc;
  rc.n_coarse = 16;
  rc.importance_rounds = 1;
  rc.per_round = 8;
  std::vector<Eigen::Vector2d> px{Eigen::Vector2d(8.5, 8.5), Eigen::Vector2d(3.5, 12.5), Eigen::Vector2d(0.5, 0.5)};
  const RenderBatch ref = render_rays(field, rig, 0, px, rc);

  std::vector<Ray> rays;
  for (const auto& p : px) rays.push_back(generate_ray(rig.frames[0], rig.intrinsics, p));
  const auto depths = plan_samples(field, rays, rc, nullptr);
  Tape t;
  auto binding = field.bind(t);
  const RayVars rv = generate_rays(constant(t, Mat(rig.frames[0].omega)), constant(t, Mat(rig.frames[0].t)),
                                   constant(t, rig.intrinsics.focal), rig.intrinsics, px);
  const TapeRender tr = render_on_tape(*binding, rv, depths, rc.background);
  for (std::size_t i = 0; i < px.size(); ++i) {
    const Index j = static_cast<Index>(i);
    CHECK((tr.rgb.value().col(j) - ref.rays[i].rgb).norm() <= 1e-12);
    CHECK(std::abs(tr.opacity.value()(0, j) - ref.rays[i].opacity) <= 1e-12);
  }
}

TEST_CASE("render_image is deterministic across thread counts") {
  NeuralField field(test::tiny_field(8), 6);
  const CameraRig rig = ring_cameras(RingSpec{}, 12, 10, 0);
  RenderConfig rc;
  rc.n_coarse = 8;
  rc.importance_rounds = 1;
  rc.per_round = 4;
  rc.chunk_rays = 7;
  const RenderedImage a = render_image(field, rig, 2, rc);
  rc.threads = 3;
  const RenderedImage b = render_image(field, rig, 2, rc);
  CHECK(a.rgb.cols() == 120);
  CHECK(a.rgb == b.rgb);
  CHECK(a.depth == b.depth);
}
