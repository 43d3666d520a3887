#include "nsrf/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>

#include "nsrf/errors.hpp"
#include "nsrf/parallel.hpp"

namespace nsrf {

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("NSRF_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kDedupe = 1e-9;

// Weights of the sections between consecutive samples under sharpness s.
std::vector<double> section_weights(std::span<const double> sdf, double s) {
  std::vector<double> weights;
  if (sdf.size() < 2) return weights;
  weights.reserve(sdf.size() - 1);
  double transmittance = 1.0;
  for (std::size_t i = 0; i + 1 < sdf.size(); ++i) {
    const double alpha = sdf_to_alpha(sdf[i], sdf[i + 1], s);
    weights.push_back(alpha * transmittance);
    transmittance *= 1.0 - alpha;
  }
  return weights;
}

// Merges sorted new samples into sorted existing ones, dropping near-duplicates.
void merge_samples(std::vector<double>& depths, std::vector<double>& sdf,
                   const std::vector<double>& new_depths, const std::vector<double>& new_sdf) {
  std::vector<double> d;
  std::vector<double> v;
  d.reserve(depths.size() + new_depths.size());
  v.reserve(depths.size() + new_depths.size());
  std::size_t i = 0;
  std::size_t j = 0;
  auto push = [&](double depth, double value) {
    if (!d.empty() && depth - d.back() <= kDedupe) return;
    d.push_back(depth);
    v.push_back(value);
  };
  while (i < depths.size() || j < new_depths.size()) {
    if (j == new_depths.size() || (i < depths.size() && depths[i] <= new_depths[j])) {
      push(depths[i], sdf[i]);
      ++i;
    } else {
      push(new_depths[j], new_sdf[j]);
      ++j;
    }
  }
  depths = std::move(d);
  sdf = std::move(v);
}

std::vector<double> importance_draws(std::span<const double> depths, std::span<const double> sdf,
                                     int per_round, double s) {
  const std::vector<double> w = section_weights(sdf, s);
  return sample_pdf(depths, w, per_round);
}

// Sample positions for a set of rays, 3 x M, with per-ray offsets.
Mat sample_points(std::span<const Ray> rays, const std::vector<std::vector<double>>& depths) {
  Index m = 0;
  for (const auto& d : depths) m += static_cast<Index>(d.size());
  Mat x(3, m);
  Index k = 0;
  for (std::size_t r = 0; r < rays.size(); ++r) {
    for (double t : depths[r]) x.col(k++) = rays[r].origin + t * rays[r].direction;
  }
  return x;
}

}  // namespace

std::optional<std::pair<double, double>> near_far(const Eigen::Vector3d& origin,
                                                  const Eigen::Vector3d& direction) {
  const double b = origin.dot(direction);
  const double c = origin.squaredNorm() - 1.0;
  const double disc = b * b - c;
  if (!(disc > 0.0)) return std::nullopt;
  const double root = std::sqrt(disc);
  const double near = std::max(-b - root, 0.0);
  const double far = -b + root;
  if (!(far > near)) return std::nullopt;
  return std::make_pair(near, far);
}

std::vector<double> sample_coarse(double near, double far, int n, std::mt19937_64* rng) {
  if (n <= 0) throw ValidationError("sample_coarse: sample count must be positive");
  std::vector<double> out(static_cast<std::size_t>(n));
  const double step = (far - near) / n;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    const double u = rng != nullptr ? unit(*rng) : 0.5;
    out[static_cast<std::size_t>(i)] = near + (i + u) * step;
  }
  return out;
}

double sdf_to_alpha(double sdf_i, double sdf_next, double s) {
  const double phi_i = logistic(s * sdf_i);
  const double phi_next = logistic(s * sdf_next);
  const double alpha = (phi_i - phi_next) / std::max(phi_i, kRenderEps);
  return std::clamp(alpha, 0.0, 1.0);
}

CompositeResult composite(std::span<const double> alphas, const Mat& colors,
                          std::span<const double> depths) {
  if (static_cast<Index>(alphas.size()) != colors.cols() || alphas.size() != depths.size()) {
    throw ShapeError("composite: alphas, colors and depths must have equal lengths");
  }
  CompositeResult out;
  out.weights.reserve(alphas.size());
  double transmittance = 1.0;
  double depth_sum = 0.0;
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    const double w = alphas[i] * transmittance;
    out.weights.push_back(w);
    out.rgb += w * colors.col(static_cast<Index>(i));
    out.opacity += w;
    depth_sum += w * depths[i];
    transmittance *= 1.0 - alphas[i];
  }
  out.depth = depth_sum / std::max(out.opacity, kRenderEps);
  return out;
}

std::vector<double> sample_pdf(std::span<const double> edges, std::span<const double> weights, int n) {
  if (edges.size() != weights.size() + 1) throw ShapeError("sample_pdf: need one more edge than weights");
  std::vector<double> out;
  if (n <= 0 || weights.empty()) return out;
  std::vector<double> w(weights.begin(), weights.end());
  double total = 0.0;
  for (double x : w) total += std::max(x, 0.0);
  if (!(total > 1e-12)) {
    total = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      w[k] = edges[k + 1] - edges[k];
      total += w[k];
    }
  }
  std::vector<double> cdf(w.size() + 1, 0.0);
  for (std::size_t k = 0; k < w.size(); ++k) cdf[k + 1] = cdf[k] + std::max(w[k], 0.0) / total;
  cdf.back() = 1.0;

  out.reserve(static_cast<std::size_t>(n));
  std::size_t bin = 0;
  for (int i = 0; i < n; ++i) {
    const double u = (i + 0.5) / n;
    while (bin + 1 < w.size() && cdf[bin + 1] <= u) ++bin;
    const double mass = cdf[bin + 1] - cdf[bin];
    const double frac = mass > 0.0 ? (u - cdf[bin]) / mass : 0.5;
    out.push_back(edges[bin] + std::clamp(frac, 0.0, 1.0) * (edges[bin + 1] - edges[bin]));
  }
  return out;
}

std::vector<double> sample_importance(std::vector<double> depths, std::vector<double> sdf, int rounds,
                                      int per_round, double base_sharpness, const DepthSdf& eval) {
  if (depths.size() != sdf.size()) throw ShapeError("sample_importance: depth/sdf length mismatch");
  for (int r = 0; r < rounds; ++r) {
    const double s = base_sharpness * std::ldexp(1.0, r);
    const std::vector<double> fresh = importance_draws(depths, sdf, per_round, s);
    merge_samples(depths, sdf, fresh, eval(fresh));
  }
  return depths;
}

std::vector<std::vector<double>> plan_samples(const RadianceField& field, std::span<const Ray> rays,
                                              const RenderConfig& config, std::mt19937_64* rng) {
  std::vector<std::vector<double>> depths(rays.size());
  std::vector<std::vector<double>> sdf(rays.size());
  for (std::size_t r = 0; r < rays.size(); ++r) {
    if (rays[r].background) continue;
    depths[r] = sample_coarse(rays[r].near, rays[r].far, config.n_coarse, rng);
  }
  auto scatter = [&](const std::vector<std::vector<double>>& ds, std::vector<std::vector<double>>& out) {
    const Mat values = field.sdf(sample_points(rays, ds), false).sdf;
    Index k = 0;
    for (std::size_t r = 0; r < rays.size(); ++r) {
      out[r].resize(ds[r].size());
      for (double& v : out[r]) v = values(0, k++);
    }
  };
  scatter(depths, sdf);

  for (int round = 0; round < config.importance_rounds; ++round) {
    const double s = config.importance_sharpness * std::ldexp(1.0, round);
    std::vector<std::vector<double>> fresh(rays.size());
    for (std::size_t r = 0; r < rays.size(); ++r) {
      if (depths[r].size() < 2) continue;
      fresh[r] = importance_draws(depths[r], sdf[r], config.per_round, s);
    }
    std::vector<std::vector<double>> fresh_sdf(rays.size());
    scatter(fresh, fresh_sdf);
    for (std::size_t r = 0; r < rays.size(); ++r) merge_samples(depths[r], sdf[r], fresh[r], fresh_sdf[r]);
  }
  return depths;
}

RenderBatch render_rays(const RadianceField& field, std::span<const Ray> rays,
                        const RenderConfig& config) {
  RenderBatch batch;
  batch.rays.resize(rays.size());
  const auto chunk = static_cast<std::size_t>(std::max<Index>(config.chunk_rays, 1));
  const std::size_t n_chunks = (rays.size() + chunk - 1) / chunk;
  std::vector<std::size_t> degenerate(n_chunks, 0);
  const double s = field.sharpness();

  parallel_for(n_chunks, config.threads, [&](std::size_t c) {
    const std::size_t lo = c * chunk;
    const std::size_t hi = std::min(rays.size(), lo + chunk);
    const std::span<const Ray> part = rays.subspan(lo, hi - lo);
    const auto depths = plan_samples(field, part, config, nullptr);
    const Mat x = sample_points(part, depths);
    SdfBatch eval = field.sdf(x, true);
    Mat dirs(3, x.cols());
    {
      Index k = 0;
      for (std::size_t r = 0; r < part.size(); ++r) {
        for (std::size_t i = 0; i < depths[r].size(); ++i) dirs.col(k++) = part[r].direction;
      }
    }
    Mat normals = eval.gradient;
    degenerate[c] = normalize_normals(normals);
    const Mat colors = field.color(x, dirs, normals, eval.feature);

    Index k = 0;
    for (std::size_t r = 0; r < part.size(); ++r) {
      RaySamples& out = batch.rays[lo + r];
      out.background = part[r].background;
      const auto n = static_cast<Index>(depths[r].size());
      out.depths = depths[r];
      out.sdf.assign(eval.sdf.data() + k, eval.sdf.data() + k + n);
      if (n >= 2) {
        std::vector<double> mids;
        for (Index i = 0; i + 1 < n; ++i) {
          out.alphas.push_back(sdf_to_alpha(out.sdf[i], out.sdf[i + 1], s));
          mids.push_back(0.5 * (out.depths[i] + out.depths[i + 1]));
        }
        const CompositeResult comp = composite(out.alphas, colors.middleCols(k, n - 1), mids);
        out.weights = comp.weights;
        out.rgb = comp.rgb;
        out.opacity = comp.opacity;
        out.depth = comp.depth;
      }
      out.rgb += config.background * (1.0 - out.opacity) * Eigen::Vector3d::Ones();
      k += n;
    }
  });
  for (std::size_t d : degenerate) batch.degenerate_normals += d;
  return batch;
}

RenderBatch render_rays(const RadianceField& field, const CameraRig& rig, std::size_t frame,
                        std::span<const Eigen::Vector2d> pixels, const RenderConfig& config) {
  if (frame >= rig.frames.size()) throw ValidationError("render: frame index out of range");
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (const Eigen::Vector2d& px : pixels) {
    rays.push_back(generate_ray(rig.frames[frame], rig.intrinsics, px));
  }
  return render_rays(field, rays, config);
}

TapeRender render_on_tape(FieldBinding& field, const RayVars& rays,
                          std::span<const std::vector<double>> depths, double background) {
  Tape& tape = *rays.directions.tape;
  const Index b = rays.directions.cols();
  if (static_cast<Index>(depths.size()) != b) throw ShapeError("render_on_tape: one depth list per ray");

  std::vector<Index> ray_of_sample;
  std::vector<Index> prev;
  std::vector<Index> next;
  std::vector<Index> section_offsets{0};
  std::vector<double> flat_depths;
  std::vector<double> mids;
  for (Index r = 0; r < b; ++r) {
    const auto& d = depths[static_cast<std::size_t>(r)];
    const auto base = static_cast<Index>(flat_depths.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
      ray_of_sample.push_back(r);
      flat_depths.push_back(d[i]);
      if (i + 1 < d.size()) {
        prev.push_back(base + static_cast<Index>(i));
        next.push_back(base + static_cast<Index>(i) + 1);
        mids.push_back(0.5 * (d[i] + d[i + 1]));
      }
    }
    section_offsets.push_back(static_cast<Index>(prev.size()));
  }

  TapeRender out;
  const auto m = static_cast<Index>(flat_depths.size());
  out.samples = m;
  if (m == 0) {
    out.rgb = constant(tape, Mat::Constant(3, b, background));
    out.opacity = constant(tape, Mat::Zero(1, b));
    out.depth = constant(tape, Mat::Zero(1, b));
    return out;
  }

  Mat depth_rows(3, m);
  for (Index k = 0; k < m; ++k) depth_rows.col(k).setConstant(flat_depths[static_cast<std::size_t>(k)]);
  const Var sample_dirs = gather_cols(rays.directions, ray_of_sample);
  const Var x = matmul(rays.origin, constant(tape, Mat::Ones(1, m))) +
                sample_dirs * constant(tape, std::move(depth_rows));

  const TapeSdf sdf = field.sdf(x);
  out.gradients = spatial_gradient(sdf.sdf, x);
  const Var normals = normalized_normals(out.gradients, &out.degenerate_normals);
  const Var colors = field.color(x, sample_dirs, normals, sdf.feature);

  const Var phi = sigmoid(sdf.sdf * field.sharpness());
  const Var phi_prev = gather_cols(phi, prev);
  const Var phi_next = gather_cols(phi, next);
  const Var alpha =
      clamp_max(clamp_min((phi_prev - phi_next) / clamp_min(phi_prev, kRenderEps), 0.0), 1.0);
  const Var weights = alpha * segment_cumprod_exclusive(1.0 - alpha, section_offsets);

  Var rgb = segment_sum(broadcast_rows(weights, 3) * gather_cols(colors, prev), section_offsets);
  out.opacity = segment_sum(weights, section_offsets);
  const Eigen::Map<const Mat> mid_row(mids.data(), 1, static_cast<Index>(mids.size()));
  out.depth = segment_sum(weights * constant(tape, mid_row), section_offsets) /
              clamp_min(out.opacity, kRenderEps);
  if (background != 0.0) rgb = rgb + broadcast_rows(background * (1.0 - out.opacity), 3);
  out.rgb = rgb;
  return out;
}

RenderedImage render_image(const RadianceField& field, const CameraRig& rig, std::size_t frame,
                           const RenderConfig& config) {
  RenderedImage img;
  img.width = rig.intrinsics.width;
  img.height = rig.intrinsics.height;
  std::vector<Eigen::Vector2d> pixels;
  pixels.reserve(static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height));
  for (int row = 0; row < img.height; ++row) {
    for (int col = 0; col < img.width; ++col) pixels.emplace_back(col + 0.5, row + 0.5);
  }
  const RenderBatch batch = render_rays(field, rig, frame, pixels, config);
  const auto n = static_cast<Index>(pixels.size());
  img.rgb.resize(3, n);
  img.opacity.resize(1, n);
  img.depth.resize(1, n);
  for (Index k = 0; k < n; ++k) {
    const RaySamples& r = batch.rays[static_cast<std::size_t>(k)];
    img.rgb.col(k) = r.rgb;
    img.opacity(0, k) = r.opacity;
    img.depth(0, k) = r.depth;
  }
  return img;
}

}  // namespace nsrf
