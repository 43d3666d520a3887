#include <CLI11.hpp>
#include <json.hpp>

#include <Eigen/Geometry>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "nsrf/config.hpp"
#include "nsrf/dataio.hpp"
#include "nsrf/errors.hpp"
#include "nsrf/evalreport.hpp"
#include "nsrf/meshing.hpp"
#include "nsrf/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace nsrf;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << text;
}

void log(const std::string& line) { std::cerr << line << std::endl; }

int threads_from(int flag, int config_value) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("NSRF_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  if (config_value > 0) return config_value;
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<int> parse_frames(const std::string& text, std::size_t count) {
  std::vector<int> out;
  if (text.empty() || text == "all") {
    for (std::size_t i = 0; i < count; ++i) out.push_back(static_cast<int>(i));
    return out;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const int f = std::stoi(item);
    if (f < 0 || static_cast<std::size_t>(f) >= count) {
      throw ValidationError("frame " + item + " out of range (scene has " + std::to_string(count) + ")");
    }
    out.push_back(f);
  }
  return out;
}

std::string scene_name(const std::string& scene) {
  fs::path p = fs::path(scene).lexically_normal();
  if (p.filename().empty()) p = p.parent_path();
  return p.filename().string();
}

// A run directory holds config.json, checkpoint.nsrf, metrics.csv and summary.json.
struct RunFiles {
  fs::path dir;
  fs::path config() const { return dir / "config.json"; }
  fs::path checkpoint() const { return dir / "checkpoint.nsrf"; }
  fs::path metrics() const { return dir / "metrics.csv"; }
  fs::path summary() const { return dir / "summary.json"; }
};

RunConfig load_run_config(const RunFiles& run) { return parse_run_config(read_text(run.config())); }

json summary_of(const RunFiles& run) {
  if (!fs::exists(run.summary())) return json::object();
  return json::parse(read_text(run.summary()));
}

// Keeps the header and the rows up to `iteration`.
void truncate_metrics(const fs::path& path, long iteration) {
  if (!fs::exists(path)) return;
  std::istringstream in(read_text(path));
  std::string line, kept;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      kept += line + "\n";
      header = false;
      continue;
    }
    if (std::stol(line.substr(0, line.find(','))) <= iteration) kept += line + "\n";
  }
  write_text(path, kept);
}

void write_cameras(const SceneDataset& data, const CameraRig& rig, const fs::path& file) {
  SceneDataset copy;
  copy.intrinsics = data.intrinsics;
  copy.bounds_center = data.bounds_center;
  copy.bounds_radius = data.bounds_radius;
  copy.frames.resize(data.frames.size());
  for (std::size_t i = 0; i < data.frames.size(); ++i) {
    copy.frames[i].image_file = data.frames[i].image_file;
    copy.frames[i].mask_file = data.frames[i].mask_file;
  }
  copy.set_rig(rig);
  save_cameras(copy, file);
}

// make-synthetic ---------------------------------------------------------------

int cmd_make_synthetic(const std::string& spec_file, const std::string& out, std::optional<std::uint64_t> seed) {
  SyntheticSceneSpec spec = parse_synthetic_spec(read_text(spec_file));
  if (seed) spec.seed = *seed;
  log("rendering " + std::to_string(spec.ring.count) + " views at " + std::to_string(spec.width) + "x" +
      std::to_string(spec.height));
  const SceneDataset data = generate_synthetic(spec, out);
  double lo = 1.0, hi = 0.0, sum = 0.0;
  for (const Frame& f : data.frames) {
    double fg = 0.0;
    for (float v : f.mask.data) fg += v >= 0.5f ? 1.0 : 0.0;
    fg /= static_cast<double>(f.mask.pixels());
    lo = std::min(lo, fg);
    hi = std::max(hi, fg);
    sum += fg;
  }
  std::printf("frames: %zu\nforeground fraction: mean %.4f min %.4f max %.4f\n", data.frames.size(),
              sum / static_cast<double>(data.frames.size()), lo, hi);
  return 0;
}

// perturb-cameras --------------------------------------------------------------

int cmd_perturb(const std::string& scene, double sigma, double ratio, std::uint64_t seed, const std::string& out) {
  const SceneDataset data = load_scene(scene);
  NoiseSpec noise;
  noise.extrinsic_sigma = sigma;
  noise.intrinsic_sigma_ratio = ratio;
  noise.rng_seed = seed;
  const PerturbResult result = perturb(data.rig(), noise);
  write_cameras(data, result.rig, out);

  json report;
  report["sigma"] = sigma;
  report["intrinsic_ratio"] = ratio;
  report["seed"] = seed;
  report["focal_delta"] = result.report.d_focal;
  report["focal_sigma"] = result.report.focal_sigma;
  json frames = json::array();
  for (std::size_t i = 0; i < result.report.cameras.size(); ++i) {
    const CameraDelta& d = result.report.cameras[i];
    frames.push_back({{"frame", i},
                      {"d_omega", {d.d_omega.x(), d.d_omega.y(), d.d_omega.z()}},
                      {"d_t", {d.d_t.x(), d.d_t.y(), d.d_t.z()}},
                      {"rot_deg", d.rot_deg},
                      {"trans", d.trans}});
  }
  report["frames"] = frames;
  fs::path report_path = fs::path(out);
  report_path.replace_extension(".report.json");
  write_text(report_path, report.dump(2) + "\n");
  log("perturbed " + std::to_string(result.rig.frames.size()) + " cameras; report in " + report_path.string());
  return 0;
}

// train ------------------------------------------------------------------------

struct TrainFlags {
  std::string scene;
  std::string case_name;
  std::string config;
  std::string out;
  std::string init_cameras;
  std::optional<std::uint64_t> seed;
  std::optional<long> iterations;
  std::optional<long> stop_at;
  long checkpoint_every = 1000;
  int threads = 0;
  bool resume = false;
};

int cmd_train(const TrainFlags& flags) {
  const RunFiles run{flags.out};
  RunConfig rc;
  if (!flags.config.empty()) {
    rc = parse_run_config(read_text(flags.config));
  } else if (flags.resume && fs::exists(run.config())) {
    rc = load_run_config(run);
  }
  if (!flags.scene.empty()) rc.scene = flags.scene;
  if (!flags.case_name.empty()) rc.train.train_case = parse_case(flags.case_name);
  if (!flags.init_cameras.empty()) rc.init_cameras = flags.init_cameras;
  if (flags.seed) rc.train.seed = *flags.seed;
  if (flags.iterations) rc.train.iterations = *flags.iterations;
  rc.out = flags.out;
  rc.train.threads = threads_from(flags.threads, rc.train.threads);
  rc.train.render.threads = rc.train.threads;
  if (rc.scene.empty()) throw ValidationError("train: --scene is required");
  if (rc.train.iterations < 0) throw ValidationError("train: iterations must be >= 0");

  const SceneDataset data = load_scene(rc.scene);
  std::optional<CameraRig> initial;
  if (!rc.init_cameras.empty()) initial = load_cameras(rc.init_cameras);
  Trainer trainer(data, rc.train, initial);

  fs::create_directories(run.dir);
  double previous_wall = 0.0;
  if (flags.resume && fs::exists(run.checkpoint())) {
    trainer.load_checkpoint(run.checkpoint());
    truncate_metrics(run.metrics(), trainer.iteration());
    previous_wall = summary_of(run).value("wall_time", 0.0);
    log("resumed at iteration " + std::to_string(trainer.iteration()));
  } else {
    write_text(run.metrics(), metrics_header() + "\n");
  }
  write_text(run.config(), run_config_to_json(rc));
  write_cameras(data, trainer.initial_cameras(), run.dir / "cameras_init.json");

  const long stop = flags.stop_at ? std::min(*flags.stop_at, rc.train.iterations) : rc.train.iterations;
  log("case " + case_name(rc.train.train_case) + ", " + std::to_string(rc.train.iterations) + " iterations, " +
      std::to_string(rc.train.threads) + " threads" +
      (cameras_learnable(rc.train.train_case) ? "" : ", cameras frozen"));

  std::ofstream metrics(run.metrics(), std::ios::app);
  const auto t0 = std::chrono::steady_clock::now();
  auto wall = [&] {
    return previous_wall + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  auto write_summary = [&] {
    const CameraErrorSummary err = trainer.camera_error();
    json s;
    s["iteration"] = trainer.iteration();
    s["iterations"] = rc.train.iterations;
    s["case"] = case_name(rc.train.train_case);
    s["wall_time"] = wall();
    s["nonfinite_losses"] = trainer.counters().nonfinite_losses;
    s["empty_mask_batches"] = trainer.counters().empty_mask_batches;
    s["rot_err_deg_mean"] = err.rot_err_deg_mean;
    s["trans_err_mean"] = err.trans_err_mean;
    s["focal_err_ratio"] = err.focal_err_ratio;
    write_text(run.summary(), s.dump(2) + "\n");
  };

  while (trainer.iteration() < stop) {
    const MetricsRow row = trainer.step();
    metrics << format_metrics_row(row) << '\n';
    if (row.psnr) {
      metrics.flush();
      char line[200];
      std::snprintf(line, sizeof(line), "iter %ld loss %.5f psnr %.2f rot %.3f deg trans %.4f", row.iteration,
                    row.loss_total, *row.psnr, row.rot_err_deg_mean.value_or(0.0), row.trans_err_mean.value_or(0.0));
      log(line);
    }
    if (flags.checkpoint_every > 0 && trainer.iteration() % flags.checkpoint_every == 0) {
      trainer.save_checkpoint(run.checkpoint());
      write_summary();
    }
  }
  metrics.close();
  trainer.save_checkpoint(run.checkpoint());
  write_cameras(data, trainer.cameras(), run.dir / "cameras_final.json");
  write_summary();

  if (!cameras_learnable(rc.train.train_case)) {
    double drift = 0.0;
    for (std::size_t i = 0; i < trainer.cameras().frames.size(); ++i) {
      drift = std::max(drift, (trainer.cameras().frames[i].omega - trainer.initial_cameras().frames[i].omega)
                                  .cwiseAbs()
                                  .maxCoeff());
      drift = std::max(
          drift, (trainer.cameras().frames[i].t - trainer.initial_cameras().frames[i].t).cwiseAbs().maxCoeff());
    }
    drift = std::max(drift, std::abs(trainer.cameras().intrinsics.focal - trainer.initial_cameras().intrinsics.focal));
    log("frozen cameras check: max parameter change " + format_number(drift));
  }
  char done[96];
  std::snprintf(done, sizeof(done), "stopped at iteration %ld after %.1f s", trainer.iteration(), wall());
  log(done);
  return 0;
}

// Loads the trainer of a finished (or stopped) run.
struct LoadedRun {
  RunConfig config;
  std::unique_ptr<SceneDataset> data;
  std::unique_ptr<Trainer> trainer;
};

LoadedRun load_run(const RunFiles& run, const std::string& scene_override, int threads_flag) {
  LoadedRun out;
  out.config = load_run_config(run);
  if (!scene_override.empty()) out.config.scene = scene_override;
  out.config.train.threads = threads_from(threads_flag, out.config.train.threads);
  out.config.train.render.threads = out.config.train.threads;
  out.data = std::make_unique<SceneDataset>(load_scene(out.config.scene));
  std::optional<CameraRig> initial;
  if (!out.config.init_cameras.empty()) initial = load_cameras(out.config.init_cameras);
  out.trainer = std::make_unique<Trainer>(*out.data, out.config.train, initial);
  out.trainer->load_checkpoint(run.checkpoint());
  return out;
}

// render -------------------------------------------------------------------------

// Camera k of n novel views sits between consecutive training cameras.
Extrinsics interpolate(const CameraRig& rig, double u) {
  const std::size_t n = rig.frames.size();
  const auto i = static_cast<std::size_t>(std::floor(u)) % n;
  const std::size_t j = (i + 1) % n;
  const double a = u - std::floor(u);
  const Eigen::Quaterniond qi(rig.frames[i].rotation());
  const Eigen::Quaterniond qj(rig.frames[j].rotation());
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = qi.slerp(a, qj).toRotationMatrix();
  m.topRightCorner<3, 1>() = (1.0 - a) * rig.frames[i].t + a * rig.frames[j].t;
  return Extrinsics::from_matrix(m);
}

int cmd_render(const std::string& run_dir, const std::string& scene, const std::string& out, const std::string& frames,
               int novel, int threads) {
  const LoadedRun loaded = load_run(RunFiles{run_dir}, scene, threads);
  const Trainer& trainer = *loaded.trainer;
  RenderConfig rc = loaded.config.train.render;
  CameraRig rig = trainer.cameras();
  std::vector<std::pair<std::string, std::size_t>> views;
  if (novel > 0) {
    const std::size_t base = rig.frames.size();
    for (int k = 0; k < novel; ++k) {
      const double u = (static_cast<double>(k) + 0.5) * static_cast<double>(base) / novel;
      rig.frames.push_back(interpolate(trainer.cameras(), u));
      char name[32];
      std::snprintf(name, sizeof(name), "novel_%03d", k);
      views.emplace_back(name, base + static_cast<std::size_t>(k));
    }
  } else {
    for (int f : parse_frames(frames, rig.frames.size())) {
      char name[32];
      std::snprintf(name, sizeof(name), "frame_%03d", f);
      views.emplace_back(name, static_cast<std::size_t>(f));
    }
  }
  fs::create_directories(out);
  for (const auto& [name, index] : views) {
    const RenderedImage img = render_image(trainer.field(), rig, index, rc);
    const Image rgb = mat_to_image(img.rgb, img.width, img.height);
    write_png(fs::path(out) / (name + ".png"), rgb);
    write_f32(fs::path(out) / (name + ".f32"), rgb);
    write_f32(fs::path(out) / (name + "_depth.f32"), mat_to_image(img.depth, img.width, img.height));
    write_f32(fs::path(out) / (name + "_opacity.f32"), mat_to_image(img.opacity, img.width, img.height));
    log("rendered " + name);
  }
  return 0;
}

// extract-mesh -------------------------------------------------------------------

int cmd_extract_mesh(const std::string& run_dir, const std::string& out, int resolution, int threads) {
  const RunFiles run{run_dir};
  const RunConfig rc = load_run_config(run);
  NeuralField field(rc.train.field, rc.train.seed);
  load_field_checkpoint(field, run.checkpoint());
  const int n = resolution > 0 ? resolution : rc.mesh_resolution;
  log("sampling " + std::to_string(n) + "^3 grid");
  const SdfGrid grid = sample_grid(field, n, threads_from(threads, rc.train.threads));
  const TriangleMesh mesh = marching_cubes(grid);
  export_obj(mesh, out);
  std::printf("vertices: %zu\ntriangles: %zu\nwatertight: %s\neuler characteristic: %ld\n", mesh.vertices.size(),
              mesh.triangles.size(), is_watertight(mesh) ? "yes" : "no", euler_characteristic(mesh));
  return 0;
}

// evaluate -----------------------------------------------------------------------

CaseResult evaluate_run(const std::string& run_dir, const std::string& scene, const std::string& frames,
                        int threads) {
  const RunFiles run{run_dir};
  const LoadedRun loaded = load_run(run, scene, threads);
  const std::vector<int> list = parse_frames(frames, loaded.data->frames.size());
  CaseResult r = evaluate_case(*loaded.trainer, scene_name(loaded.config.scene), list);
  r.wall_time = summary_of(run).value("wall_time", 0.0);
  return r;
}

CaseResult evaluate_images(const std::string& pred, const std::string& target, const std::string& mask,
                           const std::string& scene, const std::string& case_label) {
  auto load = [](const std::string& p) { return fs::path(p).extension() == ".f32" ? read_f32(p) : read_png(p); };
  const Mat a = image_to_mat(load(pred));
  const Mat b = image_to_mat(load(target));
  const Mat m = mask.empty() ? Mat() : image_to_mat(load(mask));
  EvalWarnings warnings;
  CaseResult r;
  r.scene = scene;
  r.case_name = case_label;
  r.reconstruction_loss = reconstruction_loss(a, b, m, &warnings);
  r.psnr_db = psnr(a, b, m, &warnings);
  r.psnr_full_db = psnr(a, b, Mat());
  if (warnings.empty_mask > 0) log("warning: mask has no interior pixels");
  return r;
}

int cmd_evaluate(const std::vector<std::string>& runs, const std::vector<std::string>& csvs, bool four_case,
                 const std::string& pred, const std::string& target, const std::string& mask,
                 const std::string& scene, const std::string& case_label, const std::string& frames,
                 const std::string& out, int threads) {
  std::vector<CaseResult> results;
  if (!pred.empty() || !target.empty()) {
    if (pred.empty() || target.empty()) throw ValidationError("evaluate: --pred and --target go together");
    results.push_back(evaluate_images(pred, target, mask, scene.empty() ? "images" : scene, case_label));
  }
  for (const std::string& r : runs) {
    log("evaluating " + r);
    results.push_back(evaluate_run(r, scene, frames, threads));
  }
  for (const std::string& c : csvs) {
    for (const CaseResult& r : read_case_result_csv(read_text(c))) results.push_back(r);
  }
  if (results.empty()) throw ValidationError("evaluate: nothing to evaluate");

  if (four_case) {
    const FourCaseReport report = four_case_report(results);
    const fs::path base(out);
    write_text(base, report.csv);
    fs::path text = base;
    text.replace_extension(".txt");
    write_text(text, report.text);
    std::cout << report.text;
    return 0;
  }
  write_text(out, case_result_csv(results));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Large tape matrices are allocated and freed every step; keep them on the heap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Neural surface reconstruction with learnable cameras"};
  app.require_subcommand(1);

  std::string spec_file, out, scene, config, case_name_flag, init_cameras, run_dir, frames, pred, target, mask,
      case_label = "eval";
  std::optional<std::uint64_t> seed;
  std::optional<long> iterations, stop_at;
  long checkpoint_every = 1000;
  int threads = 0, resolution = 0, novel = 0;
  double sigma = 0.1, ratio = 0.2;
  std::uint64_t perturb_seed = 0;
  bool resume = false, four_case = false;
  std::vector<std::string> runs, csvs;

  auto* make = app.add_subcommand("make-synthetic", "Render a synthetic oracle scene");
  make->add_option("--spec", spec_file, "Scene spec JSON")->required();
  make->add_option("--out", out, "Output scene directory")->required();
  make->add_option("--seed", seed, "Override the spec seed");

  auto* pert = app.add_subcommand("perturb-cameras", "Write a noisy copy of a scene's cameras");
  pert->add_option("--scene", scene, "Scene directory")->required();
  pert->add_option("--sigma", sigma, "Std of the omega and t noise")->capture_default_str();
  pert->add_option("--intrinsic-ratio", ratio, "Focal noise std as a fraction of the focal")->capture_default_str();
  pert->add_option("--seed", perturb_seed, "Noise seed")->capture_default_str();
  pert->add_option("--out", out, "Output cameras.json")->required();

  auto* train = app.add_subcommand("train", "Train a field (and optionally the cameras)");
  train->add_option("--scene", scene, "Scene directory");
  train->add_option("--case", case_name_flag, "baseline-gt | baseline-noisy | learnable-gt | learnable-noisy");
  train->add_option("--config", config, "Run config JSON");
  train->add_option("--out", out, "Run directory")->required();
  train->add_option("--init-cameras", init_cameras, "Start from these cameras instead of internal noise");
  train->add_option("--seed", seed, "Training seed");
  train->add_option("--iterations", iterations, "Total iterations");
  train->add_option("--stop-at", stop_at, "Stop and checkpoint at this iteration");
  train->add_option("--checkpoint-every", checkpoint_every, "Checkpoint period")->capture_default_str();
  train->add_option("--threads", threads, "Worker threads (default: NSRF_THREADS or all cores)");
  train->add_flag("--resume", resume, "Continue from the run directory's checkpoint");

  auto* render = app.add_subcommand("render", "Render views from a trained run");
  render->add_option("--run", run_dir, "Run directory")->required();
  render->add_option("--scene", scene, "Scene directory (default: from the run config)");
  render->add_option("--out", out, "Output directory")->required();
  render->add_option("--frames", frames, "Comma-separated training frames or 'all'");
  render->add_option("--novel", novel, "Render this many views between training cameras instead");
  render->add_option("--threads", threads, "Worker threads");

  auto* mesh = app.add_subcommand("extract-mesh", "Marching cubes on a trained SDF");
  mesh->add_option("--run", run_dir, "Run directory")->required();
  mesh->add_option("--out", out, "Output OBJ")->required();
  mesh->add_option("--resolution", resolution, "Grid resolution (default: run config)");
  mesh->add_option("--threads", threads, "Worker threads");

  auto* eval = app.add_subcommand("evaluate", "Score runs or images; aggregate four cases");
  eval->add_option("--run", runs, "Run directories");
  eval->add_option("--csv", csvs, "Case result CSVs from earlier evaluations");
  eval->add_flag("--four-case", four_case, "Aggregate into the four-case report");
  eval->add_option("--pred", pred, "Predicted image (.png or .f32)");
  eval->add_option("--target", target, "Target image");
  eval->add_option("--mask", mask, "Optional mask image");
  eval->add_option("--scene", scene, "Scene directory override, or a label for --pred");
  eval->add_option("--case", case_label, "Case label for --pred results")->capture_default_str();
  eval->add_option("--frames", frames, "Frames to score (default: all)");
  eval->add_option("--out", out, "Output CSV")->required();
  eval->add_option("--threads", threads, "Worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*make) return cmd_make_synthetic(spec_file, out, seed);
    if (*pert) return cmd_perturb(scene, sigma, ratio, perturb_seed, out);
    if (*train) {
      TrainFlags f;
      f.scene = scene;
      f.case_name = case_name_flag;
      f.config = config;
      f.out = out;
      f.init_cameras = init_cameras;
      f.seed = seed;
      f.iterations = iterations;
      f.stop_at = stop_at;
      f.checkpoint_every = checkpoint_every;
      f.threads = threads;
      f.resume = resume;
      return cmd_train(f);
    }
    if (*render) return cmd_render(run_dir, scene, out, frames, novel, threads);
    if (*mesh) return cmd_extract_mesh(run_dir, out, resolution, threads);
    if (*eval) {
      return cmd_evaluate(runs, csvs, four_case, pred, target, mask, scene, case_label, frames, out, threads);
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << std::endl;
    return kExitNumerical;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitValidation;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitValidation;
  }
  return 0;
}
