#include "nsrf/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>

#include "nsrf/config.hpp"
#include "nsrf/errors.hpp"
#include "nsrf/evalreport.hpp"
#include "nsrf/parallel.hpp"

namespace nsrf {

namespace fs = std::filesystem;

// Losses ------------------------------------------------------------------

Index interior_count(const Mat& mask) { return (mask.array() >= 0.5).count(); }

Var colour_loss(const Var& pred, const Mat& target, const Mat& mask, double denom) {
  Tape& tape = *pred.tape;
  if (pred.rows() != target.rows() || pred.cols() != target.cols() || mask.cols() != pred.cols()) {
    throw ShapeError("colour_loss: prediction, target and mask sizes differ");
  }
  if (!(denom > 0.0)) return constant(tape, 0.0);
  Mat w = Mat::Zero(pred.rows(), pred.cols());
  for (Index j = 0; j < pred.cols(); ++j) {
    if (mask(0, j) >= 0.5) w.col(j).setConstant(1.0 / denom);
  }
  return sum(abs(pred - constant(tape, target)) * constant(tape, std::move(w)));
}

Var colour_loss(const Var& pred, const Mat& target, const Mat& mask, int* empty_mask_warnings) {
  const Index n = interior_count(mask);
  if (n == 0 && empty_mask_warnings) ++*empty_mask_warnings;
  return colour_loss(pred, target, mask, static_cast<double>(n * pred.rows()));
}

Var eikonal_loss(const Var& gradients, double denom) {
  if (gradients.rows() != 3) throw ShapeError("eikonal_loss: gradients must be 3 x N");
  return sum(square(norm2(gradients) - 1.0)) * (1.0 / denom);
}

Var eikonal_loss(const Var& gradients) { return eikonal_loss(gradients, static_cast<double>(gradients.cols())); }

Var mask_loss(const Var& opacity, const Mat& mask, double denom, double eps) {
  Tape& tape = *opacity.tape;
  if (opacity.rows() != 1 || mask.rows() != 1 || mask.cols() != opacity.cols()) {
    throw ShapeError("mask_loss: opacity and mask must both be 1 x B");
  }
  const Var o = clamp_max(clamp_min(opacity, eps), 1.0 - eps);
  const Var bce = constant(tape, mask) * log(o) + constant(tape, Mat(1.0 - mask.array())) * log(1.0 - o);
  return sum(bce) * (-1.0 / denom);
}

Var mask_loss(const Var& opacity, const Mat& mask, double eps) {
  return mask_loss(opacity, mask, static_cast<double>(opacity.cols()), eps);
}

LossTerms total_loss(const Var& colour, const Var& eikonal, const Var& mask, const LossWeights& w) {
  if (w.colour < 0.0 || w.eikonal < 0.0 || w.mask < 0.0) throw ValidationError("loss weights must be >= 0");
  LossTerms out{colour * w.colour + eikonal * w.eikonal + mask * w.mask, colour, eikonal, mask};
  return out;
}

LossTerms batch_loss(FieldBinding& field, const Var& omega, const Var& t, const Var& focal,
                     const Intrinsics& intrinsics, std::span<const Eigen::Vector2d> pixels,
                     std::span<const std::vector<double>> depths, const Mat& target_rgb,
                     const Mat& target_mask, const LossWeights& weights, const BatchNormalisers& norm,
                     double background, double mask_eps) {
  Tape& tape = *omega.tape;
  const RayVars rays = generate_rays(omega, t, focal, intrinsics, pixels);
  const TapeRender render = render_on_tape(field, rays, depths, background);
  const Var colour = colour_loss(render.rgb, target_rgb, target_mask, norm.colour);
  const Var eikonal = render.samples > 0 ? eikonal_loss(render.gradients, norm.eikonal) : constant(tape, 0.0);
  const Var mask = mask_loss(render.opacity, target_mask, norm.mask, mask_eps);
  return total_loss(colour, eikonal, mask, weights);
}

// Optimizer -----------------------------------------------------------------

double schedule_lr(const ScheduleParams& s, long step, long total, double base) {
  if (total <= 0) throw ValidationError("schedule_lr: total steps must be positive");
  if (step < 0 || step > total) throw ValidationError("schedule_lr: step outside [0, total]");
  const double delay = std::clamp(s.delay_fraction, 0.0, 1.0) * static_cast<double>(total);
  if (static_cast<double>(step) < delay) return 0.0;
  const double span = static_cast<double>(total) - delay;
  const double at = static_cast<double>(step) - delay;
  const double progress = span > 0.0 ? at / span : 1.0;
  switch (s.kind) {
    case ScheduleKind::Constant:
      return base;
    case ScheduleKind::Exponential:
      return base * std::pow(s.final_ratio, progress);
    case ScheduleKind::WarmupCosine: {
      const double warm = s.warmup_fraction * span;
      if (at < warm) return base * at / warm;
      const double rest = span - warm;
      const double p = rest > 0.0 ? (at - warm) / rest : 1.0;
      const double final_lr = s.final_ratio * base;
      return final_lr + (base - final_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
    }
  }
  return base;
}

void ParamGroup::reset_state() {
  const Index n = total_size(params);
  m = Eigen::VectorXd::Zero(n);
  v = Eigen::VectorXd::Zero(n);
  step = 0;
  skipped = 0;
}

bool adam_step(ParamGroup& group, const Eigen::VectorXd& g, double lr, const AdamConfig& adam) {
  const Index n = total_size(group.params);
  if (g.size() != n) throw ShapeError("adam_step: gradient size does not match group " + group.name);
  if (group.m.size() != n) group.reset_state();
  if (!g.allFinite()) {
    ++group.skipped;
    return false;
  }
  ++group.step;
  group.m = adam.beta1 * group.m + (1.0 - adam.beta1) * g;
  group.v = adam.beta2 * group.v + (1.0 - adam.beta2) * g.cwiseAbs2();
  const double c1 = 1.0 - std::pow(adam.beta1, static_cast<double>(group.step));
  const double c2 = 1.0 - std::pow(adam.beta2, static_cast<double>(group.step));
  Eigen::VectorXd x = flatten(group.params);
  x.array() -= lr * (group.m.array() / c1) / ((group.v.array() / c2).sqrt() + adam.eps);
  unflatten(x, group.params);
  return true;
}

// Training ------------------------------------------------------------------

std::string case_name(TrainCase c) {
  switch (c) {
    case TrainCase::BaselineGt:
      return "baseline-gt";
    case TrainCase::BaselineNoisy:
      return "baseline-noisy";
    case TrainCase::LearnableGt:
      return "learnable-gt";
    case TrainCase::LearnableNoisy:
      return "learnable-noisy";
  }
  return "?";
}

TrainCase parse_case(const std::string& name) {
  for (TrainCase c : {TrainCase::BaselineGt, TrainCase::BaselineNoisy, TrainCase::LearnableGt,
                      TrainCase::LearnableNoisy}) {
    if (case_name(c) == name) return c;
  }
  throw ValidationError("unknown case '" + name +
                        "' (expected baseline-gt, baseline-noisy, learnable-gt or learnable-noisy)");
}

std::string metrics_header() {
  return "iteration,loss_total,loss_colour,loss_eikonal,loss_mask,psnr,rot_err_deg_mean,trans_err_mean,"
         "focal_err_ratio,lr_fields,lr_ext,lr_int";
}

std::string format_metrics_row(const MetricsRow& r) {
  auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
  std::string out = std::to_string(r.iteration);
  for (const std::string& cell :
       {format_number(r.loss_total), format_number(r.loss_colour), format_number(r.loss_eikonal),
        format_number(r.loss_mask), opt(r.psnr), opt(r.rot_err_deg_mean), opt(r.trans_err_mean),
        opt(r.focal_err_ratio), format_number(r.lr_fields), format_number(r.lr_ext), format_number(r.lr_int)}) {
    out += ',';
    out += cell;
  }
  return out;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Everything random inside one iteration comes from this stream, so a run can
// resume from (seed, iteration) alone.
std::mt19937_64 iteration_rng(std::uint64_t seed, long iteration) {
  return std::mt19937_64(splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(iteration)));
}

void check_config(const TrainConfig& c, const SceneDataset& data) {
  if (data.frames.empty()) throw ValidationError("dataset has no frames");
  if (c.iterations < 0) throw ValidationError("iterations must be >= 0");
  if (c.batch_rays < 1) throw ValidationError("batch_rays must be >= 1");
  if (c.render.chunk_rays < 1) throw ValidationError("chunk_rays must be >= 1");
  if (c.eval_every < 1) throw ValidationError("eval_every must be >= 1");
  if (c.lr_fields < 0 || c.lr_extrinsics < 0 || c.lr_intrinsics < 0) {
    throw ValidationError("learning rates must be >= 0");
  }
  if (c.noise.extrinsic_sigma < 0 || c.noise.intrinsic_sigma_ratio < 0) throw ValidationError("noise sigmas must be >= 0");
  for (int f : c.eval_frames) {
    if (f < 0 || static_cast<std::size_t>(f) >= data.frames.size()) {
      throw ValidationError("eval frame " + std::to_string(f) + " out of range");
    }
  }
}

struct ChunkResult {
  double total = 0.0;
  double colour = 0.0;
  double eikonal = 0.0;
  double mask = 0.0;
  std::vector<Mat> field_grads;
  Mat omega_grad;
  Mat t_grad;
  double focal_grad = 0.0;
};

}  // namespace

Trainer::Trainer(const SceneDataset& data, TrainConfig config, std::optional<CameraRig> initial)
    : data_(data), config_(std::move(config)), field_(config_.field, config_.seed) {
  check_config(config_, data_);
  ground_truth_ = data_.rig();
  if (initial) {
    if (initial->frames.size() != ground_truth_.frames.size()) {
      throw ValidationError("initial cameras: frame count differs from the dataset");
    }
    initial_cameras_ = *initial;
  } else if (cameras_noisy(config_.train_case)) {
    initial_cameras_ = perturb(ground_truth_, config_.noise).rig;
  } else {
    initial_cameras_ = ground_truth_;
  }
  cameras_ = initial_cameras_;
  build_groups();
}

std::vector<ParamRef> Trainer::camera_parameters() {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < cameras_.frames.size(); ++i) {
    out.push_back(param_ref("camera." + std::to_string(i) + ".omega", cameras_.frames[i].omega));
    out.push_back(param_ref("camera." + std::to_string(i) + ".t", cameras_.frames[i].t));
  }
  out.push_back(param_ref("camera.focal", cameras_.intrinsics.focal));
  return out;
}

void Trainer::build_groups() {
  const bool frozen = !cameras_learnable(config_.train_case);
  std::vector<ParamRef> cams = camera_parameters();
  auto group = [](std::string name, std::vector<ParamRef> params, double lr, ScheduleParams schedule, bool frozen) {
    ParamGroup g;
    g.name = std::move(name);
    g.params = std::move(params);
    g.base_lr = lr;
    g.schedule = schedule;
    g.frozen = frozen;
    return g;
  };
  ParamGroup fields = group("fields", field_.parameters(), config_.lr_fields,
                            {ScheduleKind::WarmupCosine, config_.warmup_fraction, config_.fields_final_ratio, 0.0}, false);
  ParamGroup ext = group("extrinsics", std::vector<ParamRef>(cams.begin(), cams.end() - 1), config_.lr_extrinsics,
                         {ScheduleKind::Exponential, 0.0, config_.cameras_final_ratio, config_.cameras_delay_fraction},
                         frozen);
  ParamGroup intr = group("intrinsics", {cams.back()}, config_.lr_intrinsics,
                          {ScheduleKind::Exponential, 0.0, config_.cameras_final_ratio, config_.cameras_delay_fraction},
                          frozen);
  groups_ = {std::move(fields), std::move(ext), std::move(intr)};
  for (ParamGroup& g : groups_) g.reset_state();
}

MetricsRow Trainer::step() {
  const long total = config_.iterations;
  if (iteration_ >= total) throw ValidationError("training already finished");
  std::mt19937_64 rng = iteration_rng(config_.seed, iteration_);

  const Intrinsics& intr = cameras_.intrinsics;
  std::uniform_int_distribution<std::size_t> pick_frame(0, data_.frames.size() - 1);
  std::uniform_int_distribution<int> pick_col(0, intr.width - 1);
  std::uniform_int_distribution<int> pick_row(0, intr.height - 1);
  const std::size_t frame = pick_frame(rng);
  const Frame& target = data_.frames[frame];
  const Index b = config_.batch_rays;

  std::vector<Eigen::Vector2d> pixels(static_cast<std::size_t>(b));
  Mat rgb(3, b);
  Mat mask(1, b);
  std::vector<Ray> rays(static_cast<std::size_t>(b));
  for (Index k = 0; k < b; ++k) {
    const int col = pick_col(rng);
    const int row = pick_row(rng);
    pixels[static_cast<std::size_t>(k)] = Eigen::Vector2d(col + 0.5, row + 0.5);
    for (int c = 0; c < 3; ++c) rgb(c, k) = target.image.at(col, row, c);
    mask(0, k) = target.mask.at(col, row, 0);
    rays[static_cast<std::size_t>(k)] = generate_ray(cameras_.frames[frame], intr, pixels[static_cast<std::size_t>(k)]);
  }

  const std::vector<std::vector<double>> depths = plan_samples(field_, rays, config_.render, &rng);

  BatchNormalisers norm;
  const Index interior = interior_count(mask);
  if (interior == 0) ++counters_.empty_mask_batches;
  norm.colour = static_cast<double>(3 * interior);
  Index samples = 0;
  for (const auto& d : depths) samples += static_cast<Index>(d.size());
  norm.eikonal = static_cast<double>(std::max<Index>(samples, 1));
  norm.mask = static_cast<double>(b);

  const bool learn_cams = cameras_learnable(config_.train_case);
  const Index chunk = config_.render.chunk_rays;
  const auto n_chunks = static_cast<std::size_t>((b + chunk - 1) / chunk);
  std::vector<ChunkResult> results(n_chunks);
  bool numerical_failure = false;
  try {
    parallel_for(n_chunks, config_.threads, [&](std::size_t c) {
      const Index begin = static_cast<Index>(c) * chunk;
      const Index end = std::min(b, begin + chunk);
      const auto off = static_cast<std::size_t>(begin);
      const auto len = static_cast<std::size_t>(end - begin);
      Tape tape;
      auto binding = field_.bind(tape);
      const Extrinsics& ext = cameras_.frames[frame];
      const Var omega = learn_cams ? leaf(tape, ext.omega) : constant(tape, ext.omega);
      const Var t = learn_cams ? leaf(tape, ext.t) : constant(tape, ext.t);
      const Var focal = learn_cams ? leaf(tape, Mat::Constant(1, 1, intr.focal)) : constant(tape, intr.focal);
      const LossTerms terms = batch_loss(
          *binding, omega, t, focal, intr, std::span<const Eigen::Vector2d>(pixels).subspan(off, len),
          std::span<const std::vector<double>>(depths).subspan(off, len), rgb.middleCols(begin, end - begin),
          mask.middleCols(begin, end - begin), config_.weights, norm, config_.render.background, config_.mask_eps);
      ChunkResult& r = results[c];
      r.total = terms.total.scalar();
      r.colour = terms.colour.scalar();
      r.eikonal = terms.eikonal.scalar();
      r.mask = terms.mask.scalar();
      if (!std::isfinite(r.total)) return;
      const Grad grad = backward(tape, terms.total.id);
      for (const Var& l : binding->leaves()) r.field_grads.push_back(grad.of(l.id));
      if (learn_cams) {
        r.omega_grad = grad.of(omega.id);
        r.t_grad = grad.of(t.id);
        r.focal_grad = grad.of(focal.id)(0, 0);
      }
    });
  } catch (const NumericalError&) {
    numerical_failure = true;
  }

  MetricsRow row;
  for (const ChunkResult& r : results) {
    row.loss_total += r.total;
    row.loss_colour += r.colour;
    row.loss_eikonal += r.eikonal;
    row.loss_mask += r.mask;
  }
  row.lr_fields = schedule_lr(groups_[0].schedule, iteration_, total, groups_[0].base_lr);
  row.lr_ext = schedule_lr(groups_[1].schedule, iteration_, total, groups_[1].base_lr);
  row.lr_int = schedule_lr(groups_[2].schedule, iteration_, total, groups_[2].base_lr);

  if (numerical_failure || !std::isfinite(row.loss_total)) {
    ++counters_.nonfinite_losses;
    ++counters_.nonfinite_streak;
    if (numerical_failure) row.loss_total = std::numeric_limits<double>::quiet_NaN();
    if (counters_.nonfinite_streak >= 3) {
      throw NumericalError("non-finite loss for 3 consecutive iterations (last at iteration " +
                           std::to_string(iteration_ + 1) + ")");
    }
  } else {
    counters_.nonfinite_streak = 0;
    // Chunk gradients are summed in chunk order so the result does not depend on threading.
    ParamGroup& fields = groups_[0];
    Eigen::VectorXd g_fields = Eigen::VectorXd::Zero(total_size(fields.params));
    for (const ChunkResult& r : results) {
      Index k = 0;
      for (const Mat& g : r.field_grads) {
        g_fields.segment(k, g.size()) += g.reshaped();
        k += g.size();
      }
    }
    adam_step(fields, g_fields, row.lr_fields, config_.adam);

    if (learn_cams) {
      Eigen::VectorXd g_ext = Eigen::VectorXd::Zero(total_size(groups_[1].params));
      Eigen::VectorXd g_int = Eigen::VectorXd::Zero(1);
      for (const ChunkResult& r : results) {
        g_ext.segment(static_cast<Index>(6 * frame), 3) += r.omega_grad.reshaped();
        g_ext.segment(static_cast<Index>(6 * frame) + 3, 3) += r.t_grad.reshaped();
        g_int(0) += r.focal_grad;
      }
      if (row.lr_ext > 0.0) adam_step(groups_[1], g_ext, row.lr_ext, config_.adam);
      if (row.lr_int > 0.0) adam_step(groups_[2], g_int, row.lr_int, config_.adam);
    }
  }

  ++iteration_;
  row.iteration = iteration_;
  if (iteration_ % config_.eval_every == 0 || iteration_ == total) {
    row.psnr = evaluate_psnr(config_.eval_frames);
    const CameraErrorSummary err = camera_error();
    row.rot_err_deg_mean = err.rot_err_deg_mean;
    row.trans_err_mean = err.trans_err_mean;
    row.focal_err_ratio = err.focal_err_ratio;
  }
  return row;
}

void Trainer::run(const std::function<void(const MetricsRow&)>& sink) {
  while (iteration_ < config_.iterations) {
    const MetricsRow row = step();
    if (sink) sink(row);
  }
}

double Trainer::evaluate_psnr(std::span<const int> frames) const {
  if (frames.empty()) return std::numeric_limits<double>::quiet_NaN();
  RenderConfig rc = config_.render;
  rc.threads = config_.threads;
  double mse_sum = 0.0;
  for (int f : frames) {
    const RenderedImage img = render_image(field_, cameras_, static_cast<std::size_t>(f), rc);
    const Frame& fr = data_.frames[static_cast<std::size_t>(f)];
    mse_sum += masked_mse(img.rgb, image_to_mat(fr.image), image_to_mat(fr.mask));
  }
  const double mse = mse_sum / static_cast<double>(frames.size());
  return mse == 0.0 ? kPsnrInfinity : -10.0 * std::log10(mse);
}

CameraErrorSummary Trainer::camera_error() const {
  const auto errors = camera_errors(cameras_, ground_truth_);
  return summarize(errors);
}

CaseResult evaluate_case(const Trainer& trainer, const std::string& scene, std::span<const int> frames) {
  if (frames.empty()) throw ValidationError("evaluate: no frames selected");
  const SceneDataset& data = trainer.dataset();
  RenderConfig rc = trainer.config().render;
  rc.threads = trainer.config().threads;
  double l1 = 0.0;
  double mse = 0.0;
  double mse_full = 0.0;
  for (int f : frames) {
    if (f < 0 || static_cast<std::size_t>(f) >= data.frames.size()) {
      throw ValidationError("evaluate: frame " + std::to_string(f) + " out of range");
    }
    const RenderedImage img = render_image(trainer.field(), trainer.cameras(), static_cast<std::size_t>(f), rc);
    const Frame& fr = data.frames[static_cast<std::size_t>(f)];
    const Mat target = image_to_mat(fr.image);
    const Mat mask = image_to_mat(fr.mask);
    l1 += reconstruction_loss(img.rgb, target, mask);
    mse += masked_mse(img.rgb, target, mask);
    mse_full += masked_mse(img.rgb, target, Mat());
  }
  const double n = static_cast<double>(frames.size());
  auto to_db = [](double m) { return m == 0.0 ? kPsnrInfinity : -10.0 * std::log10(m); };
  CaseResult r;
  r.scene = scene;
  r.case_name = case_name(trainer.config().train_case);
  r.reconstruction_loss = l1 / n;
  r.psnr_db = to_db(mse / n);
  r.psnr_full_db = to_db(mse_full / n);
  const CameraErrorSummary err = trainer.camera_error();
  r.rot_err_deg_mean = err.rot_err_deg_mean;
  r.trans_err_mean = err.trans_err_mean;
  r.focal_err_ratio = err.focal_err_ratio;
  r.iterations = trainer.iteration();
  return r;
}

// Checkpoints ---------------------------------------------------------------

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t Trainer::config_hash() const {
  TrainConfig c = config_;
  c.threads = 1;
  return fnv1a64(train_config_to_json(c));
}

void write_checkpoint_file(const fs::path& path, std::span<const NamedArray> arrays) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path.string());
    auto put_u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
    out.write("NSRF", 4);
    put_u32(kCheckpointVersion);
    for (const NamedArray& a : arrays) {
      put_u32(static_cast<std::uint32_t>(a.name.size()));
      out.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
      put_u32(static_cast<std::uint32_t>(a.value.rows()));
      put_u32(static_cast<std::uint32_t>(a.value.cols()));
      out.write(reinterpret_cast<const char*>(a.value.data()),
                static_cast<std::streamsize>(a.value.size() * sizeof(double)));
    }
    if (!out) throw ValidationError("cannot write " + path.string());
  }
  fs::rename(tmp, path);
}

std::vector<NamedArray> read_checkpoint_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("missing file: " + path.string());
  auto get_u32 = [&]() {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "NSRF", 4) != 0) throw ValidationError(path.string() + ": not a checkpoint");
  const std::uint32_t version = get_u32();
  if (version != kCheckpointVersion) {
    throw ValidationError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  std::vector<NamedArray> out;
  while (in.peek() != std::char_traits<char>::eof()) {
    NamedArray a;
    const std::uint32_t len = get_u32();
    if (!in || len > (1u << 16)) throw ValidationError(path.string() + ": corrupt checkpoint");
    a.name.resize(len);
    in.read(a.name.data(), len);
    const std::uint32_t rows = get_u32();
    const std::uint32_t cols = get_u32();
    if (!in || std::uint64_t(rows) * cols > (1ULL << 32)) throw ValidationError(path.string() + ": corrupt checkpoint");
    a.value.resize(rows, cols);
    in.read(reinterpret_cast<char*>(a.value.data()), static_cast<std::streamsize>(a.value.size() * sizeof(double)));
    if (!in) throw ValidationError(path.string() + ": truncated checkpoint");
    out.push_back(std::move(a));
  }
  return out;
}

namespace {

Mat scalar_mat(double v) { return Mat::Constant(1, 1, v); }

// 64-bit values are split into two exactly representable 32-bit halves.
Mat u64_mat(std::uint64_t v) {
  Mat m(1, 2);
  m << static_cast<double>(v >> 32), static_cast<double>(v & 0xffffffffULL);
  return m;
}

std::uint64_t mat_u64(const Mat& m) {
  if (m.size() != 2) throw ValidationError("checkpoint: malformed 64-bit field");
  return (static_cast<std::uint64_t>(m(0, 0)) << 32) | static_cast<std::uint64_t>(m(0, 1));
}

}  // namespace

void Trainer::save_checkpoint(const fs::path& path) const {
  std::vector<NamedArray> arrays;
  arrays.push_back({"meta.iteration", scalar_mat(static_cast<double>(iteration_))});
  arrays.push_back({"meta.seed", u64_mat(config_.seed)});
  arrays.push_back({"meta.config_hash", u64_mat(config_hash())});
  arrays.push_back({"meta.nonfinite", Mat{{static_cast<double>(counters_.nonfinite_losses),
                                           static_cast<double>(counters_.nonfinite_streak),
                                           static_cast<double>(counters_.empty_mask_batches)}}});
  for (const ParamGroup& g : groups_) {
    for (const ParamRef& p : g.params) arrays.push_back({p.name, p.map()});
  }
  for (const ParamGroup& g : groups_) {
    arrays.push_back({"optim." + g.name + ".m", g.m});
    arrays.push_back({"optim." + g.name + ".v", g.v});
    arrays.push_back({"optim." + g.name + ".step", Mat{{static_cast<double>(g.step), static_cast<double>(g.skipped)}}});
  }
  for (std::size_t i = 0; i < initial_cameras_.frames.size(); ++i) {
    arrays.push_back({"init.camera." + std::to_string(i) + ".omega", initial_cameras_.frames[i].omega});
    arrays.push_back({"init.camera." + std::to_string(i) + ".t", initial_cameras_.frames[i].t});
  }
  arrays.push_back({"init.camera.focal", scalar_mat(initial_cameras_.intrinsics.focal)});
  write_checkpoint_file(path, arrays);
}

void Trainer::load_checkpoint(const fs::path& path) {
  const std::vector<NamedArray> arrays = read_checkpoint_file(path);
  auto find = [&](const std::string& name) -> const Mat& {
    for (const NamedArray& a : arrays)
      if (a.name == name) return a.value;
    throw ValidationError(path.string() + ": checkpoint lacks '" + name + "'");
  };
  if (mat_u64(find("meta.seed")) != config_.seed) throw ValidationError("checkpoint seed differs from config");
  if (mat_u64(find("meta.config_hash")) != config_hash()) {
    throw ValidationError("checkpoint was written with a different training config");
  }
  auto assign = [&](const ParamRef& p) {
    const Mat& v = find(p.name);
    if (v.rows() != p.rows || v.cols() != p.cols) throw ValidationError("checkpoint shape mismatch for " + p.name);
    p.map() = v;
  };
  for (ParamGroup& g : groups_) {
    for (const ParamRef& p : g.params) assign(p);
    const Mat& m = find("optim." + g.name + ".m");
    const Mat& v = find("optim." + g.name + ".v");
    const Mat& s = find("optim." + g.name + ".step");
    if (m.size() != total_size(g.params) || v.size() != m.size() || s.size() != 2) {
      throw ValidationError("checkpoint optimizer state mismatch for " + g.name);
    }
    g.m = m.reshaped();
    g.v = v.reshaped();
    g.step = static_cast<long>(s(0, 0));
    g.skipped = static_cast<long>(s(0, 1));
  }
  for (std::size_t i = 0; i < initial_cameras_.frames.size(); ++i) {
    initial_cameras_.frames[i].omega = find("init.camera." + std::to_string(i) + ".omega").reshaped();
    initial_cameras_.frames[i].t = find("init.camera." + std::to_string(i) + ".t").reshaped();
  }
  initial_cameras_.intrinsics.focal = find("init.camera.focal")(0, 0);
  const Mat& nf = find("meta.nonfinite");
  counters_.nonfinite_losses = static_cast<long>(nf(0, 0));
  counters_.nonfinite_streak = static_cast<long>(nf(0, 1));
  counters_.empty_mask_batches = static_cast<long>(nf(0, 2));
  iteration_ = static_cast<long>(find("meta.iteration")(0, 0));
  if (iteration_ < 0 || iteration_ > config_.iterations) {
    throw ValidationError("checkpoint iteration " + std::to_string(iteration_) + " exceeds configured iterations");
  }
}

void load_field_checkpoint(NeuralField& field, const fs::path& path) {
  const std::vector<NamedArray> arrays = read_checkpoint_file(path);
  for (const ParamRef& p : field.parameters()) {
    auto it = std::find_if(arrays.begin(), arrays.end(), [&](const NamedArray& a) { return a.name == p.name; });
    if (it == arrays.end()) throw ValidationError(path.string() + ": checkpoint lacks '" + p.name + "'");
    if (it->value.rows() != p.rows || it->value.cols() != p.cols) {
      throw ValidationError("checkpoint shape mismatch for " + p.name);
    }
    p.map() = it->value;
  }
}

}  // namespace nsrf
