#pragma once

// Losses, Adam with per-group schedules, the training loop and checkpoints.

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nsrf/cameras.hpp"
#include "nsrf/dataio.hpp"
#include "nsrf/evalreport.hpp"
#include "nsrf/fields.hpp"
#include "nsrf/params.hpp"
#include "nsrf/renderer.hpp"
#include "nsrf/tape.hpp"

namespace nsrf {

// Losses ------------------------------------------------------------------

struct LossWeights {
  double colour = 1.0;
  double eikonal = 0.1;
  double mask = 0.1;
};

inline constexpr double kMaskEps = 1e-7;

/// Interior pixel count (mask >= 0.5).
Index interior_count(const Mat& mask);

/// Sum of |pred - target| over interior pixels and channels divided by denom.
/// The single-batch form uses denom = 3 * interior count and returns 0 (with a
/// warning count) when the mask is empty.
Var colour_loss(const Var& pred, const Mat& target, const Mat& mask, double denom);
Var colour_loss(const Var& pred, const Mat& target, const Mat& mask, int* empty_mask_warnings = nullptr);

/// Sum over columns of (|g| - 1)^2 divided by denom (the column count by default).
Var eikonal_loss(const Var& gradients, double denom);
Var eikonal_loss(const Var& gradients);

/// Binary cross entropy with opacity clamped to [eps, 1 - eps], summed and divided by denom.
Var mask_loss(const Var& opacity, const Mat& mask, double denom, double eps = kMaskEps);
Var mask_loss(const Var& opacity, const Mat& mask, double eps = kMaskEps);

struct LossTerms {
  Var total;
  Var colour;
  Var eikonal;
  Var mask;
};

/// Weighted sum of the three terms; all must live on one tape.
LossTerms total_loss(const Var& colour, const Var& eikonal, const Var& mask, const LossWeights& weights);

/// Normalisers shared by every chunk of one batch, so chunk losses add up to the batch loss.
struct BatchNormalisers {
  double colour = 1.0;   // 3 * interior pixels
  double eikonal = 1.0;  // samples
  double mask = 1.0;     // rays
};

/// Renders pixels of one frame on the tape and returns the weighted loss.
LossTerms batch_loss(FieldBinding& field, const Var& omega, const Var& t, const Var& focal,
                     const Intrinsics& intrinsics, std::span<const Eigen::Vector2d> pixels,
                     std::span<const std::vector<double>> depths, const Mat& target_rgb,
                     const Mat& target_mask, const LossWeights& weights, const BatchNormalisers& norm,
                     double background, double mask_eps = kMaskEps);

// Optimizer -----------------------------------------------------------------

enum class ScheduleKind { WarmupCosine, Exponential, Constant };

struct ScheduleParams {
  ScheduleKind kind = ScheduleKind::Constant;
  double warmup_fraction = 0.05;
  double final_ratio = 1.0;
  /// The rate is 0 before delay_fraction * total; the schedule then runs over the remaining steps.
  double delay_fraction = 0.0;
};

/// Pure learning-rate schedule over step in [0, total].
double schedule_lr(const ScheduleParams& schedule, long step, long total, double base);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct ParamGroup {
  std::string name;
  std::vector<ParamRef> params;
  double base_lr = 0.0;
  ScheduleParams schedule;
  bool frozen = false;
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long step = 0;
  long skipped = 0;

  void reset_state();
};

/// One Adam update. Returns false and leaves everything but `skipped` untouched
/// when the gradient has a non-finite entry.
bool adam_step(ParamGroup& group, const Eigen::VectorXd& gradient, double lr, const AdamConfig& adam = {});

// Training ------------------------------------------------------------------

enum class TrainCase { BaselineGt, BaselineNoisy, LearnableGt, LearnableNoisy };

std::string case_name(TrainCase c);
TrainCase parse_case(const std::string& name);
inline bool cameras_learnable(TrainCase c) { return c == TrainCase::LearnableGt || c == TrainCase::LearnableNoisy; }
inline bool cameras_noisy(TrainCase c) { return c == TrainCase::BaselineNoisy || c == TrainCase::LearnableNoisy; }

struct TrainConfig {
  TrainCase train_case = TrainCase::LearnableNoisy;
  std::uint64_t seed = 0;
  long iterations = 10000;
  Index batch_rays = 512;
  RenderConfig render;
  FieldConfig field;
  LossWeights weights;
  double lr_fields = 5e-4;
  double lr_extrinsics = 1e-3;
  double lr_intrinsics = 1e-4;
  double warmup_fraction = 0.05;
  double fields_final_ratio = 0.05;
  double cameras_final_ratio = 0.01;
  /// Fraction of the run during which the cameras stay fixed.
  double cameras_delay_fraction = 0.0;
  AdamConfig adam;
  NoiseSpec noise;
  /// PSNR and camera errors are logged every eval_every iterations and at the end.
  long eval_every = 500;
  /// Training frames (with the current cameras) rendered for the periodic PSNR.
  std::vector<int> eval_frames{0};
  double mask_eps = kMaskEps;
  int threads = 1;
};

struct MetricsRow {
  long iteration = 0;
  double loss_total = 0.0;
  double loss_colour = 0.0;
  double loss_eikonal = 0.0;
  double loss_mask = 0.0;
  std::optional<double> psnr;
  std::optional<double> rot_err_deg_mean;
  std::optional<double> trans_err_mean;
  std::optional<double> focal_err_ratio;
  double lr_fields = 0.0;
  double lr_ext = 0.0;
  double lr_int = 0.0;
};

std::string metrics_header();
std::string format_metrics_row(const MetricsRow& row);

struct TrainCounters {
  long nonfinite_losses = 0;
  long nonfinite_streak = 0;
  long empty_mask_batches = 0;
};

/// Owns the field, the cameras and the optimizer state for one run.
class Trainer {
 public:
  /// Noisy cases perturb the ground-truth cameras once here unless initial cameras are given.
  Trainer(const SceneDataset& data, TrainConfig config, std::optional<CameraRig> initial_cameras = std::nullopt);
  // Parameter groups point into this object.
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const TrainConfig& config() const { return config_; }
  const SceneDataset& dataset() const { return data_; }
  long iteration() const { return iteration_; }
  NeuralField& field() { return field_; }
  const NeuralField& field() const { return field_; }
  const CameraRig& cameras() const { return cameras_; }
  const CameraRig& ground_truth() const { return ground_truth_; }
  const CameraRig& initial_cameras() const { return initial_cameras_; }
  const TrainCounters& counters() const { return counters_; }
  const std::vector<ParamGroup>& groups() const { return groups_; }

  /// One optimisation step; throws NumericalError after 3 consecutive non-finite losses.
  MetricsRow step();
  /// Runs until iteration() == config().iterations, passing each row to sink.
  void run(const std::function<void(const MetricsRow&)>& sink);

  /// Masked PSNR of training frames rendered with the current cameras.
  double evaluate_psnr(std::span<const int> frames) const;
  CameraErrorSummary camera_error() const;

  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

  /// Hash of the settings that shape the trajectory; stored in checkpoints.
  std::uint64_t config_hash() const;

 private:
  void build_groups();
  std::vector<ParamRef> camera_parameters();

  const SceneDataset& data_;
  TrainConfig config_;
  NeuralField field_;
  CameraRig ground_truth_;
  CameraRig initial_cameras_;
  CameraRig cameras_;
  std::vector<ParamGroup> groups_;
  long iteration_ = 0;
  TrainCounters counters_;
};

/// Renders the given frames with the trainer's current cameras and scores them against the
/// dataset: masked L1 loss, masked and full-image PSNR, camera errors. wall_time is left at 0.
CaseResult evaluate_case(const Trainer& trainer, const std::string& scene, std::span<const int> frames);

/// Copies the field parameters of a trainer checkpoint into field (no scene needed).
void load_field_checkpoint(NeuralField& field, const std::filesystem::path& path);

// Checkpoint file -----------------------------------------------------------

struct NamedArray {
  std::string name;
  Mat value;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "NSRF", u32 version, then per array: u32 name length, name, u32 rows, u32 cols, float64 column-major data.
void write_checkpoint_file(const std::filesystem::path& path, std::span<const NamedArray> arrays);
std::vector<NamedArray> read_checkpoint_file(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::string_view text);

}  // namespace nsrf
