#pragma once

// Image metrics, camera recovery metrics and the four-case comparison table.

#include <Eigen/Core>

#include <limits>
#include <span>
#include <string>
#include <vector>

#include "nsrf/dataio.hpp"
#include "nsrf/tape.hpp"

namespace nsrf {

inline constexpr double kPsnrInfinity = std::numeric_limits<double>::infinity();

struct EvalWarnings {
  int empty_mask = 0;
};

/// Colour arrays are 3 x P, masks 1 x P; an empty mask matrix means every pixel.
/// Pixels count as interior when mask >= 0.5.
double masked_mse(const Mat& pred, const Mat& target, const Mat& mask, EvalWarnings* warnings = nullptr);
/// 10 log10(1 / MSE); +inf when MSE is 0, NaN for an empty mask.
double psnr(const Mat& pred, const Mat& target, const Mat& mask, EvalWarnings* warnings = nullptr);
/// Mean absolute error over interior pixels and channels; 0 for an empty mask.
double reconstruction_loss(const Mat& pred, const Mat& target, const Mat& mask,
                           EvalWarnings* warnings = nullptr);

/// 3 x P and 1 x P views of images in row-major pixel order.
Mat image_to_mat(const Image& image);
Image mat_to_image(const Mat& m, int width, int height);

/// Two images side by side (left | right).
Image side_by_side(const Image& left, const Image& right);

inline const std::vector<std::string>& case_names() {
  static const std::vector<std::string> names = {"baseline-gt", "baseline-noisy", "learnable-gt",
                                                 "learnable-noisy"};
  return names;
}

struct CaseResult {
  std::string scene;
  std::string case_name;
  double reconstruction_loss = 0.0;
  double psnr_db = 0.0;
  double psnr_full_db = std::numeric_limits<double>::quiet_NaN();
  double rot_err_deg_mean = std::numeric_limits<double>::quiet_NaN();
  double trans_err_mean = std::numeric_limits<double>::quiet_NaN();
  double focal_err_ratio = std::numeric_limits<double>::quiet_NaN();
  long iterations = 0;
  double wall_time = 0.0;
};

struct OrderingThresholds {
  double noisy_gap_db = 5.0;
  double gt_tolerance_db = 2.0;
};

struct OrderingCheck {
  std::string scene;
  double noisy_gap_db = 0.0;  // learnable-noisy minus baseline-noisy
  double gt_gap_db = 0.0;     // learnable-gt minus baseline-gt
  bool noisy_ok = false;
  bool gt_ok = false;
};

struct FourCaseReport {
  std::string csv;
  std::string text;
  std::vector<OrderingCheck> ordering;
  /// Per result (input order): whether loss / PSNR are best in their scene.
  std::vector<bool> bold_loss;
  std::vector<bool> bold_psnr;
};

/// Groups results by scene; each scene needs all four cases exactly once.
FourCaseReport four_case_report(std::span<const CaseResult> results, const OrderingThresholds& thresholds = {});

std::vector<CaseResult> read_case_result_csv(const std::string& csv_text);
std::string case_result_csv(std::span<const CaseResult> results);

/// "%.17g", with inf/nan spelled out.
std::string format_number(double v);

}  // namespace nsrf
