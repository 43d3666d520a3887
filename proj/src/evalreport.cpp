#include "nsrf/evalreport.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "nsrf/errors.hpp"

namespace nsrf {

namespace {

void check_shapes(const Mat& pred, const Mat& target, const Mat& mask) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw ValidationError("image shapes differ");
  }
  if (mask.size() != 0 && (mask.rows() != 1 || mask.cols() != pred.cols())) {
    throw ValidationError("mask shape does not match image");
  }
}

bool interior(const Mat& mask, Index j) { return mask.size() == 0 || mask(0, j) >= 0.5; }

}  // namespace

double masked_mse(const Mat& pred, const Mat& target, const Mat& mask, EvalWarnings* warnings) {
  check_shapes(pred, target, mask);
  double total = 0.0;
  Index count = 0;
  for (Index j = 0; j < pred.cols(); ++j) {
    if (!interior(mask, j)) continue;
    total += (pred.col(j) - target.col(j)).squaredNorm();
    ++count;
  }
  if (count == 0) {
    if (warnings) ++warnings->empty_mask;
    return std::numeric_limits<double>::quiet_NaN();
  }
  return total / static_cast<double>(count * pred.rows());
}

double psnr(const Mat& pred, const Mat& target, const Mat& mask, EvalWarnings* warnings) {
  const double mse = masked_mse(pred, target, mask, warnings);
  if (std::isnan(mse)) return mse;
  if (mse == 0.0) return kPsnrInfinity;
  return -10.0 * std::log10(mse);
}

double reconstruction_loss(const Mat& pred, const Mat& target, const Mat& mask, EvalWarnings* warnings) {
  check_shapes(pred, target, mask);
  double total = 0.0;
  Index count = 0;
  for (Index j = 0; j < pred.cols(); ++j) {
    if (!interior(mask, j)) continue;
    total += (pred.col(j) - target.col(j)).cwiseAbs().sum();
    ++count;
  }
  if (count == 0) {
    if (warnings) ++warnings->empty_mask;
    return 0.0;
  }
  return total / static_cast<double>(count * pred.rows());
}

Mat image_to_mat(const Image& image) {
  Mat out(image.channels, static_cast<Index>(image.pixels()));
  for (std::size_t p = 0; p < image.pixels(); ++p)
    for (int c = 0; c < image.channels; ++c) out(c, static_cast<Index>(p)) = image.data[p * image.channels + c];
  return out;
}

Image mat_to_image(const Mat& m, int width, int height) {
  if (m.cols() != Index(width) * height) throw ValidationError("mat_to_image: size mismatch");
  Image out(width, height, static_cast<int>(m.rows()));
  for (Index p = 0; p < m.cols(); ++p)
    for (Index c = 0; c < m.rows(); ++c) out.data[std::size_t(p) * m.rows() + c] = static_cast<float>(m(c, p));
  return out;
}

Image side_by_side(const Image& left, const Image& right) {
  if (left.height != right.height || left.channels != right.channels) {
    throw ValidationError("side_by_side: images differ in height or channels");
  }
  Image out(left.width + right.width, left.height, left.channels);
  for (int y = 0; y < left.height; ++y) {
    for (int x = 0; x < left.width; ++x)
      for (int c = 0; c < left.channels; ++c) out.at(x, y, c) = left.at(x, y, c);
    for (int x = 0; x < right.width; ++x)
      for (int c = 0; c < right.channels; ++c) out.at(left.width + x, y, c) = right.at(x, y, c);
  }
  return out;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace {

std::string fixed(double v, int decimals) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

const char* kCsvHeader =
    "scene,case,row,reconstruction_loss,psnr_db,psnr_full_db,rot_err_deg_mean,trans_err_mean,"
    "focal_err_ratio,iterations,wall_time";

std::string csv_row(const CaseResult& r) {
  std::ostringstream out;
  out << r.scene << ',' << r.case_name << ',' << r.scene << '-' << r.case_name << ','
      << format_number(r.reconstruction_loss) << ',' << format_number(r.psnr_db) << ','
      << format_number(r.psnr_full_db) << ',' << format_number(r.rot_err_deg_mean) << ','
      << format_number(r.trans_err_mean) << ',' << format_number(r.focal_err_ratio) << ',' << r.iterations
      << ',' << format_number(r.wall_time);
  return out.str();
}

double parse_number(const std::string& s) {
  if (s == "inf") return kPsnrInfinity;
  if (s == "-inf") return -kPsnrInfinity;
  if (s == "nan" || s.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::stod(s);
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

std::string case_result_csv(std::span<const CaseResult> results) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const CaseResult& r : results) out += csv_row(r) + "\n";
  return out;
}

std::vector<CaseResult> read_case_result_csv(const std::string& text) {
  std::istringstream in(text);
  std::string header, line;
  std::getline(in, header);
  if (header != kCsvHeader) throw ValidationError("not a case result CSV");
  std::vector<CaseResult> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != 11) throw ValidationError("case result CSV: expected 11 columns");
    CaseResult r;
    r.scene = cells[0];
    r.case_name = cells[1];
    r.reconstruction_loss = parse_number(cells[3]);
    r.psnr_db = parse_number(cells[4]);
    r.psnr_full_db = parse_number(cells[5]);
    r.rot_err_deg_mean = parse_number(cells[6]);
    r.trans_err_mean = parse_number(cells[7]);
    r.focal_err_ratio = parse_number(cells[8]);
    r.iterations = std::stol(cells[9]);
    r.wall_time = parse_number(cells[10]);
    out.push_back(r);
  }
  if (out.empty()) throw ValidationError("case result CSV has no rows");
  return out;
}

FourCaseReport four_case_report(std::span<const CaseResult> results, const OrderingThresholds& thresholds) {
  const auto& names = case_names();
  std::vector<std::string> scenes;
  std::map<std::string, std::map<std::string, std::size_t>> index;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const CaseResult& r = results[i];
    if (std::find(names.begin(), names.end(), r.case_name) == names.end()) {
      throw ValidationError("unknown case name '" + r.case_name + "'");
    }
    if (!index.count(r.scene)) scenes.push_back(r.scene);
    if (!index[r.scene].emplace(r.case_name, i).second) {
      throw ValidationError("duplicate case " + r.scene + "-" + r.case_name);
    }
  }
  std::string missing;
  for (const std::string& scene : scenes) {
    for (const std::string& name : names) {
      if (!index[scene].count(name)) missing += (missing.empty() ? "" : ", ") + scene + "-" + name;
    }
  }
  if (results.empty()) missing = "all cases";
  if (!missing.empty()) throw ValidationError("four-case report: missing " + missing);

  FourCaseReport report;
  report.bold_loss.assign(results.size(), false);
  report.bold_psnr.assign(results.size(), false);
  for (const std::string& scene : scenes) {
    double best_loss = std::numeric_limits<double>::infinity();
    double best_psnr = -std::numeric_limits<double>::infinity();
    for (const auto& [name, i] : index[scene]) {
      best_loss = std::min(best_loss, results[i].reconstruction_loss);
      best_psnr = std::max(best_psnr, results[i].psnr_db);
    }
    for (const auto& [name, i] : index[scene]) {
      report.bold_loss[i] = results[i].reconstruction_loss == best_loss;
      report.bold_psnr[i] = results[i].psnr_db == best_psnr;
    }
    const auto& row = index[scene];
    OrderingCheck check;
    check.scene = scene;
    check.noisy_gap_db = results[row.at("learnable-noisy")].psnr_db - results[row.at("baseline-noisy")].psnr_db;
    check.gt_gap_db = results[row.at("learnable-gt")].psnr_db - results[row.at("baseline-gt")].psnr_db;
    check.noisy_ok = check.noisy_gap_db >= thresholds.noisy_gap_db;
    check.gt_ok = std::abs(check.gt_gap_db) <= thresholds.gt_tolerance_db;
    report.ordering.push_back(check);
  }

  std::ostringstream csv;
  csv << kCsvHeader << ",best_loss,best_psnr\n";
  std::ostringstream text;
  char line[160];
  std::snprintf(line, sizeof(line), "%-28s %-22s %s\n", "Case", "Reconstruction loss", "PSNR");
  text << line;
  for (const std::string& scene : scenes) {
    for (const std::string& name : names) {
      const std::size_t i = index[scene][name];
      const CaseResult& r = results[i];
      csv << csv_row(r) << ',' << (report.bold_loss[i] ? 1 : 0) << ',' << (report.bold_psnr[i] ? 1 : 0) << '\n';
      const std::string loss = fixed(r.reconstruction_loss, 3);
      const std::string db = fixed(r.psnr_db, 1);
      std::snprintf(line, sizeof(line), "%-28s %-22s %s\n", (scene + "-" + name).c_str(),
                    (report.bold_loss[i] ? "**" + loss + "**" : loss).c_str(),
                    (report.bold_psnr[i] ? "**" + db + "**" : db).c_str());
      text << line;
    }
  }
  for (const OrderingCheck& c : report.ordering) {
    std::snprintf(line, sizeof(line), "%s: noisy gap %+.2f dB (%s), gt gap %+.2f dB (%s)\n", c.scene.c_str(),
                  c.noisy_gap_db, c.noisy_ok ? "ok" : "FAIL", c.gt_gap_db, c.gt_ok ? "ok" : "FAIL");
    text << line;
  }
  report.csv = csv.str();
  report.text = text.str();
  return report;
}

}  // namespace nsrf
