#include <doctest.h>

#include <cmath>

#include "nsrf/errors.hpp"
#include "nsrf/evalreport.hpp"

using namespace nsrf;

namespace {

std::vector<CaseResult> reference_rows() {
  const char* names[] = {"baseline-gt", "baseline-noisy", "learnable-gt", "learnable-noisy"};
  const double man[4][2] = {{0.032, 36.1}, {0.948, 9.3}, {0.028, 37.5}, {0.038, 33.8}};
  const double bear[4][2] = {{0.102, 23.9}, {0.690, 10.9}, {0.115, 23.4}, {0.098, 26.2}};
  std::vector<CaseResult> out;
  for (int k = 0; k < 4; ++k) {
    CaseResult r;
    r.scene = "bmvs_man";
    r.case_name = names[k];
    r.reconstruction_loss = man[k][0];
    r.psnr_db = man[k][1];
    out.push_back(r);
  }
  for (int k = 0; k < 4; ++k) {
    CaseResult r;
    r.scene = "bmvs_bear";
    r.case_name = names[k];
    r.reconstruction_loss = bear[k][0];
    r.psnr_db = bear[k][1];
    out.push_back(r);
  }
  return out;
}

}  // namespace

TEST_CASE("psnr") {
  const Mat a = Mat::Constant(3, 10, 0.5);
  const Mat b = Mat::Constant(3, 10, 0.6);
  CHECK(psnr(a, b, Mat()) == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(psnr(a, a, Mat()) == kPsnrInfinity);
  CHECK(masked_mse(a, b, Mat()) == doctest::Approx(0.01).epsilon(1e-12));

  Mat mask = Mat::Zero(1, 10);
  mask(0, 2) = 1.0;
  Mat c = a;
  c.col(2).array() += 0.1;
  CHECK(psnr(a, c, mask) == doctest::Approx(20.0).epsilon(1e-12));
  EvalWarnings w;
  CHECK(std::isnan(psnr(a, b, Mat::Zero(1, 10), &w)));
  CHECK(w.empty_mask == 1);
  CHECK_THROWS_AS(psnr(a, Mat::Zero(3, 9), Mat()), ValidationError);
}

TEST_CASE("reconstruction loss") {
  const Mat a = Mat::Constant(3, 8, 0.2);
  const Mat mask = Mat::Ones(1, 8);
  CHECK(reconstruction_loss(a, a, mask) == 0.0);
  CHECK(reconstruction_loss(a, (a.array() + 0.032).matrix(), mask) == doctest::Approx(0.032).epsilon(1e-12));
  EvalWarnings w;
  CHECK(reconstruction_loss(a, (a.array() + 0.1).matrix(), Mat::Zero(1, 8), &w) == 0.0);
  CHECK(w.empty_mask == 1);
}

TEST_CASE("image matrix views") {
  Image img(2, 2, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(i) / 12.0f;
  const Mat m = image_to_mat(img);
  CHECK(m.rows() == 3);
  CHECK(m.cols() == 4);
  CHECK(m(1, 2) == doctest::Approx(img.at(0, 1, 1)));
  CHECK(mat_to_image(m, 2, 2).data == img.data);
  const Image sbs = side_by_side(img, img);
  CHECK(sbs.width == 4);
  CHECK(sbs.at(3, 1, 2) == img.at(1, 1, 2));
}

TEST_CASE("four-case report on a two-scene table") {
  const auto rows = reference_rows();
  const FourCaseReport r = four_case_report(rows);
  const std::vector<bool> bold = {false, false, true, false, false, false, false, true};
  CHECK(r.bold_loss == bold);
  CHECK(r.bold_psnr == bold);
  CHECK(r.text.find("**0.028**") != std::string::npos);
  CHECK(r.text.find("**37.5**") != std::string::npos);
  CHECK(r.text.find("**0.098**") != std::string::npos);
  CHECK(r.text.find("**26.2**") != std::string::npos);
  CHECK(r.text.find("**0.032**") == std::string::npos);
  CHECK(r.text.find("bmvs_man-baseline-noisy") != std::string::npos);
  REQUIRE(r.ordering.size() == 2);
  CHECK(r.ordering[0].noisy_gap_db == doctest::Approx(24.5));
  CHECK(r.ordering[0].gt_gap_db == doctest::Approx(1.4));
  CHECK(r.ordering[0].noisy_ok);
  CHECK(r.ordering[0].gt_ok);
  CHECK(r.ordering[1].noisy_gap_db == doctest::Approx(15.3));
  CHECK(r.ordering[1].gt_ok);

  CHECK(four_case_report(rows).csv == r.csv);
  const auto back = read_case_result_csv(case_result_csv(rows));
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].case_name == rows[i].case_name);
    CHECK(back[i].psnr_db == rows[i].psnr_db);
    CHECK(std::isnan(back[i].rot_err_deg_mean));
  }
}

TEST_CASE("four-case report errors") {
  auto rows = reference_rows();
  rows.resize(3);
  CHECK_THROWS_WITH_AS(four_case_report(rows), doctest::Contains("bmvs_man-learnable-noisy"), ValidationError);

  auto dup = reference_rows();
  dup[1].case_name = "baseline-gt";
  CHECK_THROWS_AS(four_case_report(dup), ValidationError);

  auto odd = reference_rows();
  odd[0].case_name = "oracle";
  CHECK_THROWS_AS(four_case_report(odd), ValidationError);
}

TEST_CASE("number formatting") {
  CHECK(format_number(kPsnrInfinity) == "inf");
  CHECK(format_number(std::nan("")) == "nan");
  CHECK(format_number(0.1) == "0.10000000000000001");
}
