#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "test_util.hpp"
#include "unrollcs/error.hpp"
#include "unrollcs/evaluate.hpp"
#include "unrollcs/image_io.hpp"
#include "unrollcs/ista.hpp"
#include "unrollcs/metrics.hpp"
#include "unrollcs/ops.hpp"

using namespace unrollcs;
using unrollcs::testing::uniform;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("unrollcs_evalio_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Direct 2-D windowed SSIM, valid positions only.
double ssim_oracle(const Tensor& a, const Tensor& b) {
  const std::size_t h = a.dim(a.rank() - 2), w = a.dim(a.rank() - 1);
  double win[11][11], total = 0.0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) total += win[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / 4.5);
  const double c1 = 1e-4, c2 = 9e-4;
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t y = 0; y + 11 <= h; ++y)
    for (std::size_t x = 0; x + 11 <= w; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double g = win[i][j] / total;
          const double va = a.at((y + i) * w + x + j), vb = b.at((y + i) * w + x + j);
          ma += g * va;
          mb += g * vb;
          saa += g * va * va;
          sbb += g * vb * vb;
          sab += g * va * vb;
        }
      const double vxa = saa - ma * ma, vxb = sbb - mb * mb, cov = sab - ma * mb;
      acc += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (vxa + vxb + c2));
      ++count;
    }
  return acc / double(count);
}

void write_raw(const fs::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary) << bytes;
}

}  // namespace

TEST(ImageIo, PgmExample) {
  auto dir = temp_dir("pgm");
  write_raw(dir / "a.pgm", std::string("P5\n# comment\n2 2\n255\n") + std::string("\x00\xff\x80\x33", 4));
  Tensor t = load_image(dir / "a.pgm");
  ASSERT_EQ(t.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_DOUBLE_EQ(t.at(0), 0.0);
  EXPECT_DOUBLE_EQ(t.at(1), 1.0);
  EXPECT_DOUBLE_EQ(t.at(2), 128.0 / 255.0);
  EXPECT_DOUBLE_EQ(t.at(3), 51.0 / 255.0);
  fs::remove_all(dir);
}

TEST(ImageIo, RoundTripBothFormats) {
  auto dir = temp_dir("rt");
  std::vector<double> v(6 * 5);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = double((i * 37) % 256) / 255.0;
  Tensor img = Tensor::from_data({1, 1, 6, 5}, v);
  for (const char* name : {"x.pgm", "x.png"}) {
    save_image(img, dir / name);
    EXPECT_EQ(max_abs_diff(load_image(dir / name), img), 0.0) << name;
  }
  // Out-of-range values clamp.
  save_image(Tensor::from_data({1, 2}, {-0.5, 1.7}), dir / "c.png");
  Tensor c = load_image(dir / "c.png");
  EXPECT_EQ(c.at(0), 0.0);
  EXPECT_EQ(c.at(1), 1.0);
  auto listed = list_images(dir);
  ASSERT_EQ(listed.size(), 3u);
  EXPECT_EQ(listed[0].filename(), "c.png");
  fs::remove_all(dir);
}

TEST(ImageIo, Errors) {
  auto dir = temp_dir("err");
  write_raw(dir / "p2.pgm", "P2\n1 1\n255\n0\n");
  EXPECT_THROW(load_image(dir / "p2.pgm"), IoError);
  write_raw(dir / "short.pgm", "P5\n4 4\n255\n\x01\x02");
  EXPECT_THROW(load_image(dir / "short.pgm"), IoError);
  write_raw(dir / "fake.png", "not a png");
  EXPECT_THROW(load_image(dir / "fake.png"), IoError);
  EXPECT_THROW(load_image(dir / "none.pgm"), IoError);
  EXPECT_THROW(save_image(Tensor::zeros({2, 2}), dir / "x.bmp"), IoError);
  EXPECT_THROW(save_image(Tensor::zeros({1, 2, 2, 2}), dir / "x.pgm"), DimensionError);
  EXPECT_THROW(list_images(dir / "nope"), IoError);
  fs::remove_all(dir);
}

TEST(Psnr, KnownValues) {
  Tensor a = Tensor::full({1, 1, 4, 4}, 0.5);
  EXPECT_NEAR(psnr(a, add_scalar(a, 0.1)), 20.0, 1e-9);
  EXPECT_NEAR(psnr(Tensor::zeros({3}), Tensor::full({3}, 1.0)), 0.0, 1e-12);
  EXPECT_EQ(psnr(a, a), std::numeric_limits<double>::infinity());
  EXPECT_THROW(psnr(a, Tensor::zeros({1, 1, 4, 3})), DimensionError);
}

TEST(Ssim, IdentityConstantsAndSymmetry) {
  Tensor x = uniform({1, 1, 20, 24}, 1);
  EXPECT_NEAR(ssim(x, x), 1.0, 1e-12);
  const double a = 0.3, b = 0.7;
  EXPECT_NEAR(ssim(Tensor::full({1, 1, 16, 16}, a), Tensor::full({1, 1, 16, 16}, b)),
              (2 * a * b + 1e-4) / (a * a + b * b + 1e-4), 1e-12);
  Tensor y = uniform({1, 1, 20, 24}, 2);
  EXPECT_NEAR(ssim(x, y), ssim(y, x), 1e-14);
  EXPECT_THROW(ssim(Tensor::zeros({1, 1, 10, 20}), Tensor::zeros({1, 1, 10, 20})), DimensionError);
}

TEST(Ssim, MatchesDirectWindowedOracle) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    Tensor x = uniform({1, 1, 14 + s, 17}, 10 + s);
    Tensor n = uniform({1, 1, 14 + s, 17}, 50 + s, -0.2, 0.2);
    Tensor y = add(x, scale(n, double(s) / 5.0));
    EXPECT_NEAR(ssim(x, y), ssim_oracle(x, y), 1e-10) << s;
  }
}

TEST(Evaluate, ReportAggregatesAndSorts) {
  auto op = SamplingOperator::generate(8, 0.5, 1);
  std::vector<std::pair<std::string, Tensor>> images = {{"b", uniform({1, 1, 16, 16}, 1)},
                                                        {"a", uniform({1, 1, 16, 16}, 2)},
                                                        {"c", uniform({1, 1, 12, 20}, 3)}};
  EvalReport r = evaluate(adjoint_method(), images, op, {});
  ASSERT_EQ(r.per_image.size(), 3u);
  EXPECT_EQ(r.per_image[0].name, "a");
  EXPECT_EQ(r.per_image[2].name, "c");
  double mp = 0, ms = 0;
  for (const auto& e : r.per_image) {
    EXPECT_TRUE(std::isfinite(e.psnr_db));
    EXPECT_GE(e.ms, 0.0);
    mp += e.psnr_db / 3;
    ms += e.ssim / 3;
  }
  EXPECT_NEAR(r.mean_psnr_db, mp, 1e-12);
  EXPECT_NEAR(r.mean_ssim, ms, 1e-12);
  EXPECT_TRUE(r.failures.empty());

  EXPECT_TRUE(check_report_json(r.to_json()).empty());
  const std::string csv = r.to_csv();
  EXPECT_EQ(csv.rfind("name,psnr_db,ssim,ms\n", 0), 0u);
  EXPECT_NE(csv.find("\nmean,"), std::string::npos);
}

TEST(Evaluate, JsonCheckerRejectsBadReports) {
  EXPECT_FALSE(check_report_json("{").empty());
  EXPECT_FALSE(check_report_json("[]").empty());
  EXPECT_FALSE(check_report_json(R"({"config":"x","per_image":[{"name":1}],"mean_psnr_db":1,"mean_ssim":1,"mean_ms":1})")
                   .empty());
  EXPECT_TRUE(check_report_json(R"({"config":"x","per_image":[],"mean_psnr_db":"inf","mean_ssim":1,"mean_ms":1})")
                  .empty());
}

TEST(Evaluate, FullRateGivesInfiniteReport) {
  // Identity rows keep A^T A x free of rounding.
  std::vector<double> eye(16 * 16, 0.0);
  for (std::size_t i = 0; i < 16; ++i) eye[i * 16 + i] = 1.0;
  auto op = SamplingOperator::from_matrix(4, 16, eye);
  EvalReport r = evaluate(adjoint_method(), {{"x", uniform({1, 1, 16, 16}, 1)}}, op, {});
  EXPECT_EQ(r.mean_psnr_db, std::numeric_limits<double>::infinity());
  EXPECT_TRUE(check_report_json(r.to_json()).empty());
  EXPECT_NE(r.to_json().find("\"inf\""), std::string::npos);
}

TEST(Evaluate, NoiseLowersPsnr) {
  auto op = SamplingOperator::generate(32, 0.25, 0);
  auto dir = fs::path(UNROLLCS_TEST_DATA) / "test";
  IstaConfig cfg;
  cfg.iterations = 10;
  const auto method = ista_method(cfg);
  EvalReport clean = evaluate(method, dir, op, {.sigma = 0.0, .seed = 1});
  EvalReport noisy = evaluate(method, dir, op, {.sigma = 50.0, .seed = 1});
  EvalReport wild = evaluate(method, dir, op, {.sigma = 100.0, .seed = 1});
  ASSERT_EQ(clean.per_image.size(), noisy.per_image.size());
  for (std::size_t i = 0; i < clean.per_image.size(); ++i)
    EXPECT_LE(noisy.per_image[i].psnr_db, clean.per_image[i].psnr_db) << clean.per_image[i].name;
  for (const auto& e : wild.per_image) EXPECT_TRUE(std::isfinite(e.psnr_db));
  EXPECT_TRUE(wild.failures.empty());
}

TEST(Evaluate, UnreadableFilesAreReportedNotFatal) {
  auto dir = temp_dir("mixed");
  save_image(uniform({1, 1, 16, 16}, 1), dir / "good.pgm");
  write_raw(dir / "bad.pgm", "junk");
  auto op = SamplingOperator::generate(8, 0.5, 1);
  EvalReport r = evaluate(adjoint_method(), dir, op, {});
  EXPECT_EQ(r.per_image.size(), 1u);
  ASSERT_EQ(r.failures.size(), 1u);
  EXPECT_EQ(r.failures[0].first, "bad.pgm");
  auto empty = temp_dir("empty");
  EXPECT_THROW(evaluate(adjoint_method(), empty, op, {}), DataError);
  fs::remove_all(dir);
  fs::remove_all(empty);
}

TEST(Chart, SvgContainsSeries) {
  std::string svg = svg_line_chart("t", "sigma", "PSNR", {{"model", {{0, 30}, {50, 22}}}, {"adjoint", {{0, 20}, {50, 18}}}});
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("model"), std::string::npos);
  EXPECT_NE(svg.find("adjoint"), std::string::npos);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
}
