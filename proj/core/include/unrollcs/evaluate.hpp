#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "unrollcs/ista.hpp"
#include "unrollcs/model.hpp"
#include "unrollcs/sampling.hpp"
#include "unrollcs/tensor.hpp"

namespace unrollcs {

// A reconstruction method: measurement -> image at the measured extent.
struct Reconstructor {
  std::string name;
  // Echoed into reports.
  std::string config_text;
  std::function<Tensor(const SamplingOperator&, const Measurement&)> run;
};

// x = A^T y
Reconstructor adjoint_method();
Reconstructor ista_method(const IstaConfig& config);
// Runs model_forward without recording a graph.
Reconstructor model_method(const ModelConfig& config, ParameterStore params);

struct EvalSettings {
  double sigma = 0.0;
  std::uint64_t seed = 0;
  bool onebit = false;
};

struct ImageResult {
  std::string name;
  double psnr_db = 0.0;
  double ssim = 0.0;
  double ms = 0.0;
};

struct EvalReport {
  std::string config;
  // Sorted by name.
  std::vector<ImageResult> per_image;
  double mean_psnr_db = 0.0;
  double mean_ssim = 0.0;
  double mean_ms = 0.0;
  // Images that failed to load or reconstruct: (name, message).
  std::vector<std::pair<std::string, std::string>> failures;

  // {config, per_image[], mean_psnr_db, mean_ssim, mean_ms}; non-finite
  // numbers are written as the strings "inf" / "-inf" / "nan".
  std::string to_json() const;
  // name,psnr_db,ssim,ms with a final "mean" row.
  std::string to_csv() const;
};

// Samples one image (reflect padded to the block grid, noise seeded from
// settings.seed and the image name), reconstructs and scores it.
ImageResult evaluate_image(const Reconstructor& method, const SamplingOperator& op, const Tensor& image,
                           const std::string& name, const EvalSettings& settings);

EvalReport evaluate(const Reconstructor& method, const std::filesystem::path& dataset_dir,
                    const SamplingOperator& op, const EvalSettings& settings);
EvalReport evaluate(const Reconstructor& method, const std::vector<std::pair<std::string, Tensor>>& images,
                    const SamplingOperator& op, const EvalSettings& settings);

// Empty when `json` is a well-formed report, otherwise one message per
// problem.
std::vector<std::string> check_report_json(const std::string& json);

struct ChartSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

// Stand-alone SVG line chart.
std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<ChartSeries>& series);

}  // namespace unrollcs
