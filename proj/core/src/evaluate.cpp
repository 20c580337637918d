#include "unrollcs/evaluate.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <limits>
#include <sstream>

#include "unrollcs/error.hpp"
#include "unrollcs/image_io.hpp"
#include "unrollcs/metrics.hpp"

namespace unrollcs {

namespace fs = std::filesystem;
using nlohmann::json;

Reconstructor adjoint_method() {
  return {"adjoint", "method = adjoint\n", [](const SamplingOperator& op, const Measurement& m) {
            NoGradGuard guard;
            Tensor x = adjoint(op, m);
            if (x.dim(2) != m.height || x.dim(3) != m.width) x = crop(x, m.height, m.width);
            return x;
          }};
}

Reconstructor ista_method(const IstaConfig& config) {
  config.validate();
  std::ostringstream os;
  os << "method = ista\niterations = " << config.iterations << "\nrho = " << config.rho
     << "\nlambda = " << config.lambda << "\ntransform = " << to_string(config.transform) << "\n";
  return {"ista", os.str(),
          [config](const SamplingOperator& op, const Measurement& m) { return ista_reconstruct(op, m, config); }};
}

Reconstructor model_method(const ModelConfig& config, ParameterStore params) {
  config.validate();
  return {"model", "method = model\n" + config.to_text(),
          [config, params = std::move(params)](const SamplingOperator& op, const Measurement& m) {
            NoGradGuard guard;
            return model_forward(config, params, op, m);
          }};
}

namespace {

std::uint64_t name_seed(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ull ^ seed;
  for (const unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

json number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void finish(EvalReport& report) {
  std::sort(report.per_image.begin(), report.per_image.end(),
            [](const ImageResult& a, const ImageResult& b) { return a.name < b.name; });
  double p = 0.0, s = 0.0, t = 0.0;
  for (const auto& r : report.per_image) {
    p += r.psnr_db;
    s += r.ssim;
    t += r.ms;
  }
  const double n = static_cast<double>(report.per_image.size());
  const double nan = std::numeric_limits<double>::quiet_NaN();
  report.mean_psnr_db = n > 0 ? p / n : nan;
  report.mean_ssim = n > 0 ? s / n : nan;
  report.mean_ms = n > 0 ? t / n : nan;
}

}  // namespace

ImageResult evaluate_image(const Reconstructor& method, const SamplingOperator& op, const Tensor& image,
                           const std::string& name, const EvalSettings& settings) {
  const SampleOptions so{settings.sigma, name_seed(settings.seed, name), true};
  const Measurement m = settings.onebit ? onebit_sample(op, image, so) : sample(op, image, so);
  const auto t0 = std::chrono::steady_clock::now();
  const Tensor x_hat = method.run(op, m);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return {name, psnr(image, x_hat), ssim(image, x_hat), ms};
}

EvalReport evaluate(const Reconstructor& method, const std::vector<std::pair<std::string, Tensor>>& images,
                    const SamplingOperator& op, const EvalSettings& settings) {
  EvalReport report;
  std::ostringstream cfg;
  cfg << method.config_text << "block = " << op.block() << "\nmeasurements = " << op.rows()
      << "\nsampling_seed = " << op.seed() << "\nsigma = " << settings.sigma << "\nseed = " << settings.seed
      << "\nonebit = " << (settings.onebit ? "true" : "false") << "\n";
  report.config = cfg.str();
  for (const auto& [name, image] : images) {
    try {
      report.per_image.push_back(evaluate_image(method, op, image, name, settings));
    } catch (const Error& e) {
      report.failures.emplace_back(name, e.what());
    }
  }
  finish(report);
  return report;
}

EvalReport evaluate(const Reconstructor& method, const fs::path& dataset_dir, const SamplingOperator& op,
                    const EvalSettings& settings) {
  std::vector<std::pair<std::string, Tensor>> images;
  std::vector<std::pair<std::string, std::string>> failures;
  for (const auto& path : list_images(dataset_dir)) {
    try {
      images.emplace_back(path.filename().string(), load_image(path));
    } catch (const IoError& e) {
      failures.emplace_back(path.filename().string(), e.what());
    }
  }
  if (images.empty() && failures.empty()) throw DataError(dataset_dir.string() + ": no .pgm or .png images");
  EvalReport report = evaluate(method, images, op, settings);
  report.failures.insert(report.failures.begin(), failures.begin(), failures.end());
  return report;
}

std::string EvalReport::to_json() const {
  json j;
  j["config"] = config;
  j["per_image"] = json::array();
  for (const auto& r : per_image) {
    j["per_image"].push_back({{"name", r.name}, {"psnr_db", number(r.psnr_db)}, {"ssim", number(r.ssim)},
                              {"ms", number(r.ms)}});
  }
  j["mean_psnr_db"] = number(mean_psnr_db);
  j["mean_ssim"] = number(mean_ssim);
  j["mean_ms"] = number(mean_ms);
  j["failures"] = json::array();
  for (const auto& [name, msg] : failures) j["failures"].push_back({{"name", name}, {"error", msg}});
  return j.dump(2) + "\n";
}

std::string EvalReport::to_csv() const {
  std::string out = "name,psnr_db,ssim,ms\n";
  for (const auto& r : per_image) {
    out += r.name + "," + csv_number(r.psnr_db) + "," + csv_number(r.ssim) + "," + csv_number(r.ms) + "\n";
  }
  out += "mean," + csv_number(mean_psnr_db) + "," + csv_number(mean_ssim) + "," + csv_number(mean_ms) + "\n";
  return out;
}

std::vector<std::string> check_report_json(const std::string& text) {
  std::vector<std::string> problems;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    return {std::string("not valid JSON: ") + e.what()};
  }
  const auto is_metric = [](const json& v) {
    return v.is_number() || (v.is_string() && (v == "inf" || v == "-inf" || v == "nan"));
  };
  if (!j.is_object()) return {"top level is not an object"};
  if (!j.contains("config") || !j["config"].is_string()) problems.push_back("config: missing or not a string");
  for (const char* key : {"mean_psnr_db", "mean_ssim", "mean_ms"}) {
    if (!j.contains(key) || !is_metric(j[key])) problems.push_back(std::string(key) + ": missing or not numeric");
  }
  if (!j.contains("per_image") || !j["per_image"].is_array()) {
    problems.push_back("per_image: missing or not an array");
    return problems;
  }
  std::size_t i = 0;
  for (const auto& e : j["per_image"]) {
    const std::string where = "per_image[" + std::to_string(i++) + "]";
    if (!e.is_object()) {
      problems.push_back(where + ": not an object");
      continue;
    }
    if (!e.contains("name") || !e["name"].is_string()) problems.push_back(where + ".name: missing or not a string");
    for (const char* key : {"psnr_db", "ssim", "ms"}) {
      if (!e.contains(key) || !is_metric(e[key])) problems.push_back(where + "." + key + ": missing or not numeric");
    }
  }
  return problems;
}

std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<ChartSeries>& series) {
  const double width = 640, height = 400, left = 70, right = 20, top = 40, bottom = 50;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (!(x0 <= x1)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (width - left - right); };
  const auto py = [&](double y) { return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom); };
  static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"};
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\">" << title
     << "</text>\n"
     << "<line x1=\"" << left << "\" y1=\"" << height - bottom << "\" x2=\"" << width - right << "\" y2=\""
     << height - bottom << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << height - bottom
     << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = x0 + (x1 - x0) * t / 4.0, yv = y0 + (y1 - y0) * t / 4.0;
    os << "<text x=\"" << px(xv) << "\" y=\"" << height - bottom + 18
       << "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">" << xv << "</text>\n"
       << "<text x=\"" << left - 6 << "\" y=\"" << py(yv) + 4
       << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" << yv << "</text>\n";
  }
  os << "<text x=\"" << width / 2 << "\" y=\"" << height - 10
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\">" << x_label << "</text>\n"
     << "<text x=\"16\" y=\"" << height / 2 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
     << "transform=\"rotate(-90 16 " << height / 2 << ")\">" << y_label << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* colour = colours[i % 5];
    os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : series[i].points) {
      if (std::isfinite(x) && std::isfinite(y)) os << px(x) << "," << py(y) << " ";
    }
    os << "\"/>\n"
       << "<text x=\"" << width - right - 120 << "\" y=\"" << top + 16 * (i + 1) << "\" fill=\"" << colour
       << "\" font-size=\"12\" font-family=\"sans-serif\">" << series[i].label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace unrollcs
