#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "unrollcs/checkpoint.hpp"
#include "unrollcs/error.hpp"
#include "unrollcs/evaluate.hpp"
#include "unrollcs/image_io.hpp"
#include "unrollcs/ista.hpp"
#include "unrollcs/metrics.hpp"
#include "unrollcs/model.hpp"
#include "unrollcs/sampling.hpp"
#include "unrollcs/training.hpp"
#include "unrollcs/verify.hpp"

namespace fs = std::filesystem;
using namespace unrollcs;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kIo = 2;
constexpr int kConfig = 3;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// key = value lines from the config file, then --set overrides in order.
std::vector<std::pair<std::string, std::string>> collect_settings(const std::string& config_file,
                                                                  const std::vector<std::string>& overrides) {
  std::vector<std::pair<std::string, std::string>> out;
  const auto add = [&](const std::string& raw, const std::string& where) {
    std::string line = raw;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) return;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value, got '" + line + "'");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  };
  if (!config_file.empty()) {
    std::ifstream in(config_file);
    if (!in) throw IoError("cannot open config file " + config_file);
    std::string line;
    for (int n = 1; std::getline(in, line); ++n) add(line, config_file + ":" + std::to_string(n));
  }
  for (const auto& o : overrides) add(o, "--set");
  return out;
}

void apply_settings(const std::vector<std::pair<std::string, std::string>>& settings, ModelConfig* model,
                    TrainConfig* train, IstaConfig* ista) {
  for (const auto& [key, value] : settings) {
    if (model && model->set(key, value)) continue;
    if (train && train->set(key, value)) continue;
    if (ista) try {
      if (key == "ista.iterations") {
        ista->iterations = std::stoul(value);
        continue;
      }
      if (key == "ista.rho") {
        ista->rho = std::stod(value);
        continue;
      }
      if (key == "ista.lambda") {
        ista->lambda = std::stod(value);
        continue;
      }
      if (key == "ista.transform") {
        ista->transform = parse_transform(value);
        continue;
      }
    } catch (const std::logic_error&) {
      throw ConfigError("bad value for " + key + ": '" + value + "'");
    }
    throw ConfigError("unknown config key '" + key + "'");
  }
}

std::string shape_text(const Tensor& y) {
  return std::to_string(y.dim(2)) + "x" + std::to_string(y.dim(3)) + "x" + std::to_string(y.dim(1));
}

std::string metric_text(double v, const char* f) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out << text;
  if (!out) throw IoError("write failure on " + path.string());
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("not a number: '" + item + "'");
    }
  }
  return out;
}

struct SampleArgs {
  std::string image, out;
  std::size_t block = 32;
  double ratio = 0.1, sigma = 0.0;
  std::uint64_t seed = 0;
  bool onebit = false, pad = false;
};

int cmd_sample(const SampleArgs& a) {
  const auto op = SamplingOperator::generate(a.block, a.ratio, a.seed);
  const Tensor x = load_image(a.image);
  const SampleOptions so{a.sigma, a.seed, a.pad};
  const Measurement m = a.onebit ? onebit_sample(op, x, so) : sample(op, x, so);
  op.save(a.out + ".op");
  save_measurement(m, a.block, a.out + ".meas");
  std::cout << "M=" << op.rows() << " N=" << op.cols() << " gamma=" << op.gamma() << "\n"
            << "measurement " << shape_text(m.y) << "\n"
            << "wrote " << a.out << ".op " << a.out << ".meas\n";
  return kOk;
}

struct TrainArgs {
  std::string config, data, out, resume, history;
  std::vector<std::string> overrides;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  ModelConfig model;
  TrainConfig tcfg;
  apply_settings(collect_settings(a.config, a.overrides), &model, &tcfg, nullptr);
  model.validate();
  tcfg.validate(model);
  std::cout << "# model\n" << model.to_text() << "# train\n" << tcfg.to_text();
  std::cout << "parameters " << parameter_count(model) << "\n";
  TrainOptions opts;
  if (!a.resume.empty()) opts.resume_from = a.resume;
  const auto t0 = std::chrono::steady_clock::now();
  opts.on_step = [&](const HistoryEntry& e, const TrainState&) {
    if (a.quiet) return;
    if (e.step % 50 == 0 || e.step == tcfg.steps || e.step == 1) {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("step %zu loss %.6g lr %.3g (%.1fs)\n", e.step, e.loss, e.lr, s);
      std::fflush(stdout);
    }
  };
  const auto history = train(model, tcfg, a.data, a.out, opts);
  if (!a.history.empty()) {
    std::string csv;
    std::istringstream cfg(model.to_text() + tcfg.to_text());
    for (std::string line; std::getline(cfg, line);) csv += "# " + line + "\n";
    csv += "step,loss,lr\n";
    for (const auto& e : history) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", e.step, e.loss, e.lr);
      csv += buf;
    }
    write_text(a.history, csv);
  }
  std::cout << "history " << history.size() << " entries; checkpoint " << a.out << "\n";
  return kOk;
}

struct MethodArgs {
  std::string method = "adjoint", checkpoint, config;
  std::vector<std::string> overrides;
};

Reconstructor make_method(const MethodArgs& a, std::optional<Checkpoint>& ckpt) {
  IstaConfig ista;
  if (a.method == "model") {
    if (a.checkpoint.empty()) throw ConfigError("--method model needs --checkpoint");
    ckpt = load_checkpoint(a.checkpoint);
    apply_settings(collect_settings(a.config, a.overrides), nullptr, nullptr, nullptr);
    return model_method(ckpt->model, ckpt->state.params);
  }
  apply_settings(collect_settings(a.config, a.overrides), nullptr, nullptr, &ista);
  if (a.method == "ista") return ista_method(ista);
  if (a.method == "adjoint") return adjoint_method();
  throw ConfigError("unknown method '" + a.method + "' (adjoint, ista, model)");
}

struct ReconstructArgs {
  MethodArgs method;
  std::string op, meas, out, reference;
};

int cmd_reconstruct(const ReconstructArgs& a) {
  std::optional<Checkpoint> ckpt;
  const Reconstructor method = make_method(a.method, ckpt);
  SamplingOperator op = SamplingOperator::load(a.op);
  std::size_t block = 0;
  const Measurement m = load_measurement(a.meas, &block);
  if (block != op.block()) throw ConfigError("measurement block size differs from the operator");
  if (ckpt) op = resolve_sampling(ckpt->model, ckpt->state.params, op);
  const auto t0 = std::chrono::steady_clock::now();
  const Tensor x = method.run(op, m);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  save_image(x, a.out);
  std::string echo = method.config_text + "operator = " + a.op + "\nmeasurement = " + a.meas + "\n";
  write_text(a.out + ".cfg", echo);
  std::cout << "wrote " << a.out << " (" << x.dim(2) << "x" << x.dim(3) << ", " << metric_text(ms, "%.1f")
            << " ms)\n";
  if (!a.reference.empty()) {
    const Tensor ref = load_image(a.reference);
    std::cout << "PSNR " << metric_text(psnr(ref, x), "%.4f") << " dB\n"
              << "SSIM " << metric_text(ssim(ref, x), "%.6f") << "\n";
  }
  return kOk;
}

struct EvalArgs {
  MethodArgs method;
  std::string data, json, csv, svg, sigmas = "0";
  std::size_t block = 32;
  double ratio = 0.1;
  std::uint64_t op_seed = 0, seed = 0;
  bool onebit = false;
};

int cmd_eval(const EvalArgs& a) {
  std::optional<Checkpoint> ckpt;
  const Reconstructor method = make_method(a.method, ckpt);
  SamplingOperator op = ckpt ? resolve_sampling(ckpt->model, ckpt->state.params, ckpt->model.make_operator())
                             : SamplingOperator::generate(a.block, a.ratio, a.op_seed);
  const auto sigmas = parse_list(a.sigmas);
  if (sigmas.empty()) throw ConfigError("--sigma needs at least one value");
  ChartSeries series{method.name, {}};
  EvalReport first;
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    EvalReport r = evaluate(method, a.data, op, {sigmas[i], a.seed, a.onebit});
    std::printf("sigma %-6g mean PSNR %s dB  SSIM %s  %s ms/image  (%zu images, %zu failed)\n", sigmas[i],
                metric_text(r.mean_psnr_db, "%.4f").c_str(), metric_text(r.mean_ssim, "%.5f").c_str(),
                metric_text(r.mean_ms, "%.1f").c_str(), r.per_image.size(), r.failures.size());
    for (const auto& [name, msg] : r.failures) std::fprintf(stderr, "warning: %s: %s\n", name.c_str(), msg.c_str());
    series.points.emplace_back(sigmas[i], r.mean_psnr_db);
    if (i == 0) first = std::move(r);
  }
  if (!a.json.empty()) write_text(a.json, first.to_json());
  if (!a.csv.empty()) write_text(a.csv, first.to_csv());
  if (!a.svg.empty()) write_text(a.svg, svg_line_chart("PSNR vs noise level", "sigma", "PSNR (dB)", {series}));
  return kOk;
}

struct VerifyArgs {
  std::string level = "fast";
  bool inject_fault = false;
  std::uint64_t seed = 2024;
};

int cmd_verify(const VerifyArgs& a) {
  VerifyOptions o;
  if (a.level == "fast") o.level = VerifyLevel::kFast;
  else if (a.level == "full") o.level = VerifyLevel::kFull;
  else throw ConfigError("--level must be fast or full");
  o.inject_fault = a.inject_fault;
  o.seed = a.seed;
  bool all = true;
  std::printf("%-16s %-6s %8s  %s\n", "suite", "result", "seconds", "detail");
  for (const auto& r : run_verify(o)) {
    all = all && r.pass;
    std::printf("%-16s %-6s %8.2f  %s\n", r.name.c_str(), r.pass ? "PASS" : "FAIL", r.seconds, r.detail.c_str());
  }
  std::printf("%s\n", all ? "all suites passed" : "verification FAILED");
  return all ? kOk : kFailure;
}

// Multiply-accumulates of the convolution weights only; physics operators and
// elementwise work are left out.
double conv_macs(const ModelConfig& c, std::size_t h, std::size_t w) {
  const bool prl = c.architecture == Architecture::kPrl;
  static const std::size_t levels[] = {1, 2, 4, 4, 2, 1};
  double total = 0.0;
  for (const auto& spec : parameter_layout(c)) {
    if (spec.shape.size() != 4 || spec.name == "physics.A") continue;
    std::size_t level = 1;
    const std::string& n = spec.name;
    if (prl) {
      if (n[0] == 'g') level = levels[n[1] - '1'];
      else if (n.rfind("sconv1", 0) == 0 || n.rfind("tconv2", 0) == 0) level = 2;
      else if (n.rfind("sconv2", 0) == 0 || n.rfind("tconv1", 0) == 0) level = 4;
    }
    total += static_cast<double>(shape_numel(spec.shape)) * static_cast<double>((h / level) * (w / level));
  }
  return total;
}

struct BenchArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::size_t size = 256, repeats = 3;
};

int cmd_bench(const BenchArgs& a) {
  ModelConfig model;
  apply_settings(collect_settings(a.config, a.overrides), &model, nullptr, nullptr);
  model.validate();
  const auto params = init_params(model, 1);
  const auto op = resolve_sampling(model, params, model.make_operator());
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(a.size * a.size);
  for (auto& x : v) x = u(rng);
  const Tensor x = Tensor::from_data({1, 1, a.size, a.size}, std::move(v));
  const Measurement m = sample(op, x, {0.0, 0, true});
  double best = 1e300;
  for (std::size_t i = 0; i < a.repeats; ++i) {
    NoGradGuard guard;
    const auto t0 = std::chrono::steady_clock::now();
    model_forward(model, params, op, m);
    best = std::min(best, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  const double macs = conv_macs(model, a.size, a.size);
  std::printf("%s-%s parameters %zu (%.3f M)\n", to_string(model.architecture).c_str(),
              to_string(model.framework).c_str(), parameter_count(model), parameter_count(model) / 1e6);
  std::printf("forward %zux%zu: best of %zu %.1f ms\n", a.size, a.size, a.repeats, best);
  std::printf("conv GFLOPs (2 x MACs, estimate) %.3f\n", 2.0 * macs / 1e9);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Block compressed sensing with physics-guided unrolled networks"};
  app.require_subcommand(1);

  SampleArgs sa;
  auto* s = app.add_subcommand("sample", "Sample an image block by block");
  s->add_option("--image", sa.image, "Input image (.pgm/.png)")->required();
  s->add_option("--block", sa.block, "Block size B");
  s->add_option("--ratio", sa.ratio, "Sampling ratio gamma in (0, 1]");
  s->add_option("--sigma", sa.sigma, "Noise level on the 0-255 scale");
  s->add_option("--seed", sa.seed, "Seed for A and the noise");
  s->add_flag("--onebit", sa.onebit, "One-bit measurements");
  s->add_flag("--pad", sa.pad, "Reflect-pad to a multiple of B");
  s->add_option("--out", sa.out, "Output prefix; writes PREFIX.op and PREFIX.meas")->required();

  TrainArgs ta;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--config", ta.config, "key = value config file");
  t->add_option("--set", ta.overrides, "key=value override (repeatable)");
  t->add_option("--data", ta.data, "Directory of training images")->required();
  t->add_option("--out", ta.out, "Checkpoint path")->required();
  t->add_option("--resume", ta.resume, "Resume from this checkpoint");
  t->add_option("--history", ta.history, "Write the loss history as CSV");
  t->add_flag("--quiet", ta.quiet, "No progress lines");

  ReconstructArgs ra;
  auto* r = app.add_subcommand("reconstruct", "Reconstruct from a measurement file");
  r->add_option("--method", ra.method.method, "adjoint, ista or model");
  r->add_option("--checkpoint", ra.method.checkpoint, "Model checkpoint");
  r->add_option("--config", ra.method.config, "key = value config file (ista.* keys)");
  r->add_option("--set", ra.method.overrides, "key=value override (repeatable)");
  r->add_option("--operator", ra.op, "Operator file from sample")->required();
  r->add_option("--measurement", ra.meas, "Measurement file from sample")->required();
  r->add_option("--out", ra.out, "Output image (.pgm/.png)")->required();
  r->add_option("--reference", ra.reference, "Ground truth for PSNR/SSIM");

  EvalArgs ea;
  auto* e = app.add_subcommand("eval", "Evaluate a method on an image directory");
  e->add_option("--method", ea.method.method, "adjoint, ista or model");
  e->add_option("--checkpoint", ea.method.checkpoint, "Model checkpoint");
  e->add_option("--config", ea.method.config, "key = value config file (ista.* keys)");
  e->add_option("--set", ea.method.overrides, "key=value override (repeatable)");
  e->add_option("--data", ea.data, "Directory of test images")->required();
  e->add_option("--block", ea.block, "Block size (non-model methods)");
  e->add_option("--ratio", ea.ratio, "Sampling ratio (non-model methods)");
  e->add_option("--operator-seed", ea.op_seed, "Seed of A (non-model methods)");
  e->add_option("--seed", ea.seed, "Noise seed");
  e->add_option("--sigma", ea.sigmas, "Noise level(s), comma separated; the report uses the first");
  e->add_flag("--onebit", ea.onebit, "One-bit measurements");
  e->add_option("--json", ea.json, "Write the report as JSON");
  e->add_option("--csv", ea.csv, "Write per-image results as CSV");
  e->add_option("--svg", ea.svg, "Write a PSNR vs sigma chart");

  VerifyArgs va;
  auto* v = app.add_subcommand("verify", "Run the invariant suites");
  v->add_option("--level", va.level, "fast or full");
  v->add_flag("--inject-fault", va.inject_fault, "Perturb a row of A (negative control)");
  v->add_option("--seed", va.seed, "Seed");

  BenchArgs ba;
  auto* b = app.add_subcommand("bench", "Time one forward pass and estimate FLOPs");
  b->add_option("--config", ba.config, "key = value config file");
  b->add_option("--set", ba.overrides, "key=value override (repeatable)");
  b->add_option("--size", ba.size, "Square image size");
  b->add_option("--repeats", ba.repeats, "Timed repetitions");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kConfig;
  }

  try {
    if (*s) return cmd_sample(sa);
    if (*t) return cmd_train(ta);
    if (*r) return cmd_reconstruct(ra);
    if (*e) return cmd_eval(ea);
    if (*v) return cmd_verify(va);
    if (*b) return cmd_bench(ba);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kConfig;
  } catch (const DimensionError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kConfig;
  } catch (const IoError& err) {
    std::cerr << "i/o error: " << err.what() << "\n";
    return kIo;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kIo;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
