#include "unrollcs/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "unrollcs/error.hpp"
#include "unrollcs/ops.hpp"
#include "config_parse.hpp"

namespace unrollcs {

namespace {

using cfg::format_double;
using cfg::parse_bool;
using cfg::parse_double;
using cfg::parse_size;

template <typename E, std::size_t N>
E parse_enum(const std::string& s, const std::pair<const char*, E> (&table)[N], const char* what) {
  for (const auto& [name, value] : table) {
    if (s == name) return value;
  }
  std::string options;
  for (const auto& [name, value] : table) options += std::string(options.empty() ? "" : ", ") + name;
  throw ConfigError(std::string("unknown ") + what + " '" + s + "' (expected one of: " + options + ")");
}

template <typename E, std::size_t N>
std::string enum_name(E v, const std::pair<const char*, E> (&table)[N]) {
  for (const auto& [name, value] : table) {
    if (v == value) return name;
  }
  return "?";
}

constexpr std::pair<const char*, Framework> kFrameworks[] = {{"pgd", Framework::kPgd}, {"rnd", Framework::kRnd}};
constexpr std::pair<const char*, Architecture> kArchitectures[] = {{"plain-id", Architecture::kPlainId},
                                                                   {"plain-fd", Architecture::kPlainFd},
                                                                   {"prl-star", Architecture::kPrlStar},
                                                                   {"prl", Architecture::kPrl}};
constexpr std::pair<const char*, Fusion> kFusions[] = {{"analytic", Fusion::kAnalytic},
                                                       {"conv1", Fusion::kConv1},
                                                       {"conv1_sigmoid", Fusion::kConv1Sigmoid},
                                                       {"conv3", Fusion::kConv3},
                                                       {"conv3_sigmoid", Fusion::kConv3Sigmoid}};
constexpr std::pair<const char*, PlainIdVariant> kVariants[] = {{"baseline", PlainIdVariant::kBaseline},
                                                                {"fixed", PlainIdVariant::kFixed},
                                                                {"reduced", PlainIdVariant::kReduced}};

bool is_plain(const ModelConfig& c) {
  return c.architecture == Architecture::kPlainId || c.architecture == Architecture::kPlainFd;
}

std::size_t fusion_kernel(Fusion f) {
  switch (f) {
    case Fusion::kAnalytic:
      return 0;
    case Fusion::kConv1:
    case Fusion::kConv1Sigmoid:
      return 1;
    default:
      return 3;
  }
}

bool fusion_sigmoid(Fusion f) { return f == Fusion::kConv1Sigmoid || f == Fusion::kConv3Sigmoid; }

std::string stage_prefix(const ModelConfig& c, std::size_t group, std::size_t k) {
  const std::string stage = c.share_weights ? "shared" : "s" + std::to_string(k);
  if (is_plain(c)) return stage;
  return "g" + std::to_string(group) + "." + stage;
}

// Feature scale of each of the six groups.
constexpr std::size_t kGroupLevel[6] = {1, 2, 4, 4, 2, 1};

void add_conv(std::vector<ParamSpec>& out, const std::string& name, std::size_t cout, std::size_t cin,
              std::size_t k, bool zero = false) {
  out.push_back({name + ".weight", {cout, cin, k, k}, zero ? Init::kZero : Init::kKaiming});
  out.push_back({name + ".bias", {cout}, Init::kZero});
}

void add_rb(std::vector<ParamSpec>& out, const std::string& name, std::size_t ch, bool zero_last = false) {
  add_conv(out, name + ".conv_a", ch, ch, 3);
  add_conv(out, name + ".conv_b", ch, ch, 3, zero_last);
}

void add_fd_stage(std::vector<ParamSpec>& out, const ModelConfig& c, const std::string& p, std::size_t level,
                  std::size_t phys_r) {
  const std::size_t t = level * level * c.D;
  const std::size_t i = level * level * c.C;
  if (const std::size_t fk = fusion_kernel(c.fusion)) add_conv(out, p + ".fusion", t, 2 * t + phys_r * phys_r, fk);
  add_conv(out, p + ".conv1", i, t, c.proj_kernel);
  add_rb(out, p + ".rb1", i);
  add_rb(out, p + ".rb2", i);
  add_conv(out, p + ".conv2", t, i, c.proj_kernel, true);
}

void add_id_stage(std::vector<ParamSpec>& out, const ModelConfig& c, const std::string& p) {
  if (c.variant == PlainIdVariant::kReduced) {
    add_rb(out, p + ".rb1", c.C, true);
    add_rb(out, p + ".rb2", c.C, true);
    return;
  }
  add_conv(out, p + ".conv1", c.C, 1, c.proj_kernel);
  add_rb(out, p + ".rb1", c.C);
  add_rb(out, p + ".rb2", c.C);
  if (c.variant == PlainIdVariant::kBaseline) add_conv(out, p + ".conv2", 1, c.C, c.proj_kernel, true);
}

Tensor conv(const ParameterStore& ps, const std::string& name, const Tensor& x, int stride = 1,
            bool transposed = false) {
  const Tensor& w = ps.get(name + ".weight");
  const int k = static_cast<int>(w.dim(2));
  const int pad = stride == 1 ? k / 2 : 0;
  return conv2d(x, w, ps.get(name + ".bias"), ConvOptions{stride, pad, 1, transposed});
}

Tensor rb(const ParameterStore& ps, const std::string& name, const Tensor& x) {
  return add(x, conv(ps, name + ".conv_b", relu(conv(ps, name + ".conv_a", x))));
}

Tensor physics_forward(const Physics& ph, const Tensor& x, std::size_t r) {
  Tensor y = fd_forward(*ph.op, x, r);
  return ph.onebit ? sign_ste(y) : y;
}

// Plain image-domain gradient step x - rho A^T(A x - y).
Tensor id_gradient_step(const ModelConfig& c, const Physics& ph, const Tensor& x) {
  Tensor residual = sub(physics_forward(ph, x, 1), ph.y);
  return sub(x, scale(fd_adjoint(*ph.op, residual, 1), c.rho));
}

Tensor id_stage(const ModelConfig& c, const ParameterStore& ps, const std::string& p, const Tensor& x,
                const Physics& ph) {
  if (c.framework == Framework::kRnd) {
    // Same routing as the feature-domain RND stage with one transmitted
    // channel and the analytic range step as merge.
    Tensor f = rb(ps, p + ".rb1", conv(ps, p + ".conv1", x));
    Tensor merged = id_gradient_step(c, ph, slice_channels(f, 0, 1));
    Tensor g = rb(ps, p + ".rb2", c.C > 1 ? concat_channels({merged, slice_channels(f, 1, c.C)}) : merged);
    Tensor g0 = fd_project_null(*ph.op, slice_channels(g, 0, 1), 1);
    Tensor res = conv(ps, p + ".conv2", c.C > 1 ? concat_channels({g0, slice_channels(g, 1, c.C)}) : g0);
    return c.skip_intra_stage ? add(x, res) : res;
  }
  Tensor z = id_gradient_step(c, ph, x);
  Tensor h = rb(ps, p + ".rb2", rb(ps, p + ".rb1", conv(ps, p + ".conv1", z)));
  // "fixed": the last Conv is frozen to weight [1,0,...,0], bias 0.
  Tensor res = c.variant == PlainIdVariant::kFixed ? slice_channels(h, 0, 1) : conv(ps, p + ".conv2", h);
  return c.skip_intra_stage ? add(z, res) : res;
}

Tensor run_group(const ModelConfig& c, const ParameterStore& ps, std::size_t group, std::size_t level,
                 std::size_t phys_r, Tensor x, const Physics& ph) {
  for (std::size_t k = 1; k <= c.K; ++k) {
    const StageSite site{stage_prefix(c, group, k), level, phys_r};
    x = c.framework == Framework::kPgd ? stage_pgd(c, ps, site, x, ph) : stage_rnd(c, ps, site, x, ph);
  }
  return x;
}

}  // namespace

std::string to_string(Framework v) { return enum_name(v, kFrameworks); }
std::string to_string(Architecture v) { return enum_name(v, kArchitectures); }
std::string to_string(Fusion v) { return enum_name(v, kFusions); }
std::string to_string(PlainIdVariant v) { return enum_name(v, kVariants); }
Framework parse_framework(const std::string& s) { return parse_enum(s, kFrameworks, "framework"); }
Architecture parse_architecture(const std::string& s) { return parse_enum(s, kArchitectures, "architecture"); }
Fusion parse_fusion(const std::string& s) { return parse_enum(s, kFusions, "fusion"); }
PlainIdVariant parse_variant(const std::string& s) { return parse_enum(s, kVariants, "variant"); }

void ModelConfig::validate() const {
  if (block < 1) throw ConfigError("block must be >= 1");
  SamplingOperator::measurements_for(block, gamma);
  if (C < 1 || D < 1) throw ConfigError("C and D must be >= 1");
  if (K < 1) throw ConfigError("K must be >= 1");
  if (q && *q > D) throw ConfigError("q = " + std::to_string(*q) + " exceeds D = " + std::to_string(D));
  if (!(rho > 0.0) || !std::isfinite(rho)) throw ConfigError("rho must be > 0");
  if (proj_kernel % 2 == 0 || io_kernel % 2 == 0) throw ConfigError("proj_kernel and io_kernel must be odd");
  if (architecture == Architecture::kPlainId) {
    if (framework == Framework::kRnd && variant != PlainIdVariant::kBaseline) {
      throw ConfigError("the fixed and reduced variants are defined for PGD only");
    }
    if (variant == PlainIdVariant::kReduced && C < 2) throw ConfigError("the reduced variant needs C >= 2");
  } else if (framework == Framework::kRnd && C < D) {
    throw ConfigError("RND stages need C >= D");
  }
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "framework = " << to_string(framework) << "\n"
     << "architecture = " << to_string(architecture) << "\n"
     << "variant = " << to_string(variant) << "\n"
     << "block = " << block << "\n"
     << "gamma = " << format_double(gamma) << "\n"
     << "C = " << C << "\n"
     << "D = " << D << "\n"
     << "K = " << K << "\n"
     << "q = " << (q ? std::to_string(*q) : std::string("auto")) << "\n"
     << "rho = " << format_double(rho) << "\n"
     << "share_weights = " << (share_weights ? "true" : "false") << "\n"
     << "skip_encoder_decoder = " << (skip_encoder_decoder ? "true" : "false") << "\n"
     << "skip_intra_stage = " << (skip_intra_stage ? "true" : "false") << "\n"
     << "fusion = " << to_string(fusion) << "\n"
     << "proj_kernel = " << proj_kernel << "\n"
     << "io_kernel = " << io_kernel << "\n"
     << "learn_sampling = " << (learn_sampling ? "true" : "false") << "\n"
     << "sampling_seed = " << sampling_seed << "\n";
  return os.str();
}

bool ModelConfig::set(const std::string& key, const std::string& value) {
  if (key == "framework") framework = parse_framework(value);
  else if (key == "architecture") architecture = parse_architecture(value);
  else if (key == "variant") variant = parse_variant(value);
  else if (key == "block") block = parse_size(key, value);
  else if (key == "gamma") gamma = parse_double(key, value);
  else if (key == "C") C = parse_size(key, value);
  else if (key == "D") D = parse_size(key, value);
  else if (key == "K") K = parse_size(key, value);
  else if (key == "q") q = value == "auto" ? std::nullopt : std::optional<std::size_t>(parse_size(key, value));
  else if (key == "rho") rho = parse_double(key, value);
  else if (key == "share_weights") share_weights = parse_bool(key, value);
  else if (key == "skip_encoder_decoder") skip_encoder_decoder = parse_bool(key, value);
  else if (key == "skip_intra_stage") skip_intra_stage = parse_bool(key, value);
  else if (key == "fusion") fusion = parse_fusion(value);
  else if (key == "proj_kernel") proj_kernel = parse_size(key, value);
  else if (key == "io_kernel") io_kernel = parse_size(key, value);
  else if (key == "learn_sampling") learn_sampling = parse_bool(key, value);
  else if (key == "sampling_seed") sampling_seed = parse_size(key, value);
  else return false;
  return true;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ConfigError("parameter '" + name + "' missing from store");
  return it->second;
}

void ParameterStore::insert(const std::string& name, Tensor t) {
  if (!tensors_.emplace(name, std::move(t)).second) throw ConfigError("duplicate parameter '" + name + "'");
}

std::size_t ParameterStore::count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_) n += t.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : tensors_) {
    Tensor handle = t;
    handle.zero_grad();
  }
}

std::vector<ParamSpec> parameter_layout(const ModelConfig& c) {
  c.validate();
  std::vector<ParamSpec> out;
  if (c.learn_sampling) {
    out.push_back({"physics.A", {SamplingOperator::measurements_for(c.block, c.gamma), 1, c.block, c.block},
                   Init::kSampling});
  }
  const std::size_t stages = c.share_weights ? 1 : c.K;
  const std::size_t D = c.D;
  switch (c.architecture) {
    case Architecture::kPlainId:
      for (std::size_t k = 1; k <= stages; ++k) add_id_stage(out, c, stage_prefix(c, 0, k));
      break;
    case Architecture::kPlainFd:
      add_conv(out, "ext", D, 1, c.io_kernel);
      add_conv(out, "rec", 1, D, c.io_kernel);
      for (std::size_t k = 1; k <= stages; ++k) add_fd_stage(out, c, stage_prefix(c, 0, k), 1, 1);
      break;
    case Architecture::kPrlStar:
    case Architecture::kPrl: {
      const bool multiscale = c.architecture == Architecture::kPrl;
      const std::size_t tk = multiscale ? 2 : 3;
      add_conv(out, "ext", D, 1, c.io_kernel);
      add_conv(out, "rec", 1, D, c.io_kernel);
      add_conv(out, "sconv1", 4 * D, D, tk);
      add_conv(out, "sconv2", 16 * D, 4 * D, tk);
      if (multiscale) {
        // Transposed weights are [Cin, Cout, k, k].
        out.push_back({"tconv1.weight", {16 * D, 4 * D, 2, 2}, Init::kKaiming});
        out.push_back({"tconv1.bias", {4 * D}, Init::kZero});
        out.push_back({"tconv2.weight", {4 * D, D, 2, 2}, Init::kKaiming});
        out.push_back({"tconv2.bias", {D}, Init::kZero});
      } else {
        add_conv(out, "tconv1", 4 * D, 16 * D, 3);
        add_conv(out, "tconv2", D, 4 * D, 3);
      }
      for (std::size_t g = 1; g <= 6; ++g) {
        const std::size_t level = kGroupLevel[g - 1];
        for (std::size_t k = 1; k <= stages; ++k) {
          add_fd_stage(out, c, stage_prefix(c, g, k), level, multiscale ? level : 1);
        }
      }
      break;
    }
  }
  std::sort(out.begin(), out.end(), [](const ParamSpec& a, const ParamSpec& b) { return a.name < b.name; });
  return out;
}

std::size_t parameter_count(const ModelConfig& config) {
  std::size_t n = 0;
  for (const auto& spec : parameter_layout(config)) n += shape_numel(spec.shape);
  return n;
}

ParameterStore init_params(const ModelConfig& config, std::uint64_t seed) {
  ParameterStore store;
  std::mt19937_64 rng(seed);
  for (const auto& spec : parameter_layout(config)) {
    Tensor t;
    switch (spec.init) {
      case Init::kZero:
        t = Tensor::zeros(spec.shape, true);
        break;
      case Init::kSampling:
        t = SamplingOperator::generate(config.block, config.gamma, config.sampling_seed, true).kernel();
        break;
      case Init::kKaiming: {
        const std::size_t fan_in = spec.shape[1] * spec.shape[2] * spec.shape[3];
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        std::vector<double> values(shape_numel(spec.shape));
        for (double& v : values) v = normal(rng);
        t = Tensor::from_data(spec.shape, std::move(values), true);
        break;
      }
    }
    store.insert(spec.name, std::move(t));
  }
  return store;
}

SamplingOperator ModelConfig::make_operator() const {
  return SamplingOperator::generate(block, gamma, sampling_seed);
}

SamplingOperator resolve_sampling(const ModelConfig& config, const ParameterStore& store,
                                  const SamplingOperator& fixed) {
  if (!config.learn_sampling) return fixed;
  return SamplingOperator::from_kernel(store.get("physics.A"), fixed.seed());
}

Physics make_physics(const SamplingOperator& op, const Measurement& m) {
  Physics ph;
  ph.op = &op;
  ph.y = m.y;
  ph.aty = apply_adjoint(op, m.y);
  ph.onebit = m.onebit;
  return ph;
}

Tensor fd_gram(const Physics& ph, const Tensor& x, std::size_t r) {
  return fd_adjoint(*ph.op, physics_forward(ph, x, r), r);
}

Tensor fusion_forward(const ModelConfig& c, const ParameterStore& ps, const StageSite& site, const Tensor& x,
                      const Physics& ph) {
  const std::size_t r = site.phys_r;
  const std::size_t t = site.level * site.level * c.D;
  if (x.rank() != 4 || x.dim(1) != t) {
    throw DimensionError("fusion: expected " + std::to_string(t) + " channels, got " + shape_to_string(x.shape()));
  }
  Tensor out;
  if (c.fusion == Fusion::kAnalytic) {
    const std::size_t channels = t / (r * r);
    Tensor residual = sub(physics_forward(ph, x, r), tile_channels(ph.y, channels));
    out = fd_adjoint(*ph.op, residual, r);
  } else {
    Tensor fused = concat_channels({x, fd_gram(ph, x, r), pixel_unshuffle(ph.aty, r)});
    out = conv(ps, site.prefix + ".fusion", fused);
    if (fusion_sigmoid(c.fusion)) out = sigmoid(out);
  }
  const std::size_t q = c.effective_q();
  if (q < c.D) {
    std::vector<double> mask(t, 1.0);
    std::fill_n(mask.begin(), site.level * site.level * (c.D - q), 0.0);
    out = mask_channels(out, mask);
  }
  return out;
}

Tensor stage_pgd(const ModelConfig& c, const ParameterStore& ps, const StageSite& site, const Tensor& x,
                 const Physics& ph) {
  const std::string& p = site.prefix;
  Tensor z = sub(x, scale(fusion_forward(c, ps, site, x, ph), c.rho));
  Tensor h = rb(ps, p + ".rb2", rb(ps, p + ".rb1", conv(ps, p + ".conv1", z)));
  Tensor res = conv(ps, p + ".conv2", h);
  return c.skip_intra_stage ? add(z, res) : res;
}

Tensor stage_rnd(const ModelConfig& c, const ParameterStore& ps, const StageSite& site, const Tensor& x,
                 const Physics& ph) {
  const std::string& p = site.prefix;
  const std::size_t t = site.level * site.level * c.D;
  const std::size_t i = site.level * site.level * c.C;
  Tensor f = rb(ps, p + ".rb1", conv(ps, p + ".conv1", x));
  Tensor head = i == t ? f : slice_channels(f, 0, t);
  Tensor merged = fusion_forward(c, ps, site, head, ph);
  // The analytic variant returns a gradient; its merge is the gradient step.
  if (c.fusion == Fusion::kAnalytic) merged = sub(head, scale(merged, c.rho));
  Tensor r = i == t ? merged : concat_channels({merged, slice_channels(f, t, i)});
  Tensor g = rb(ps, p + ".rb2", r);
  Tensor g_head = fd_project_null(*ph.op, i == t ? g : slice_channels(g, 0, t), site.phys_r);
  Tensor g_null = i == t ? g_head : concat_channels({g_head, slice_channels(g, t, i)});
  Tensor res = conv(ps, p + ".conv2", g_null);
  return c.skip_intra_stage ? add(x, res) : res;
}

Tensor model_forward(const ModelConfig& c, const ParameterStore& ps, const SamplingOperator& op,
                     const Measurement& m) {
  c.validate();
  if (op.block() != c.block) {
    throw ConfigError("operator block size " + std::to_string(op.block()) + " differs from model block " +
                      std::to_string(c.block));
  }
  if (m.y.rank() != 4 || m.y.dim(1) != op.rows()) {
    throw DimensionError("measurement " + shape_to_string(m.y.shape()) + " does not match operator with M=" +
                         std::to_string(op.rows()));
  }
  const Physics ph = make_physics(op, m);
  const std::size_t h = ph.aty.dim(2), w = ph.aty.dim(3);
  Tensor x;
  switch (c.architecture) {
    case Architecture::kPlainId: {
      x = ph.aty;
      if (c.variant == PlainIdVariant::kReduced) {
        Tensor s = Tensor::zeros({x.dim(0), c.C - 1, h, w});
        for (std::size_t k = 1; k <= c.K; ++k) {
          const std::string p = stage_prefix(c, 0, k);
          Tensor z = id_gradient_step(c, ph, x);
          Tensor state = rb(ps, p + ".rb2", rb(ps, p + ".rb1", concat_channels({z, s})));
          x = slice_channels(state, 0, 1);
          s = slice_channels(state, 1, c.C);
        }
      } else {
        for (std::size_t k = 1; k <= c.K; ++k) x = id_stage(c, ps, stage_prefix(c, 0, k), x, ph);
      }
      break;
    }
    case Architecture::kPlainFd: {
      Tensor f = run_group(c, ps, 0, 1, 1, conv(ps, "ext", ph.aty), ph);
      x = conv(ps, "rec", f);
      break;
    }
    case Architecture::kPrlStar:
    case Architecture::kPrl: {
      const bool ms = c.architecture == Architecture::kPrl;
      if (ms && (h % 4 != 0 || w % 4 != 0)) {
        throw DimensionError("PRL needs image extents divisible by 4, got " + std::to_string(h) + "x" +
                             std::to_string(w));
      }
      const int stride = ms ? 2 : 1;
      auto phys = [&](std::size_t level) { return ms ? level : std::size_t{1}; };
      Tensor e1 = run_group(c, ps, 1, 1, 1, conv(ps, "ext", ph.aty), ph);
      Tensor e2 = run_group(c, ps, 2, 2, phys(2), conv(ps, "sconv1", e1, stride), ph);
      Tensor f = run_group(c, ps, 3, 4, phys(4), conv(ps, "sconv2", e2, stride), ph);
      f = run_group(c, ps, 4, 4, phys(4), f, ph);
      f = conv(ps, "tconv1", f, stride, ms);
      if (c.skip_encoder_decoder) f = add(f, e2);
      f = run_group(c, ps, 5, 2, phys(2), f, ph);
      f = conv(ps, "tconv2", f, stride, ms);
      if (c.skip_encoder_decoder) f = add(f, e1);
      f = run_group(c, ps, 6, 1, 1, f, ph);
      x = conv(ps, "rec", f);
      break;
    }
  }
  if (m.height != 0 && m.width != 0 && (m.height != h || m.width != w)) x = crop(x, m.height, m.width);
  return x;
}

std::size_t receptive_field(Architecture architecture, std::size_t K) {
  if (K < 1) throw ConfigError("receptive_field: K must be >= 1");
  std::size_t side = 0;
  if (architecture == Architecture::kPrlStar) {
    side = 84 * K + 13;
  } else if (architecture == Architecture::kPrl) {
    side = 140 * K + 8;
  } else {
    throw ConfigError("receptive_field is defined for prl and prl-star only");
  }
  return side * side;
}

}  // namespace unrollcs
