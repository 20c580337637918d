#include "unrollcs/training.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "config_parse.hpp"
#include "unrollcs/checkpoint.hpp"
#include "unrollcs/error.hpp"
#include "unrollcs/image_io.hpp"
#include "unrollcs/ops.hpp"
#include "unrollcs/sampling.hpp"

namespace unrollcs {

namespace fs = std::filesystem;

void TrainConfig::validate(const ModelConfig& model) const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (patch < 1 || patch % model.block != 0) {
    throw ConfigError("patch " + std::to_string(patch) + " must be a positive multiple of block " +
                      std::to_string(model.block));
  }
  if (model.architecture == Architecture::kPrl && patch % 4 != 0) {
    throw ConfigError("prl needs a patch divisible by 4");
  }
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be > 0");
  for (std::size_t i = 1; i < lr_decay_points.size(); ++i) {
    if (lr_decay_points[i] <= lr_decay_points[i - 1]) throw ConfigError("lr_decay_points must be strictly increasing");
  }
  if (!(lr_decay_factor > 0.0)) throw ConfigError("lr_decay_factor must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("eps must be > 0");
  if (!(sigma_train >= 0.0)) throw ConfigError("sigma_train must be >= 0");
}

double TrainConfig::lr_at(std::size_t step) const {
  double out = lr;
  for (const std::size_t p : lr_decay_points) {
    if (step > p) out *= lr_decay_factor;
  }
  return out;
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "batch_size = " << batch_size << "\n"
     << "patch = " << patch << "\n"
     << "steps = " << steps << "\n"
     << "lr = " << cfg::format_double(lr) << "\n"
     << "lr_decay_points = ";
  for (std::size_t i = 0; i < lr_decay_points.size(); ++i) os << (i ? "," : "") << lr_decay_points[i];
  os << "\n"
     << "lr_decay_factor = " << cfg::format_double(lr_decay_factor) << "\n"
     << "beta1 = " << cfg::format_double(beta1) << "\n"
     << "beta2 = " << cfg::format_double(beta2) << "\n"
     << "eps = " << cfg::format_double(eps) << "\n"
     << "seed = " << seed << "\n"
     << "sigma_train = " << cfg::format_double(sigma_train) << "\n"
     << "onebit = " << (onebit ? "true" : "false") << "\n"
     << "augment = " << (augment ? "true" : "false") << "\n"
     << "checkpoint_every = " << checkpoint_every << "\n";
  return os.str();
}

bool TrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "batch_size") batch_size = cfg::parse_size(key, value);
  else if (key == "patch") patch = cfg::parse_size(key, value);
  else if (key == "steps") steps = cfg::parse_size(key, value);
  else if (key == "lr") lr = cfg::parse_double(key, value);
  else if (key == "lr_decay_points") {
    lr_decay_points.clear();
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) lr_decay_points.push_back(cfg::parse_size(key, item));
    }
  } else if (key == "lr_decay_factor") lr_decay_factor = cfg::parse_double(key, value);
  else if (key == "beta1") beta1 = cfg::parse_double(key, value);
  else if (key == "beta2") beta2 = cfg::parse_double(key, value);
  else if (key == "eps") eps = cfg::parse_double(key, value);
  else if (key == "seed") seed = cfg::parse_size(key, value);
  else if (key == "sigma_train") sigma_train = cfg::parse_double(key, value);
  else if (key == "onebit") onebit = cfg::parse_bool(key, value);
  else if (key == "augment") augment = cfg::parse_bool(key, value);
  else if (key == "checkpoint_every") checkpoint_every = cfg::parse_size(key, value);
  else return false;
  return true;
}

Tensor mse_loss(const Tensor& x, const Tensor& x_hat) {
  if (x.shape() != x_hat.shape()) {
    throw DimensionError("mse_loss: shape mismatch " + shape_to_string(x.shape()) + " vs " +
                         shape_to_string(x_hat.shape()));
  }
  return mean(square(sub(x_hat, x)));
}

void adam_step(ParameterStore& store, AdamState& state, double lr, const AdamOptions& o) {
  bool any = false;
  for (const auto& [name, t] : store.tensors()) any = any || t.has_grad();
  if (!any) throw ContractError("adam_step: no parameter carries a gradient; call backward() first");
  ++state.t;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.t));
  for (const auto& [name, t] : store.tensors()) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    Tensor p = t;
    auto w = p.mutable_data();
    m.resize(w.size(), 0.0);
    v.resize(w.size(), 0.0);
    const bool has = p.has_grad();
    const auto g = has ? p.grad() : std::span<const double>();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * gi;
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + o.eps);
    }
  }
  store.zero_grad();
}

Tensor augment(const Tensor& patch, int index) {
  if (index < 0 || index > 7) throw ConfigError("augment index " + std::to_string(index) + " outside 0..7");
  if (patch.rank() < 2) throw DimensionError("augment: expected at least 2 axes");
  const std::size_t n = patch.dim(patch.rank() - 1);
  if (patch.dim(patch.rank() - 2) != n) {
    throw DimensionError("augment: patch must be square, got " + shape_to_string(patch.shape()));
  }
  const std::size_t plane = n * n, planes = patch.numel() / plane;
  const int rot = index % 4;
  const bool flip = index >= 4;
  const auto src = patch.data();
  std::vector<double> out(src.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const double* s = src.data() + p * plane;
    double* d = out.data() + p * plane;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        // Flip is applied last: read column n-1-j of the rotated patch.
        const std::size_t jj = flip ? n - 1 - j : j;
        std::size_t si = i, sj = jj;
        // Counter-clockwise rotation by 90 degrees: r[i][j] = s[j][n-1-i].
        for (int r = 0; r < rot; ++r) {
          const std::size_t ti = sj, tj = n - 1 - si;
          si = ti;
          sj = tj;
        }
        d[i * n + j] = s[si * n + sj];
      }
    }
  }
  return Tensor::from_data(patch.shape(), std::move(out));
}

TrainState initial_state(const ModelConfig& model, const TrainConfig& train) {
  model.validate();
  TrainState st;
  st.params = init_params(model, train.seed);
  return st;
}

namespace {

std::uint64_t step_seed(std::uint64_t seed, std::size_t step, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(step) * 4 + stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

Tensor make_batch(const TrainConfig& train, const std::vector<Tensor>& images, std::size_t step) {
  std::mt19937_64 rng(step_seed(train.seed, step, 0));
  const std::size_t p = train.patch, plane = p * p;
  std::vector<double> data(train.batch_size * plane);
  for (std::size_t b = 0; b < train.batch_size; ++b) {
    const Tensor& img = images[std::uniform_int_distribution<std::size_t>(0, images.size() - 1)(rng)];
    const std::size_t h = img.dim(2), w = img.dim(3);
    const std::size_t y0 = std::uniform_int_distribution<std::size_t>(0, h - p)(rng);
    const std::size_t x0 = std::uniform_int_distribution<std::size_t>(0, w - p)(rng);
    const int aug = train.augment ? std::uniform_int_distribution<int>(0, 7)(rng) : 0;
    std::vector<double> crop(plane);
    const auto src = img.data();
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < p; ++j) crop[i * p + j] = src[(y0 + i) * w + x0 + j];
    Tensor c = Tensor::from_data({1, 1, p, p}, std::move(crop));
    if (aug != 0) c = augment(c, aug);
    std::copy(c.data().begin(), c.data().end(), data.begin() + static_cast<std::ptrdiff_t>(b * plane));
  }
  return Tensor::from_data({train.batch_size, 1, p, p}, std::move(data));
}

}  // namespace

std::vector<HistoryEntry> train_on(const ModelConfig& model, const TrainConfig& train,
                                   const std::vector<Tensor>& images, TrainState& state,
                                   const StepCallback& on_step) {
  model.validate();
  train.validate(model);
  if (images.empty()) throw DataError("training set is empty");
  for (const auto& img : images) {
    if (img.rank() != 4 || img.dim(0) != 1 || img.dim(1) != 1 || img.dim(2) < train.patch ||
        img.dim(3) < train.patch) {
      throw DataError("training image " + shape_to_string(img.shape()) + " is smaller than patch " +
                      std::to_string(train.patch));
    }
  }
  const SamplingOperator fixed = model.make_operator();
  const AdamOptions adam{train.beta1, train.beta2, train.eps};
  std::vector<HistoryEntry> history;
  while (state.step < train.steps) {
    const std::size_t step = state.step + 1;
    const Tensor x = make_batch(train, images, step);
    const SamplingOperator op = resolve_sampling(model, state.params, fixed);
    const SampleOptions so{train.sigma_train, step_seed(train.seed, step, 1), false};
    const Measurement m = train.onebit ? onebit_sample(op, x, so) : sample(op, x, so);
    const Tensor loss = mse_loss(x, model_forward(model, state.params, op, m));
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericError("training diverged: loss " + std::to_string(value) + " at step " + std::to_string(step));
    }
    loss.backward();
    const double lr = train.lr_at(step);
    adam_step(state.params, state.adam, lr, adam);
    state.step = step;
    history.push_back({step, value, lr});
    if (on_step) on_step(history.back(), state);
  }
  return history;
}

std::vector<Tensor> load_dataset(const fs::path& dir, std::size_t patch) {
  std::vector<Tensor> images;
  for (const auto& path : list_images(dir)) {
    Tensor img = load_image(path);
    if (img.dim(2) < patch || img.dim(3) < patch) {
      throw DataError(path.string() + ": " + std::to_string(img.dim(2)) + "x" + std::to_string(img.dim(3)) +
                      " is smaller than patch " + std::to_string(patch));
    }
    images.push_back(std::move(img));
  }
  if (images.empty()) throw DataError(dir.string() + ": no .pgm or .png images");
  return images;
}

std::vector<HistoryEntry> train(const ModelConfig& model, const TrainConfig& train, const fs::path& dataset_dir,
                                const fs::path& out_checkpoint, const TrainOptions& options) {
  model.validate();
  train.validate(model);
  const auto images = load_dataset(dataset_dir, train.patch);
  Checkpoint ckpt;
  ckpt.model = model;
  ckpt.train_text = train.to_text();
  ckpt.seed = train.seed;
  if (options.resume_from) {
    Checkpoint prev = load_checkpoint(*options.resume_from, model);
    if (prev.seed != train.seed) throw ConfigError("resume: checkpoint seed differs from train seed");
    ckpt.state = std::move(prev.state);
  } else {
    ckpt.state = initial_state(model, train);
  }
  const auto cb = [&](const HistoryEntry& e, const TrainState& st) {
    if (options.on_step) options.on_step(e, st);
    if (train.checkpoint_every != 0 && e.step % train.checkpoint_every == 0 && e.step != train.steps) {
      save_checkpoint(ckpt, out_checkpoint);
    }
  };
  auto history = train_on(model, train, images, ckpt.state, cb);
  save_checkpoint(ckpt, out_checkpoint);
  return history;
}

}  // namespace unrollcs
