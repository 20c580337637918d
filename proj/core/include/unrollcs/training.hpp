#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "unrollcs/model.hpp"
#include "unrollcs/tensor.hpp"

namespace unrollcs {

struct TrainConfig {
  std::size_t batch_size = 4;
  std::size_t patch = 64;
  std::size_t steps = 1000;
  double lr = 1e-4;
  // Updates after step p (1-based) use lr * factor^(number of points < step).
  std::vector<std::size_t> lr_decay_points;
  double lr_decay_factor = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 1;
  // Measurement noise on the 0-255 scale.
  double sigma_train = 0.0;
  bool onebit = false;
  bool augment = true;
  // Write the checkpoint every n steps (0: only at the end).
  std::size_t checkpoint_every = 0;

  void validate(const ModelConfig& model) const;
  double lr_at(std::size_t step) const;
  std::string to_text() const;
  bool set(const std::string& key, const std::string& value);
};

// mean((x - x_hat)^2)
Tensor mse_loss(const Tensor& x, const Tensor& x_hat);

struct AdamState {
  std::size_t t = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam over every array of `store`; gradients are zeroed
// afterwards. Arrays without a gradient count as zero gradient. Throws
// ContractError when no array carries a gradient.
void adam_step(ParameterStore& store, AdamState& state, double lr, const AdamOptions& options = {});

// Element `index` of the dihedral group of the square applied to the last two
// axes: identity, rot90, rot180, rot270, then flip-h composed with each.
Tensor augment(const Tensor& patch, int index);

struct HistoryEntry {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainState {
  ParameterStore params;
  AdamState adam;
  // Completed updates.
  std::size_t step = 0;
};

// Fresh parameters (seeded by train.seed) and empty optimizer state.
TrainState initial_state(const ModelConfig& model, const TrainConfig& train);

using StepCallback = std::function<void(const HistoryEntry&, const TrainState&)>;

// Runs updates state.step+1 .. train.steps on in-memory images [1,1,H,W].
// Batch contents and noise of step s depend only on (train.seed, s), so a
// resumed run repeats the uninterrupted one exactly.
std::vector<HistoryEntry> train_on(const ModelConfig& model, const TrainConfig& train,
                                   const std::vector<Tensor>& images, TrainState& state,
                                   const StepCallback& on_step = {});

struct TrainOptions {
  std::optional<std::filesystem::path> resume_from;
  StepCallback on_step;
};

// Loads the dataset directory, trains, and writes `out_checkpoint`
// periodically and at the end.
std::vector<HistoryEntry> train(const ModelConfig& model, const TrainConfig& train,
                                const std::filesystem::path& dataset_dir,
                                const std::filesystem::path& out_checkpoint, const TrainOptions& options = {});

// Images of a directory, rejecting any smaller than `patch`.
std::vector<Tensor> load_dataset(const std::filesystem::path& dir, std::size_t patch);

}  // namespace unrollcs
