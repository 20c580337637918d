#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "unrollcs/sampling.hpp"
#include "unrollcs/tensor.hpp"

namespace unrollcs {

enum class Framework { kPgd, kRnd };
enum class Architecture { kPlainId, kPlainFd, kPrlStar, kPrl };
enum class Fusion { kAnalytic, kConv1, kConv1Sigmoid, kConv3, kConv3Sigmoid };
// Image-domain pilot variants; ignored by the feature-domain architectures.
enum class PlainIdVariant { kBaseline, kFixed, kReduced };

std::string to_string(Framework v);
std::string to_string(Architecture v);
std::string to_string(Fusion v);
std::string to_string(PlainIdVariant v);
Framework parse_framework(const std::string& s);
Architecture parse_architecture(const std::string& s);
Fusion parse_fusion(const std::string& s);
PlainIdVariant parse_variant(const std::string& s);

struct ModelConfig {
  Framework framework = Framework::kPgd;
  Architecture architecture = Architecture::kPrl;
  PlainIdVariant variant = PlainIdVariant::kBaseline;
  std::size_t block = 32;
  double gamma = 0.1;
  std::size_t C = 8;
  std::size_t D = 8;
  // Stages per group (PRL, PRL-star) or total stages (plain variants).
  std::size_t K = 5;
  // Physics feature dimensionality; unset means q = D.
  std::optional<std::size_t> q;
  double rho = 1.0;
  bool share_weights = false;
  bool skip_encoder_decoder = true;
  bool skip_intra_stage = true;
  Fusion fusion = Fusion::kConv3Sigmoid;
  // Kernel size of the stage Conv1/Conv2 projections.
  std::size_t proj_kernel = 1;
  // Kernel size of H_ext and H_rec.
  std::size_t io_kernel = 3;
  // Registers A as the trainable parameter "physics.A".
  bool learn_sampling = false;
  // Seed of the sampling matrix (fixed A, or the initial learned A).
  std::uint64_t sampling_seed = 0;

  SamplingOperator make_operator() const;

  std::size_t effective_q() const { return q.value_or(D); }

  // Throws ConfigError on inconsistent settings.
  void validate() const;

  // One "key = value" line per field, fixed order. Hashing this text gives the
  // checkpoint config hash.
  std::string to_text() const;
  // Returns false when `key` is not a model key; throws ConfigError on a bad
  // value.
  bool set(const std::string& key, const std::string& value);
};

// Named trainable arrays in sorted order. Shared stage weights appear once.
class ParameterStore {
 public:
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  void insert(const std::string& name, Tensor t);

  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  std::size_t count() const;
  void zero_grad();

 private:
  std::map<std::string, Tensor> tensors_;
};

enum class Init { kKaiming, kZero, kSampling };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init = Init::kKaiming;
};

// The complete parameter set implied by a config, sorted by name. A pure
// function of the config.
std::vector<ParamSpec> parameter_layout(const ModelConfig& config);
std::size_t parameter_count(const ModelConfig& config);

// Kaiming fan-in Gaussian weights, zero biases, zero final conv of every
// residual branch. With learn_sampling, "physics.A" is generated from
// (block, gamma, seed).
ParameterStore init_params(const ModelConfig& config, std::uint64_t seed);

// Operator to use with `store`: the learned A when the config trains it,
// otherwise `fixed`.
SamplingOperator resolve_sampling(const ModelConfig& config, const ParameterStore& store,
                                  const SamplingOperator& fixed);

// Per-forward physics state shared by all stages.
struct Physics {
  const SamplingOperator* op = nullptr;
  Tensor y;
  // A^T y at full resolution.
  Tensor aty;
  bool onebit = false;
};
Physics make_physics(const SamplingOperator& op, const Measurement& m);

// Where a stage lives: parameter prefix, feature downscaling `level` (channel
// multiplier level^2) and the downscaling used for the physics operators.
// PRL uses phys_r = level; PRL-star keeps full resolution (phys_r = 1).
struct StageSite {
  std::string prefix;
  std::size_t level = 1;
  std::size_t phys_r = 1;
};

// A^T A X in the feature domain (with sign() in the forward map for one-bit
// measurements).
Tensor fd_gram(const Physics& ph, const Tensor& x, std::size_t r);

Tensor fusion_forward(const ModelConfig& config, const ParameterStore& params, const StageSite& site,
                      const Tensor& x, const Physics& ph);
Tensor stage_pgd(const ModelConfig& config, const ParameterStore& params, const StageSite& site,
                 const Tensor& x, const Physics& ph);
Tensor stage_rnd(const ModelConfig& config, const ParameterStore& params, const StageSite& site,
                 const Tensor& x, const Physics& ph);

// Reconstruction [N,1,H,W] at the measured image extent.
Tensor model_forward(const ModelConfig& config, const ParameterStore& params, const SamplingOperator& op,
                     const Measurement& m);

// Closed-form receptive field area of the longest fully convolutional path.
std::size_t receptive_field(Architecture architecture, std::size_t K);

}  // namespace unrollcs
