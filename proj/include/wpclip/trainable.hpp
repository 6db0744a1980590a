#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "wpclip/core.hpp"
#include "wpclip/image.hpp"
#include "wpclip/scoring.hpp"

namespace wpclip::training {

struct TrainSample {
  const ImageTensor* image = nullptr;
  ScoreVector gt;
};

// Per-principle batch MSE; the optimized objective is their sum.
struct LossBreakdown {
  std::array<double, kNumPrinciples> per_principle{};
  double total() const { return std::accumulate(per_principle.begin(), per_principle.end(), 0.0); }
};

struct AdamConfig {
  double learning_rate = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW style) when nonzero
};

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step() = 0;
  virtual std::uint64_t steps() const = 0;
  virtual void save_state(const std::filesystem::path& file) const = 0;
  virtual void load_state(const std::filesystem::path& file) = 0;
};

}  // namespace wpclip::training

namespace wpclip::encoder {

// Gradient access for backends that can be fine-tuned. One training run owns
// the backend exclusively.
class TrainableBackend {
 public:
  virtual ~TrainableBackend() = default;

  // Stable, ordered parameter enumeration.
  virtual std::vector<std::string> parameter_names() const = 0;
  virtual std::size_t parameter_count() const = 0;

  // Zeroes gradients, then backpropagates the summed per-principle MSE of the
  // antonym-pair scores over `batch`. Returns the forward losses.
  virtual training::LossBreakdown compute_gradients(std::span<const training::TrainSample> batch,
                                                    const scoring::PromptRegistry& registry,
                                                    const scoring::ScoreMode& mode) = 0;

  // Rescales gradients so their global L2 norm is at most max_norm; returns
  // the norm before clipping.
  virtual double clip_gradients(double max_norm) = 0;

  virtual std::unique_ptr<training::Optimizer> make_optimizer(const training::AdamConfig& cfg) = 0;
};

}  // namespace wpclip::encoder
