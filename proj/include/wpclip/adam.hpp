#pragma once

#include <span>
#include <string>
#include <vector>

#include "wpclip/trainable.hpp"

namespace wpclip::training {

struct ParamRef {
  std::string name;
  std::span<double> value;
  std::span<const double> grad;
};

// Adaptive-moment gradient descent with bias correction, over externally
// owned parameter buffers.
class Adam final : public Optimizer {
 public:
  Adam(std::vector<ParamRef> params, AdamConfig config);

  void step() override;
  std::uint64_t steps() const override { return steps_; }
  void save_state(const std::filesystem::path& file) const override;
  void load_state(const std::filesystem::path& file) override;

 private:
  std::vector<ParamRef> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t steps_ = 0;
};

// Global L2 clipping across buffers; returns the pre-clip norm.
double clip_global_norm(std::span<const std::span<double>> grads, double max_norm);

}  // namespace wpclip::training
