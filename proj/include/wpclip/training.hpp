#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wpclip/core.hpp"
#include "wpclip/encoder.hpp"
#include "wpclip/scoring.hpp"
#include "wpclip/trainable.hpp"

namespace wpclip::training {

// Mean squared error between predicted and ground-truth scores of one
// principle over a batch. Both sides must lie in [0,1].
double principle_loss(std::span<const double> pred, std::span<const double> gt);
double principle_loss(double pred, double gt);

// Sum of the five per-principle losses; DomainError unless exactly five
// finite nonnegative values are given.
double total_loss(std::span<const double> per_principle);

struct Split {
  std::vector<AnnotationRecord> train;
  std::vector<AnnotationRecord> val;
};

// Deterministic for a given seed; both sides keep the input order.
// val size = round(n * val_fraction); ConfigError if either side is empty.
Split split_dataset(std::span<const AnnotationRecord> records, double val_fraction,
                    std::uint64_t seed);

struct TrainConfig {
  double learning_rate = 1e-6;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 30;  // 0 returns the input backend unchanged
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
  scoring::ScoreMode score_mode{};
  std::size_t early_stop_patience = 5;  // 0 disables early stopping
  std::optional<double> grad_clip_norm = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double weight_decay = 0.0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainLogEntry {
  std::size_t epoch = 0;
  double train_total_loss = 0.0;
  double val_total_loss = 0.0;
  std::array<double, kNumPrinciples> per_principle_val_mse{};
  double wall_time_s = 0.0;

  nlohmann::json to_json() const;
  static TrainLogEntry from_json(const nlohmann::json& j);
};

struct TrainOptions {
  // Run directory: config.json, split.json, log.jsonl, best/, last/.
  std::filesystem::path run_dir;
  bool resume = false;  // continue from run_dir/last if present
  // Preprocessed tensors are kept in memory while they fit in this budget.
  std::size_t tensor_cache_bytes = std::size_t(1) << 30;
  std::function<void(const TrainLogEntry&)> on_epoch;
};

struct TrainResult {
  std::unique_ptr<encoder::EncoderBackend> backend;  // lowest validation loss
  std::filesystem::path best_checkpoint;
  std::string best_checkpoint_id;
  std::vector<TrainLogEntry> log;
  std::size_t best_epoch = 0;  // 0 = the untrained input
  double best_val_total_loss = 0.0;
  bool early_stopped = false;
  std::optional<std::string> aborted;  // diagnostic when a non-finite loss stopped the run
};

// Fine-tunes `backend` (which must be trainable) on the records' ground-truth
// score vectors, selecting the checkpoint with the lowest validation total loss.
TrainResult train(std::unique_ptr<encoder::EncoderBackend> backend,
                  const scoring::PromptRegistry& registry,
                  std::span<const AnnotationRecord> records, const TrainConfig& config,
                  const TrainOptions& options);

// Per-principle validation MSE of `backend` on `records` in eval mode.
std::array<double, kNumPrinciples> validation_mse(const encoder::EncoderBackend& backend,
                                                  const scoring::PromptRegistry& registry,
                                                  std::span<const ImageTensor> tensors,
                                                  std::span<const AnnotationRecord> records,
                                                  const scoring::ScoreMode& mode);

}  // namespace wpclip::training
