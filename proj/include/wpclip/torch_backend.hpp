#pragma once

// Dual encoder loaded from a TorchScript archive (tools/export_clip.py writes
// one from a pretrained CLIP model). Only built when libtorch is available.
//
// Export directory / checkpoint weight files:
//   model.pt      traced module with encode_image(pixels[B,3,S,S]) -> [B,D]
//                 and encode_text(ids[B,L], mask[B,L]) -> [B,D], unnormalized
//   vocab.json    BPE vocabulary
//   merges.txt    BPE merge ranks
//   export.json   exporter metadata (export directories only)

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "wpclip/checkpoint.hpp"
#include "wpclip/encoder.hpp"
#include "wpclip/trainable.hpp"

namespace wpclip::encoder {

class TorchScriptBackend final : public EncoderBackend, public TrainableBackend {
 public:
  ~TorchScriptBackend() override;

  // Fresh backend from an exporter output directory.
  static std::unique_ptr<TorchScriptBackend> from_export(const std::filesystem::path& dir);
  static std::unique_ptr<TorchScriptBackend> load(const std::filesystem::path& dir,
                                                  const CheckpointInfo& info);

  std::string kind() const override { return "torchscript"; }
  std::string model_id() const override;
  std::size_t embed_dim() const override;
  const PreprocessSpec& preprocess_spec() const override;
  std::size_t max_prompt_tokens() const override;
  std::size_t count_tokens(std::string_view prompt) const override;
  void set_mode(Mode m) override;

  void save_weights(const std::filesystem::path& dir) const override;
  nlohmann::json backend_config() const override;
  std::optional<std::string> known_checkpoint_id() const override;
  TrainableBackend* trainable() noexcept override { return this; }

  std::vector<std::string> parameter_names() const override;
  std::size_t parameter_count() const override;
  training::LossBreakdown compute_gradients(std::span<const training::TrainSample> batch,
                                            const scoring::PromptRegistry& registry,
                                            const scoring::ScoreMode& mode) override;
  double clip_gradients(double max_norm) override;
  std::unique_ptr<training::Optimizer> make_optimizer(const training::AdamConfig& cfg) override;

 protected:
  Embedding raw_image_features(const ImageTensor& tensor) const override;
  std::vector<Embedding> raw_image_features_batch(std::span<const ImageTensor> tensors) const override;
  Embedding raw_text_features(std::string_view prompt) const override;

 private:
  struct Impl;
  explicit TorchScriptBackend(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

}  // namespace wpclip::encoder
