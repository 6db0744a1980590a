#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "wpclip/adam.hpp"
#include "wpclip/checkpoint.hpp"
#include "wpclip/encoder.hpp"
#include "wpclip/trainable.hpp"

namespace wpclip::encoder {

// Small trainable dual encoder with exact analytic gradients.
//
//   image: f_I = normalize(W_img * pool8x8(tensor))
//   text:  f_T = normalize(b_txt + W_txt * h(prompt))
//
// where h is the seeded digest-keyed unit vector of StubBackend. All three
// tensors are trainable and initialized from the seed. The shared offset
// b_txt keeps fresh prompt embeddings close together, so pole similarities
// differ by a few hundredths and a softmax head at tau=100 is not saturated.
class ProjectionHeadBackend final : public EncoderBackend, public TrainableBackend {
 public:
  struct Config {
    std::size_t embed_dim = 64;
    std::size_t text_feature_dim = 64;
    std::uint64_t seed = 0;
    double text_anchor = 16.0;  // norm of the shared text offset b_txt
    PreprocessSpec preprocess{};
  };

  explicit ProjectionHeadBackend(Config config);

  static std::unique_ptr<ProjectionHeadBackend> load(const std::filesystem::path& dir,
                                                     const CheckpointInfo& info);

  std::string kind() const override { return "projection_head"; }
  std::string model_id() const override;
  std::size_t embed_dim() const override { return config_.embed_dim; }
  const PreprocessSpec& preprocess_spec() const override { return config_.preprocess; }
  void save_weights(const std::filesystem::path& dir) const override;
  nlohmann::json backend_config() const override;
  TrainableBackend* trainable() noexcept override { return this; }

  std::vector<std::string> parameter_names() const override;
  std::size_t parameter_count() const override;
  training::LossBreakdown compute_gradients(std::span<const training::TrainSample> batch,
                                            const scoring::PromptRegistry& registry,
                                            const scoring::ScoreMode& mode) override;
  double clip_gradients(double max_norm) override;
  std::unique_ptr<training::Optimizer> make_optimizer(const training::AdamConfig& cfg) override;

  // Value/gradient views in parameter_names() order (for finite differences).
  std::vector<training::ParamRef> parameters();

  // Forward-only loss with the same definition compute_gradients optimizes.
  training::LossBreakdown evaluate_loss(std::span<const training::TrainSample> batch,
                                        const scoring::PromptRegistry& registry,
                                        const scoring::ScoreMode& mode) const;

 protected:
  Embedding raw_image_features(const ImageTensor& tensor) const override;
  Embedding raw_text_features(std::string_view prompt) const override;

 private:
  Embedding text_features(std::string_view prompt) const;

  Config config_;
  std::vector<double> w_img_, w_txt_;  // row-major embed_dim x in_dim
  std::vector<double> b_txt_;          // embed_dim
  std::vector<double> g_img_, g_txt_, g_btxt_;
};

}  // namespace wpclip::encoder
