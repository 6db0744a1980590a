#pragma once

// Dual-encoder backends. A backend turns images and text prompts into unit-norm
// embeddings in a shared space; the scoring head only ever sees those.

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "wpclip/image.hpp"

namespace wpclip::encoder {

enum class Mode { Train, Eval };

using Embedding = std::vector<double>;

double l2_norm(std::span<const double> v) noexcept;

// Normalizes in place. Throws BackendError on non-finite or zero vectors.
void normalize(Embedding& v);

// Cosine of two already-normalized vectors.
double cosine(std::span<const double> a, std::span<const double> b);

class TrainableBackend;

class EncoderBackend {
 public:
  virtual ~EncoderBackend() = default;

  // "stub", "projection_head" or "torchscript"; selects the checkpoint loader.
  virtual std::string kind() const = 0;
  virtual std::string model_id() const = 0;
  virtual std::size_t embed_dim() const = 0;
  virtual const PreprocessSpec& preprocess_spec() const = 0;

  // Token budget for encode_text, including start/end markers.
  virtual std::size_t max_prompt_tokens() const { return 77; }
  virtual std::size_t count_tokens(std::string_view prompt) const;

  Mode mode() const noexcept { return mode_; }
  virtual void set_mode(Mode m) { mode_ = m; }

  // Unit-norm embeddings. Eval-mode calls are deterministic and const-safe
  // for concurrent use.
  Embedding encode_image(const Image& image) const;
  Embedding encode_tensor(const ImageTensor& tensor) const;
  std::vector<Embedding> encode_tensors(std::span<const ImageTensor> tensors) const;
  Embedding encode_text(std::string_view prompt) const;

  // Writes weights plus backend-specific metadata into `dir`; see
  // checkpoint.hpp for the surrounding layout.
  virtual void save_weights(const std::filesystem::path& dir) const = 0;
  virtual nlohmann::json backend_config() const = 0;

  // Id of the checkpoint this backend was loaded from while its weights are
  // unchanged. Lets large backends skip re-hashing their weights.
  virtual std::optional<std::string> known_checkpoint_id() const { return std::nullopt; }

  // Non-null when the backend supports gradient updates.
  virtual TrainableBackend* trainable() noexcept { return nullptr; }

 protected:
  virtual Embedding raw_image_features(const ImageTensor& tensor) const = 0;
  virtual std::vector<Embedding> raw_image_features_batch(
      std::span<const ImageTensor> tensors) const;
  virtual Embedding raw_text_features(std::string_view prompt) const = 0;

 private:
  Mode mode_ = Mode::Eval;
};

// Weight-free deterministic test double.
//
// Text: a pseudo-random unit vector seeded by the prompt's digest.
// Images: a fixed seeded random projection of an 8x8 average-pooled copy of
// the preprocessed tensor. Nearby images therefore land near each other, which
// a pure digest could not provide.
class StubBackend final : public EncoderBackend {
 public:
  static constexpr int kPoolGrid = 8;
  static constexpr std::size_t kPooledDim = 3 * kPoolGrid * kPoolGrid;

  explicit StubBackend(std::size_t embed_dim = 512, std::uint64_t seed = 0,
                       PreprocessSpec spec = {});

  std::string kind() const override { return "stub"; }
  std::string model_id() const override;
  std::size_t embed_dim() const override { return embed_dim_; }
  const PreprocessSpec& preprocess_spec() const override { return spec_; }
  std::uint64_t seed() const noexcept { return seed_; }

  void save_weights(const std::filesystem::path& dir) const override;
  nlohmann::json backend_config() const override;

 protected:
  Embedding raw_image_features(const ImageTensor& tensor) const override;
  Embedding raw_text_features(std::string_view prompt) const override;

 private:
  std::size_t embed_dim_;
  std::uint64_t seed_;
  PreprocessSpec spec_;
  std::vector<double> projection_;  // embed_dim x kPooledDim, row-major
};

// Average-pools a (3,S,S) tensor onto a grid x grid lattice per channel.
std::vector<double> pooled_features(const ImageTensor& tensor, int grid);

// Seeded pseudo-random unit vector keyed by a text's digest.
Embedding hashed_unit_vector(std::string_view text, std::size_t dim, std::uint64_t seed);

// Approximate token count: word/number/punctuation pieces plus two markers.
std::size_t approximate_token_count(std::string_view prompt);

}  // namespace wpclip::encoder
