#include "wpclip/encoder.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>

#include "wpclip/errors.hpp"
#include "wpclip/rng.hpp"

namespace wpclip::encoder {

double l2_norm(std::span<const double> v) noexcept {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

void normalize(Embedding& v) {
  const double n = l2_norm(v);
  if (!std::isfinite(n)) throw BackendError("non-finite encoder activations");
  if (n == 0.0) throw BackendError("encoder produced a zero vector");
  for (double& x : v) x /= n;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DomainError("embedding dimension mismatch: " + std::to_string(a.size()) + " vs " +
                      std::to_string(b.size()));
  }
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

std::size_t approximate_token_count(std::string_view prompt) {
  std::size_t pieces = 0;
  std::size_t i = 0;
  auto kind = [](unsigned char c) {
    if (std::isspace(c)) return 0;
    if (std::isdigit(c)) return 2;  // digits tokenize one at a time
    if (std::isalpha(c) || c >= 0x80) return 1;
    return 3;
  };
  while (i < prompt.size()) {
    const int k = kind(static_cast<unsigned char>(prompt[i]));
    if (k == 0) {
      ++i;
      continue;
    }
    ++pieces;
    ++i;
    if (k == 2) continue;
    while (i < prompt.size() && kind(static_cast<unsigned char>(prompt[i])) == k) ++i;
  }
  return pieces + 2;
}

std::size_t EncoderBackend::count_tokens(std::string_view prompt) const {
  return approximate_token_count(prompt);
}

Embedding EncoderBackend::encode_image(const Image& image) const {
  if (image.empty()) throw InputError("cannot encode an image with zero dimensions");
  return encode_tensor(preprocess(image, preprocess_spec()));
}

Embedding EncoderBackend::encode_tensor(const ImageTensor& tensor) const {
  Embedding e = raw_image_features(tensor);
  if (e.size() != embed_dim()) {
    throw BackendError("image encoder returned " + std::to_string(e.size()) +
                       " values, expected " + std::to_string(embed_dim()));
  }
  normalize(e);
  return e;
}

std::vector<Embedding> EncoderBackend::raw_image_features_batch(
    std::span<const ImageTensor> tensors) const {
  std::vector<Embedding> out;
  out.reserve(tensors.size());
  for (const auto& t : tensors) out.push_back(raw_image_features(t));
  return out;
}

std::vector<Embedding> EncoderBackend::encode_tensors(std::span<const ImageTensor> tensors) const {
  auto out = raw_image_features_batch(tensors);
  for (auto& e : out) {
    if (e.size() != embed_dim()) throw BackendError("image encoder returned wrong width");
    normalize(e);
  }
  return out;
}

Embedding EncoderBackend::encode_text(std::string_view prompt) const {
  bool blank = true;
  for (unsigned char c : prompt) blank = blank && std::isspace(c);
  if (blank) throw InputError("empty text prompt");
  const std::size_t tokens = count_tokens(prompt);
  if (tokens > max_prompt_tokens()) {
    throw InputError("prompt exceeds token limit (" + std::to_string(tokens) + " > " +
                     std::to_string(max_prompt_tokens()) + "): " + std::string(prompt));
  }
  Embedding e = raw_text_features(prompt);
  if (e.size() != embed_dim()) throw BackendError("text encoder returned wrong width");
  normalize(e);
  return e;
}

std::vector<double> pooled_features(const ImageTensor& tensor, int grid) {
  const int s = tensor.size;
  std::vector<double> out(std::size_t(3) * grid * grid, 0.0);
  std::vector<int> counts(std::size_t(grid) * grid, 0);
  for (int y = 0; y < s; ++y) {
    const int gy = y * grid / s;
    for (int x = 0; x < s; ++x) {
      const int gx = x * grid / s;
      ++counts[std::size_t(gy) * grid + gx];
      for (int c = 0; c < 3; ++c) {
        out[(std::size_t(c) * grid + gy) * grid + gx] += tensor.at(c, y, x);
      }
    }
  }
  for (int c = 0; c < 3; ++c) {
    for (std::size_t cell = 0; cell < counts.size(); ++cell) {
      if (counts[cell] > 0) out[std::size_t(c) * counts.size() + cell] /= counts[cell];
    }
  }
  return out;
}

Embedding hashed_unit_vector(std::string_view text, std::size_t dim, std::uint64_t seed) {
  Rng rng(splitmix64(seed) ^ fnv1a64(text));
  Embedding v(dim);
  for (double& x : v) x = rng.normal();
  normalize(v);
  return v;
}

StubBackend::StubBackend(std::size_t embed_dim, std::uint64_t seed, PreprocessSpec spec)
    : embed_dim_(embed_dim), seed_(seed), spec_(spec) {
  if (embed_dim == 0) throw ConfigError("embed_dim must be positive");
  Rng rng(derive_seed(seed, "stub.image_projection"));
  projection_.resize(embed_dim * kPooledDim);
  for (double& w : projection_) w = rng.normal();
}

std::string StubBackend::model_id() const { return "stub-" + std::to_string(embed_dim_); }

nlohmann::json StubBackend::backend_config() const { return {{"seed", seed_}}; }

void StubBackend::save_weights(const std::filesystem::path&) const {
  // Fully determined by (embed_dim, seed, preprocess); nothing to write.
}

Embedding StubBackend::raw_image_features(const ImageTensor& tensor) const {
  const auto pooled = pooled_features(tensor, kPoolGrid);
  Embedding e(embed_dim_, 0.0);
  for (std::size_t r = 0; r < embed_dim_; ++r) {
    const double* row = projection_.data() + r * kPooledDim;
    double acc = 0.0;
    for (std::size_t k = 0; k < kPooledDim; ++k) acc += row[k] * pooled[k];
    e[r] = acc;
  }
  // Degenerate pooled vectors (e.g. exactly the channel mean everywhere) would
  // map to zero; fall back to a digest-keyed direction.
  if (l2_norm(e) < 1e-12) return hashed_unit_vector("image:zero", embed_dim_, seed_);
  return e;
}

Embedding StubBackend::raw_text_features(std::string_view prompt) const {
  return hashed_unit_vector(prompt, embed_dim_, seed_);
}

}  // namespace wpclip::encoder
