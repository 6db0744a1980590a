#pragma once

// Antonym-prompt scoring head. For each principle the image embedding is
// compared with the embeddings of the two pole prompts; the two similarities
// are turned into a bounded score by normalizing the high-pole mass.

#include <array>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "wpclip/core.hpp"
#include "wpclip/encoder.hpp"

namespace wpclip::scoring {

struct ScoreMode {
  enum class Kind { Softmax, Ratio };

  Kind kind = Kind::Softmax;
  double temperature = 100.0;  // softmax only
  double epsilon = 1e-8;       // ratio only

  static ScoreMode softmax(double temperature = 100.0) { return {Kind::Softmax, temperature}; }
  static ScoreMode ratio(double epsilon = 1e-8) { return {Kind::Ratio, 100.0, epsilon}; }

  // "softmax(tau=100)" / "ratio(eps=1e-08)". parse() also accepts the bare
  // names and "softmax:<tau>" / "ratio:<eps>".
  std::string to_string() const;
  static ScoreMode parse(std::string_view text);

  friend bool operator==(const ScoreMode&, const ScoreMode&) = default;
};

struct SimilarityPair {
  double s_low = 0.0;
  double s_high = 0.0;
};

// Dot product of two embeddings. DomainError on dimension mismatch.
double similarity(std::span<const double> image, std::span<const double> text);

// High-pole mass of an antonym pair, in [0,1].
//
//   softmax: exp(t*s_high) / (exp(t*s_high) + exp(t*s_low))
//   ratio:   a_high / (a_high + a_low), a = (s + 1) / 2 clamped to >= 0
//
// Swapping the poles yields exactly 1 - score in both modes.
double pair_score(SimilarityPair sim, const ScoreMode& mode);

// The ratio form on already-shifted, nonnegative similarities.
double ratio_score(double a_low, double a_high, double epsilon);

struct PairScoreGradient {
  double d_low = 0.0;   // d score / d s_low
  double d_high = 0.0;  // d score / d s_high
};
PairScoreGradient pair_score_gradient(SimilarityPair sim, const ScoreMode& mode);

class PromptRegistry {
 public:
  // Bare pole labels ("Linear", "Painterly", ...).
  PromptRegistry();

  // Every label is substituted into `templ` at "{}" (e.g. "a {} painting").
  static PromptRegistry with_template(std::string templ);

  const PromptPair& operator[](Principle p) const { return pairs_[index_of(p)]; }
  void set(PromptPair pair);
  const std::optional<std::string>& prompt_template() const noexcept { return template_; }

  nlohmann::json to_json() const;
  static PromptRegistry from_json(const nlohmann::json& j);

 private:
  std::array<PromptPair, kNumPrinciples> pairs_;
  std::optional<std::string> template_;
};

// Text embeddings of every prompt, [principle] -> (low, high).
using PromptEmbeddings = std::array<std::pair<encoder::Embedding, encoder::Embedding>,
                                    kNumPrinciples>;

PromptEmbeddings embed_prompts(const encoder::EncoderBackend& backend,
                               const PromptRegistry& registry);

// Scores one image embedding against precomputed prompt embeddings.
ScoreVector score_embedding(std::span<const double> image, const PromptEmbeddings& prompts,
                            const ScoreMode& mode);

// Caches the prompt embeddings once and scores any number of images.
class Scorer {
 public:
  Scorer(const encoder::EncoderBackend& backend, PromptRegistry registry, ScoreMode mode);

  ScoreVector score_image(const Image& image) const;
  ScoreVector score_tensor(const ImageTensor& tensor) const;
  const PromptEmbeddings& prompt_embeddings() const noexcept { return prompts_; }
  const ScoreMode& mode() const noexcept { return mode_; }
  const encoder::EncoderBackend& backend() const noexcept { return backend_; }

 private:
  const encoder::EncoderBackend& backend_;
  PromptRegistry registry_;
  ScoreMode mode_;
  PromptEmbeddings prompts_;
};

ScoreVector score_image(const encoder::EncoderBackend& backend, const PromptRegistry& registry,
                        const Image& image, const ScoreMode& mode = {});

struct ScoredImage {
  std::string image_id;
  ScoreVector scores;
};

struct ScoreFailure {
  std::string image_id;
  std::string message;
};

struct BatchResult {
  std::vector<ScoredImage> items;
  std::vector<ScoreFailure> failures;
};

struct BatchInput {
  std::string image_id;
  std::string image_path;
};

struct BatchOptions {
  bool strict = false;  // first failure throws instead of being collected
  unsigned jobs = 1;
};

// Order-preserving; prompt embeddings are computed once for the whole batch.
BatchResult score_batch(const encoder::EncoderBackend& backend, const PromptRegistry& registry,
                        std::span<const BatchInput> inputs, const ScoreMode& mode = {},
                        const BatchOptions& options = {});

// Score file: header `image_id,<five principle keys>,mode,checkpoint_id`.
void write_scores_csv(std::ostream& out, std::span<const ScoredImage> items,
                      const ScoreMode& mode, std::string_view checkpoint_id);
void write_scores_jsonl(std::ostream& out, std::span<const ScoredImage> items,
                        const ScoreMode& mode, std::string_view checkpoint_id);

struct ScoreFile {
  std::vector<ScoredImage> items;
  std::string mode;           // as recorded in the file (empty if absent)
  std::string checkpoint_id;  // idem
};

// Reads either format back. '#' comment lines (CSV) and a leading
// {"config": ...} line (JSON lines) are skipped. InputError on malformed rows.
ScoreFile read_scores(const std::filesystem::path& path);

}  // namespace wpclip::scoring
