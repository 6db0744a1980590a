#pragma once

// Client for an external multimodal judge that compares two paintings on
// one principle. Everything that touches the network sits behind Transport.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wpclip/core.hpp"
#include "wpclip/errors.hpp"
#include "wpclip/evaluation.hpp"
#include "wpclip/image.hpp"

namespace wpclip::judge {

struct ComposeOptions {
  int gutter = 16;  // white columns between the two images
  int height = 0;   // common height; 0 = the smaller input height
};

// Side-by-side composition: both images resized (aspect preserved) to a
// common height, separated by a white gutter.
Image compose_pair_image(const Image& left, const Image& right, const ComposeOptions& options = {});

struct JudgePrompt {
  Principle principle;
  std::string text;
  std::string schema_key;  // "Left painting has more <pole_low> style"
};

JudgePrompt build_prompt(Principle principle);

struct JudgeVerdict {
  bool left_wins_low_pole = false;
  std::string reasoning;
  std::string raw;
  double latency_ms = 0.0;
};

// Finds the first JSON object in `raw` that carries `schema_key`, skipping
// prose and code fences. ParseError (holding the raw text) when there is no
// such object or its value is not a boolean.
JudgeVerdict parse_verdict(std::string_view raw, std::string_view schema_key);

// Inverse of parse_verdict for well-formed verdicts.
std::string serialize_verdict(const JudgeVerdict& verdict, std::string_view schema_key);

struct JudgeRequest {
  std::string pair_id;
  Principle principle = Principle::LinearPainterly;
  bool swapped = false;  // true when the pair is shown in reversed order
  std::string prompt;
  std::vector<std::uint8_t> png;
};

// Failure reported by a transport. Non-retryable failures (bad credentials,
// malformed endpoint) skip the remaining attempts.
class TransportError : public BackendError {
 public:
  TransportError(const std::string& what, bool retryable) : BackendError(what), retryable_(retryable) {}
  bool retryable() const noexcept { return retryable_; }

 private:
  bool retryable_;
};

class Transport {
 public:
  virtual ~Transport() = default;
  // Returns the model's raw text answer.
  virtual std::string send(const JudgeRequest& request, std::chrono::milliseconds timeout) = 0;
};

struct JudgeClientConfig {
  std::string endpoint = "https://generativelanguage.googleapis.com/v1beta/openai/chat/completions";
  std::string model_name = "gemini-2.5-pro";
  std::string api_key_env = "WPCLIP_JUDGE_API_KEY";
  int max_retries = 3;  // retries after the first attempt
  int backoff_initial_ms = 1000;
  int backoff_max_ms = 60000;
  int timeout_ms = 120000;
  double requests_per_minute = 10.0;
  ComposeOptions compose;
  bool both_orderings = false;
  std::uint64_t seed = 0;  // backoff jitter

  void validate() const;
  // Never includes the key itself, only the variable name.
  nlohmann::json to_json() const;
};

// OpenAI-compatible chat-completions endpoint; the image goes inline as a
// base64 PNG data URL. The key is read from the environment on construction.
class HttpTransport : public Transport {
 public:
  explicit HttpTransport(const JudgeClientConfig& config);
  std::string send(const JudgeRequest& request, std::chrono::milliseconds timeout) override;
  const std::string& api_key() const noexcept { return api_key_; }

 private:
  std::string scheme_host_port_;
  std::string path_;
  std::string model_;
  std::string api_key_;
};

// Serves canned answers keyed by pair id (and ordering); used for offline
// runs and golden transcripts. Lines: {"pair_id", "swapped"?, "response"}.
class ReplayTransport : public Transport {
 public:
  explicit ReplayTransport(const std::filesystem::path& jsonl);
  explicit ReplayTransport(std::map<std::pair<std::string, bool>, std::string> responses);
  std::string send(const JudgeRequest& request, std::chrono::milliseconds timeout) override;

 private:
  std::map<std::pair<std::string, bool>, std::string> responses_;
};

using Clock = std::function<std::chrono::milliseconds()>;
using Sleeper = std::function<void(std::chrono::milliseconds)>;

Clock steady_clock();
Sleeper real_sleeper();

// Spaces request starts at least 60000/rpm ms apart. Shared by all workers.
class RateLimiter {
 public:
  RateLimiter(double requests_per_minute, Clock clock, Sleeper sleeper);
  void acquire();

 private:
  std::mutex mu_;
  std::chrono::milliseconds interval_;
  std::optional<std::chrono::milliseconds> next_;
  Clock clock_;
  Sleeper sleeper_;
};

struct JudgeOutcome {
  std::string pair_id;
  Principle principle = Principle::LinearPainterly;
  bool swapped = false;
  std::optional<JudgeVerdict> verdict;  // empty = abstained
  int attempts = 0;
  double latency_ms = 0.0;  // of the last attempt
  std::vector<std::chrono::milliseconds> backoffs;
  std::string error;  // last failure, when abstained

  // Verdict in the pair's original left/right frame.
  eval::Verdict original_frame_verdict() const;
};

class JudgeClient {
 public:
  JudgeClient(JudgeClientConfig config, Transport& transport, Clock clock = steady_clock(),
              Sleeper sleeper = real_sleeper());

  const JudgeClientConfig& config() const noexcept { return config_; }
  JudgeOutcome judge(const eval::PairComparison& pair, const Image& left, const Image& right,
                     bool swapped = false);

 private:
  JudgeClientConfig config_;
  Transport& transport_;
  Clock clock_;
  Sleeper sleeper_;
  RateLimiter limiter_;
  std::mutex rng_mu_;
  std::uint64_t jitter_state_;
};

// Sends the composed pair image, retrying with jittered exponential backoff.
// Never throws for transport or parse failures; those become abstentions.
JudgeOutcome judge_pair(JudgeClient& client, const eval::PairComparison& pair, const Image& left,
                        const Image& right);

using ImageLoader = std::function<Image(const std::string& image_id)>;

struct JudgeRun {
  eval::AccuracyTable table;
  std::optional<eval::AccuracyTable> swapped_table;  // both-orderings mode
  std::size_t consistent = 0;  // pairs whose two orderings agree
  std::vector<JudgeOutcome> outcomes;  // ordered as the pairs, swapped right after original

  nlohmann::json to_json() const;
};

// Images that fail to load abstain like any other failure.
JudgeRun evaluate_judge(JudgeClient& client, std::span<const eval::PairComparison> pairs,
                        const ImageLoader& loader, std::size_t jobs = 1);

// One JSON object per line: pair_id, principle, verdict, reasoning,
// latency_ms, attempts (plus order and error). `secrets` are redacted.
void write_outcomes_jsonl(std::ostream& out, std::span<const JudgeOutcome> outcomes,
                          std::span<const std::string> secrets = {});

// Replaces every occurrence of each non-empty secret with "[REDACTED]".
std::string redact(std::string text, std::span<const std::string> secrets);

}  // namespace wpclip::judge
