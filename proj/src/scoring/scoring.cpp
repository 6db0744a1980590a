#include "wpclip/scoring.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <ostream>
#include <thread>

#include "wpclip/errors.hpp"

namespace wpclip::scoring {

namespace {

std::string format_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

double parse_double(std::string_view text, std::string_view what) {
  std::string s(text);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) {
    throw ConfigError("invalid " + std::string(what) + ": '" + s + "'");
  }
  return v;
}

// Majority mass m in [0.5, 1]; the minority is formed as 1 - m, which is exact
// in binary floating point (Sterbenz), so pole swaps are bitwise symmetric.
double orient(double majority, bool high_is_majority) {
  return high_is_majority ? majority : 1.0 - majority;
}

}  // namespace

std::string ScoreMode::to_string() const {
  if (kind == Kind::Softmax) return "softmax(tau=" + format_g(temperature) + ")";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.0e", epsilon);
  return "ratio(eps=" + std::string(buf) + ")";
}

ScoreMode ScoreMode::parse(std::string_view text) {
  auto body = [&](std::string_view name) -> std::optional<std::string_view> {
    if (text == name) return std::string_view{};
    if (text.size() > name.size() && text.substr(0, name.size()) == name) {
      auto rest = text.substr(name.size());
      if (rest.front() == ':') return rest.substr(1);
      // The to_string() form: name(key=value)
      if (rest.front() == '(' && rest.back() == ')') {
        auto inner = rest.substr(1, rest.size() - 2);
        auto eq = inner.find('=');
        return eq == std::string_view::npos ? inner : inner.substr(eq + 1);
      }
    }
    return std::nullopt;
  };
  if (auto b = body("softmax")) {
    const double t = b->empty() ? 100.0 : parse_double(*b, "softmax temperature");
    if (t <= 0.0) throw ConfigError("softmax temperature must be positive");
    return softmax(t);
  }
  if (auto b = body("ratio")) {
    const double e = b->empty() ? 1e-8 : parse_double(*b, "ratio epsilon");
    if (e <= 0.0) throw ConfigError("ratio epsilon must be positive");
    return ratio(e);
  }
  throw ConfigError("unknown score mode '" + std::string(text) +
                    "' (expected softmax[:tau] or ratio[:eps])");
}

double similarity(std::span<const double> image, std::span<const double> text) {
  if (image.size() != text.size()) {
    throw DomainError("similarity: dimension mismatch " + std::to_string(image.size()) + " vs " +
                      std::to_string(text.size()));
  }
  return std::inner_product(image.begin(), image.end(), text.begin(), 0.0);
}

double ratio_score(double a_low, double a_high, double epsilon) {
  if (!std::isfinite(a_low) || !std::isfinite(a_high) || a_low < 0.0 || a_high < 0.0) {
    throw DomainError("ratio score needs finite nonnegative inputs");
  }
  const double sum = a_low + a_high;
  if (sum < epsilon) {
    throw DomainError("ratio score degenerate: shifted similarities sum to " +
                      format_g(sum) + " < eps");
  }
  return orient(std::max(a_low, a_high) / sum, a_high >= a_low);
}

double pair_score(SimilarityPair sim, const ScoreMode& mode) {
  if (!std::isfinite(sim.s_low) || !std::isfinite(sim.s_high)) {
    throw DomainError("pair_score: non-finite similarity");
  }
  if (mode.kind == ScoreMode::Kind::Softmax) {
    if (!(mode.temperature > 0.0)) throw DomainError("softmax temperature must be positive");
    const double x = mode.temperature * (sim.s_high - sim.s_low);
    const double majority = 1.0 / (1.0 + std::exp(-std::abs(x)));
    return orient(majority, x >= 0.0);
  }
  const double a_low = std::max(0.0, (sim.s_low + 1.0) / 2.0);
  const double a_high = std::max(0.0, (sim.s_high + 1.0) / 2.0);
  return ratio_score(a_low, a_high, mode.epsilon);
}

PairScoreGradient pair_score_gradient(SimilarityPair sim, const ScoreMode& mode) {
  if (mode.kind == ScoreMode::Kind::Softmax) {
    const double x = mode.temperature * (sim.s_high - sim.s_low);
    const double m = 1.0 / (1.0 + std::exp(-std::abs(x)));
    const double g = mode.temperature * m * (1.0 - m);
    return {-g, g};
  }
  const double raw_low = (sim.s_low + 1.0) / 2.0;
  const double raw_high = (sim.s_high + 1.0) / 2.0;
  const double a_low = std::max(0.0, raw_low);
  const double a_high = std::max(0.0, raw_high);
  const double sum = a_low + a_high;
  if (sum < mode.epsilon) throw DomainError("ratio score degenerate");
  const double s2 = sum * sum;
  PairScoreGradient g;
  if (raw_high > 0.0) g.d_high = 0.5 * a_low / s2;
  if (raw_low > 0.0) g.d_low = -0.5 * a_high / s2;
  return g;
}

PromptRegistry::PromptRegistry() {
  for (Principle p : kAllPrinciples) {
    const auto& i = info(p);
    pairs_[index_of(p)] = {p, std::string(i.pole_low), std::string(i.pole_high)};
  }
}

PromptRegistry PromptRegistry::with_template(std::string templ) {
  const auto pos = templ.find("{}");
  if (pos == std::string::npos) {
    throw ConfigError("prompt template must contain '{}': " + templ);
  }
  PromptRegistry r;
  auto fill = [&](std::string_view label) {
    std::string out = templ;
    out.replace(pos, 2, label);
    return out;
  };
  for (Principle p : kAllPrinciples) {
    const auto& i = info(p);
    r.pairs_[index_of(p)] = {p, fill(i.pole_low), fill(i.pole_high)};
  }
  r.template_ = std::move(templ);
  return r;
}

void PromptRegistry::set(PromptPair pair) {
  if (pair.text_low.empty() || pair.text_high.empty()) {
    throw ConfigError("prompt texts must be non-empty");
  }
  if (pair.text_low == pair.text_high) {
    throw ConfigError("antonym prompts must differ: '" + pair.text_low + "'");
  }
  pairs_[index_of(pair.principle)] = std::move(pair);
}

nlohmann::json PromptRegistry::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& pair : pairs_) {
    j["pairs"][std::string(key(pair.principle))] = {{"low", pair.text_low},
                                                     {"high", pair.text_high}};
  }
  j["template"] = template_ ? nlohmann::json(*template_) : nlohmann::json(nullptr);
  return j;
}

PromptRegistry PromptRegistry::from_json(const nlohmann::json& j) {
  PromptRegistry r;
  if (j.contains("template") && j["template"].is_string()) {
    r = with_template(j["template"].get<std::string>());
  }
  if (j.contains("pairs")) {
    for (const auto& [k, v] : j["pairs"].items()) {
      const auto p = principle_from_key(k);
      if (!p) throw ConfigError("unknown principle key in prompt registry: " + k);
      r.set({*p, v.at("low").get<std::string>(), v.at("high").get<std::string>()});
    }
  }
  return r;
}

PromptEmbeddings embed_prompts(const encoder::EncoderBackend& backend,
                               const PromptRegistry& registry) {
  PromptEmbeddings out;
  for (Principle p : kAllPrinciples) {
    const auto& pair = registry[p];
    out[index_of(p)] = {backend.encode_text(pair.text_low), backend.encode_text(pair.text_high)};
  }
  return out;
}

ScoreVector score_embedding(std::span<const double> image, const PromptEmbeddings& prompts,
                            const ScoreMode& mode) {
  std::array<double, kNumPrinciples> values{};
  for (Principle p : kAllPrinciples) {
    const auto& [low, high] = prompts[index_of(p)];
    try {
      values[index_of(p)] = pair_score({similarity(image, low), similarity(image, high)}, mode);
    } catch (const DomainError& e) {
      throw DomainError(std::string(info(p).display) + ": " + e.what());
    }
  }
  return ScoreVector(values);
}

Scorer::Scorer(const encoder::EncoderBackend& backend, PromptRegistry registry, ScoreMode mode)
    : backend_(backend),
      registry_(std::move(registry)),
      mode_(mode),
      prompts_(embed_prompts(backend_, registry_)) {}

ScoreVector Scorer::score_image(const Image& image) const {
  return score_embedding(backend_.encode_image(image), prompts_, mode_);
}

ScoreVector Scorer::score_tensor(const ImageTensor& tensor) const {
  return score_embedding(backend_.encode_tensor(tensor), prompts_, mode_);
}

ScoreVector score_image(const encoder::EncoderBackend& backend, const PromptRegistry& registry,
                        const Image& image, const ScoreMode& mode) {
  return Scorer(backend, registry, mode).score_image(image);
}

BatchResult score_batch(const encoder::EncoderBackend& backend, const PromptRegistry& registry,
                        std::span<const BatchInput> inputs, const ScoreMode& mode,
                        const BatchOptions& options) {
  BatchResult result;
  if (inputs.empty()) return result;
  const Scorer scorer(backend, registry, mode);

  std::vector<std::optional<ScoreVector>> scores(inputs.size());
  std::vector<std::string> errors(inputs.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};

  auto worker = [&] {
    for (std::size_t i = next++; i < inputs.size() && !abort; i = next++) {
      try {
        scores[i] = scorer.score_image(decode_image(inputs[i].image_path));
      } catch (const std::exception& e) {
        errors[i] = e.what();
        if (options.strict) abort = true;
      }
    }
  };
  const unsigned jobs = std::max(1u, std::min<unsigned>(options.jobs, inputs.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < jobs; ++t) pool.emplace_back(worker);
  }

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (scores[i]) {
      result.items.push_back({inputs[i].image_id, *scores[i]});
    } else if (!errors[i].empty()) {
      if (options.strict) {
        throw Error("scoring failed for image '" + inputs[i].image_id + "': " + errors[i]);
      }
      result.failures.push_back({inputs[i].image_id, errors[i]});
    }
  }
  return result;
}

namespace {

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

std::string format_score(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_scores_csv(std::ostream& out, std::span<const ScoredImage> items,
                      const ScoreMode& mode, std::string_view checkpoint_id) {
  out << "image_id";
  for (Principle p : kAllPrinciples) out << ',' << key(p);
  out << ",mode,checkpoint_id\n";
  const std::string mode_s = csv_field(mode.to_string());
  const std::string ckpt = csv_field(checkpoint_id);
  for (const auto& item : items) {
    out << csv_field(item.image_id);
    for (double v : item.scores.values()) out << ',' << format_score(v);
    out << ',' << mode_s << ',' << ckpt << '\n';
  }
}

void write_scores_jsonl(std::ostream& out, std::span<const ScoredImage> items,
                        const ScoreMode& mode, std::string_view checkpoint_id) {
  for (const auto& item : items) {
    nlohmann::ordered_json j;
    j["image_id"] = item.image_id;
    for (Principle p : kAllPrinciples) j[std::string(key(p))] = item.scores[p];
    j["mode"] = mode.to_string();
    j["checkpoint_id"] = checkpoint_id;
    out << j.dump() << '\n';
  }
}

}  // namespace wpclip::scoring
