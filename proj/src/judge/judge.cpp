#include "wpclip/judge.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <regex>
#include <thread>

#include <httplib.h>

#include "wpclip/rng.hpp"

namespace wpclip::judge {

namespace {

// Length of the JSON object starting at raw[start] == '{', or 0 if the
// braces never balance. String literals are skipped so braces inside
// reasoning text do not count.
std::size_t object_extent(std::string_view raw, std::size_t start) {
  int depth = 0;
  bool in_string = false, escaped = false;
  for (std::size_t i = start; i < raw.size(); ++i) {
    const char c = raw[i];
    if (in_string) {
      if (escaped) {
        escaped = false;
      } else if (c == '\\') {
        escaped = true;
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') {
      in_string = true;
    } else if (c == '{') {
      ++depth;
    } else if (c == '}') {
      if (--depth == 0) return i - start + 1;
    }
  }
  return 0;
}

std::string principle_key(Principle p) { return std::string(key(p)); }

}  // namespace

Image compose_pair_image(const Image& left, const Image& right, const ComposeOptions& options) {
  if (left.empty() || right.empty()) throw InputError("compose_pair_image: empty input image");
  if (options.gutter < 0) throw ConfigError("compose gutter must be >= 0");
  if (options.height < 0) throw ConfigError("compose height must be >= 0");
  const int h = options.height > 0 ? options.height : std::min(left.height, right.height);
  const Image l = resize_to_height(left, h);
  const Image r = resize_to_height(right, h);
  Image out = Image::filled(l.width + options.gutter + r.width, h, {255, 255, 255});
  for (int y = 0; y < h; ++y) {
    std::copy_n(l.pixel(0, y), std::size_t(l.width) * 3, out.pixel(0, y));
    std::copy_n(r.pixel(0, y), std::size_t(r.width) * 3, out.pixel(l.width + options.gutter, y));
  }
  return out;
}

JudgePrompt build_prompt(Principle principle) {
  const auto& pi = info(principle);
  const std::string low(pi.pole_low), high(pi.pole_high);
  JudgePrompt p;
  p.principle = principle;
  p.schema_key = "Left painting has more " + low + " style";
  p.text =
      "You are an art critic skilled in formal analysis. Using Wölfflin's five principles of art "
      "criticism, conduct a formal analysis of the two paintings shown in the figure.\n\n"
      "Evaluate the paintings on the Left and Right according to the following principle: " +
      low + " style vs " + high + " style.\n\n" +
      "Respond only with a valid JSON in the format shown below:\n\n"
      "{\n"
      "  \"" + p.schema_key + "\": true|false,\n"
      "  \"reasoning\": \"Brief explanation in 200 words of why you think the left painting has more " +
      low + " style and the right painting has more " + high + " style, or vice versa.\"\n"
      "}";
  return p;
}

JudgeVerdict parse_verdict(std::string_view raw, std::string_view schema_key) {
  const std::string key(schema_key);
  bool saw_json = false;
  for (std::size_t pos = raw.find('{'); pos != std::string_view::npos; pos = raw.find('{', pos + 1)) {
    const std::size_t len = object_extent(raw, pos);
    if (len == 0) continue;
    const auto j = nlohmann::json::parse(raw.substr(pos, len), nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded() || !j.is_object()) continue;
    saw_json = true;
    const auto it = j.find(key);
    if (it == j.end()) continue;
    if (!it->is_boolean()) {
      throw ParseError("judge response: \"" + key + "\" is not a boolean (got " + it->dump() + ")",
                       std::string(raw));
    }
    JudgeVerdict v;
    v.left_wins_low_pole = it->get<bool>();
    if (const auto r = j.find("reasoning"); r != j.end()) {
      v.reasoning = r->is_string() ? r->get<std::string>() : r->dump();
    }
    v.raw = std::string(raw);
    return v;
  }
  throw ParseError(saw_json ? "judge response: no JSON object with key \"" + key + "\""
                            : std::string("judge response: no parseable JSON object"),
                   std::string(raw));
}

std::string serialize_verdict(const JudgeVerdict& verdict, std::string_view schema_key) {
  nlohmann::ordered_json j;
  j[std::string(schema_key)] = verdict.left_wins_low_pole;
  j["reasoning"] = verdict.reasoning;
  return j.dump(2);
}

void JudgeClientConfig::validate() const {
  if (endpoint.empty()) throw ConfigError("judge endpoint is empty");
  if (model_name.empty()) throw ConfigError("judge model name is empty");
  if (api_key_env.empty()) throw ConfigError("judge api_key_env is empty");
  if (max_retries < 0) throw ConfigError("judge max_retries must be >= 0");
  if (backoff_initial_ms < 0 || backoff_max_ms < backoff_initial_ms) {
    throw ConfigError("judge backoff must satisfy 0 <= initial <= max");
  }
  if (timeout_ms <= 0) throw ConfigError("judge timeout_ms must be positive");
  if (!(requests_per_minute > 0.0)) throw ConfigError("judge requests_per_minute must be positive");
  if (compose.gutter < 0 || compose.height < 0) throw ConfigError("judge compose sizes must be >= 0");
}

nlohmann::json JudgeClientConfig::to_json() const {
  nlohmann::ordered_json j;
  j["endpoint"] = endpoint;
  j["model_name"] = model_name;
  j["api_key_env"] = api_key_env;
  j["max_retries"] = max_retries;
  j["backoff_initial_ms"] = backoff_initial_ms;
  j["backoff_max_ms"] = backoff_max_ms;
  j["timeout_ms"] = timeout_ms;
  j["requests_per_minute"] = requests_per_minute;
  j["compose"] = {{"gutter", compose.gutter}, {"height", compose.height}};
  j["both_orderings"] = both_orderings;
  j["seed"] = seed;
  return j;
}

// ---------------------------------------------------------------------------

HttpTransport::HttpTransport(const JudgeClientConfig& config) : model_(config.model_name) {
  static const std::regex url(R"(^(https?)://([^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(config.endpoint, m, url)) {
    throw ConfigError("judge endpoint is not an http(s) URL: " + config.endpoint);
  }
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  if (m[1] == "https") throw ConfigError("this build has no TLS support; use an http:// endpoint");
#endif
  scheme_host_port_ = m[1].str() + "://" + m[2].str();
  path_ = m[3].matched ? m[3].str() : "/";
  const char* key = std::getenv(config.api_key_env.c_str());
  if (key == nullptr || *key == '\0') {
    throw ConfigError("judge API key variable " + config.api_key_env + " is not set");
  }
  api_key_ = key;
}

std::string HttpTransport::send(const JudgeRequest& request, std::chrono::milliseconds timeout) {
  nlohmann::json body;
  body["model"] = model_;
  body["temperature"] = 0;
  const std::string png(request.png.begin(), request.png.end());
  body["messages"] = nlohmann::json::array(
      {{{"role", "user"},
        {"content",
         nlohmann::json::array(
             {{{"type", "text"}, {"text", request.prompt}},
              {{"type", "image_url"},
               {"image_url", {{"url", "data:image/png;base64," + httplib::detail::base64_encode(png)}}}}})}}});

  httplib::Client client(scheme_host_port_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());
  const httplib::Headers headers = {{"Authorization", "Bearer " + api_key_}};
  auto res = client.Post(path_, headers, body.dump(), "application/json");
  if (!res) {
    throw TransportError("judge request failed: " + httplib::to_string(res.error()), true);
  }
  if (res->status != 200) {
    const bool retryable = res->status == 408 || res->status == 429 || res->status >= 500;
    throw TransportError("judge endpoint returned HTTP " + std::to_string(res->status), retryable);
  }
  const auto j = nlohmann::json::parse(res->body, nullptr, false);
  try {
    const auto& content = j.at("choices").at(0).at("message").at("content");
    if (content.is_string()) return content.get<std::string>();
    std::string text;
    for (const auto& part : content) {
      if (part.contains("text")) text += part.at("text").get<std::string>();
    }
    return text;
  } catch (const nlohmann::json::exception&) {
    throw TransportError("judge endpoint returned an unexpected body", true);
  }
}

ReplayTransport::ReplayTransport(std::map<std::pair<std::string, bool>, std::string> responses)
    : responses_(std::move(responses)) {}

ReplayTransport::ReplayTransport(const std::filesystem::path& jsonl) {
  std::ifstream in(jsonl);
  if (!in) throw InputError("cannot open replay file " + jsonl.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      responses_[{j.at("pair_id").get<std::string>(), j.value("swapped", false)}] =
          j.at("response").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw InputError(jsonl.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

std::string ReplayTransport::send(const JudgeRequest& request, std::chrono::milliseconds) {
  const auto it = responses_.find({request.pair_id, request.swapped});
  if (it == responses_.end()) {
    throw TransportError("no replay response for pair " + request.pair_id +
                             (request.swapped ? " (swapped)" : ""),
                         false);
  }
  return it->second;
}

// ---------------------------------------------------------------------------

Clock steady_clock() {
  return [] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
        std::chrono::steady_clock::now().time_since_epoch());
  };
}

Sleeper real_sleeper() {
  return [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

RateLimiter::RateLimiter(double requests_per_minute, Clock clock, Sleeper sleeper)
    : interval_(std::chrono::milliseconds(std::llround(60000.0 / requests_per_minute))),
      clock_(std::move(clock)),
      sleeper_(std::move(sleeper)) {
  if (!(requests_per_minute > 0.0)) throw ConfigError("requests_per_minute must be positive");
}

void RateLimiter::acquire() {
  std::chrono::milliseconds wait{0};
  {
    std::lock_guard lock(mu_);
    const auto now = clock_();
    const auto slot = next_ ? std::max(*next_, now) : now;
    next_ = slot + interval_;
    wait = slot - now;
  }
  if (wait.count() > 0) sleeper_(wait);
}

eval::Verdict JudgeOutcome::original_frame_verdict() const {
  if (!verdict) return eval::Verdict::Abstain;
  const bool shown_left = verdict->left_wins_low_pole;
  const bool original_left = swapped ? !shown_left : shown_left;
  return original_left ? eval::Verdict::Left : eval::Verdict::Right;
}

JudgeClient::JudgeClient(JudgeClientConfig config, Transport& transport, Clock clock, Sleeper sleeper)
    : config_(std::move(config)),
      transport_(transport),
      clock_(clock),
      sleeper_(sleeper),
      limiter_(config_.requests_per_minute, clock, sleeper),
      jitter_state_(derive_seed(config_.seed, "judge.jitter")) {
  config_.validate();
}

JudgeOutcome JudgeClient::judge(const eval::PairComparison& pair, const Image& left, const Image& right,
                                bool swapped) {
  JudgeOutcome out;
  out.pair_id = pair.pair_id;
  out.principle = pair.principle;
  out.swapped = swapped;

  const JudgePrompt prompt = build_prompt(pair.principle);
  JudgeRequest request;
  request.pair_id = pair.pair_id;
  request.principle = pair.principle;
  request.swapped = swapped;
  request.prompt = prompt.text;
  try {
    request.png = encode_png(swapped ? compose_pair_image(right, left, config_.compose)
                                     : compose_pair_image(left, right, config_.compose));
  } catch (const std::exception& e) {
    out.error = e.what();
    return out;
  }

  const auto timeout = std::chrono::milliseconds(config_.timeout_ms);
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) {
      double u;
      {
        std::lock_guard lock(rng_mu_);
        jitter_state_ = splitmix64(jitter_state_);
        u = double(jitter_state_ >> 11) * 0x1.0p-53;
      }
      const double base = std::min(double(config_.backoff_max_ms),
                                   double(config_.backoff_initial_ms) * std::ldexp(1.0, attempt - 1));
      const std::chrono::milliseconds delay(std::llround(base * (1.0 + 0.25 * u)));
      out.backoffs.push_back(delay);
      sleeper_(delay);
    }
    limiter_.acquire();
    ++out.attempts;
    const auto t0 = clock_();
    try {
      const std::string raw = transport_.send(request, timeout);
      out.latency_ms = double((clock_() - t0).count());
      JudgeVerdict v = parse_verdict(raw, prompt.schema_key);
      v.latency_ms = out.latency_ms;
      out.verdict = std::move(v);
      out.error.clear();
      return out;
    } catch (const TransportError& e) {
      out.latency_ms = double((clock_() - t0).count());
      out.error = e.what();
      if (!e.retryable()) return out;
    } catch (const ParseError& e) {
      out.latency_ms = double((clock_() - t0).count());
      out.error = e.what();
    } catch (const std::exception& e) {
      out.latency_ms = double((clock_() - t0).count());
      out.error = e.what();
    }
  }
  return out;
}

JudgeOutcome judge_pair(JudgeClient& client, const eval::PairComparison& pair, const Image& left,
                        const Image& right) {
  return client.judge(pair, left, right, false);
}

nlohmann::json JudgeRun::to_json() const {
  nlohmann::ordered_json j;
  j["accuracy"] = table.to_json();
  if (swapped_table) {
    j["swapped_accuracy"] = swapped_table->to_json();
    j["consistent_pairs"] = consistent;
  }
  std::size_t abstained = 0;
  for (const auto& o : outcomes) abstained += o.verdict ? 0 : 1;
  j["requests_abstained"] = abstained;
  return j;
}

JudgeRun evaluate_judge(JudgeClient& client, std::span<const eval::PairComparison> pairs,
                        const ImageLoader& loader, std::size_t jobs) {
  const bool both = client.config().both_orderings;
  const std::size_t per_pair = both ? 2 : 1;
  const std::size_t total = pairs.size() * per_pair;
  std::vector<JudgeOutcome> outcomes(total);
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (std::size_t t; (t = next.fetch_add(1)) < total;) {
      const auto& pair = pairs[t / per_pair];
      const bool swapped = (t % per_pair) == 1;
      try {
        const Image left = loader(pair.left_id);
        const Image right = loader(pair.right_id);
        outcomes[t] = client.judge(pair, left, right, swapped);
      } catch (const std::exception& e) {
        JudgeOutcome o;
        o.pair_id = pair.pair_id;
        o.principle = pair.principle;
        o.swapped = swapped;
        o.error = e.what();
        outcomes[t] = std::move(o);
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, total));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> threads;
    for (std::size_t i = 0; i < n_threads; ++i) threads.emplace_back(worker);
  }

  auto lookup = [&](bool swapped) {
    std::map<std::string, eval::Verdict> verdicts;
    for (const auto& o : outcomes) {
      if (o.swapped == swapped) verdicts[o.pair_id] = o.original_frame_verdict();
    }
    return [verdicts = std::move(verdicts)](const eval::PairComparison& p) {
      const auto it = verdicts.find(p.pair_id);
      return it == verdicts.end() ? eval::Verdict::Abstain : it->second;
    };
  };

  JudgeRun run;
  run.table = eval::pairwise_accuracy(lookup(false), pairs);
  if (both) {
    run.swapped_table = eval::pairwise_accuracy(lookup(true), pairs);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto a = outcomes[2 * i].original_frame_verdict();
      const auto b = outcomes[2 * i + 1].original_frame_verdict();
      if (a != eval::Verdict::Abstain && a == b) ++run.consistent;
    }
  }
  run.outcomes = std::move(outcomes);
  return run;
}

std::string redact(std::string text, std::span<const std::string> secrets) {
  for (const auto& s : secrets) {
    if (s.empty()) continue;
    for (std::size_t pos = text.find(s); pos != std::string::npos; pos = text.find(s, pos)) {
      text.replace(pos, s.size(), "[REDACTED]");
      pos += 10;
    }
  }
  return text;
}

void write_outcomes_jsonl(std::ostream& out, std::span<const JudgeOutcome> outcomes,
                          std::span<const std::string> secrets) {
  for (const auto& o : outcomes) {
    nlohmann::ordered_json j;
    j["pair_id"] = o.pair_id;
    j["principle"] = principle_key(o.principle);
    const auto v = o.original_frame_verdict();
    j["verdict"] = v == eval::Verdict::Left ? "left" : v == eval::Verdict::Right ? "right" : "abstain";
    j["reasoning"] = o.verdict ? redact(o.verdict->reasoning, secrets) : "";
    j["latency_ms"] = o.latency_ms;
    j["attempts"] = o.attempts;
    j["order"] = o.swapped ? "swapped" : "original";
    if (!o.verdict) j["error"] = redact(o.error, secrets);
    out << redact(j.dump(), secrets) << '\n';
  }
}

}  // namespace wpclip::judge
