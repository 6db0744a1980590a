#include "app.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "wpclip/analysis.hpp"
#include "wpclip/checkpoint.hpp"
#include "wpclip/csv.hpp"
#include "wpclip/data.hpp"
#include "wpclip/encoder.hpp"
#include "wpclip/errors.hpp"
#include "wpclip/evaluation.hpp"
#include "wpclip/judge.hpp"
#include "wpclip/projection_head.hpp"
#include "wpclip/scoring.hpp"
#include "wpclip/training.hpp"
#ifdef WPCLIP_HAVE_TORCH
#include "wpclip/torch_backend.hpp"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace wpclip::cli {

struct Options {
  // global
  std::uint64_t seed = 0;
  unsigned jobs = 1;
  bool quiet = false;

  struct {
    std::string backend = "stub";
    std::size_t embed_dim = 512;
    std::size_t text_dim = 64;
    int target_size = 224;
    std::string prompt_template;
    std::string from;
    std::string out;
  } init;

  struct {
    std::string checkpoint;
    std::vector<std::string> images;
    std::string manifest;
    std::string dir;
    std::string out;
    std::string format = "csv";
    std::string mode = "softmax";
    std::string prompt_template;
    bool strict = false;
  } score;

  struct {
    std::string manifest;
    std::string init;
    std::string run_dir;
    std::string prompt_template;
    std::string mode = "softmax";
    double lr = 1e-6;
    std::size_t batch_size = 32;
    std::size_t epochs = 30;
    double val_fraction = 0.1;
    std::size_t patience = 5;
    double grad_clip = 1.0;
    double weight_decay = 0.0;
    std::size_t cache_mb = 1024;
    bool resume = false;
  } train;

  struct {
    std::string manifest;
    std::string checkpoint;
    std::string predictions;
    std::string mode = "softmax";
    std::string prompt_template;
    std::string out;
    std::string table;
  } eval;

  struct {
    std::string manifest;
    double threshold = 1.0;
    std::size_t per_principle = 20;
    std::string out;
  } pairs;

  struct {
    std::string pairs;
    std::string predictions;
    std::string checkpoint;
    std::string manifest;
    std::string mode = "softmax";
    std::string prompt_template;
    double tie_epsilon = 1e-9;
    std::string out;
  } pair_acc;

  struct {
    std::string pairs;
    std::string manifest;
    std::string transport = "http";
    std::string replay_file;
    std::string out;
    std::string report;
    judge::JudgeClientConfig client;
  } judge;

  struct Grouped {
    std::string scores;
    std::string labels;
    std::string manifest;
    std::string corpus;
    std::string layout = "folder-per-label";
    std::string checkpoint;
    std::string mode = "softmax";
    std::string prompt_template;
  };

  struct {
    Grouped in;
    std::string principle = "linear_painterly";
    std::string out;
    std::string ranking_out;
  } rank;

  struct {
    Grouped in;
    int dims = 2;
    double perplexity = 30.0;
    std::size_t iterations = 1000;
    std::string method = "auto";
    double theta = 0.5;
    double learning_rate = 0.0;
    std::string out;
    std::string report;
  } project;

  struct {
    std::string manifest;
    bool decode = false;
    long long expect = -1;
  } validate;
};

AppHandle::AppHandle() = default;
AppHandle::AppHandle(AppHandle&&) noexcept = default;
AppHandle& AppHandle::operator=(AppHandle&&) noexcept = default;
AppHandle::~AppHandle() = default;

namespace {

// ---------------------------------------------------------------------------
// Command tree

void add_grouped_inputs(CLI::App* sub, Options::Grouped& g) {
  sub->add_option("--scores", g.scores, "Score file (csv or jsonl) from `score`");
  sub->add_option("--labels", g.labels, "CSV with image_id,label columns");
  sub->add_option("--manifest", g.manifest, "Manifest whose source column supplies labels");
  sub->add_option("--corpus", g.corpus, "Labeled image corpus to score with --checkpoint");
  sub->add_option("--layout", g.layout, "Corpus layout: folder-per-label|label-file");
  sub->add_option("--checkpoint", g.checkpoint, "Checkpoint directory (or stub[:dim]) for --corpus");
  sub->add_option("--mode", g.mode, "Score mode: softmax[:tau] or ratio[:eps]");
  sub->add_option("--prompt-template", g.prompt_template, "Prompt template with {} for the pole label");
}

std::unique_ptr<CLI::App> build(Options& o) {
  auto app = std::make_unique<CLI::App>(
      "Wolfflin-principle scoring toolkit: score, train, evaluate and analyse artworks", "wpclip");
  app->get_formatter()->column_width(36);
  app->option_defaults()->always_capture_default();
  app->require_subcommand(1, 1);
  app->fallthrough();  // global flags may follow the subcommand name
  app->set_config("--config", "", "INI file; [section] per subcommand; flags override it");
  app->add_option("--seed", o.seed, "Root seed; every component derives its seed from it");
  app->add_option("--jobs", o.jobs, "Maximum worker threads")->check(CLI::Range(1u, 1024u));
  app->add_flag("--quiet", o.quiet, "Suppress progress messages on stderr");

  {
    auto* s = app->add_subcommand("init-checkpoint", "Write a fresh checkpoint for a built-in backend");
    s->add_option("--backend", o.init.backend, "stub|projection-head|torchscript")
        ->check(CLI::IsMember({"stub", "projection-head", "torchscript"}));
    s->add_option("--from", o.init.from, "Exporter output directory (torchscript)");
    s->add_option("--embed-dim", o.init.embed_dim, "Embedding width");
    s->add_option("--text-dim", o.init.text_dim, "Text feature width (projection-head)");
    s->add_option("--target-size", o.init.target_size, "Preprocessing crop size in pixels");
    s->add_option("--prompt-template", o.init.prompt_template, "Prompt template stored with the checkpoint");
    s->add_option("--out", o.init.out, "Checkpoint directory")->required();
  }
  {
    auto* s = app->add_subcommand("score", "Score images on the five principles");
    s->add_option("--checkpoint", o.score.checkpoint, "Checkpoint directory or stub[:dim]")->required();
    s->add_option("--image", o.score.images, "Image file (repeatable)");
    s->add_option("--manifest", o.score.manifest, "Manifest (csv or jsonl)");
    s->add_option("--dir", o.score.dir, "Directory scanned recursively for images");
    s->add_option("--out", o.score.out, "Output score file (stdout when omitted)");
    s->add_option("--format", o.score.format, "csv|jsonl")->check(CLI::IsMember({"csv", "jsonl"}));
    s->add_option("--mode", o.score.mode, "Score mode: softmax[:tau] or ratio[:eps]");
    s->add_option("--prompt-template", o.score.prompt_template, "Prompt template with {} for the pole label");
    s->add_flag("--strict", o.score.strict, "Fail on the first unreadable image");
  }
  {
    auto* s = app->add_subcommand("train", "Fine-tune a trainable backend on annotated images");
    s->add_option("--manifest", o.train.manifest, "Training manifest")->required();
    s->add_option("--init", o.train.init, "Initial checkpoint directory")->required();
    s->add_option("--run-dir", o.train.run_dir, "Run directory (best/, last/, log.jsonl)")->required();
    s->add_option("--prompt-template", o.train.prompt_template, "Prompt template with {} for the pole label");
    s->add_option("--mode", o.train.mode, "Score mode: softmax[:tau] or ratio[:eps]");
    s->add_option("--lr", o.train.lr, "Adam learning rate");
    s->add_option("--batch-size", o.train.batch_size, "Batch size");
    s->add_option("--epochs", o.train.epochs, "Maximum epochs (0 keeps the initial weights)");
    s->add_option("--val-fraction", o.train.val_fraction, "Held-out validation fraction");
    s->add_option("--patience", o.train.patience, "Early-stopping patience in epochs (0 disables)");
    s->add_option("--grad-clip", o.train.grad_clip, "Global gradient-norm clip (0 disables)");
    s->add_option("--weight-decay", o.train.weight_decay, "Decoupled weight decay");
    s->add_option("--cache-mb", o.train.cache_mb, "Memory budget for preprocessed images");
    s->add_flag("--resume", o.train.resume, "Continue from <run-dir>/last");
  }
  {
    auto* s = app->add_subcommand("eval", "MSE and SRCC against ground truth");
    s->add_option("--manifest", o.eval.manifest, "Ground-truth manifest")->required();
    s->add_option("--checkpoint", o.eval.checkpoint, "Checkpoint to score the manifest with");
    s->add_option("--predictions", o.eval.predictions, "Existing score file instead of a checkpoint");
    s->add_option("--mode", o.eval.mode, "Score mode: softmax[:tau] or ratio[:eps]");
    s->add_option("--prompt-template", o.eval.prompt_template, "Prompt template with {} for the pole label");
    s->add_option("--out", o.eval.out, "Report JSON")->required();
    s->add_option("--table", o.eval.table, "Optional table CSV (principle,mse,srcc)");
  }
  {
    auto* s = app->add_subcommand("pairs", "Build pairwise comparison sets from ground truth");
    s->add_option("--manifest", o.pairs.manifest, "Ground-truth manifest")->required();
    s->add_option("--threshold", o.pairs.threshold, "Minimum |difference| on the 1-5 scale");
    s->add_option("--per-principle", o.pairs.per_principle, "Pairs sampled per principle");
    s->add_option("--out", o.pairs.out, "Pair set JSON")->required();
  }
  {
    auto* s = app->add_subcommand("pair-accuracy", "Pairwise accuracy of predicted scores on a pair set");
    s->add_option("--pairs", o.pair_acc.pairs, "Pair set JSON")->required();
    s->add_option("--predictions", o.pair_acc.predictions, "Score file");
    s->add_option("--checkpoint", o.pair_acc.checkpoint, "Checkpoint to score --manifest with");
    s->add_option("--manifest", o.pair_acc.manifest, "Manifest with the paired images");
    s->add_option("--mode", o.pair_acc.mode, "Score mode: softmax[:tau] or ratio[:eps]");
    s->add_option("--prompt-template", o.pair_acc.prompt_template, "Prompt template with {} for the pole label");
    s->add_option("--tie-epsilon", o.pair_acc.tie_epsilon, "Score gap treated as a tie");
    s->add_option("--out", o.pair_acc.out, "Accuracy table JSON")->required();
  }
  {
    auto& c = o.judge.client;
    auto* s = app->add_subcommand("judge", "Ask an external multimodal model to compare each pair");
    s->add_option("--pairs", o.judge.pairs, "Pair set JSON")->required();
    s->add_option("--manifest", o.judge.manifest, "Manifest resolving image ids to files")->required();
    s->add_option("--transport", o.judge.transport, "http|replay")->check(CLI::IsMember({"http", "replay"}));
    s->add_option("--replay-file", o.judge.replay_file, "JSON lines of canned responses (replay transport)");
    s->add_option("--endpoint", c.endpoint, "Chat-completions URL");
    s->add_option("--model", c.model_name, "Model name sent to the endpoint");
    s->add_option("--api-key-env", c.api_key_env, "Environment variable holding the API key");
    s->add_option("--max-retries", c.max_retries, "Retries after the first attempt");
    s->add_option("--backoff-initial-ms", c.backoff_initial_ms, "First retry delay");
    s->add_option("--backoff-max-ms", c.backoff_max_ms, "Retry delay cap");
    s->add_option("--timeout-ms", c.timeout_ms, "Per-request timeout");
    s->add_option("--rpm", c.requests_per_minute, "Requests-per-minute cap");
    s->add_option("--gutter", c.compose.gutter, "White gutter between the two images (px)");
    s->add_option("--height", c.compose.height, "Composite height in px (0 = smaller input)");
    s->add_flag("--both-orderings", c.both_orderings, "Also judge every pair with sides swapped");
    s->add_option("--out", o.judge.out, "Per-request JSON lines")->required();
    s->add_option("--report", o.judge.report, "Accuracy report JSON");
  }
  {
    auto* s = app->add_subcommand("rank", "Aggregate scores per group and rank groups on a principle");
    add_grouped_inputs(s, o.rank.in);
    s->add_option("--principle", o.rank.principle, "Principle key to rank on");
    s->add_option("--out", o.rank.out, "aggregates.csv")->required();
    s->add_option("--ranking-out", o.rank.ranking_out, "Optional ranking JSON");
  }
  {
    auto* s = app->add_subcommand("project", "t-SNE projection of score vectors");
    add_grouped_inputs(s, o.project.in);
    s->add_option("--dims", o.project.dims, "2 or 3")->check(CLI::IsMember({2, 3}));
    s->add_option("--perplexity", o.project.perplexity, "t-SNE perplexity");
    s->add_option("--iterations", o.project.iterations, "Gradient iterations");
    s->add_option("--method", o.project.method, "auto|exact|barnes_hut")
        ->check(CLI::IsMember({"auto", "exact", "barnes_hut"}));
    s->add_option("--theta", o.project.theta, "Barnes-Hut accuracy parameter");
    s->add_option("--learning-rate", o.project.learning_rate, "Gradient step (0 = scaled to the point count)");
    s->add_option("--out", o.project.out, "projection.csv")->required();
    s->add_option("--report", o.project.report, "Optional JSON with silhouette and KL divergence");
  }
  {
    auto* s = app->add_subcommand("validate", "Check a manifest and report its size");
    s->add_option("--manifest", o.validate.manifest, "Manifest")->required();
    s->add_flag("--decode", o.validate.decode, "Decode every image instead of checking existence");
    s->add_option("--expect", o.validate.expect, "Expected record count (e.g. 1000, 800)");
  }
  return app;
}

// ---------------------------------------------------------------------------
// Helpers

struct Context {
  Options& o;
  CLI::App& app;
  CLI::App& sub;
  std::ostream& out;
  std::ostream& err;

  void progress(const std::string& msg) const {
    if (!o.quiet) err << msg << '\n';
  }
};

// Every option of the invoked subcommand plus the globals, as resolved after
// defaults, config file and flags.
// Numeric options echo as JSON numbers, everything else as strings.
ordered_json typed_value(const CLI::Option& opt, const std::string& text) {
  const std::string type = opt.get_type_name();
  try {
    std::size_t used = 0;
    if (type.rfind("UINT", 0) == 0 || type.rfind("INT", 0) == 0) {
      const long long v = std::stoll(text, &used);
      if (used == text.size()) return v;
    } else if (type.rfind("FLOAT", 0) == 0) {
      const double v = std::stod(text, &used);
      if (used == text.size()) return v;
    }
  } catch (const std::exception&) {
  }
  return text;
}

ordered_json resolved_config(const Context& c) {
  auto dump = [](const CLI::App& a) {
    ordered_json j = ordered_json::object();
    for (const CLI::Option* opt : a.get_options()) {
      if (opt->get_lnames().empty()) continue;
      const std::string name = opt->get_lnames().front();
      if (name == "help" || name == "config") continue;
      const auto& res = opt->results();
      if (opt->get_expected_max() == 0) {  // flag
        j[name] = !res.empty() && res.back() != "false" && res.back() != "0";
      } else if (opt->get_items_expected_max() > 1) {
        ordered_json arr = ordered_json::array();
        for (const auto& r : res) arr.push_back(typed_value(*opt, r));
        j[name] = arr;
      } else {
        j[name] = typed_value(*opt, res.empty() ? opt->get_default_str() : res.back());
      }
    }
    return j;
  };
  ordered_json j;
  j["command"] = c.sub.get_name();
  j["global"] = dump(c.app);
  j["options"] = dump(c.sub);
  return j;
}

std::ofstream open_out(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw InputError("cannot write " + path);
  return f;
}

void write_json_file(const std::string& path, const json& j) {
  auto f = open_out(path);
  f << j.dump(2) << '\n';
  if (!f) throw Error("failed writing " + path);
}

std::string config_comment(const Context& c) { return "# config: " + resolved_config(c).dump() + "\n"; }

std::unique_ptr<encoder::EncoderBackend> load_backend(const std::string& spec, std::uint64_t seed) {
  if (spec.empty()) throw ConfigError("a checkpoint is required");
  if (spec == "stub" || spec.rfind("stub:", 0) == 0) {
    std::size_t dim = 512;
    if (spec.size() > 5) {
      try {
        dim = std::stoul(spec.substr(5));
      } catch (const std::exception&) {
        throw ConfigError("bad stub dimension in '" + spec + "'");
      }
    }
    if (dim == 0) throw ConfigError("stub dimension must be positive");
    return std::make_unique<encoder::StubBackend>(dim, seed);
  }
  return encoder::load_checkpoint(spec);
}

scoring::PromptRegistry registry_for(const std::string& checkpoint, const std::string& templ) {
  if (!templ.empty()) return scoring::PromptRegistry::with_template(templ);
  if (!checkpoint.empty() && fs::is_directory(checkpoint)) {
    const auto info = encoder::read_checkpoint_info(checkpoint);
    if (info.extra.is_object() && info.extra.contains("prompts")) {
      return scoring::PromptRegistry::from_json(info.extra.at("prompts"));
    }
  }
  return {};
}

std::string checkpoint_id(const encoder::EncoderBackend& b) { return encoder::checkpoint_id_of(b); }

// Scores inputs in order; failures are fatal unless `allow_failures`.
scoring::BatchResult score_inputs(const Context& c, const encoder::EncoderBackend& backend,
                                  const scoring::PromptRegistry& registry,
                                  const std::vector<scoring::BatchInput>& inputs,
                                  const scoring::ScoreMode& mode, bool strict) {
  scoring::BatchOptions opts;
  opts.strict = strict;
  opts.jobs = c.o.jobs;
  auto result = scoring::score_batch(backend, registry, inputs, mode, opts);
  for (const auto& f : result.failures) c.progress("warning: " + f.image_id + ": " + f.message);
  return result;
}

std::map<std::string, ScoreVector> by_id(const std::vector<scoring::ScoredImage>& items) {
  std::map<std::string, ScoreVector> m;
  for (const auto& it : items) {
    if (!m.emplace(it.image_id, it.scores).second) {
      throw InputError("duplicate image_id '" + it.image_id + "' in predictions");
    }
  }
  return m;
}

std::vector<scoring::BatchInput> manifest_inputs(const data::Manifest& m) {
  std::vector<scoring::BatchInput> v;
  for (const auto& r : m.records) v.push_back({r.image_id, r.image_path});
  return v;
}

eval::PairSet read_pair_set(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open pair set " + path);
  const auto j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw InputError(path + ": not valid JSON");
  return eval::PairSet::from_json(j);
}

// ---------------------------------------------------------------------------
// Labeled score inputs shared by rank and project.

struct LabeledScores {
  std::vector<std::string> ids;
  std::vector<std::string> labels;
  std::vector<ScoreVector> scores;
};

std::map<std::string, std::string> read_label_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open label file " + path);
  const auto rows = csv::read(in, true);
  if (rows.empty()) throw InputError(path + ": empty label file");
  const auto& h = rows[0].fields;
  const auto id_it = std::find(h.begin(), h.end(), "image_id");
  const auto label_it = std::find(h.begin(), h.end(), "label");
  if (id_it == h.end() || label_it == h.end()) throw InputError(path + ": needs image_id,label columns");
  const auto ic = std::size_t(id_it - h.begin()), lc = std::size_t(label_it - h.begin());
  std::map<std::string, std::string> m;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].fields.size() != h.size()) {
      throw InputError(path + ":" + std::to_string(rows[r].line) + ": wrong field count");
    }
    m[rows[r].fields[ic]] = rows[r].fields[lc];
  }
  return m;
}

LabeledScores gather(const Context& c, const Options::Grouped& g) {
  LabeledScores ls;
  if (!g.corpus.empty()) {
    if (!g.scores.empty()) throw ConfigError("use either --corpus or --scores, not both");
    const auto corpus = data::scan_labeled_corpus(g.corpus, data::corpus_layout_from_string(g.layout));
    for (const auto& w : corpus.warnings) c.progress("warning: " + w);
    const auto backend = load_backend(g.checkpoint, c.o.seed);
    const auto registry = registry_for(g.checkpoint, g.prompt_template);
    std::vector<scoring::BatchInput> inputs;
    std::map<std::string, std::string> label_of;
    for (const auto& item : corpus.items) {
      const std::string id = fs::path(item.image_path).lexically_relative(g.corpus).generic_string();
      inputs.push_back({id.empty() || id.rfind("..", 0) == 0 ? item.image_path : id, item.image_path});
      label_of[inputs.back().image_id] = item.label;
    }
    const auto result = score_inputs(c, *backend, registry, inputs, scoring::ScoreMode::parse(g.mode), false);
    for (const auto& it : result.items) {
      ls.ids.push_back(it.image_id);
      ls.labels.push_back(label_of.at(it.image_id));
      ls.scores.push_back(it.scores);
    }
    return ls;
  }
  if (g.scores.empty()) throw ConfigError("need --scores (with --labels or --manifest) or --corpus");
  const auto file = scoring::read_scores(g.scores);
  std::map<std::string, std::string> label_of;
  if (!g.labels.empty()) {
    label_of = read_label_csv(g.labels);
  } else if (!g.manifest.empty()) {
    data::ManifestOptions mo;
    mo.check = data::ImageCheck::None;
    for (const auto& r : data::load_manifest(g.manifest, mo).records) {
      label_of[r.image_id] = std::string(to_string(r.source));
    }
  }
  for (const auto& it : file.items) {
    std::string label;
    if (!g.labels.empty() || !g.manifest.empty()) {
      const auto l = label_of.find(it.image_id);
      if (l == label_of.end()) throw InputError("no label for image_id '" + it.image_id + "'");
      label = l->second;
    }
    ls.ids.push_back(it.image_id);
    ls.labels.push_back(label);
    ls.scores.push_back(it.scores);
  }
  return ls;
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_init(const Context& c) {
  const auto& o = c.o.init;
  PreprocessSpec spec;
  spec.target_size = o.target_size;
  std::unique_ptr<encoder::EncoderBackend> backend;
  if (o.backend == "stub") {
    backend = std::make_unique<encoder::StubBackend>(o.embed_dim, c.o.seed, spec);
  } else if (o.backend == "torchscript") {
    if (o.from.empty()) throw ConfigError("--backend torchscript needs --from <export dir>");
#ifdef WPCLIP_HAVE_TORCH
    backend = encoder::TorchScriptBackend::from_export(o.from);
#else
    throw ConfigError("this build has no TorchScript support (configure with WPCLIP_WITH_TORCH=ON)");
#endif
  } else {
    encoder::ProjectionHeadBackend::Config cfg;
    cfg.embed_dim = o.embed_dim;
    cfg.text_feature_dim = o.text_dim;
    cfg.seed = c.o.seed;
    cfg.preprocess = spec;
    backend = std::make_unique<encoder::ProjectionHeadBackend>(cfg);
  }
  const auto registry = o.prompt_template.empty() ? scoring::PromptRegistry{}
                                                  : scoring::PromptRegistry::with_template(o.prompt_template);
  json extra = {{"prompts", registry.to_json()}, {"config", resolved_config(c)}};
  const std::string id = encoder::save_checkpoint(*backend, o.out, extra);
  c.out << id << '\n';
}

void cmd_score(const Context& c) {
  const auto& o = c.o.score;
  const int sources = int(!o.images.empty()) + int(!o.manifest.empty()) + int(!o.dir.empty());
  if (sources != 1) throw ConfigError("give exactly one of --image, --manifest or --dir");
  const auto mode = scoring::ScoreMode::parse(o.mode);

  std::vector<scoring::BatchInput> inputs;
  if (!o.manifest.empty()) {
    inputs = manifest_inputs(data::load_manifest(o.manifest));
  } else if (!o.dir.empty()) {
    if (!fs::is_directory(o.dir)) throw InputError("not a directory: " + o.dir);
    for (const auto& e : fs::recursive_directory_iterator(o.dir)) {
      if (e.is_regular_file() && data::has_image_extension(e.path())) {
        inputs.push_back({e.path().lexically_relative(o.dir).generic_string(), e.path().string()});
      }
    }
    std::sort(inputs.begin(), inputs.end(),
              [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
    if (inputs.empty()) throw InputError("no images found under " + o.dir);
  } else {
    for (const auto& p : o.images) inputs.push_back({fs::path(p).filename().string(), p});
  }

  const auto backend = load_backend(o.checkpoint, c.o.seed);
  const auto registry = registry_for(o.checkpoint, o.prompt_template);
  const bool single = !o.images.empty() && o.images.size() == 1;
  const auto result = score_inputs(c, *backend, registry, inputs, mode, o.strict || single);
  if (result.items.empty()) throw Error("no image could be scored");
  const std::string ckpt = checkpoint_id(*backend);

  auto emit = [&](std::ostream& s) {
    if (o.format == "csv") {
      s << config_comment(c);
      scoring::write_scores_csv(s, result.items, mode, ckpt);
    } else {
      s << json{{"config", resolved_config(c)}}.dump() << '\n';
      scoring::write_scores_jsonl(s, result.items, mode, ckpt);
    }
  };
  if (!o.out.empty()) {
    auto f = open_out(o.out);
    emit(f);
  }
  if (single) {
    char buf[64];
    for (Principle p : kAllPrinciples) {
      std::snprintf(buf, sizeof buf, "%.6f", result.items[0].scores[p]);
      c.out << key(p) << ' ' << buf << '\n';
    }
  } else if (o.out.empty()) {
    emit(c.out);
  }
  if (!result.failures.empty()) {
    c.progress("scored " + std::to_string(result.items.size()) + " of " + std::to_string(inputs.size()) +
               " images");
  }
}

void cmd_train(const Context& c) {
  const auto& o = c.o.train;
  const auto manifest = data::load_manifest(o.manifest);
  auto backend = encoder::load_checkpoint(o.init);
  if (backend->trainable() == nullptr) {
    throw ConfigError("checkpoint backend '" + backend->kind() + "' is not trainable");
  }
  const auto registry = registry_for(o.init, o.prompt_template);

  training::TrainConfig cfg;
  cfg.learning_rate = o.lr;
  cfg.batch_size = o.batch_size;
  cfg.max_epochs = o.epochs;
  cfg.val_fraction = o.val_fraction;
  cfg.seed = c.o.seed;
  cfg.score_mode = scoring::ScoreMode::parse(o.mode);
  cfg.early_stop_patience = o.patience;
  cfg.grad_clip_norm = o.grad_clip > 0 ? std::optional<double>(o.grad_clip) : std::nullopt;
  cfg.weight_decay = o.weight_decay;
  cfg.validate();

  training::TrainOptions topts;
  topts.run_dir = o.run_dir;
  topts.resume = o.resume;
  topts.tensor_cache_bytes = o.cache_mb << 20;
  topts.on_epoch = [&](const training::TrainLogEntry& e) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %zu train_loss %.6f val_loss %.6f (%.1fs)", e.epoch,
                  e.train_total_loss, e.val_total_loss, e.wall_time_s);
    c.progress(buf);
  };
  fs::create_directories(o.run_dir);
  write_json_file((fs::path(o.run_dir) / "command.json").string(), resolved_config(c));

  const auto result = training::train(std::move(backend), registry, manifest.records, cfg, topts);
  ordered_json summary;
  summary["best_checkpoint"] = result.best_checkpoint.string();
  summary["best_checkpoint_id"] = result.best_checkpoint_id;
  summary["best_epoch"] = result.best_epoch;
  summary["best_val_total_loss"] = result.best_val_total_loss;
  summary["epochs_run"] = result.log.empty() ? 0 : result.log.back().epoch;
  summary["early_stopped"] = result.early_stopped;
  if (result.aborted) summary["aborted"] = *result.aborted;
  c.out << summary.dump(2) << '\n';
  if (result.aborted) throw Error("training aborted: " + *result.aborted);
}

void cmd_eval(const Context& c) {
  const auto& o = c.o.eval;
  if (o.checkpoint.empty() == o.predictions.empty()) {
    throw ConfigError("give exactly one of --checkpoint or --predictions");
  }
  data::ManifestOptions mo;
  if (!o.predictions.empty()) mo.check = data::ImageCheck::None;
  const auto manifest = data::load_manifest(o.manifest, mo);

  std::map<std::string, ScoreVector> preds;
  std::string ckpt, mode_s;
  if (!o.predictions.empty()) {
    const auto file = scoring::read_scores(o.predictions);
    preds = by_id(file.items);
    ckpt = file.checkpoint_id;
    mode_s = file.mode;
  } else {
    const auto mode = scoring::ScoreMode::parse(o.mode);
    const auto backend = load_backend(o.checkpoint, c.o.seed);
    const auto registry = registry_for(o.checkpoint, o.prompt_template);
    preds = by_id(score_inputs(c, *backend, registry, manifest_inputs(manifest), mode, true).items);
    ckpt = checkpoint_id(*backend);
    mode_s = mode.to_string();
  }
  std::vector<ScoreVector> p, g;
  for (const auto& r : manifest.records) {
    const auto it = preds.find(r.image_id);
    if (it == preds.end()) throw InputError("no prediction for image_id '" + r.image_id + "'");
    p.push_back(it->second);
    g.push_back(r.gt);
  }
  const auto report = eval::evaluate(p, g, ckpt, mode_s);
  json j = report.to_json();
  j["config"] = resolved_config(c);
  write_json_file(o.out, j);
  if (!o.table.empty()) {
    auto f = open_out(o.table);
    f << config_comment(c);
    eval::write_report_table_csv(report, f);
  }
  eval::write_report_table_csv(report, c.out);
}

void cmd_pairs(const Context& c) {
  const auto& o = c.o.pairs;
  data::ManifestOptions mo;
  mo.check = data::ImageCheck::None;
  const auto manifest = data::load_manifest(o.manifest, mo);
  const auto set = eval::build_pair_sets(manifest.records, o.threshold, o.per_principle, c.o.seed);
  json j = set.to_json();
  j["config"] = resolved_config(c);
  write_json_file(o.out, j);
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu pairs, |gt difference| %.2f +/- %.2f", set.pairs.size(),
                set.stats.mean, set.stats.std);
  c.out << buf << '\n';
}

void print_accuracy(std::ostream& out, const eval::AccuracyTable& t) {
  char buf[160];
  for (Principle p : kAllPrinciples) {
    const auto& a = t.per_principle[index_of(p)];
    std::snprintf(buf, sizeof buf, "%-20s %3zu / %3zu  %5.1f%%  ties %zu  abstained %zu",
                  std::string(info(p).display).c_str(), a.correct, a.total, a.percent(), a.ties,
                  a.abstained);
    out << buf << '\n';
  }
  std::snprintf(buf, sizeof buf, "%-20s %3zu / %3zu  %5.1f%%  ties %zu  abstained %zu", "Total",
                t.overall.correct, t.overall.total, t.overall.percent(), t.overall.ties,
                t.overall.abstained);
  out << buf << '\n';
}

void cmd_pair_accuracy(const Context& c) {
  const auto& o = c.o.pair_acc;
  const auto set = read_pair_set(o.pairs);
  std::map<std::string, ScoreVector> preds;
  if (!o.predictions.empty()) {
    preds = by_id(scoring::read_scores(o.predictions).items);
  } else {
    if (o.checkpoint.empty() || o.manifest.empty()) {
      throw ConfigError("give --predictions, or --checkpoint with --manifest");
    }
    const auto manifest = data::load_manifest(o.manifest);
    std::set<std::string> needed;
    for (const auto& p : set.pairs) needed.insert({p.left_id, p.right_id});
    std::vector<scoring::BatchInput> inputs;
    for (const auto& r : manifest.records) {
      if (needed.count(r.image_id)) inputs.push_back({r.image_id, r.image_path});
    }
    const auto backend = load_backend(o.checkpoint, c.o.seed);
    const auto registry = registry_for(o.checkpoint, o.prompt_template);
    preds = by_id(score_inputs(c, *backend, registry, inputs, scoring::ScoreMode::parse(o.mode), true).items);
  }
  const auto table = eval::pairwise_accuracy(eval::score_comparator(preds, o.tie_epsilon), set.pairs);
  json j = table.to_json();
  j["config"] = resolved_config(c);
  write_json_file(o.out, j);
  print_accuracy(c.out, table);
}

void cmd_judge(const Context& c) {
  const auto& o = c.o.judge;
  const auto set = read_pair_set(o.pairs);
  const auto manifest = data::load_manifest(o.manifest);
  std::map<std::string, std::string> path_of;
  for (const auto& r : manifest.records) path_of[r.image_id] = r.image_path;

  std::unique_ptr<judge::Transport> transport;
  std::vector<std::string> secrets;
  if (o.transport == "replay") {
    if (o.replay_file.empty()) throw ConfigError("--transport replay needs --replay-file");
    transport = std::make_unique<judge::ReplayTransport>(fs::path(o.replay_file));
  } else {
    auto http = std::make_unique<judge::HttpTransport>(o.client);
    secrets.push_back(http->api_key());
    transport = std::move(http);
  }
  auto client_cfg = o.client;
  client_cfg.seed = c.o.seed;
  judge::JudgeClient client(client_cfg, *transport);
  const auto loader = [&](const std::string& id) {
    const auto it = path_of.find(id);
    if (it == path_of.end()) throw InputError("image id '" + id + "' not in manifest");
    return decode_image(it->second);
  };
  c.progress("judging " + std::to_string(set.pairs.size()) + " pairs");
  const auto run = judge::evaluate_judge(client, set.pairs, loader, c.o.jobs);

  {
    auto f = open_out(o.out);
    f << judge::redact(json{{"config", resolved_config(c)}}.dump(), secrets) << '\n';
    judge::write_outcomes_jsonl(f, run.outcomes, secrets);
  }
  if (!o.report.empty()) {
    json j = run.to_json();
    j["client"] = client_cfg.to_json();
    j["config"] = resolved_config(c);
    auto f = open_out(o.report);
    f << judge::redact(j.dump(2), secrets) << '\n';
  }
  print_accuracy(c.out, run.table);
}

void cmd_rank(const Context& c) {
  const auto& o = c.o.rank;
  const auto principle = principle_from_key(o.principle);
  if (!principle) throw ConfigError("unknown principle '" + o.principle + "'");
  const auto ls = gather(c, o.in);
  if (o.in.labels.empty() && o.in.manifest.empty() && o.in.corpus.empty()) {
    throw ConfigError("rank needs labels: --labels, --manifest or --corpus");
  }
  std::vector<analysis::LabeledScore> labeled;
  for (std::size_t i = 0; i < ls.ids.size(); ++i) labeled.emplace_back(ls.labels[i], ls.scores[i]);
  const auto aggregates = analysis::aggregate_by_group(labeled);
  const auto order = analysis::rank_groups(aggregates, *principle);
  {
    auto f = open_out(o.out);
    f << config_comment(c);
    analysis::write_aggregates_csv(f, aggregates);
  }
  std::map<std::string, const analysis::GroupAggregate*> agg_of;
  for (const auto& a : aggregates) agg_of[a.label] = &a;
  ordered_json ranking = ordered_json::array();
  char buf[160];
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto* a = agg_of.at(order[i]);
    std::snprintf(buf, sizeof buf, "%2zu  %-28s %.4f  (n=%zu)", i + 1, order[i].c_str(), a->mean[*principle], a->n);
    c.out << buf << '\n';
    ranking.push_back({{"rank", i + 1}, {"label", order[i]}, {"mean", a->mean[*principle]}, {"n", a->n}});
  }
  if (!o.ranking_out.empty()) {
    ordered_json j;
    j["principle"] = o.principle;
    j["ranking"] = ranking;
    j["config"] = resolved_config(c);
    write_json_file(o.ranking_out, j);
  }
}

void cmd_project(const Context& c) {
  const auto& o = c.o.project;
  const auto ls = gather(c, o.in);
  analysis::TsneConfig cfg;
  cfg.dims = o.dims;
  cfg.perplexity = o.perplexity;
  cfg.iterations = o.iterations;
  cfg.seed = c.o.seed;
  cfg.theta = o.theta;
  cfg.learning_rate = o.learning_rate;
  cfg.method = o.method == "exact"        ? analysis::TsneMethod::Exact
               : o.method == "barnes_hut" ? analysis::TsneMethod::BarnesHut
                                          : analysis::TsneMethod::Auto;
  c.progress("projecting " + std::to_string(ls.ids.size()) + " score vectors");
  const auto result = analysis::tsne_project(ls.scores, ls.labels, cfg);
  {
    auto f = open_out(o.out);
    f << config_comment(c);
    analysis::write_projection_csv(f, result, ls.ids);
  }
  ordered_json j;
  j["n"] = result.size();
  j["method"] = result.method;
  j["kl_divergence"] = result.kl_divergence;
  j["tsne"] = cfg.to_json();
  try {
    j["silhouette"] = analysis::cluster_separation(result.coords, result.dims, result.labels);
  } catch (const DomainError& e) {
    j["silhouette"] = nullptr;
    j["silhouette_error"] = e.what();
  }
  j["config"] = resolved_config(c);
  if (!o.report.empty()) write_json_file(o.report, j);
  c.out << (j["silhouette"].is_null() ? std::string("silhouette: n/a")
                                      : "silhouette: " + std::to_string(j["silhouette"].get<double>()))
        << '\n';
}

void cmd_validate(const Context& c) {
  const auto& o = c.o.validate;
  data::ManifestOptions mo;
  mo.check = o.decode ? data::ImageCheck::Decode : data::ImageCheck::Exists;
  const auto m = data::load_manifest(o.manifest, mo);
  std::map<std::string, std::size_t> by_source;
  for (const auto& r : m.records) ++by_source[std::string(to_string(r.source))];
  ordered_json j;
  j["records"] = m.records.size();
  j["scale"] = to_string(m.scale);
  j["provenance"] = m.provenance;
  j["by_source"] = by_source;
  c.out << j.dump(2) << '\n';
  if (o.expect >= 0) {
    const auto check = data::check_count(o.manifest, std::size_t(o.expect), m.records.size());
    if (!check.ok()) {
      throw InputError(o.manifest + ": expected " + std::to_string(check.expected) + " records, found " +
                       std::to_string(check.actual));
    }
  }
}

using Handler = void (*)(const Context&);

const std::vector<std::pair<std::string, Handler>>& handlers() {
  static const std::vector<std::pair<std::string, Handler>> h = {
      {"init-checkpoint", cmd_init}, {"score", cmd_score},       {"train", cmd_train},
      {"eval", cmd_eval},            {"pairs", cmd_pairs},       {"pair-accuracy", cmd_pair_accuracy},
      {"judge", cmd_judge},          {"rank", cmd_rank},         {"project", cmd_project},
      {"validate", cmd_validate},
  };
  return h;
}

struct ErrorInfo {
  int code;
  std::string type;
};

ErrorInfo classify(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return {1, "config"};
  if (dynamic_cast<const ValidationError*>(&e)) return {1, "validation"};
  if (dynamic_cast<const InputError*>(&e)) return {1, "input"};
  if (dynamic_cast<const DomainError*>(&e)) return {2, "domain"};
  if (dynamic_cast<const CheckpointError*>(&e)) return {2, "checkpoint"};
  if (dynamic_cast<const BackendError*>(&e)) return {2, "backend"};
  if (dynamic_cast<const ParseError*>(&e)) return {2, "parse"};
  return {2, "runtime"};
}

void report_error(std::ostream& err, int code, const std::string& type, const std::string& message,
                  const std::vector<RowIssue>* issues = nullptr) {
  ordered_json j;
  j["error"]["type"] = type;
  j["error"]["message"] = message;
  j["error"]["exit_code"] = code;
  if (issues) {
    j["error"]["issues"] = json::array();
    for (const auto& i : *issues) j["error"]["issues"].push_back({{"row", i.row}, {"message", i.message}});
  }
  err << j.dump() << '\n';
}

}  // namespace

AppHandle make_app() {
  AppHandle h;
  h.options = std::make_unique<Options>();
  h.app = build(*h.options);
  return h;
}

std::vector<std::string> subcommand_names() {
  std::vector<std::string> names;
  for (const auto& [name, fn] : handlers()) names.push_back(name);
  return names;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  AppHandle h = make_app();
  try {
    h.app->parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return h.app->exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return h.app->exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return h.app->exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    report_error(err, 1, "usage", e.what());
    return 1;
  }
  CLI::App* sub = h.app->get_subcommands().front();
  const Context ctx{*h.options, *h.app, *sub, out, err};
  try {
    for (const auto& [name, fn] : handlers()) {
      if (name == sub->get_name()) fn(ctx);
    }
    return 0;
  } catch (const ValidationError& e) {
    report_error(err, 1, "validation", e.what(), &e.issues());
    return 1;
  } catch (const eval::InsufficientPairsError& e) {
    report_error(err, 1, "insufficient_pairs", e.what());
    return 1;
  } catch (const std::exception& e) {
    const auto info = classify(e);
    report_error(err, info.code, info.type, e.what());
    return info.code;
  }
}

}  // namespace wpclip::cli
