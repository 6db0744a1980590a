#include "wpclip/training.hpp"

#include <algorithm>
#include <chrono>
#include <deque>
#include <optional>
#include <cmath>
#include <fstream>
#include <numeric>

#include "wpclip/checkpoint.hpp"
#include "wpclip/data.hpp"
#include "wpclip/errors.hpp"
#include "wpclip/rng.hpp"

namespace wpclip::training {

namespace fs = std::filesystem;

namespace {

void check_unit(double v, const char* what) {
  if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
    throw DomainError(std::string(what) + " " + std::to_string(v) + " outside [0,1]");
  }
}

void write_json(const fs::path& file, const nlohmann::json& j) {
  std::ofstream out(file);
  out << j.dump(2) << '\n';
  if (!out) throw Error("failed writing " + file.string());
}

std::vector<TrainLogEntry> read_log(const fs::path& file) {
  std::vector<TrainLogEntry> log;
  std::ifstream in(file);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) log.push_back(TrainLogEntry::from_json(nlohmann::json::parse(line)));
  }
  return log;
}

// Preprocessed images for the training set, cached while within budget.
class TensorSource {
 public:
  TensorSource(std::span<const AnnotationRecord> records, const PreprocessSpec& spec,
               std::size_t budget_bytes)
      : records_(records), spec_(spec), cache_(records.size()) {
    const std::size_t per = std::size_t(3) * spec.target_size * spec.target_size * sizeof(float);
    cache_all_ = per * records.size() <= budget_bytes;
  }

  const ImageTensor& get(std::size_t i) {
    if (cache_[i]) return *cache_[i];
    ImageTensor t = data::preprocess(records_[i].image_path, spec_);
    if (cache_all_) {
      cache_[i] = std::move(t);
      return *cache_[i];
    }
    scratch_.push_back(std::move(t));
    return scratch_.back();
  }

  // Drops uncached tensors once a batch is done.
  void release() { scratch_.clear(); }

 private:
  std::span<const AnnotationRecord> records_;
  PreprocessSpec spec_;
  std::vector<std::optional<ImageTensor>> cache_;
  std::deque<ImageTensor> scratch_;
  bool cache_all_ = false;
};

bool all_finite(const std::array<double, kNumPrinciples>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace

double principle_loss(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size()) {
    throw DomainError("principle_loss: " + std::to_string(pred.size()) + " predictions vs " +
                      std::to_string(gt.size()) + " targets");
  }
  if (pred.empty()) throw DomainError("principle_loss: empty batch");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    check_unit(pred[i], "principle_loss: prediction");
    check_unit(gt[i], "principle_loss: ground truth");
    const double d = pred[i] - gt[i];
    acc += d * d;
  }
  return acc / double(pred.size());
}

double principle_loss(double pred, double gt) {
  return principle_loss(std::span<const double>(&pred, 1), std::span<const double>(&gt, 1));
}

double total_loss(std::span<const double> per_principle) {
  if (per_principle.size() != kNumPrinciples) {
    throw DomainError("total_loss expects " + std::to_string(kNumPrinciples) +
                      " per-principle losses, got " + std::to_string(per_principle.size()));
  }
  double sum = 0.0;
  for (double v : per_principle) {
    if (!std::isfinite(v) || v < 0.0) throw DomainError("total_loss: invalid loss value");
    sum += v;
  }
  return sum;
}

Split split_dataset(std::span<const AnnotationRecord> records, double val_fraction,
                    std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ConfigError("val_fraction must lie in (0,1), got " + std::to_string(val_fraction));
  }
  if (records.empty()) throw ConfigError("cannot split an empty dataset");
  const std::size_t n = records.size();
  const auto n_val = static_cast<std::size_t>(std::llround(double(n) * val_fraction));
  if (n_val == 0 || n_val >= n) {
    throw ConfigError("val_fraction " + std::to_string(val_fraction) + " on " +
                      std::to_string(n) + " records leaves an empty split");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span(order));
  std::vector<bool> is_val(n, false);
  for (std::size_t i = 0; i < n_val; ++i) is_val[order[i]] = true;

  Split s;
  s.train.reserve(n - n_val);
  s.val.reserve(n_val);
  for (std::size_t i = 0; i < n; ++i) (is_val[i] ? s.val : s.train).push_back(records[i]);
  return s;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in (0,1)");
  if (grad_clip_norm && !(*grad_clip_norm > 0.0)) throw ConfigError("grad_clip_norm must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0,1)");
  }
  if (!(adam_epsilon > 0.0)) throw ConfigError("adam_epsilon must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be nonnegative");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"max_epochs", max_epochs},
          {"val_fraction", val_fraction},
          {"seed", seed},
          {"score_mode", score_mode.to_string()},
          {"early_stop_patience", early_stop_patience},
          {"grad_clip_norm", grad_clip_norm ? nlohmann::json(*grad_clip_norm) : nlohmann::json()},
          {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},
          {"adam_epsilon", adam_epsilon},
          {"weight_decay", weight_decay}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.seed = j.value("seed", c.seed);
  if (j.contains("score_mode")) c.score_mode = scoring::ScoreMode::parse(j["score_mode"].get<std::string>());
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  if (j.contains("grad_clip_norm")) {
    c.grad_clip_norm = j["grad_clip_norm"].is_null()
                           ? std::nullopt
                           : std::optional<double>(j["grad_clip_norm"].get<double>());
  }
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  return c;
}

nlohmann::json TrainLogEntry::to_json() const {
  nlohmann::ordered_json per;
  for (Principle p : kAllPrinciples) per[std::string(key(p))] = per_principle_val_mse[index_of(p)];
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["train_total_loss"] = train_total_loss;
  j["val_total_loss"] = val_total_loss;
  j["per_principle_val_mse"] = per;
  j["wall_time_s"] = wall_time_s;
  return j;
}

TrainLogEntry TrainLogEntry::from_json(const nlohmann::json& j) {
  TrainLogEntry e;
  e.epoch = j.at("epoch").get<std::size_t>();
  e.train_total_loss = j.at("train_total_loss").get<double>();
  e.val_total_loss = j.at("val_total_loss").get<double>();
  for (Principle p : kAllPrinciples) {
    e.per_principle_val_mse[index_of(p)] =
        j.at("per_principle_val_mse").at(std::string(key(p))).get<double>();
  }
  e.wall_time_s = j.value("wall_time_s", 0.0);
  return e;
}

std::array<double, kNumPrinciples> validation_mse(const encoder::EncoderBackend& backend,
                                                  const scoring::PromptRegistry& registry,
                                                  std::span<const ImageTensor> tensors,
                                                  std::span<const AnnotationRecord> records,
                                                  const scoring::ScoreMode& mode) {
  if (tensors.size() != records.size() || records.empty()) {
    throw DomainError("validation set misaligned or empty");
  }
  const scoring::Scorer scorer(backend, registry, mode);
  std::array<double, kNumPrinciples> mse{};
  for (std::size_t i = 0; i < records.size(); ++i) {
    const ScoreVector s = scorer.score_tensor(tensors[i]);
    for (Principle p : kAllPrinciples) {
      const double d = s[p] - records[i].gt[p];
      mse[index_of(p)] += d * d;
    }
  }
  for (double& v : mse) v /= double(records.size());
  return mse;
}

TrainResult train(std::unique_ptr<encoder::EncoderBackend> backend,
                  const scoring::PromptRegistry& registry,
                  std::span<const AnnotationRecord> records, const TrainConfig& config,
                  const TrainOptions& options) {
  config.validate();
  if (!backend) throw ConfigError("train: no backend");
  if (!backend->trainable()) {
    throw ConfigError("backend '" + backend->kind() + "' does not support fine-tuning");
  }
  if (records.empty()) throw ConfigError("train: empty training set");
  if (options.run_dir.empty()) throw ConfigError("train: run directory required");

  const fs::path run = options.run_dir;
  fs::create_directories(run);
  const fs::path best_dir = run / "best";
  const fs::path last_dir = run / "last";
  const fs::path log_file = run / "log.jsonl";

  const Split split = split_dataset(records, config.val_fraction, derive_seed(config.seed, "split"));
  {
    nlohmann::json ids = {{"train", nlohmann::json::array()}, {"val", nlohmann::json::array()}};
    for (const auto& r : split.train) ids["train"].push_back(r.image_id);
    for (const auto& r : split.val) ids["val"].push_back(r.image_id);
    write_json(run / "split.json", ids);
  }
  write_json(run / "config.json", {{"train_config", config.to_json()},
                                   {"prompts", registry.to_json()},
                                   {"backend", backend->kind()},
                                   {"model_id", backend->model_id()},
                                   {"embed_dim", backend->embed_dim()}});

  const PreprocessSpec spec = backend->preprocess_spec();
  std::vector<ImageTensor> val_tensors;
  val_tensors.reserve(split.val.size());
  for (const auto& r : split.val) val_tensors.push_back(data::preprocess(r.image_path, spec));
  TensorSource train_tensors(split.train, spec, options.tensor_cache_bytes);

  const AdamConfig adam{config.learning_rate, config.adam_beta1, config.adam_beta2,
                        config.adam_epsilon, config.weight_decay};
  auto extra = [&](std::size_t epoch, double val_total) {
    return nlohmann::json{{"train_config", config.to_json()},
                          {"prompts", registry.to_json()},
                          {"epoch", epoch},
                          {"val_total_loss", val_total}};
  };

  TrainResult result;
  std::unique_ptr<Optimizer> optimizer;
  std::size_t start_epoch = 0;
  std::size_t since_best = 0;

  if (options.resume && fs::exists(last_dir / "metadata.json")) {
    backend = encoder::load_checkpoint(last_dir);
    if (!backend->trainable()) throw CheckpointError("resume checkpoint is not trainable");
    optimizer = backend->trainable()->make_optimizer(adam);
    optimizer->load_state(last_dir / "optimizer.bin");
    result.log = read_log(log_file);
    const auto last_info = encoder::read_checkpoint_info(last_dir);
    start_epoch = last_info.extra.value("epoch", std::size_t{0});
    // Entries written after the last checkpoint belong to an interrupted epoch.
    std::erase_if(result.log, [&](const TrainLogEntry& e) { return e.epoch > start_epoch; });
    const auto best_info = encoder::read_checkpoint_info(best_dir);
    result.best_epoch = best_info.extra.value("epoch", std::size_t{0});
    result.best_val_total_loss = best_info.extra.value("val_total_loss", 0.0);
    since_best = start_epoch - std::min(start_epoch, result.best_epoch);
  } else {
    std::ofstream(log_file, std::ios::trunc);
    optimizer = backend->trainable()->make_optimizer(adam);
    backend->set_mode(encoder::Mode::Eval);
    const auto mse0 =
        validation_mse(*backend, registry, val_tensors, split.val, config.score_mode);
    result.best_val_total_loss = total_loss(mse0);
    result.best_epoch = 0;
    save_checkpoint(*backend, best_dir, extra(0, result.best_val_total_loss));
    save_checkpoint(*backend, last_dir, extra(0, result.best_val_total_loss));
    optimizer->save_state(last_dir / "optimizer.bin");
  }

  std::vector<std::size_t> order(split.train.size());
  for (std::size_t epoch = start_epoch + 1; epoch <= config.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    backend->set_mode(encoder::Mode::Train);
    auto* trainable = backend->trainable();

    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(config.seed, "epoch." + std::to_string(epoch)));
    rng.shuffle(std::span(order));

    double loss_sum = 0.0;
    std::size_t seen = 0;
    std::vector<TrainSample> batch;
    for (std::size_t start = 0; start < order.size() && !result.aborted;
         start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      batch.clear();
      for (std::size_t k = start; k < end; ++k) {
        batch.push_back({&train_tensors.get(order[k]), split.train[order[k]].gt});
      }
      const LossBreakdown loss = trainable->compute_gradients(batch, registry, config.score_mode);
      if (!all_finite(loss.per_principle)) {
        result.aborted = "non-finite training loss at epoch " + std::to_string(epoch) +
                         ", batch starting at " + std::to_string(start);
        break;
      }
      if (config.grad_clip_norm) {
        const double norm = trainable->clip_gradients(*config.grad_clip_norm);
        if (!std::isfinite(norm)) {
          result.aborted = "non-finite gradient norm at epoch " + std::to_string(epoch);
          break;
        }
      }
      optimizer->step();
      loss_sum += loss.total() * double(batch.size());
      seen += batch.size();
      train_tensors.release();
    }
    if (result.aborted) break;

    backend->set_mode(encoder::Mode::Eval);
    TrainLogEntry entry;
    entry.epoch = epoch;
    entry.train_total_loss = loss_sum / double(seen);
    entry.per_principle_val_mse =
        validation_mse(*backend, registry, val_tensors, split.val, config.score_mode);
    if (!all_finite(entry.per_principle_val_mse)) {
      result.aborted = "non-finite validation loss at epoch " + std::to_string(epoch);
      break;
    }
    entry.val_total_loss = total_loss(entry.per_principle_val_mse);
    entry.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    {
      std::ofstream log(log_file, std::ios::app);
      log << entry.to_json().dump() << '\n';
    }
    result.log.push_back(entry);

    save_checkpoint(*backend, last_dir, extra(epoch, entry.val_total_loss));
    optimizer->save_state(last_dir / "optimizer.bin");
    if (entry.val_total_loss < result.best_val_total_loss) {
      result.best_val_total_loss = entry.val_total_loss;
      result.best_epoch = epoch;
      save_checkpoint(*backend, best_dir, extra(epoch, entry.val_total_loss));
      since_best = 0;
    } else {
      ++since_best;
    }
    if (options.on_epoch) options.on_epoch(entry);
    if (config.early_stop_patience > 0 && since_best >= config.early_stop_patience) {
      result.early_stopped = true;
      break;
    }
  }

  if (result.aborted) {
    write_json(run / "abort.json", {{"diagnostic", *result.aborted},
                                    {"returned_checkpoint", best_dir.string()},
                                    {"best_epoch", result.best_epoch}});
  }
  result.best_checkpoint = best_dir;
  result.backend = encoder::load_checkpoint(best_dir);
  result.best_checkpoint_id = encoder::read_checkpoint_info(best_dir).checkpoint_id;
  return result;
}

}  // namespace wpclip::training
