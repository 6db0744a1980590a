#include "wpclip/projection_head.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "wpclip/errors.hpp"
#include "wpclip/rng.hpp"

namespace wpclip::encoder {

namespace fs = std::filesystem;

namespace {

constexpr char kWeightsFile[] = "weights.bin";
constexpr char kMagic[8] = {'W', 'P', 'H', 'E', 'A', 'D', '0', '1'};
constexpr std::size_t kImageFeatureDim = StubBackend::kPooledDim;

static_assert(std::endian::native == std::endian::little,
              "weight files are written in little-endian byte order");

struct NamedMatrix {
  std::string name;
  std::uint64_t rows, cols;
  std::vector<double>* data;
};

void write_matrices(const fs::path& file, const std::vector<NamedMatrix>& mats) {
  std::ofstream out(file, std::ios::binary);
  out.write(kMagic, sizeof kMagic);
  const std::uint32_t count = static_cast<std::uint32_t>(mats.size());
  out.write(reinterpret_cast<const char*>(&count), sizeof count);
  for (const auto& m : mats) {
    const std::uint32_t len = static_cast<std::uint32_t>(m.name.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(m.name.data(), len);
    out.write(reinterpret_cast<const char*>(&m.rows), sizeof m.rows);
    out.write(reinterpret_cast<const char*>(&m.cols), sizeof m.cols);
    out.write(reinterpret_cast<const char*>(m.data->data()),
              std::streamsize(m.data->size() * sizeof(double)));
  }
  if (!out) throw CheckpointError("failed writing " + file.string());
}

void read_matrices(const fs::path& file, const std::vector<NamedMatrix>& mats) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw CheckpointError("weights missing: " + file.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("not a projection-head weight file: " + file.string());
  }
  std::uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof count);
  if (!in || count != mats.size()) throw CheckpointError("weight file has wrong tensor count");
  for (const auto& m : mats) {
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || len > 256) throw CheckpointError("corrupt weight file " + file.string());
    std::string name(len, '\0');
    in.read(name.data(), len);
    std::uint64_t rows = 0, cols = 0;
    in.read(reinterpret_cast<char*>(&rows), sizeof rows);
    in.read(reinterpret_cast<char*>(&cols), sizeof cols);
    if (!in || name != m.name) {
      throw CheckpointError("weight file: expected tensor '" + m.name + "', found '" + name + "'");
    }
    if (rows != m.rows || cols != m.cols) {
      throw CheckpointError("weight tensor '" + name + "' has shape " + std::to_string(rows) +
                            "x" + std::to_string(cols) + ", expected " + std::to_string(m.rows) +
                            "x" + std::to_string(m.cols) + " (embed_dim " +
                            std::to_string(m.rows) + ")");
    }
    in.read(reinterpret_cast<char*>(m.data->data()), std::streamsize(rows * cols * sizeof(double)));
    if (!in) throw CheckpointError("truncated weight file " + file.string());
  }
}

void matvec(const std::vector<double>& w, std::size_t rows, std::span<const double> x,
            Embedding& out) {
  const std::size_t cols = x.size();
  out.assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = w.data() + r * cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += row[c] * x[c];
    out[r] = acc;
  }
}

// Backprop through f = u / |u|: du = (df - f (f . df)) / |u|.
void backprop_normalize(std::span<const double> f, double norm, std::span<double> df) {
  double proj = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) proj += f[i] * df[i];
  for (std::size_t i = 0; i < f.size(); ++i) df[i] = (df[i] - f[i] * proj) / norm;
}

void add_outer(std::vector<double>& g, std::span<const double> du, std::span<const double> x) {
  const std::size_t cols = x.size();
  for (std::size_t r = 0; r < du.size(); ++r) {
    double* row = g.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += du[r] * x[c];
  }
}

struct Normalized {
  Embedding f;
  double norm;
};

Normalized normalized(Embedding u) {
  const double n = l2_norm(u);
  if (!std::isfinite(n) || n == 0.0) throw BackendError("degenerate projection output");
  for (double& v : u) v /= n;
  return {std::move(u), n};
}

}  // namespace

ProjectionHeadBackend::ProjectionHeadBackend(Config config) : config_(config) {
  if (config_.embed_dim == 0 || config_.text_feature_dim == 0) {
    throw ConfigError("projection head dimensions must be positive");
  }
  const std::size_t d = config_.embed_dim;
  w_img_.resize(d * kImageFeatureDim);
  w_txt_.resize(d * config_.text_feature_dim);
  Rng rng_img(derive_seed(config_.seed, "head.w_img"));
  const double s_img = 1.0 / std::sqrt(double(kImageFeatureDim));
  for (double& w : w_img_) w = rng_img.normal() * s_img;
  Rng rng_txt(derive_seed(config_.seed, "head.w_txt"));
  const double s_txt = 1.0 / std::sqrt(double(config_.text_feature_dim));
  for (double& w : w_txt_) w = rng_txt.normal() * s_txt;
  // Shared offset so that all prompts start close together, as in a
  // pretrained text tower; without it the score head begins saturated.
  b_txt_ = hashed_unit_vector("head.b_txt", d, config_.seed);
  for (double& b : b_txt_) b *= config_.text_anchor;
  g_img_.assign(w_img_.size(), 0.0);
  g_txt_.assign(w_txt_.size(), 0.0);
  g_btxt_.assign(b_txt_.size(), 0.0);
}

std::unique_ptr<ProjectionHeadBackend> ProjectionHeadBackend::load(const fs::path& dir,
                                                                   const CheckpointInfo& info) {
  Config cfg;
  cfg.embed_dim = info.embed_dim;
  cfg.text_feature_dim = info.backend_config.at("text_feature_dim").get<std::size_t>();
  cfg.seed = info.backend_config.at("seed").get<std::uint64_t>();
  cfg.text_anchor = info.backend_config.at("text_anchor").get<double>();
  cfg.preprocess = info.preprocess;
  auto head = std::make_unique<ProjectionHeadBackend>(cfg);
  read_matrices(dir / kWeightsFile,
                {{"w_img", cfg.embed_dim, kImageFeatureDim, &head->w_img_},
                 {"w_txt", cfg.embed_dim, cfg.text_feature_dim, &head->w_txt_},
                 {"b_txt", cfg.embed_dim, 1, &head->b_txt_}});
  return head;
}

std::string ProjectionHeadBackend::model_id() const {
  return "projection-head-" + std::to_string(config_.embed_dim);
}

nlohmann::json ProjectionHeadBackend::backend_config() const {
  return {{"seed", config_.seed},
          {"text_feature_dim", config_.text_feature_dim},
          {"text_anchor", config_.text_anchor},
          {"image_feature_dim", kImageFeatureDim}};
}

void ProjectionHeadBackend::save_weights(const fs::path& dir) const {
  auto* self = const_cast<ProjectionHeadBackend*>(this);
  write_matrices(dir / kWeightsFile,
                 {{"w_img", config_.embed_dim, kImageFeatureDim, &self->w_img_},
                  {"w_txt", config_.embed_dim, config_.text_feature_dim, &self->w_txt_},
                  {"b_txt", config_.embed_dim, 1, &self->b_txt_}});
}

Embedding ProjectionHeadBackend::text_features(std::string_view prompt) const {
  return hashed_unit_vector(prompt, config_.text_feature_dim,
                            derive_seed(config_.seed, "head.text"));
}

Embedding ProjectionHeadBackend::raw_image_features(const ImageTensor& tensor) const {
  const auto phi = pooled_features(tensor, StubBackend::kPoolGrid);
  Embedding u;
  matvec(w_img_, config_.embed_dim, phi, u);
  return u;
}

Embedding ProjectionHeadBackend::raw_text_features(std::string_view prompt) const {
  const auto psi = text_features(prompt);
  Embedding v;
  matvec(w_txt_, config_.embed_dim, psi, v);
  for (std::size_t k = 0; k < v.size(); ++k) v[k] += b_txt_[k];
  return v;
}

std::vector<std::string> ProjectionHeadBackend::parameter_names() const {
  return {"w_img", "w_txt", "b_txt"};
}

std::size_t ProjectionHeadBackend::parameter_count() const {
  return w_img_.size() + w_txt_.size() + b_txt_.size();
}

std::vector<training::ParamRef> ProjectionHeadBackend::parameters() {
  return {{"w_img", w_img_, g_img_}, {"w_txt", w_txt_, g_txt_}, {"b_txt", b_txt_, g_btxt_}};
}

training::LossBreakdown ProjectionHeadBackend::evaluate_loss(
    std::span<const training::TrainSample> batch, const scoring::PromptRegistry& registry,
    const scoring::ScoreMode& mode) const {
  if (batch.empty()) throw DomainError("empty training batch");
  const auto prompts = scoring::embed_prompts(*this, registry);
  training::LossBreakdown loss;
  const double inv_b = 1.0 / double(batch.size());
  for (const auto& sample : batch) {
    const auto scores = scoring::score_embedding(encode_tensor(*sample.image), prompts, mode);
    for (Principle p : kAllPrinciples) {
      const double err = scores[p] - sample.gt[p];
      loss.per_principle[index_of(p)] += err * err * inv_b;
    }
  }
  return loss;
}

training::LossBreakdown ProjectionHeadBackend::compute_gradients(
    std::span<const training::TrainSample> batch, const scoring::PromptRegistry& registry,
    const scoring::ScoreMode& mode) {
  if (batch.empty()) throw DomainError("empty training batch");
  std::fill(g_img_.begin(), g_img_.end(), 0.0);
  std::fill(g_txt_.begin(), g_txt_.end(), 0.0);
  std::fill(g_btxt_.begin(), g_btxt_.end(), 0.0);
  const std::size_t d = config_.embed_dim;

  // Prompt side: index 2*i is the low pole of principle i, 2*i+1 the high pole.
  struct TextNode {
    Embedding psi;
    Normalized emb;
    std::vector<double> grad;
  };
  std::vector<TextNode> text;
  text.reserve(2 * kNumPrinciples);
  for (Principle p : kAllPrinciples) {
    for (const std::string* prompt : {&registry[p].text_low, &registry[p].text_high}) {
      if (prompt->empty()) throw InputError("empty text prompt");
      Embedding psi = text_features(*prompt);
      Embedding v;
      matvec(w_txt_, d, psi, v);
      for (std::size_t k = 0; k < d; ++k) v[k] += b_txt_[k];
      text.push_back({std::move(psi), normalized(std::move(v)), std::vector<double>(d, 0.0)});
    }
  }

  training::LossBreakdown loss;
  const double inv_b = 1.0 / double(batch.size());
  std::vector<double> gf(d);
  for (const auto& sample : batch) {
    const auto phi = pooled_features(*sample.image, StubBackend::kPoolGrid);
    Embedding u;
    matvec(w_img_, d, phi, u);
    const Normalized img = normalized(std::move(u));
    std::fill(gf.begin(), gf.end(), 0.0);

    for (Principle p : kAllPrinciples) {
      const std::size_t i = index_of(p);
      auto& low = text[2 * i];
      auto& high = text[2 * i + 1];
      const scoring::SimilarityPair sim{scoring::similarity(img.f, low.emb.f),
                                        scoring::similarity(img.f, high.emb.f)};
      const double score = scoring::pair_score(sim, mode);
      const auto dscore = scoring::pair_score_gradient(sim, mode);
      const double err = score - sample.gt[p];
      loss.per_principle[i] += err * err * inv_b;
      const double c = 2.0 * err * inv_b;
      if (!std::isfinite(c)) continue;
      for (std::size_t k = 0; k < d; ++k) {
        gf[k] += c * (dscore.d_low * low.emb.f[k] + dscore.d_high * high.emb.f[k]);
        low.grad[k] += c * dscore.d_low * img.f[k];
        high.grad[k] += c * dscore.d_high * img.f[k];
      }
    }
    backprop_normalize(img.f, img.norm, gf);
    add_outer(g_img_, gf, phi);
  }

  for (auto& node : text) {
    backprop_normalize(node.emb.f, node.emb.norm, node.grad);
    add_outer(g_txt_, node.grad, node.psi);
    for (std::size_t k = 0; k < d; ++k) g_btxt_[k] += node.grad[k];
  }
  return loss;
}

double ProjectionHeadBackend::clip_gradients(double max_norm) {
  const std::span<double> grads[] = {g_img_, g_txt_, g_btxt_};
  return training::clip_global_norm(grads, max_norm);
}

std::unique_ptr<training::Optimizer> ProjectionHeadBackend::make_optimizer(
    const training::AdamConfig& cfg) {
  return std::make_unique<training::Adam>(parameters(), cfg);
}

}  // namespace wpclip::encoder
