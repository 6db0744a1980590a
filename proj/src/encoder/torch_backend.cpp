#include "wpclip/torch_backend.hpp"

#include <fstream>
#include <mutex>

#include <torch/script.h>
#include <torch/torch.h>

#include "wpclip/clip_tokenizer.hpp"
#include "wpclip/errors.hpp"

namespace wpclip::encoder {

namespace fs = std::filesystem;

namespace {

constexpr const char* kFormat = "wpclip-torchscript-1";

// The profiling executor re-specializes graphs after warm-up runs, which can
// change floating-point results between the first and later calls.
void configure_executor() {
  static std::once_flag once;
  std::call_once(once, [] {
    torch::jit::getProfilingMode() = false;
    torch::jit::setGraphExecutorOptimize(false);
  });
}

torch::Tensor to_tensor(std::span<const ImageTensor> images) {
  if (images.empty()) throw DomainError("empty image batch");
  const int s = images.front().size;
  auto out = torch::empty({std::int64_t(images.size()), 3, s, s}, torch::kFloat32);
  float* dst = out.data_ptr<float>();
  for (const auto& t : images) {
    if (t.size != s || t.data.size() != std::size_t(3) * s * s) {
      throw InputError("image tensors in a batch must share one size");
    }
    dst = std::copy(t.data.begin(), t.data.end(), dst);
  }
  return out;
}

std::vector<Embedding> to_embeddings(const torch::Tensor& t) {
  const auto d = t.to(torch::kFloat64).contiguous();
  if (d.dim() != 2) throw BackendError("encoder output must be two-dimensional");
  std::vector<Embedding> out(std::size_t(d.size(0)));
  const double* p = d.data_ptr<double>();
  for (auto& e : out) {
    e.assign(p, p + d.size(1));
    p += d.size(1);
  }
  return out;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw CheckpointError("missing " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt " + p.string() + ": " + e.what());
  }
}

torch::jit::Module load_module(const fs::path& file) {
  configure_executor();
  if (!fs::exists(file)) throw CheckpointError("missing TorchScript archive " + file.string());
  try {
    auto m = torch::jit::load(file.string(), torch::kCPU);
    for (const char* method : {"encode_image", "encode_text"}) {
      if (!m.find_method(method)) {
        throw CheckpointError(file.string() + " has no " + method + " method");
      }
    }
    m.eval();
    return m;
  } catch (const c10::Error& e) {
    throw CheckpointError("cannot load " + file.string() + ": " + e.what_without_backtrace());
  }
}

}  // namespace

struct TorchScriptBackend::Impl {
  mutable torch::jit::Module module;
  ClipTokenizer tokenizer;
  std::string model_id;
  std::size_t embed_dim = 0;
  std::size_t context_length = 77;
  PreprocessSpec spec;
  std::optional<std::string> known_id;
  std::vector<std::string> names;
  std::vector<torch::Tensor> params;

  Impl(torch::jit::Module m, ClipTokenizer tok) : module(std::move(m)), tokenizer(std::move(tok)) {
    for (const auto& np : module.named_parameters(true)) {
      names.push_back(np.name);
      params.push_back(np.value);
    }
  }

  torch::Tensor image_forward(const torch::Tensor& pixels) const {
    return module.get_method("encode_image")({pixels}).toTensor();
  }

  torch::Tensor text_forward(std::span<const std::string> prompts) const {
    const auto b = std::int64_t(prompts.size()), l = std::int64_t(context_length);
    auto ids = torch::empty({b, l}, torch::kInt64), mask = torch::empty({b, l}, torch::kInt64);
    for (std::int64_t i = 0; i < b; ++i) {
      const auto p = tokenizer.encode_padded(prompts[std::size_t(i)], context_length);
      std::copy(p.ids.begin(), p.ids.end(), ids[i].data_ptr<std::int64_t>());
      std::copy(p.mask.begin(), p.mask.end(), mask[i].data_ptr<std::int64_t>());
    }
    return module.get_method("encode_text")({ids, mask}).toTensor();
  }

  template <class F>
  auto guarded(F&& f) const {
    try {
      return f();
    } catch (const c10::Error& e) {
      throw BackendError(std::string("torch: ") + e.what_without_backtrace());
    }
  }
};

TorchScriptBackend::TorchScriptBackend(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
TorchScriptBackend::~TorchScriptBackend() = default;

std::unique_ptr<TorchScriptBackend> TorchScriptBackend::from_export(const fs::path& dir) {
  const auto meta = read_json(dir / "export.json");
  try {
    if (meta.at("format").get<std::string>() != kFormat) {
      throw CheckpointError("unsupported export format in " + dir.string());
    }
    auto impl = std::make_unique<Impl>(load_module(dir / "model.pt"),
                                       ClipTokenizer::from_files(dir / "vocab.json", dir / "merges.txt"));
    impl->model_id = meta.at("model_id").get<std::string>();
    impl->embed_dim = meta.at("embed_dim").get<std::size_t>();
    impl->context_length = meta.at("context_length").get<std::size_t>();
    impl->spec.target_size = meta.at("image_size").get<int>();
    impl->spec.channel_mean = meta.at("channel_mean").get<std::array<float, 3>>();
    impl->spec.channel_std = meta.at("channel_std").get<std::array<float, 3>>();
    return std::unique_ptr<TorchScriptBackend>(new TorchScriptBackend(std::move(impl)));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt export.json in " + dir.string() + ": " + e.what());
  }
}

std::unique_ptr<TorchScriptBackend> TorchScriptBackend::load(const fs::path& dir, const CheckpointInfo& info) {
  if (info.backend_config.value("format", std::string()) != kFormat) {
    throw CheckpointError("unsupported TorchScript checkpoint format in " + dir.string());
  }
  auto impl = std::make_unique<Impl>(load_module(dir / "model.pt"),
                                     ClipTokenizer::from_files(dir / "vocab.json", dir / "merges.txt"));
  impl->model_id = info.model_id;
  impl->embed_dim = info.embed_dim;
  impl->context_length = info.backend_config.at("context_length").get<std::size_t>();
  impl->spec = info.preprocess;
  impl->known_id = info.checkpoint_id;
  return std::unique_ptr<TorchScriptBackend>(new TorchScriptBackend(std::move(impl)));
}

std::string TorchScriptBackend::model_id() const { return impl_->model_id; }
std::size_t TorchScriptBackend::embed_dim() const { return impl_->embed_dim; }
const PreprocessSpec& TorchScriptBackend::preprocess_spec() const { return impl_->spec; }
std::size_t TorchScriptBackend::max_prompt_tokens() const { return impl_->context_length; }

std::size_t TorchScriptBackend::count_tokens(std::string_view prompt) const {
  return impl_->tokenizer.encode(prompt).size() + 2;
}

void TorchScriptBackend::set_mode(Mode m) {
  EncoderBackend::set_mode(m);
  impl_->module.train(m == Mode::Train);
}

void TorchScriptBackend::save_weights(const fs::path& dir) const {
  impl_->guarded([&] {
    impl_->module.save((dir / "model.pt").string());
    return 0;
  });
  impl_->tokenizer.save(dir);
}

nlohmann::json TorchScriptBackend::backend_config() const {
  return {{"format", kFormat}, {"context_length", impl_->context_length}};
}

std::optional<std::string> TorchScriptBackend::known_checkpoint_id() const { return impl_->known_id; }

Embedding TorchScriptBackend::raw_image_features(const ImageTensor& tensor) const {
  return raw_image_features_batch(std::span(&tensor, 1)).front();
}

std::vector<Embedding> TorchScriptBackend::raw_image_features_batch(std::span<const ImageTensor> tensors) const {
  torch::NoGradGuard no_grad;
  return impl_->guarded([&] { return to_embeddings(impl_->image_forward(to_tensor(tensors))); });
}

Embedding TorchScriptBackend::raw_text_features(std::string_view prompt) const {
  torch::NoGradGuard no_grad;
  const std::string p(prompt);
  return impl_->guarded([&] { return to_embeddings(impl_->text_forward(std::span(&p, 1))).front(); });
}

std::vector<std::string> TorchScriptBackend::parameter_names() const { return impl_->names; }

std::size_t TorchScriptBackend::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : impl_->params) n += std::size_t(p.numel());
  return n;
}

training::LossBreakdown TorchScriptBackend::compute_gradients(std::span<const training::TrainSample> batch,
                                                              const scoring::PromptRegistry& registry,
                                                              const scoring::ScoreMode& mode) {
  if (batch.empty()) throw DomainError("empty training batch");
  return impl_->guarded([&] {
    for (auto& p : impl_->params) {
      p.requires_grad_(true);
      if (p.grad().defined()) p.mutable_grad().zero_();
    }
    std::vector<ImageTensor> images;
    auto gt = torch::empty({std::int64_t(batch.size()), std::int64_t(kNumPrinciples)}, torch::kFloat64);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      images.push_back(*batch[i].image);
      for (Principle p : kAllPrinciples) gt[std::int64_t(i)][std::int64_t(index_of(p))] = batch[i].gt[p];
    }
    // Column 2*i is the low pole of principle i, 2*i+1 the high pole.
    std::vector<std::string> prompts;
    for (Principle p : kAllPrinciples) {
      prompts.push_back(registry[p].text_low);
      prompts.push_back(registry[p].text_high);
    }
    auto img = impl_->image_forward(to_tensor(images)).to(torch::kFloat64);
    auto txt = impl_->text_forward(prompts).to(torch::kFloat64);
    img = img / img.norm(2, 1, true);
    txt = txt / txt.norm(2, 1, true);
    const auto sims = img.matmul(txt.t());
    const auto s_low = sims.index({torch::indexing::Slice(), torch::indexing::Slice(0, torch::indexing::None, 2)});
    const auto s_high = sims.index({torch::indexing::Slice(), torch::indexing::Slice(1, torch::indexing::None, 2)});
    torch::Tensor score;
    if (mode.kind == scoring::ScoreMode::Kind::Softmax) {
      score = torch::sigmoid(mode.temperature * (s_high - s_low));
    } else {
      const auto a_low = ((s_low + 1.0) / 2.0).clamp_min(0.0), a_high = ((s_high + 1.0) / 2.0).clamp_min(0.0);
      const auto sum = a_low + a_high;
      if (sum.min().item<double>() < mode.epsilon) throw DomainError("ratio score degenerate in training batch");
      score = a_high / sum;
    }
    const auto per = (score - gt).pow(2).mean(0);
    per.sum().backward();
    training::LossBreakdown loss;
    const auto values = per.detach().contiguous();
    for (std::size_t k = 0; k < kNumPrinciples; ++k) loss.per_principle[k] = values[std::int64_t(k)].item<double>();
    return loss;
  });
}

double TorchScriptBackend::clip_gradients(double max_norm) {
  double sq = 0.0;
  for (const auto& p : impl_->params) {
    if (p.grad().defined()) sq += p.grad().to(torch::kFloat64).pow(2).sum().item<double>();
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / (norm + 1e-12);
    for (auto& p : impl_->params) {
      if (p.grad().defined()) p.mutable_grad().mul_(scale);
    }
  }
  return norm;
}

namespace {

class TorchAdam final : public training::Optimizer {
 public:
  TorchAdam(std::vector<torch::Tensor> params, const training::AdamConfig& cfg, std::optional<std::string>* id)
      : id_(id) {
    if (cfg.weight_decay > 0.0) {
      opt_ = std::make_unique<torch::optim::AdamW>(
          params, torch::optim::AdamWOptions(cfg.learning_rate)
                      .betas({cfg.beta1, cfg.beta2})
                      .eps(cfg.epsilon)
                      .weight_decay(cfg.weight_decay));
    } else {
      opt_ = std::make_unique<torch::optim::Adam>(
          params, torch::optim::AdamOptions(cfg.learning_rate).betas({cfg.beta1, cfg.beta2}).eps(cfg.epsilon));
    }
  }

  void step() override {
    opt_->step();
    ++steps_;
    id_->reset();
  }
  std::uint64_t steps() const override { return steps_; }

  void save_state(const fs::path& file) const override {
    torch::serialize::OutputArchive ar;
    opt_->save(ar);
    ar.write("wpclip_steps", torch::tensor(std::int64_t(steps_)));
    ar.save_to(file.string());
  }

  void load_state(const fs::path& file) override {
    try {
      torch::serialize::InputArchive ar;
      ar.load_from(file.string());
      opt_->load(ar);
      torch::Tensor t;
      ar.read("wpclip_steps", t);
      steps_ = std::uint64_t(t.item<std::int64_t>());
    } catch (const c10::Error& e) {
      throw CheckpointError("cannot restore optimizer state from " + file.string() + ": " +
                            e.what_without_backtrace());
    }
  }

 private:
  std::unique_ptr<torch::optim::Optimizer> opt_;
  std::optional<std::string>* id_;
  std::uint64_t steps_ = 0;
};

}  // namespace

std::unique_ptr<training::Optimizer> TorchScriptBackend::make_optimizer(const training::AdamConfig& cfg) {
  for (auto& p : impl_->params) p.requires_grad_(true);
  return std::make_unique<TorchAdam>(impl_->params, cfg, &impl_->known_id);
}

}  // namespace wpclip::encoder
