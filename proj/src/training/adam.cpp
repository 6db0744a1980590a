#include "wpclip/adam.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>

#include "wpclip/errors.hpp"

namespace wpclip::training {

namespace {
constexpr char kMagic[8] = {'W', 'P', 'A', 'D', 'A', 'M', '0', '1'};
}

Adam::Adam(std::vector<ParamRef> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  if (!(config_.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    if (p.value.size() != p.grad.size()) {
      throw ConfigError("parameter '" + p.name + "' has mismatched gradient buffer");
    }
    m_.emplace_back(p.value.size(), 0.0);
    v_.emplace_back(p.value.size(), 0.0);
  }
}

void Adam::step() {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  const double lr = config_.learning_rate;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& value = params_[k].value;
    const auto& grad = params_[k].grad;
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      if (config_.weight_decay != 0.0) value[i] -= lr * config_.weight_decay * value[i];
      value[i] -= lr * mhat / (std::sqrt(vhat) + config_.epsilon);
    }
  }
}

void Adam::save_state(const std::filesystem::path& file) const {
  std::ofstream out(file, std::ios::binary);
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t n = params_.size();
  out.write(reinterpret_cast<const char*>(&steps_), sizeof steps_);
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const std::uint64_t len = m_[k].size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(reinterpret_cast<const char*>(m_[k].data()), std::streamsize(len * sizeof(double)));
    out.write(reinterpret_cast<const char*>(v_[k].data()), std::streamsize(len * sizeof(double)));
  }
  if (!out) throw CheckpointError("failed writing optimizer state " + file.string());
}

void Adam::load_state(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw CheckpointError("optimizer state missing: " + file.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || !std::equal(magic, magic + 8, kMagic)) {
    throw CheckpointError("not an optimizer state file: " + file.string());
  }
  std::uint64_t steps = 0, n = 0;
  in.read(reinterpret_cast<char*>(&steps), sizeof steps);
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!in || n != params_.size()) {
    throw CheckpointError("optimizer state has " + std::to_string(n) + " buffers, expected " +
                          std::to_string(params_.size()));
  }
  auto m = m_;
  auto v = v_;
  for (std::size_t k = 0; k < n; ++k) {
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || len != m[k].size()) {
      throw CheckpointError("optimizer state buffer " + std::to_string(k) + " has wrong size");
    }
    in.read(reinterpret_cast<char*>(m[k].data()), std::streamsize(len * sizeof(double)));
    in.read(reinterpret_cast<char*>(v[k].data()), std::streamsize(len * sizeof(double)));
  }
  if (!in) throw CheckpointError("truncated optimizer state " + file.string());
  m_ = std::move(m);
  v_ = std::move(v);
  steps_ = steps;
}

double clip_global_norm(std::span<const std::span<double>> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double x : g) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm && std::isfinite(norm)) {
    const double scale = max_norm / (norm + 1e-12);
    for (const auto& g : grads) {
      for (double& x : g) x *= scale;
    }
  }
  return norm;
}

}  // namespace wpclip::training
