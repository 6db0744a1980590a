#pragma once

// Shared fixtures: temp directories, procedural images, synthetic manifests.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "wpclip/core.hpp"
#include "wpclip/data.hpp"
#include "wpclip/image.hpp"
#include "wpclip/rng.hpp"
#include "wpclip/projection_head.hpp"
#include "wpclip/scoring.hpp"
#include "wpclip/adam.hpp"

namespace wpclip::test {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "wpclip") {
    static int counter = 0;
    Rng rng(derive_seed(std::uint64_t(::getpid()), tag + std::to_string(counter++)));
    path_ = fs::temp_directory_path() / (tag + "-" + std::to_string(rng.next() % 100000000));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

// Smooth colour field with a few blobs; nearby seeds give different images.
inline Image procedural_image(int width, int height, std::uint64_t seed) {
  Rng rng(seed);
  const double fx = 1.0 + 4.0 * rng.uniform(), fy = 1.0 + 4.0 * rng.uniform();
  const double phase[3] = {6.28 * rng.uniform(), 6.28 * rng.uniform(), 6.28 * rng.uniform()};
  Image img = Image::filled(width, height, {0, 0, 0});
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double u = double(x) / width, v = double(y) / height;
      for (int c = 0; c < 3; ++c) {
        const double t = 0.5 + 0.5 * std::sin(fx * 6.28 * u + phase[c]) * std::cos(fy * 6.28 * v + c);
        img.pixel(x, y)[c] = static_cast<std::uint8_t>(std::lround(255.0 * t));
      }
    }
  }
  return img;
}

inline ScoreVector random_scores(Rng& rng) {
  std::array<double, kNumPrinciples> v{};
  for (double& x : v) x = rng.uniform();
  return ScoreVector(v);
}

inline std::string csv_header() {
  std::string h = "image_id,image_path";
  for (Principle p : kAllPrinciples) h += "," + std::string(key(p));
  return h;
}

// Writes `n` procedural PNGs plus a unit-scale manifest.csv under `dir`.
inline std::vector<AnnotationRecord> synthetic_dataset(const fs::path& dir, std::size_t n,
                                                       std::uint64_t seed, int size = 48) {
  fs::create_directories(dir / "images");
  Rng rng(seed);
  std::vector<AnnotationRecord> records;
  std::ofstream m(dir / "manifest.csv");
  m << csv_header() << ",source\n";
  char buf[64];
  for (std::size_t i = 0; i < n; ++i) {
    AnnotationRecord r;
    r.image_id = "img" + std::to_string(i);
    const fs::path p = dir / "images" / (r.image_id + ".png");
    write_png(procedural_image(size, size, seed * 1000 + i), p);
    r.image_path = p.string();
    r.gt = random_scores(rng);
    r.source = ImageSource::Gan;
    m << r.image_id << ",images/" << r.image_id << ".png";
    for (double v : r.gt.values()) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      m << buf;
    }
    m << ",gan\n";
    records.push_back(std::move(r));
  }
  return records;
}

inline void write_image(const fs::path& p, const Image& img) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_png(img, p);
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

inline void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << text;
}

// Full-batch Adam on a tiny projection head; returns the training loss after
// `steps` updates. Used by the overfit checks.
struct OverfitResult {
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

inline OverfitResult overfit_head(std::size_t n_records, std::size_t steps, std::uint64_t seed) {
  encoder::ProjectionHeadBackend::Config cfg;
  cfg.embed_dim = 32;
  cfg.text_feature_dim = 16;
  cfg.seed = seed;
  cfg.preprocess.target_size = 32;
  encoder::ProjectionHeadBackend head(cfg);
  Rng rng(derive_seed(seed, "overfit"));
  std::vector<ImageTensor> tensors;
  std::vector<training::TrainSample> batch;
  tensors.reserve(n_records);
  for (std::size_t i = 0; i < n_records; ++i) {
    tensors.push_back(preprocess(procedural_image(40, 40, seed * 97 + i), cfg.preprocess));
  }
  for (std::size_t i = 0; i < n_records; ++i) batch.push_back({&tensors[i], random_scores(rng)});
  const scoring::PromptRegistry registry;
  const auto mode = scoring::ScoreMode::softmax();
  training::AdamConfig adam;
  adam.learning_rate = 1e-2;
  auto opt = head.make_optimizer(adam);
  OverfitResult r;
  r.initial_loss = head.evaluate_loss(batch, registry, mode).total();
  for (std::size_t s = 0; s < steps; ++s) {
    head.compute_gradients(batch, registry, mode);
    opt->step();
  }
  r.final_loss = head.evaluate_loss(batch, registry, mode).total();
  return r;
}

}  // namespace wpclip::test
