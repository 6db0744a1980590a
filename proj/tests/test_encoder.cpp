#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "wpclip/checkpoint.hpp"
#include "wpclip/encoder.hpp"
#include "wpclip/errors.hpp"
#include "wpclip/projection_head.hpp"

using namespace wpclip;
using namespace wpclip::encoder;

TEST(StubBackend, EmbeddingsAreUnitNormAndDeterministic) {
  StubBackend a(96, 5), b(96, 5), c(96, 6);
  const Image img = test::procedural_image(50, 40, 2);
  const auto ea = a.encode_image(img);
  ASSERT_EQ(ea.size(), 96u);
  EXPECT_NEAR(l2_norm(ea), 1.0, 1e-12);
  EXPECT_EQ(ea, b.encode_image(img));
  EXPECT_NE(ea, c.encode_image(img));
  const auto t = a.encode_text("Painterly");
  EXPECT_NEAR(l2_norm(t), 1.0, 1e-12);
  EXPECT_EQ(t, b.encode_text("Painterly"));
}

TEST(StubBackend, SmallCropStaysClose) {
  StubBackend backend(128, 0);
  const Image img = test::procedural_image(120, 90, 8);
  const Image cropped = crop(img, 1, 1, img.width - 1, img.height - 1);
  const double cos = cosine(backend.encode_image(img), backend.encode_image(cropped));
  EXPECT_GT(cos, 0.9);
}

TEST(StubBackend, DistinctPromptsGiveDistinctEmbeddings) {
  StubBackend backend(64, 0);
  EXPECT_LT(cosine(backend.encode_text("Linear"), backend.encode_text("Painterly")), 0.99);
}

TEST(StubBackend, PromptValidation) {
  StubBackend backend(16, 0);
  EXPECT_THROW(backend.encode_text(""), InputError);
  EXPECT_THROW(backend.encode_text("   "), InputError);
  std::string long_prompt;
  for (int i = 0; i < 100; ++i) long_prompt += "word ";
  EXPECT_THROW(backend.encode_text(long_prompt), InputError);
  EXPECT_THROW(backend.encode_image(Image{}), InputError);
}

TEST(TokenCount, Approximation) {
  EXPECT_EQ(approximate_token_count("Linear"), 3u);
  EXPECT_EQ(approximate_token_count("a Linear painting."), 6u);
  EXPECT_EQ(approximate_token_count("1234"), 6u);
}

TEST(Checkpoint, StubRoundTrip) {
  test::TempDir dir("ckpt-stub");
  StubBackend backend(48, 11);
  const auto id = save_checkpoint(backend, dir / "c", {{"note", "x"}});
  EXPECT_EQ(id, checkpoint_id_of(backend));
  const auto info = read_checkpoint_info(dir / "c");
  EXPECT_EQ(info.backend, "stub");
  EXPECT_EQ(info.embed_dim, 48u);
  EXPECT_EQ(info.extra.at("note"), "x");
  auto loaded = load_checkpoint(dir / "c");
  const Image img = test::procedural_image(32, 32, 1);
  EXPECT_EQ(loaded->encode_image(img), backend.encode_image(img));
  EXPECT_EQ(loaded->encode_text("Closed"), backend.encode_text("Closed"));
}

TEST(Checkpoint, ProjectionHeadRoundTripIsExact) {
  test::TempDir dir("ckpt-head");
  ProjectionHeadBackend::Config cfg;
  cfg.embed_dim = 16;
  cfg.text_feature_dim = 8;
  cfg.seed = 3;
  ProjectionHeadBackend head(cfg);
  // Perturb weights so the round trip is not just re-initialisation.
  for (auto& p : head.parameters()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] += 1e-3 * double(i % 7) / 3.0;
  }
  save_checkpoint(head, dir / "h");
  auto loaded = load_checkpoint(dir / "h", {16, "projection_head"});
  ASSERT_NE(loaded->trainable(), nullptr);
  const Image img = test::procedural_image(40, 30, 2);
  EXPECT_EQ(loaded->encode_image(img), head.encode_image(img));
  EXPECT_EQ(loaded->encode_text("Open"), head.encode_text("Open"));
}

TEST(Checkpoint, Failures) {
  test::TempDir dir("ckpt-bad");
  EXPECT_THROW(load_checkpoint(dir / "missing"), CheckpointError);

  StubBackend backend(32, 0);
  save_checkpoint(backend, dir / "c");
  try {
    load_checkpoint(dir / "c", {64, std::nullopt});
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("32"), std::string::npos) << msg;
    EXPECT_NE(msg.find("64"), std::string::npos) << msg;
  }
  EXPECT_THROW(load_checkpoint(dir / "c", {std::nullopt, "projection_head"}), CheckpointError);

  test::write_file(dir / "c" / "metadata.json", "{ not json");
  EXPECT_THROW(load_checkpoint(dir / "c"), CheckpointError);

  save_checkpoint(backend, dir / "v");
  auto meta = nlohmann::json::parse(test::read_file(dir / "v" / "metadata.json"));
  meta["schema_version"] = kCheckpointSchemaVersion + 1;
  test::write_file(dir / "v" / "metadata.json", meta.dump());
  EXPECT_THROW(load_checkpoint(dir / "v"), CheckpointError);
}

TEST(Preprocess, ShapeAndNormalization) {
  PreprocessSpec spec;
  spec.target_size = 32;
  const auto t = preprocess(Image::filled(64, 20, {255, 255, 255}), spec);
  EXPECT_EQ(t.size, 32);
  ASSERT_EQ(t.data.size(), 3u * 32 * 32);
  for (int c = 0; c < 3; ++c) {
    EXPECT_NEAR(t.at(c, 5, 5), (1.0f - spec.channel_mean[c]) / spec.channel_std[c], 1e-4);
  }
}

TEST(Image, PngRoundTripAndDecodeErrors) {
  test::TempDir dir("img");
  const Image img = test::procedural_image(17, 9, 4);
  write_png(img, dir / "a.png");
  EXPECT_EQ(decode_image(dir / "a.png"), img);
  test::write_file(dir / "bad.png", "garbage");
  EXPECT_THROW(decode_image(dir / "bad.png"), InputError);
  EXPECT_THROW(decode_image(dir / "none.png"), InputError);
}
