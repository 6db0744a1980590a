#include "wpclip/checkpoint.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "wpclip/errors.hpp"
#include "wpclip/projection_head.hpp"
#include "wpclip/rng.hpp"
#ifdef WPCLIP_HAVE_TORCH
#include "wpclip/torch_backend.hpp"
#endif

namespace wpclip::encoder {

namespace fs = std::filesystem;

namespace {

constexpr const char* kMetadataFile = "metadata.json";

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Digest over every weight file (sorted by name) plus the identity fields.
std::uint64_t digest_weights(const fs::path& dir, const nlohmann::json& identity) {
  std::uint64_t h = fnv1a64(identity.dump());
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().filename() != kMetadataFile) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<char> buf(1 << 16);
  for (const auto& f : files) {
    h = fnv1a64(fs::relative(f, dir).generic_string(), h);
    std::ifstream in(f, std::ios::binary);
    while (in) {
      in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
      const auto n = static_cast<std::size_t>(in.gcount());
      h = fnv1a64(std::span<const std::uint8_t>(
                      reinterpret_cast<const std::uint8_t*>(buf.data()), n),
                  h);
    }
  }
  return h;
}

nlohmann::json identity_of(const EncoderBackend& backend) {
  return {{"backend", backend.kind()},
          {"model_id", backend.model_id()},
          {"embed_dim", backend.embed_dim()},
          {"preprocess", to_json(backend.preprocess_spec())},
          {"backend_config", backend.backend_config()}};
}

}  // namespace

nlohmann::json to_json(const PreprocessSpec& spec) {
  return {{"target_size", spec.target_size},
          {"channel_mean", spec.channel_mean},
          {"channel_std", spec.channel_std}};
}

PreprocessSpec preprocess_from_json(const nlohmann::json& j) {
  PreprocessSpec s;
  s.target_size = j.at("target_size").get<int>();
  s.channel_mean = j.at("channel_mean").get<std::array<float, 3>>();
  s.channel_std = j.at("channel_std").get<std::array<float, 3>>();
  if (s.target_size <= 0) throw CheckpointError("preprocess.target_size must be positive");
  for (float v : s.channel_std) {
    if (!(v > 0.0f)) throw CheckpointError("preprocess.channel_std must be positive");
  }
  return s;
}

std::string save_checkpoint(const EncoderBackend& backend, const fs::path& dir,
                            const nlohmann::json& extra) {
  const fs::path parent = dir.has_parent_path() ? dir.parent_path() : fs::path(".");
  std::error_code ec;
  fs::create_directories(parent, ec);
  const fs::path tmp = parent / (dir.filename().string() + ".tmp");
  fs::remove_all(tmp, ec);
  if (!fs::create_directories(tmp, ec) && ec) {
    throw CheckpointError("cannot create checkpoint directory " + tmp.string() + ": " +
                          ec.message());
  }

  backend.save_weights(tmp);
  nlohmann::json meta = identity_of(backend);
  const std::string id = backend.model_id() + "@" + hex16(digest_weights(tmp, meta));
  meta["schema_version"] = kCheckpointSchemaVersion;
  meta["checkpoint_id"] = id;
  meta["extra"] = extra;
  {
    std::ofstream out(tmp / kMetadataFile);
    out << meta.dump(2) << '\n';
    if (!out) throw CheckpointError("failed writing " + (tmp / kMetadataFile).string());
  }

  fs::remove_all(dir, ec);
  fs::rename(tmp, dir, ec);
  if (ec) throw CheckpointError("cannot move checkpoint into " + dir.string() + ": " + ec.message());
  return id;
}

CheckpointInfo read_checkpoint_info(const fs::path& dir) {
  const fs::path meta_path = dir / kMetadataFile;
  if (!fs::is_directory(dir)) throw CheckpointError("checkpoint not found: " + dir.string());
  std::ifstream in(meta_path);
  if (!in) throw CheckpointError("checkpoint metadata missing: " + meta_path.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint metadata " + meta_path.string() + ": " + e.what());
  }

  try {
    const int version = meta.at("schema_version").get<int>();
    if (version != kCheckpointSchemaVersion) {
      throw CheckpointError("checkpoint schema version " + std::to_string(version) +
                            " not supported (expected " +
                            std::to_string(kCheckpointSchemaVersion) + "): " + dir.string());
    }
    CheckpointInfo info;
    info.backend = meta.at("backend").get<std::string>();
    info.model_id = meta.at("model_id").get<std::string>();
    info.checkpoint_id = meta.value("checkpoint_id", info.model_id);
    info.embed_dim = meta.at("embed_dim").get<std::size_t>();
    info.preprocess = preprocess_from_json(meta.at("preprocess"));
    info.backend_config = meta.value("backend_config", nlohmann::json::object());
    info.extra = meta.value("extra", nlohmann::json::object());
    if (info.embed_dim == 0) throw CheckpointError("checkpoint embed_dim is zero");
    return info;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint metadata " + meta_path.string() + ": " + e.what());
  }
}

std::unique_ptr<EncoderBackend> load_checkpoint(const fs::path& dir,
                                                const LoadExpectations& expect) {
  const CheckpointInfo info = read_checkpoint_info(dir);
  if (expect.embed_dim && *expect.embed_dim != info.embed_dim) {
    throw CheckpointError("checkpoint " + dir.string() + " has embed_dim " +
                          std::to_string(info.embed_dim) + ", expected " +
                          std::to_string(*expect.embed_dim));
  }
  if (expect.backend && *expect.backend != info.backend) {
    throw CheckpointError("checkpoint " + dir.string() + " is a '" + info.backend +
                          "' backend, expected '" + *expect.backend + "'");
  }

  std::unique_ptr<EncoderBackend> backend;
  try {
    if (info.backend == "stub") {
      backend = std::make_unique<StubBackend>(
          info.embed_dim, info.backend_config.value("seed", std::uint64_t{0}), info.preprocess);
    } else if (info.backend == "projection_head") {
      backend = ProjectionHeadBackend::load(dir, info);
#ifdef WPCLIP_HAVE_TORCH
    } else if (info.backend == "torchscript") {
      backend = TorchScriptBackend::load(dir, info);
#endif
    } else {
      throw CheckpointError("unknown or unavailable checkpoint backend '" + info.backend +
                            "' in " + dir.string());
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt backend config in " + dir.string() + ": " + e.what());
  }
  if (backend->embed_dim() != info.embed_dim) {
    throw CheckpointError("checkpoint weights have embed_dim " +
                          std::to_string(backend->embed_dim()) + ", metadata says " +
                          std::to_string(info.embed_dim));
  }
  return backend;
}

std::string checkpoint_id_of(const EncoderBackend& backend) {
  if (auto known = backend.known_checkpoint_id()) return *known;
  const fs::path tmp = fs::temp_directory_path() /
                       ("wpclip-ckid-" + hex16(splitmix64(reinterpret_cast<std::uintptr_t>(&backend) ^
                                                          std::random_device{}())));
  fs::create_directories(tmp);
  backend.save_weights(tmp);
  const auto meta = identity_of(backend);
  const std::string id = backend.model_id() + "@" + hex16(digest_weights(tmp, meta));
  std::error_code ec;
  fs::remove_all(tmp, ec);
  return id;
}

}  // namespace wpclip::encoder
