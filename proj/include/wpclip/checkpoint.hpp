#pragma once

// Checkpoint layout: a directory holding `metadata.json` plus whatever weight
// files the backend writes.
//
//   metadata.json
//     schema_version   integer, currently 1
//     backend          backend kind, selects the loader
//     model_id         free-form model name
//     embed_dim        embedding width
//     preprocess       {target_size, channel_mean[3], channel_std[3]}
//     backend_config   backend-specific constants
//     checkpoint_id    model_id + "@" + 16 hex digits of the weight-file digest
//     extra            caller metadata (the trainer stores its config here)

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "wpclip/encoder.hpp"

namespace wpclip::encoder {

inline constexpr int kCheckpointSchemaVersion = 1;

struct CheckpointInfo {
  std::string backend;
  std::string model_id;
  std::string checkpoint_id;
  std::size_t embed_dim = 0;
  PreprocessSpec preprocess;
  nlohmann::json backend_config;
  nlohmann::json extra;
};

struct LoadExpectations {
  std::optional<std::size_t> embed_dim;
  std::optional<std::string> backend;
};

// Replaces `dir` atomically (written to a sibling temp directory first).
// Returns the checkpoint id.
std::string save_checkpoint(const EncoderBackend& backend, const std::filesystem::path& dir,
                            const nlohmann::json& extra = nlohmann::json::object());

// Throws CheckpointError for missing/corrupt files, schema mismatches and
// violated expectations.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);
std::unique_ptr<EncoderBackend> load_checkpoint(const std::filesystem::path& dir,
                                                const LoadExpectations& expect = {});

// Id of an in-memory backend, identical to what save_checkpoint would report.
std::string checkpoint_id_of(const EncoderBackend& backend);

nlohmann::json to_json(const PreprocessSpec& spec);
PreprocessSpec preprocess_from_json(const nlohmann::json& j);

}  // namespace wpclip::encoder
