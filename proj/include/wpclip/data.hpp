#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "wpclip/core.hpp"
#include "wpclip/image.hpp"

namespace wpclip::data {

// Scale of the scores as written on disk. In memory every record is on the
// unit scale regardless.
enum class Scale { Unit, OneToFive };

std::string_view to_string(Scale s) noexcept;
Scale scale_from_string(std::string_view s);

struct Manifest {
  std::vector<AnnotationRecord> records;
  Scale scale = Scale::Unit;
  std::string provenance;

  friend bool operator==(const Manifest&, const Manifest&) = default;
};

enum class ImageCheck { None, Exists, Decode };

struct ManifestOptions {
  // Overrides the `# scale:` header line; unit when neither is present.
  std::optional<Scale> scale;
  ImageCheck check = ImageCheck::Exists;
};

// CSV (`.csv`) or JSON-lines (`.jsonl`/`.ndjson`) manifests.
//
// CSV header: image_id,image_path,<five principle keys>[,source]. Leading
// `# scale: one_to_five` and `# provenance: ...` lines are honored. Relative
// image paths are resolved against the manifest's directory.
//
// JSON-lines: one object per record with the same keys; an optional first
// line {"manifest": {"scale": ..., "provenance": ...}} carries the header.
//
// Throws ValidationError listing every offending row.
Manifest load_manifest(const std::filesystem::path& path, const ManifestOptions& options = {});

// Writes CSV, or JSON-lines when the extension says so; scores are written on
// the manifest's declared scale.
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);
void write_manifest_csv(const Manifest& manifest, std::ostream& out);

struct LabeledItem {
  std::string image_path;
  std::string label;

  friend bool operator==(const LabeledItem&, const LabeledItem&) = default;
};

struct LabeledCorpus {
  std::vector<LabeledItem> items;
  std::vector<std::string> label_set;  // sorted, unique
  std::vector<std::string> warnings;   // skipped / unreadable entries
};

enum class CorpusLayout { FolderPerLabel, LabelFile };

CorpusLayout corpus_layout_from_string(std::string_view s);

// FolderPerLabel: root/<label>/<image>. LabelFile: `root` is a two-column
// `path,label` CSV (or a directory containing labels.csv); relative paths are
// resolved against the file's directory. Items are sorted lexicographically
// by (label, path).
LabeledCorpus scan_labeled_corpus(const std::filesystem::path& root, CorpusLayout layout);

bool has_image_extension(const std::filesystem::path& p);

// Decode + preprocess; InputError carries the path.
ImageTensor preprocess(const std::filesystem::path& image_path, const PreprocessSpec& spec);

// Expected corpus sizes for the public datasets.
struct CountCheck {
  std::string name;
  std::size_t expected = 0;
  std::size_t actual = 0;
  bool ok() const noexcept { return expected == actual; }
};

inline constexpr std::size_t kTrainRealCount = 1000;
inline constexpr std::size_t kTestGeneratedCount = 800;
inline constexpr std::size_t kMovementCorpusCount = 18040;

CountCheck check_count(std::string name, std::size_t expected, std::size_t actual);

}  // namespace wpclip::data
