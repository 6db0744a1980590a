#pragma once

// Byte-level BPE tokenizer compatible with the CLIP text tower, reading the
// usual vocab.json / merges.txt pair. Text is lowercased (ASCII and Latin-1
// capitals) and whitespace-collapsed before words are split off; every word
// gets the "</w>" end-of-word suffix.
//
// Character classes are exact for ASCII. Outside ASCII, general punctuation
// and symbol blocks count as symbols and everything else as letters, which
// matches the reference splitter on Latin-script text.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace wpclip::encoder {

class ClipTokenizer {
 public:
  // Throws CheckpointError on missing or malformed files.
  static ClipTokenizer from_files(const std::filesystem::path& vocab_json,
                                  const std::filesystem::path& merges_txt);
  ClipTokenizer(const std::string& vocab_json_text, std::string merges_text);

  // Token ids without start/end markers.
  std::vector<std::int64_t> encode(std::string_view text) const;

  // Start marker, ids, end marker, then `pad_id` up to `context_length`.
  // Throws InputError when the marked sequence does not fit.
  struct Padded {
    std::vector<std::int64_t> ids;
    std::vector<std::int64_t> mask;
  };
  Padded encode_padded(std::string_view text, std::size_t context_length) const;

  std::int64_t start_id() const noexcept { return start_id_; }
  std::int64_t end_id() const noexcept { return end_id_; }
  std::size_t vocab_size() const noexcept { return vocab_.size(); }

  // Pre-tokenized words, exposed for tests.
  static std::vector<std::string> split_words(std::string_view text);

  void save(const std::filesystem::path& dir) const;

 private:
  std::vector<std::string> bpe(const std::string& word) const;

  std::string vocab_text_, merges_text_;
  std::unordered_map<std::string, std::int64_t> vocab_;
  std::map<std::pair<std::string, std::string>, std::size_t> ranks_;
  std::int64_t start_id_ = 0, end_id_ = 0;
};

}  // namespace wpclip::encoder
