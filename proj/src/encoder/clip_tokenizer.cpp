#include "wpclip/clip_tokenizer.hpp"

#include <array>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "wpclip/errors.hpp"

namespace wpclip::encoder {

namespace fs = std::filesystem;

namespace {

constexpr const char* kStart = "<|startoftext|>";
constexpr const char* kEnd = "<|endoftext|>";

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out += char(cp);
  } else if (cp < 0x800) {
    out += char(0xC0 | (cp >> 6));
    out += char(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += char(0xE0 | (cp >> 12));
    out += char(0x80 | ((cp >> 6) & 0x3F));
    out += char(0x80 | (cp & 0x3F));
  } else {
    out += char(0xF0 | (cp >> 18));
    out += char(0x80 | ((cp >> 12) & 0x3F));
    out += char(0x80 | ((cp >> 6) & 0x3F));
    out += char(0x80 | (cp & 0x3F));
  }
}

// Reversible byte -> printable code point table of the byte-level BPE.
const std::array<std::string, 256>& byte_symbols() {
  static const auto table = [] {
    std::array<std::string, 256> t;
    std::array<bool, 256> printable{};
    for (int b = '!'; b <= '~'; ++b) printable[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) printable[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) printable[b] = true;
    char32_t next = 256;
    for (int b = 0; b < 256; ++b) append_utf8(t[b], printable[b] ? char32_t(b) : next++);
    return t;
  }();
  return table;
}

struct CodePoint {
  char32_t value;
  std::size_t begin, end;  // byte range in the source
};

std::vector<CodePoint> decode_utf8(std::string_view s) {
  std::vector<CodePoint> out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 1;
    if (i + len > s.size()) len = 1;
    char32_t cp = len == 1 ? c : c & (0xFF >> (len + 1));
    for (std::size_t k = 1; k < len; ++k) cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
    out.push_back({cp, i, i + len});
    i += len;
  }
  return out;
}

enum class Cls { Space, Letter, Digit, Symbol };

Cls classify(char32_t c) {
  if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') return Cls::Space;
  if (c < 0x80) {
    if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z')) return Cls::Letter;
    if (c >= '0' && c <= '9') return Cls::Digit;
    return Cls::Symbol;
  }
  if (c == 0x85 || c == 0xA0 || c == 0x1680 || (c >= 0x2000 && c <= 0x200A) || c == 0x2028 ||
      c == 0x2029 || c == 0x202F || c == 0x205F || c == 0x3000) {
    return Cls::Space;
  }
  if ((c >= 0xA1 && c <= 0xBF) || c == 0xD7 || c == 0xF7 || (c >= 0x2010 && c <= 0x2BFF) ||
      (c >= 0x3001 && c <= 0x303F)) {
    return Cls::Symbol;
  }
  return Cls::Letter;
}

std::string clean(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (const auto& cp : decode_utf8(text)) {
    if (classify(cp.value) == Cls::Space) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ', pending_space = false;
    if (cp.value < 0x80) {
      out += char(std::tolower(static_cast<unsigned char>(cp.value)));
    } else if (cp.value >= 0xC0 && cp.value <= 0xDE && cp.value != 0xD7) {
      append_utf8(out, cp.value + 0x20);  // Latin-1 capitals
    } else {
      out.append(text.substr(cp.begin, cp.end - cp.begin));
    }
  }
  return out;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CheckpointError("tokenizer file missing: " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

ClipTokenizer ClipTokenizer::from_files(const fs::path& vocab_json, const fs::path& merges_txt) {
  return ClipTokenizer(read_text(vocab_json), read_text(merges_txt));
}

ClipTokenizer::ClipTokenizer(const std::string& vocab_json_text, std::string merges_text)
    : vocab_text_(vocab_json_text), merges_text_(std::move(merges_text)) {
  try {
    const auto j = nlohmann::json::parse(vocab_text_);
    for (const auto& [tok, id] : j.items()) vocab_[tok] = id.get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt tokenizer vocabulary: ") + e.what());
  }
  std::istringstream lines(merges_text_);
  std::string line;
  std::size_t rank = 0;
  while (std::getline(lines, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.rfind("#version", 0) == 0) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 == line.size()) {
      throw CheckpointError("malformed merges line: '" + line + "'");
    }
    ranks_.emplace(std::pair{line.substr(0, sp), line.substr(sp + 1)}, rank++);
  }
  const auto s = vocab_.find(kStart), e = vocab_.find(kEnd);
  if (s == vocab_.end() || e == vocab_.end()) {
    throw CheckpointError("tokenizer vocabulary lacks the start/end markers");
  }
  start_id_ = s->second;
  end_id_ = e->second;
}

std::vector<std::string> ClipTokenizer::split_words(std::string_view raw) {
  const std::string text = clean(raw);
  const auto cps = decode_utf8(text);
  std::vector<std::string> words;
  static constexpr std::array<std::string_view, 7> kContractions = {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
  for (std::size_t i = 0; i < cps.size();) {
    const Cls c = classify(cps[i].value);
    if (c == Cls::Space) {
      ++i;
      continue;
    }
    if (cps[i].value == '\'') {
      bool matched = false;
      for (auto con : kContractions) {
        if (std::string_view(text).substr(cps[i].begin, con.size()) == con) {
          words.emplace_back(con);
          i += con.size();  // contractions are ASCII
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    std::size_t j = i + 1;
    if (c == Cls::Letter) {
      while (j < cps.size() && classify(cps[j].value) == Cls::Letter) ++j;
    } else if (c == Cls::Symbol) {
      while (j < cps.size() && classify(cps[j].value) == Cls::Symbol) ++j;
    }
    words.push_back(text.substr(cps[i].begin, cps[j - 1].end - cps[i].begin));
    i = j;
  }
  return words;
}

std::vector<std::string> ClipTokenizer::bpe(const std::string& word) const {
  const auto& table = byte_symbols();
  std::vector<std::string> parts;
  for (unsigned char b : word) parts.push_back(table[b]);
  if (parts.empty()) return parts;
  parts.back() += "</w>";
  while (parts.size() > 1) {
    std::size_t best = std::numeric_limits<std::size_t>::max(), at = 0;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      const auto it = ranks_.find({parts[i], parts[i + 1]});
      if (it != ranks_.end() && it->second < best) best = it->second, at = i;
    }
    if (best == std::numeric_limits<std::size_t>::max()) break;
    const std::string left = parts[at], right = parts[at + 1];
    std::vector<std::string> merged;
    for (std::size_t i = 0; i < parts.size();) {
      if (i + 1 < parts.size() && parts[i] == left && parts[i + 1] == right) {
        merged.push_back(left + right);
        i += 2;
      } else {
        merged.push_back(parts[i++]);
      }
    }
    parts = std::move(merged);
  }
  return parts;
}

std::vector<std::int64_t> ClipTokenizer::encode(std::string_view text) const {
  std::vector<std::int64_t> ids;
  for (const auto& word : split_words(text)) {
    for (const auto& piece : bpe(word)) {
      const auto it = vocab_.find(piece);
      if (it == vocab_.end()) throw InputError("token '" + piece + "' missing from the vocabulary");
      ids.push_back(it->second);
    }
  }
  return ids;
}

ClipTokenizer::Padded ClipTokenizer::encode_padded(std::string_view text, std::size_t context_length) const {
  const auto body = encode(text);
  if (body.size() + 2 > context_length) {
    throw InputError("prompt needs " + std::to_string(body.size() + 2) + " tokens, limit is " +
                     std::to_string(context_length));
  }
  Padded p;
  p.ids.assign(context_length, end_id_);
  p.mask.assign(context_length, 0);
  p.ids[0] = start_id_;
  std::copy(body.begin(), body.end(), p.ids.begin() + 1);
  p.ids[body.size() + 1] = end_id_;
  std::fill(p.mask.begin(), p.mask.begin() + std::ptrdiff_t(body.size() + 2), 1);
  return p;
}

void ClipTokenizer::save(const fs::path& dir) const {
  std::ofstream(dir / "vocab.json", std::ios::binary) << vocab_text_;
  std::ofstream(dir / "merges.txt", std::ios::binary) << merges_text_;
  if (!fs::exists(dir / "merges.txt")) throw CheckpointError("failed writing tokenizer into " + dir.string());
}

}  // namespace wpclip::encoder
