#include <charconv>
#include <fstream>
#include <map>

#include "wpclip/csv.hpp"
#include "wpclip/errors.hpp"
#include "wpclip/scoring.hpp"

namespace wpclip::scoring {

namespace {

double parse_unit(const std::string& text, const std::string& where) {
  double v = 0.0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw InputError(where + ": '" + text + "' is not a number");
  if (!(v >= 0.0 && v <= 1.0)) throw InputError(where + ": score " + text + " outside [0,1]");
  return v;
}

ScoreFile read_csv(std::istream& in, const std::string& name) {
  const auto rows = csv::read(in, /*comment_lines=*/true);
  if (rows.empty()) throw InputError(name + ": empty score file");
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < rows[0].fields.size(); ++i) col[rows[0].fields[i]] = i;
  auto need = [&](const std::string& c) {
    const auto it = col.find(c);
    if (it == col.end()) throw InputError(name + ": missing column '" + c + "'");
    return it->second;
  };
  const std::size_t id_col = need("image_id");
  std::array<std::size_t, kNumPrinciples> pcol{};
  for (Principle p : kAllPrinciples) pcol[index_of(p)] = need(std::string(key(p)));
  const auto mode_it = col.find("mode");
  const auto ckpt_it = col.find("checkpoint_id");

  ScoreFile f;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& fields = rows[r].fields;
    const std::string where = name + ":" + std::to_string(rows[r].line);
    if (fields.size() != rows[0].fields.size()) throw InputError(where + ": wrong field count");
    std::array<double, kNumPrinciples> v{};
    for (Principle p : kAllPrinciples) v[index_of(p)] = parse_unit(fields[pcol[index_of(p)]], where);
    f.items.push_back({fields[id_col], ScoreVector(v)});
    if (mode_it != col.end()) f.mode = fields[mode_it->second];
    if (ckpt_it != col.end()) f.checkpoint_id = fields[ckpt_it->second];
  }
  return f;
}

ScoreFile read_jsonl(std::istream& in, const std::string& name) {
  ScoreFile f;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = name + ":" + std::to_string(lineno);
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw InputError(where + ": not a JSON object");
    if (j.contains("config") && !j.contains("image_id")) continue;
    try {
      std::array<double, kNumPrinciples> v{};
      for (Principle p : kAllPrinciples) {
        v[index_of(p)] = j.at(std::string(key(p))).get<double>();
        if (!(v[index_of(p)] >= 0.0 && v[index_of(p)] <= 1.0)) {
          throw InputError(where + ": score outside [0,1]");
        }
      }
      f.items.push_back({j.at("image_id").get<std::string>(), ScoreVector(v)});
      f.mode = j.value("mode", f.mode);
      f.checkpoint_id = j.value("checkpoint_id", f.checkpoint_id);
    } catch (const nlohmann::json::exception& e) {
      throw InputError(where + ": " + e.what());
    }
  }
  return f;
}

}  // namespace

ScoreFile read_scores(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open score file " + path.string());
  const auto ext = path.extension().string();
  if (ext == ".jsonl" || ext == ".ndjson") return read_jsonl(in, path.string());
  return read_csv(in, path.string());
}

}  // namespace wpclip::scoring
