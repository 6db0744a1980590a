#include "wpclip/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <tuple>
#include <sstream>

#include <nlohmann/json.hpp>

#include "wpclip/csv.hpp"
#include "wpclip/errors.hpp"

namespace wpclip::data {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::optional<double> parse_number(const std::string& text) {
  const std::string t = trim(text);
  if (t.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (end != t.c_str() + t.size()) return std::nullopt;
  return v;
}

std::string format_score(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool is_jsonl(const fs::path& p) {
  const auto ext = lower(p.extension().string());
  return ext == ".jsonl" || ext == ".ndjson";
}

// Raw record before validation: field name -> text.
struct RawRow {
  std::size_t row;
  std::map<std::string, std::string> fields;
};

Manifest validate(std::vector<RawRow> rows, Scale scale, std::string provenance,
                  const fs::path& base_dir, const std::string& source, const ManifestOptions& opt) {
  Manifest m;
  m.scale = scale;
  m.provenance = std::move(provenance);
  std::vector<RowIssue> issues;
  std::set<std::string> seen;
  const double lo = scale == Scale::Unit ? 0.0 : 1.0;
  const double hi = scale == Scale::Unit ? 1.0 : 5.0;

  for (auto& raw : rows) {
    auto field = [&](const std::string& k) -> std::string {
      auto it = raw.fields.find(k);
      return it == raw.fields.end() ? std::string{} : it->second;
    };
    auto issue = [&](std::string msg) { issues.push_back({raw.row, std::move(msg)}); };
    const std::size_t before = issues.size();

    AnnotationRecord rec;
    rec.image_id = trim(field("image_id"));
    if (rec.image_id.empty()) issue("empty image_id");
    else if (!seen.insert(rec.image_id).second) issue("duplicate image_id '" + rec.image_id + "'");

    const std::string path_text = trim(field("image_path"));
    if (path_text.empty()) {
      issue("empty image_path");
    } else {
      fs::path p(path_text);
      if (p.is_relative()) p = base_dir / p;
      rec.image_path = p.lexically_normal().string();
    }

    std::array<double, kNumPrinciples> values{};
    for (Principle pr : kAllPrinciples) {
      const std::string k(key(pr));
      const auto v = parse_number(field(k));
      if (!v || !std::isfinite(*v)) {
        issue(k + ": not a number ('" + field(k) + "')");
        continue;
      }
      if (*v < lo || *v > hi) {
        issue(k + ": score " + trim(field(k)) + " outside declared " +
              std::string(to_string(scale)) + " range [" + format_score(lo) + "," +
              format_score(hi) + "]");
        continue;
      }
      values[index_of(pr)] = scale == Scale::Unit ? *v : to_unit(*v);
    }

    const auto src = image_source_from_string(lower(trim(field("source"))));
    if (!src) issue("unknown source '" + field("source") + "'");
    else rec.source = *src;

    if (issues.size() == before && opt.check != ImageCheck::None) {
      if (!fs::is_regular_file(rec.image_path)) {
        issue("image not found: " + rec.image_path);
      } else if (opt.check == ImageCheck::Decode) {
        try {
          (void)decode_image(rec.image_path);
        } catch (const InputError& e) {
          issue(e.what());
        }
      }
    }
    if (issues.size() == before) {
      rec.gt = ScoreVector(values);
      m.records.push_back(std::move(rec));
    }
  }
  if (!issues.empty()) throw ValidationError(source, std::move(issues));
  return m;
}

void parse_header_comment(const std::string& text, std::optional<Scale>& scale,
                          std::string& provenance) {
  const std::string t = trim(text);
  const auto sep = t.find_first_of(":=");
  if (sep == std::string::npos) return;
  const std::string k = lower(trim(t.substr(0, sep)));
  const std::string v = trim(t.substr(sep + 1));
  if (k == "scale") scale = scale_from_string(v);
  else if (k == "provenance") provenance = v;
}

}  // namespace

std::string_view to_string(Scale s) noexcept {
  return s == Scale::Unit ? "unit" : "one_to_five";
}

Scale scale_from_string(std::string_view s) {
  const std::string t = lower(trim(s));
  if (t == "unit" || t == "0-1" || t == "[0,1]") return Scale::Unit;
  if (t == "one_to_five" || t == "1-5" || t == "[1,5]") return Scale::OneToFive;
  throw ConfigError("unknown score scale '" + std::string(s) + "' (unit|one_to_five)");
}

Manifest load_manifest(const fs::path& path, const ManifestOptions& options) {
  std::ifstream in(path);
  if (!in) throw InputError("manifest not found: " + path.string());
  const fs::path base = fs::absolute(path).parent_path();
  std::optional<Scale> scale;
  std::string provenance;
  std::vector<RawRow> raw;

  if (is_jsonl(path)) {
    std::string line;
    std::size_t lineno = 0, data_row = 0;
    std::vector<RowIssue> issues;
    while (std::getline(in, line)) {
      ++lineno;
      if (trim(line).empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        issues.push_back({data_row + 1, std::string("invalid JSON: ") + e.what()});
        ++data_row;
        continue;
      }
      if (j.contains("manifest") && j.size() == 1) {
        const auto& h = j["manifest"];
        if (h.contains("scale")) scale = scale_from_string(h["scale"].get<std::string>());
        provenance = h.value("provenance", std::string{});
        continue;
      }
      RawRow r{++data_row, {}};
      for (const auto& [k, v] : j.items()) {
        r.fields[k] = v.is_string() ? v.get<std::string>() : v.dump();
      }
      raw.push_back(std::move(r));
    }
    if (!issues.empty()) throw ValidationError(path.string(), std::move(issues));
  } else {
    std::vector<std::string> comments;
    std::vector<csv::Row> rows;
    try {
      rows = csv::read(in, /*comment_lines=*/true, &comments);
    } catch (const InputError& e) {
      throw ValidationError(path.string(), {{0, e.what()}});
    }
    for (const auto& c : comments) parse_header_comment(c, scale, provenance);
    if (rows.empty()) throw ValidationError(path.string(), {{0, "missing header row"}});

    std::vector<std::string> header;
    for (const auto& h : rows.front().fields) header.push_back(lower(trim(h)));
    std::vector<std::string> missing;
    for (const char* required : {"image_id", "image_path"}) {
      if (std::find(header.begin(), header.end(), required) == header.end()) {
        missing.push_back(required);
      }
    }
    for (Principle p : kAllPrinciples) {
      if (std::find(header.begin(), header.end(), key(p)) == header.end()) {
        missing.emplace_back(key(p));
      }
    }
    if (!missing.empty()) {
      std::string msg = "missing column(s):";
      for (const auto& m : missing) msg += " " + m;
      throw ValidationError(path.string(), {{0, msg}});
    }
    std::vector<RowIssue> shape_issues;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (rows[i].fields.size() != header.size()) {
        shape_issues.push_back({i, "expected " + std::to_string(header.size()) + " fields, got " +
                                       std::to_string(rows[i].fields.size())});
        continue;
      }
      RawRow r{i, {}};
      for (std::size_t c = 0; c < header.size(); ++c) r.fields[header[c]] = rows[i].fields[c];
      raw.push_back(std::move(r));
    }
    if (!shape_issues.empty()) throw ValidationError(path.string(), std::move(shape_issues));
  }

  if (options.scale) scale = options.scale;
  return validate(std::move(raw), scale.value_or(Scale::Unit), std::move(provenance), base,
                  path.string(), options);
}

void write_manifest_csv(const Manifest& m, std::ostream& out) {
  out << "# scale: " << to_string(m.scale) << '\n';
  if (!m.provenance.empty()) out << "# provenance: " << m.provenance << '\n';
  out << "image_id,image_path";
  for (Principle p : kAllPrinciples) out << ',' << key(p);
  out << ",source\n";
  for (const auto& r : m.records) {
    out << csv::escape(r.image_id) << ',' << csv::escape(r.image_path);
    for (Principle p : kAllPrinciples) {
      const double v = m.scale == Scale::Unit ? r.gt[p] : to_1to5(r.gt[p]);
      out << ',' << format_score(v);
    }
    out << ',' << to_string(r.source) << '\n';
  }
}

void write_manifest(const Manifest& m, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write manifest: " + path.string());
  if (is_jsonl(path)) {
    out << nlohmann::json{{"manifest",
                           {{"scale", to_string(m.scale)}, {"provenance", m.provenance}}}}
               .dump()
        << '\n';
    for (const auto& r : m.records) {
      nlohmann::ordered_json j;
      j["image_id"] = r.image_id;
      j["image_path"] = r.image_path;
      for (Principle p : kAllPrinciples) {
        j[std::string(key(p))] = m.scale == Scale::Unit ? r.gt[p] : to_1to5(r.gt[p]);
      }
      j["source"] = to_string(r.source);
      out << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::strict) << '\n';
    }
  } else {
    write_manifest_csv(m, out);
  }
  if (!out) throw Error("failed writing manifest " + path.string());
}

bool has_image_extension(const fs::path& p) {
  static const std::set<std::string> kExt = {".jpg", ".jpeg", ".png",  ".bmp",
                                             ".tif", ".tiff", ".webp", ".ppm"};
  return kExt.count(lower(p.extension().string())) > 0;
}

CorpusLayout corpus_layout_from_string(std::string_view s) {
  const std::string t = lower(trim(s));
  if (t == "folder-per-label" || t == "folders") return CorpusLayout::FolderPerLabel;
  if (t == "label-file") return CorpusLayout::LabelFile;
  throw ConfigError("unknown corpus layout '" + std::string(s) +
                    "' (folder-per-label|label-file)");
}

LabeledCorpus scan_labeled_corpus(const fs::path& root, CorpusLayout layout) {
  LabeledCorpus corpus;
  std::error_code ec;
  if (!fs::exists(root, ec)) throw InputError("corpus root not found: " + root.string());

  if (layout == CorpusLayout::FolderPerLabel) {
    if (!fs::is_directory(root)) throw InputError("corpus root is not a directory: " + root.string());
    for (const auto& dir : fs::directory_iterator(root)) {
      if (!dir.is_directory()) {
        corpus.warnings.push_back("skipped non-directory " + dir.path().string());
        continue;
      }
      const std::string label = dir.path().filename().string();
      for (const auto& f : fs::directory_iterator(dir.path(), ec)) {
        if (!f.is_regular_file()) continue;
        if (!has_image_extension(f.path())) {
          corpus.warnings.push_back("skipped non-image file " + f.path().string());
          continue;
        }
        corpus.items.push_back({f.path().string(), label});
      }
      if (ec) corpus.warnings.push_back("unreadable directory " + dir.path().string());
    }
  } else {
    const fs::path file = fs::is_directory(root) ? root / "labels.csv" : root;
    std::ifstream in(file);
    if (!in) throw InputError("label file not found: " + file.string());
    const fs::path base = fs::absolute(file).parent_path();
    auto rows = csv::read(in, true);
    std::size_t first = 0;
    if (!rows.empty() && rows[0].fields.size() == 2 && lower(trim(rows[0].fields[0])) == "path" &&
        lower(trim(rows[0].fields[1])) == "label") {
      first = 1;
    }
    for (std::size_t i = first; i < rows.size(); ++i) {
      const auto& f = rows[i].fields;
      if (f.size() != 2 || trim(f[0]).empty() || trim(f[1]).empty()) {
        corpus.warnings.push_back("line " + std::to_string(rows[i].line) +
                                  ": expected path,label");
        continue;
      }
      fs::path p(trim(f[0]));
      if (p.is_relative()) p = base / p;
      p = p.lexically_normal();
      if (!has_image_extension(p)) {
        corpus.warnings.push_back("skipped non-image entry " + p.string());
        continue;
      }
      if (!fs::is_regular_file(p)) {
        corpus.warnings.push_back("missing image " + p.string());
        continue;
      }
      corpus.items.push_back({p.string(), trim(f[1])});
    }
  }

  std::sort(corpus.items.begin(), corpus.items.end(), [](const auto& a, const auto& b) {
    return std::tie(a.label, a.image_path) < std::tie(b.label, b.image_path);
  });
  std::sort(corpus.warnings.begin(), corpus.warnings.end());
  for (const auto& item : corpus.items) {
    if (corpus.label_set.empty() || corpus.label_set.back() != item.label) {
      corpus.label_set.push_back(item.label);
    }
  }
  if (corpus.items.empty()) throw InputError("empty corpus: " + root.string());
  return corpus;
}

ImageTensor preprocess(const fs::path& image_path, const PreprocessSpec& spec) {
  try {
    return wpclip::preprocess(decode_image(image_path), spec);
  } catch (const InputError& e) {
    const std::string what = e.what();
    if (what.find(image_path.string()) != std::string::npos) throw;
    throw InputError(image_path.string() + ": " + what);
  }
}

CountCheck check_count(std::string name, std::size_t expected, std::size_t actual) {
  return {std::move(name), expected, actual};
}

}  // namespace wpclip::data
