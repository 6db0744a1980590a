#include "wpclip/csv.hpp"

#include <istream>

#include "wpclip/errors.hpp"

namespace wpclip::csv {

std::vector<Row> read(std::istream& in, bool comment_lines, std::vector<std::string>* comments) {
  std::vector<Row> rows;
  std::size_t line = 1;
  bool at_record_start = true;
  Row current;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;

  auto end_field = [&] {
    current.fields.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    const bool blank = current.fields.size() == 1 && current.fields[0].empty();
    if (!blank) rows.push_back(std::move(current));
    current = Row{};
    at_record_start = true;
  };

  char c;
  while (in.get(c)) {
    if (at_record_start) {
      current.line = line;
      at_record_start = false;
      if (comment_lines && c == '#') {
        std::string text;
        std::getline(in, text);
        if (!text.empty() && text.back() == '\r') text.pop_back();
        if (comments) comments->push_back(text);
        ++line;
        at_record_start = true;
        continue;
      }
    }
    if (in_quotes) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field += '"';
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field += c;
      }
      continue;
    }
    switch (c) {
      case '"':
        if (field_started && !field.empty()) {
          throw InputError("csv line " + std::to_string(line) + ": stray quote in field");
        }
        in_quotes = true;
        field_started = true;
        break;
      case ',':
        end_field();
        break;
      case '\r':
        break;
      case '\n':
        end_record();
        ++line;
        break;
      default:
        field += c;
        field_started = true;
    }
  }
  if (in_quotes) throw InputError("csv: unterminated quoted field at line " + std::to_string(line));
  if (!at_record_start) end_record();
  return rows;
}

std::string escape(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace wpclip::csv
