#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace wpclip::csv {

struct Row {
  std::size_t line = 0;  // 1-based line where the record starts
  std::vector<std::string> fields;
};

// RFC 4180 reader: quoted fields may contain commas, doubled quotes and
// newlines. Blank lines are skipped; so are lines beginning with '#' when
// `comment_lines` is set (their text is appended to `comments`, '#' removed).
std::vector<Row> read(std::istream& in, bool comment_lines = false,
                      std::vector<std::string>* comments = nullptr);

std::string escape(std::string_view field);

}  // namespace wpclip::csv
