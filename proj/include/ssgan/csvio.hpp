#pragma once

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "ssgan/common.hpp"

namespace ssgan {

// CSV of numeric curves. Doubles are printed with %.17g so a write/read
// round-trip is bitwise exact; empty cells are "not evaluated".
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::optional<double>>> rows;

  std::string to_text() const;
  void save(const std::string& path) const;
  static CsvTable parse_text(const std::string& text);
  static CsvTable load(const std::string& path);

  int column(const std::string& name) const;
};

inline std::string format_g17(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace ssgan
