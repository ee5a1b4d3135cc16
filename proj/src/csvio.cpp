#include "ssgan/csvio.hpp"

#include <fstream>
#include <sstream>

namespace ssgan {

std::string CsvTable::to_text() const {
  std::ostringstream out;
  for (size_t i = 0; i < header.size(); ++i)
    out << (i ? "," : "") << header[i];
  out << "\n";
  for (const auto& row : rows) {
    require(row.size() == header.size(), ErrorCode::shape_mismatch,
            "csv row width mismatch");
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) out << ",";
      if (row[i]) out << format_g17(*row[i]);
    }
    out << "\n";
  }
  return out.str();
}

void CsvTable::save(const std::string& path) const {
  write_text_file(path, to_text());
}

CsvTable CsvTable::parse_text(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() && in.eof()) break;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    if (first) {
      t.header = cells;
      first = false;
      continue;
    }
    std::vector<std::optional<double>> row;
    row.reserve(t.header.size());
    for (size_t i = 0; i < t.header.size(); ++i) {
      if (i < cells.size() && !cells[i].empty())
        row.push_back(std::stod(cells[i]));
      else
        row.push_back(std::nullopt);
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

CsvTable CsvTable::load(const std::string& path) {
  return parse_text(read_text_file(path));
}

int CsvTable::column(const std::string& name) const {
  for (size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  fail(ErrorCode::invalid_argument, "csv column not found: " + name);
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::io_error, "cannot open: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::io_error, "cannot open for write: " + path);
  f << text;
  require(f.good(), ErrorCode::io_error, "write failed: " + path);
}

}  // namespace ssgan
