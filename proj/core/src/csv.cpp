#include "ndlab/csv.hpp"

#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace ndlab {

std::string format_double(double value) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

CsvWriter::CsvWriter(const std::filesystem::path& path,
                     const std::vector<std::string>& header)
    : out_(path, std::ios::binary), columns_(header.size()) {
  if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) out_ << ',';
    out_ << header[i];
  }
  out_ << '\n';
}

CsvWriter& CsvWriter::cell(const std::string& text) {
  if (filled_ == columns_) throw std::logic_error("csv row has too many cells");
  if (filled_) out_ << ',';
  out_ << text;
  ++filled_;
  return *this;
}

CsvWriter& CsvWriter::cell(double value) { return cell(format_double(value)); }
CsvWriter& CsvWriter::cell(std::size_t value) { return cell(std::to_string(value)); }
CsvWriter& CsvWriter::cell(int value) { return cell(std::to_string(value)); }
CsvWriter& CsvWriter::cell(bool value) { return cell(std::string(value ? "1" : "0")); }

void CsvWriter::end_row() {
  if (filled_ != columns_) {
    throw std::logic_error("csv row has " + std::to_string(filled_) + " of " +
                           std::to_string(columns_) + " cells");
  }
  out_ << '\n';
  filled_ = 0;
  out_.flush();
}

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw std::out_of_range("csv has no column '" + name + "'");
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  CsvTable table;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (first) {
      table.header = std::move(cells);
      first = false;
    } else {
      table.rows.push_back(std::move(cells));
    }
  }
  return table;
}

}  // namespace ndlab
