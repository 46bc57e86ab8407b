// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace ilens {

/// Nine significant digits, dot decimal, independent of the C locale.
std::string format_double(double v);

/// Table with a mandatory header; cells are written verbatim, so callers
/// keep them free of commas and newlines.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  CsvTable& add_row(std::vector<std::string> cells);
  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }

  std::string str() const;
  /// Writes through a temporary file and renames it into place.
  void write(const std::filesystem::path& path) const;

  static CsvTable read(const std::filesystem::path& path);
  std::size_t column(std::string_view name) const;

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

/// Writes text atomically: temporary sibling, then rename.
void write_text_atomic(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

/// Parses a whole cell as a double; FormatError names `what` on failure.
double parse_double(std::string_view cell, std::string_view what);

}  // namespace ilens
