#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace dermaug::csv {

/// Splits one CSV line; double-quoted fields may contain commas and "" escapes.
std::vector<std::string> split_line(std::string_view line);

/// Quotes a field only when it contains a comma, quote or newline.
std::string escape(std::string_view field);

std::string join(const std::vector<std::string>& fields);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  /// 1-based line number of each row in the source file (header is line 1).
  std::vector<std::size_t> line_numbers;

  /// Column index or -1.
  int column(std::string_view name) const;
};

/// Reads a whole CSV file. Blank lines are skipped; rows are not width-checked here.
Table read_file(const std::filesystem::path& path);

}  // namespace dermaug::csv
