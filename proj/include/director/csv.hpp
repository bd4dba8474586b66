#pragma once

#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace director {

/// RFC-4180 quoting: fields holding commas, quotes or newlines get wrapped,
/// embedded quotes doubled.
std::string csv_escape(const std::string& field);

void write_csv_row(std::ostream& out, std::span<const std::string> fields);

/// Lossless double formatting (round-trips through strtod).
std::string format_double(double v);

/// Minimal RFC-4180 reader (quoted fields, doubled quotes, no multi-line
/// fields). Returns rows of fields, header included.
std::vector<std::vector<std::string>> read_csv(const std::string& path);

}  // namespace director
