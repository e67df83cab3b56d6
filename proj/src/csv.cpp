#include "dgp/csv.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace dgp {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream stream(line);
  while (std::getline(stream, cell, sep)) out.push_back(trim(cell));
  if (!line.empty() && line.back() == sep) out.push_back("");
  return out;
}

double parse_number(const std::string& cell, long line) {
  double value = 0.0;
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc{} || ptr != end)
    throw ParseError("non-numeric cell '" + cell + "'", line);
  return value;
}

}  // namespace

Dataset SubjectTable::dataset(std::size_t subject) const {
  if (subject >= subjects.size())
    throw ValidationError("SubjectTable: subject index out of range");
  return Dataset{x, subjects[subject].y};
}

SubjectTable parse_csv(std::istream& in, const std::string& name) {
  std::string line;
  long line_no = 0;
  if (!std::getline(in, line)) throw ParseError(name + ": empty file", 1);
  ++line_no;

  const std::vector<std::string> header = split(line, ',');
  if (header.size() < 2 || header[0] != "x")
    throw ParseError(name + ": header must start with 'x' and name at least one subject",
                     line_no);

  SubjectTable table;
  for (std::size_t c = 1; c < header.size(); ++c) {
    const std::vector<std::string> parts = split(header[c], ':');
    if (parts.empty() || parts[0].empty() || parts.size() > 3)
      throw ParseError(name + ": bad subject header '" + header[c] + "'", line_no);
    SubjectColumn col;
    col.id = parts[0];
    if (parts.size() > 1) col.group = parts[1];
    if (parts.size() > 2) col.condition = parts[2];
    table.subjects.push_back(std::move(col));
  }

  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::vector<std::string> cells = split(line, ',');
    if (cells.size() != header.size())
      throw ParseError(name + ": expected " + std::to_string(header.size()) +
                           " cells, got " + std::to_string(cells.size()),
                       line_no);
    const double x = parse_number(cells[0], line_no);
    if (!table.x.empty() && !(x > table.x.back()))
      throw ParseError(name + ": x must be strictly increasing", line_no);
    table.x.push_back(x);
    for (std::size_t c = 1; c < cells.size(); ++c)
      table.subjects[c - 1].y.push_back(parse_number(cells[c], line_no));
  }
  if (table.x.empty()) throw ParseError(name + ": no data rows", line_no);
  return table;
}

SubjectTable ingest_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("ingest_csv: cannot open " + path);
  return parse_csv(in, path);
}

}  // namespace dgp
