#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "dgp/dgp.hpp"

namespace dgp {

struct SubjectColumn {
  std::string id;
  std::string group;      // empty when the header gives none
  std::string condition;  // empty when the header gives none
  std::vector<double> y;
};

// Wide-format series table: shared strictly-increasing x grid, one y column
// per subject.
struct SubjectTable {
  std::vector<double> x;
  std::vector<SubjectColumn> subjects;

  Dataset dataset(std::size_t subject) const;
};

// Header `x,<subject_id>[:<group>][:<condition>],...`, numeric body, rows
// sorted by x. Parse errors carry the 1-based line number.
SubjectTable parse_csv(std::istream& in, const std::string& name);
SubjectTable ingest_csv(const std::string& path);

}  // namespace dgp
