#pragma once

#include <string>
#include <vector>

#include "fsat/image.hpp"

namespace fsat {

// Registered IR/VI pair locations, matched by filename between the `ir/` and
// `vi/` subdirectories of a dataset root. Sorted lexicographically.
struct DatasetIndex {
  struct Pair {
    std::string id;       // shared filename
    std::string ir_path;
    std::string vi_path;
  };
  std::string root;
  std::vector<Pair> pairs;

  static DatasetIndex scan(const std::string& root);
  bool empty() const { return pairs.empty(); }
  std::size_t size() const { return pairs.size(); }
};

}  // namespace fsat
