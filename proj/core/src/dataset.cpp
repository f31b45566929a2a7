#include "fsat/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <map>
#include <stdexcept>

namespace fsat {

namespace fs = std::filesystem;

DatasetIndex DatasetIndex::scan(const std::string& root) {
  const fs::path ir_dir = fs::path(root) / "ir";
  const fs::path vi_dir = fs::path(root) / "vi";
  if (!fs::is_directory(ir_dir) || !fs::is_directory(vi_dir)) {
    throw std::runtime_error(root + ": dataset root must contain ir/ and vi/ subdirectories");
  }
  std::map<std::string, std::string> vi_files;
  for (const auto& e : fs::directory_iterator(vi_dir)) {
    if (e.is_regular_file()) vi_files[e.path().filename().string()] = e.path().string();
  }
  DatasetIndex idx;
  idx.root = root;
  for (const auto& e : fs::directory_iterator(ir_dir)) {
    if (!e.is_regular_file()) continue;
    const std::string name = e.path().filename().string();
    auto it = vi_files.find(name);
    if (it == vi_files.end()) continue;
    idx.pairs.push_back({name, e.path().string(), it->second});
  }
  std::sort(idx.pairs.begin(), idx.pairs.end(),
            [](const Pair& a, const Pair& b) { return a.id < b.id; });
  return idx;
}

}  // namespace fsat
