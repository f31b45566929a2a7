#pragma once

// Synthetic registered IR/VI corpus used by the pipeline tests and the
// acceptance suite. Deterministic per (seed, index): the visible image is a
// textured scene with sharp rectangles and sinusoid detail, the infrared
// image is smooth with hot blobs, and the gradients are complementary.

#include <cstdint>
#include <string>

#include "fsat/image.hpp"

namespace fsat::testsupport {

struct FixturePair {
  Image ir, vi;
};

FixturePair make_pair(int index, int size = 64, std::uint64_t seed = 1234);

// Writes `train_pairs` pairs under root/train/{ir,vi}/pairNN.pgm and
// `holdout_pairs` under root/holdout/{ir,vi}/pairNN.pgm.
void write_corpus(const std::string& root, int train_pairs = 8, int holdout_pairs = 4,
                  int size = 64, std::uint64_t seed = 1234);

}  // namespace fsat::testsupport
