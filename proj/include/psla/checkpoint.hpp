#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "psla/tensor.hpp"

namespace psla {

struct NamedLayer {
  std::string name;
  ConvParams params;
};

// Writes <name>.weights.psla / <name>.bias.psla per layer plus manifest.json
// listing names, shapes, per-file SHA-256 and a content hash over all files.
void save_checkpoint(const std::filesystem::path& dir, const std::vector<NamedLayer>& layers);
// Verifies every hash; throws IoError on mismatch or missing files.
std::vector<NamedLayer> load_checkpoint(const std::filesystem::path& dir);

}  // namespace psla
