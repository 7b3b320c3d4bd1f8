#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "occflow/tensor.hpp"

namespace occflow {

// Serialized training state: a JSON manifest (<path>.json) describing named
// parameter arrays plus a little-endian f64 blob (<path>.bin). The manifest
// records a hash of the blob; load verifies it.
struct Checkpoint {
  nlohmann::json manifest;
  std::vector<std::pair<std::string, Tensor>> arrays;

  void add(const std::string& name, const Tensor& t);
  const Tensor* find(const std::string& name) const;
  const Tensor& require(const std::string& name) const;
};

// `path` may end in ".json"; the blob lives next to it with ".bin".
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Reads only the manifest; no blob access.
nlohmann::json load_checkpoint_manifest(const std::string& path);

}  // namespace occflow
