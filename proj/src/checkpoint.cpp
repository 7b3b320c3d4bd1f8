#include "occflow/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "occflow/config.hpp"

namespace occflow {

namespace {

std::pair<std::string, std::string> checkpoint_paths(const std::string& path) {
  std::string base = path;
  const std::string ext = ".json";
  if (base.size() > ext.size() && base.compare(base.size() - ext.size(), ext.size(), ext) == 0)
    base = base.substr(0, base.size() - ext.size());
  return {base + ".json", base + ".bin"};
}

}  // namespace

void Checkpoint::add(const std::string& name, const Tensor& t) { arrays.push_back({name, t}); }

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return &t;
  return nullptr;
}

const Tensor& Checkpoint::require(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) throw std::runtime_error("checkpoint: missing array " + name);
  return *t;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  auto [manifest_path, blob_path] = checkpoint_paths(path);

  std::vector<unsigned char> blob;
  nlohmann::json arrays = nlohmann::json::array();
  int64_t offset = 0;
  for (const auto& [name, t] : ckpt.arrays) {
    nlohmann::json a;
    a["name"] = name;
    a["shape"] = t.shape;
    a["offset"] = offset;   // element offset into the f64 blob
    a["count"] = t.size();
    arrays.push_back(a);
    size_t start = blob.size();
    blob.resize(start + static_cast<size_t>(t.size()) * 8);
    for (int64_t i = 0; i < t.size(); ++i) {
      uint64_t bits;
      std::memcpy(&bits, &t.data[static_cast<size_t>(i)], 8);
      for (int b = 0; b < 8; ++b)
        blob[start + static_cast<size_t>(i) * 8 + static_cast<size_t>(b)] =
            static_cast<unsigned char>(bits >> (8 * b));
    }
    offset += t.size();
  }

  nlohmann::json manifest = ckpt.manifest;
  manifest["format_version"] = 1;
  manifest["arrays"] = arrays;
  char hash[20];
  std::snprintf(hash, sizeof hash, "%016llx",
                static_cast<unsigned long long>(fnv1a64(blob.data(), blob.size())));
  manifest["blob_hash"] = hash;
  manifest["blob_bytes"] = blob.size();

  {
    std::ofstream os(manifest_path);
    if (!os) throw std::runtime_error("cannot write " + manifest_path);
    os << manifest.dump(2) << "\n";
  }
  {
    std::ofstream os(blob_path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + blob_path);
    os.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!os) throw std::runtime_error("write failed: " + blob_path);
  }
}

nlohmann::json load_checkpoint_manifest(const std::string& path) {
  auto [manifest_path, blob_path] = checkpoint_paths(path);
  (void)blob_path;
  std::ifstream is(manifest_path);
  if (!is) throw std::runtime_error("cannot open " + manifest_path);
  nlohmann::json manifest;
  is >> manifest;
  if (!manifest.contains("format_version") || manifest["format_version"].get<int>() != 1)
    throw std::runtime_error("checkpoint: unsupported format version");
  return manifest;
}

Checkpoint load_checkpoint(const std::string& path) {
  auto [manifest_path, blob_path] = checkpoint_paths(path);
  Checkpoint ckpt;
  ckpt.manifest = load_checkpoint_manifest(path);

  std::ifstream is(blob_path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + blob_path);
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());

  if (blob.size() != ckpt.manifest["blob_bytes"].get<size_t>())
    throw std::runtime_error("checkpoint: blob truncated");
  char hash[20];
  std::snprintf(hash, sizeof hash, "%016llx",
                static_cast<unsigned long long>(fnv1a64(blob.data(), blob.size())));
  if (ckpt.manifest["blob_hash"].get<std::string>() != hash)
    throw std::runtime_error("checkpoint: blob hash mismatch");

  for (const auto& a : ckpt.manifest["arrays"]) {
    std::vector<int64_t> shape = a["shape"].get<std::vector<int64_t>>();
    int64_t offset = a["offset"].get<int64_t>();
    int64_t count = a["count"].get<int64_t>();
    if (static_cast<size_t>((offset + count) * 8) > blob.size())
      throw std::runtime_error("checkpoint: array range out of blob bounds");
    Tensor t(shape);
    if (t.size() != count) throw std::runtime_error("checkpoint: shape/count mismatch");
    for (int64_t i = 0; i < count; ++i) {
      uint64_t bits = 0;
      for (int b = 0; b < 8; ++b)
        bits |= static_cast<uint64_t>(blob[static_cast<size_t>((offset + i) * 8 + b)]) << (8 * b);
      std::memcpy(&t.data[static_cast<size_t>(i)], &bits, 8);
    }
    ckpt.arrays.push_back({a["name"].get<std::string>(), std::move(t)});
  }
  return ckpt;
}

}  // namespace occflow
