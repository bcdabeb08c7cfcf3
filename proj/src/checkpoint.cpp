#include "psla/checkpoint.hpp"

#include <fstream>

#include "json.hpp"
#include "psla/errors.hpp"
#include "psla/tensor_io.hpp"

namespace psla {

namespace {

nlohmann::json write_entry(const std::filesystem::path& dir, const std::string& file, const Tensor& t,
                           std::string& content) {
  const auto bytes = io::encode(t);
  std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / file).string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  const std::string hash = io::sha256_hex(bytes);
  content += hash;
  return {{"file", file}, {"shape", t.shape()}, {"sha256", hash}};
}

Tensor read_entry(const std::filesystem::path& dir, const nlohmann::json& entry, std::string& content) {
  const auto path = dir / entry.at("file").get<std::string>();
  const std::string hash = io::sha256_file(path);
  if (hash != entry.at("sha256").get<std::string>()) throw IoError("checkpoint hash mismatch for " + path.string());
  content += hash;
  Tensor t = io::load(path);
  if (t.shape() != entry.at("shape").get<Shape>()) throw IoError("checkpoint shape mismatch for " + path.string());
  return t;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const std::vector<NamedLayer>& layers) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json manifest;
  manifest["format"] = "psla-checkpoint";
  manifest["version"] = 1;
  manifest["layers"] = nlohmann::json::array();
  std::string content;
  for (const auto& layer : layers) {
    layer.params.validate();
    nlohmann::json entry{{"name", layer.name},
                         {"kernel_size", layer.params.kernel_size},
                         {"in_channels", layer.params.in_channels},
                         {"out_channels", layer.params.out_channels}};
    entry["weights"] = write_entry(dir, layer.name + ".weights.psla", layer.params.weights, content);
    entry["bias"] = layer.params.has_bias() ? write_entry(dir, layer.name + ".bias.psla", layer.params.bias, content)
                                            : nlohmann::json(nullptr);
    manifest["layers"].push_back(entry);
  }
  manifest["content_hash"] = io::sha256_hex(std::vector<std::uint8_t>(content.begin(), content.end()));
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

std::vector<NamedLayer> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("missing manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("unreadable checkpoint manifest: ") + e.what());
  }
  std::vector<NamedLayer> layers;
  std::string content;
  for (const auto& entry : manifest.at("layers")) {
    NamedLayer layer;
    layer.name = entry.at("name").get<std::string>();
    layer.params.kernel_size = entry.at("kernel_size").get<std::size_t>();
    layer.params.in_channels = entry.at("in_channels").get<std::size_t>();
    layer.params.out_channels = entry.at("out_channels").get<std::size_t>();
    layer.params.weights = read_entry(dir, entry.at("weights"), content);
    if (!entry.at("bias").is_null()) layer.params.bias = read_entry(dir, entry.at("bias"), content);
    layer.params.validate();
    layers.push_back(std::move(layer));
  }
  const auto expected = io::sha256_hex(std::vector<std::uint8_t>(content.begin(), content.end()));
  if (manifest.at("content_hash").get<std::string>() != expected) throw IoError("checkpoint content hash mismatch");
  return layers;
}

}  // namespace psla
