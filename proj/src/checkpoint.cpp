#include "mope/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "mope/errors.hpp"

namespace mope {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(sizeof(float) == 4);

fs::path checkpoint_stem(const fs::path& path) {
  if (path.extension() == ".json" || path.extension() == ".bin") return fs::path(path).replace_extension();
  return path;
}

fs::path manifest_path(const fs::path& stem) { return fs::path(stem.string() + ".json"); }
fs::path payload_path(const fs::path& stem) { return fs::path(stem.string() + ".bin"); }

namespace {

void put_le(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

float get_le(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

void write_checkpoint(const fs::path& stem_in, const std::string& kind, const json& meta, const NamedTensors& tensors) {
  const fs::path stem = checkpoint_stem(stem_in);
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  std::string payload;
  json table = json::array();
  for (const auto& [name, t] : tensors) {
    table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}, {"count", t.size()}});
    for (float v : t.data()) put_le(payload, v);
  }
  json manifest = meta;
  manifest["format"] = kCheckpointFormat;
  manifest["kind"] = kind;
  manifest["payload"] = payload_path(stem).filename().string();
  manifest["payload_bytes"] = payload.size();
  manifest["params"] = table;

  std::ofstream bin(payload_path(stem), std::ios::binary);
  if (!bin) throw FormatError(payload_path(stem).string() + ": cannot write payload");
  bin.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  std::ofstream man(manifest_path(stem), std::ios::binary);
  if (!man) throw FormatError(manifest_path(stem).string() + ": cannot write manifest");
  man << manifest.dump(1) << '\n';
  if (!bin || !man) throw FormatError(stem.string() + ": checkpoint write failed");
}

Checkpoint read_checkpoint(const fs::path& stem_in, const std::string& kind) {
  const fs::path stem = checkpoint_stem(stem_in);
  const fs::path mpath = manifest_path(stem);
  std::ifstream man(mpath);
  if (!man) throw FormatError(mpath.string() + ": cannot open manifest");
  Checkpoint ck;
  try {
    ck.manifest = json::parse(man);
  } catch (const json::parse_error& e) {
    throw FormatError(mpath.string() + ": malformed manifest: " + e.what());
  }
  const json& m = ck.manifest;
  if (!m.is_object() || m.value("format", "") != kCheckpointFormat) {
    throw FormatError(mpath.string() + ": unsupported format, expected " + kCheckpointFormat);
  }
  if (m.value("kind", "") != kind) {
    throw FormatError(mpath.string() + ": checkpoint kind \"" + m.value("kind", "") + "\", expected \"" + kind + "\"");
  }
  if (!m.contains("params") || !m["params"].is_array()) throw FormatError(mpath.string() + ": missing tensor table");

  const fs::path ppath = payload_path(stem);
  std::ifstream bin(ppath, std::ios::binary);
  if (!bin) throw FormatError(ppath.string() + ": cannot open payload");
  std::string payload((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  if (m.contains("payload_bytes") && m["payload_bytes"].get<std::size_t>() != payload.size()) {
    throw FormatError(ppath.string() + ": payload is " + std::to_string(payload.size()) + " bytes, manifest says " +
                      std::to_string(m["payload_bytes"].get<std::size_t>()));
  }
  std::size_t expected_offset = 0;
  for (const json& e : m["params"]) {
    std::string name;
    Shape shape;
    std::size_t offset = 0, count = 0;
    try {
      name = e.at("name").get<std::string>();
      shape = e.at("shape").get<Shape>();
      offset = e.at("offset").get<std::size_t>();
      count = e.at("count").get<std::size_t>();
    } catch (const json::exception&) {
      throw FormatError(mpath.string() + ": malformed tensor entry");
    }
    if (shape.empty() || shape_numel(shape) != count) {
      throw FormatError(mpath.string() + ": tensor \"" + name + "\" shape does not match its element count");
    }
    if (offset != expected_offset || offset + 4 * count > payload.size()) {
      throw FormatError(ppath.string() + ": tensor \"" + name + "\" lies outside the payload (truncated?)");
    }
    std::vector<float> data(count);
    for (std::size_t i = 0; i < count; ++i) data[i] = get_le(payload.data() + offset + 4 * i);
    ck.tensors.emplace_back(name, Tensor(shape, std::move(data)));
    expected_offset = offset + 4 * count;
  }
  if (expected_offset != payload.size()) {
    throw FormatError(ppath.string() + ": payload has trailing bytes not described by the manifest");
  }
  return ck;
}

void save_backbone(const fs::path& stem, const BackboneParams& params, const std::vector<std::string>& vocab) {
  if (static_cast<int>(vocab.size()) != params.config.vocab_size) {
    throw ContractError("save_backbone: vocab size does not match the config");
  }
  json meta;
  meta["config"] = config_to_json(params.config);
  meta["vocab"] = vocab;
  write_checkpoint(stem, "backbone", meta, params.named());
}

BackboneCheckpoint load_backbone(const fs::path& stem) {
  Checkpoint ck = read_checkpoint(stem, "backbone");
  BackboneCheckpoint out;
  try {
    const BackboneConfig config = config_from_json(ck.manifest.at("config"));
    config.validate();
    out.vocab = ck.manifest.at("vocab").get<std::vector<std::string>>();
    if (static_cast<int>(out.vocab.size()) != config.vocab_size) throw FormatError("vocab size mismatch");
    out.params = BackboneParams::from_named(config, ck.tensors);
  } catch (const json::exception& e) {
    throw FormatError(stem.string() + ": malformed backbone manifest: " + e.what());
  } catch (const ContractError& e) {
    throw FormatError(stem.string() + ": " + e.what());
  }
  return out;
}

}  // namespace mope
