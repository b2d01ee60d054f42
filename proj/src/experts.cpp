#include "mope/experts.hpp"

#include <fstream>
#include <random>

#include "mope/checkpoint.hpp"
#include "mope/errors.hpp"
#include "mope/rng.hpp"

namespace mope {

namespace fs = std::filesystem;
using nlohmann::json;

bool ExpertPool::bit_equal(const ExpertPool& other) const {
  if (!(config == other.config) || !(provenance == other.provenance) || experts.size() != other.experts.size()) {
    return false;
  }
  for (std::size_t i = 0; i < experts.size(); ++i) {
    if (!experts[i].bit_equal(other.experts[i])) return false;
  }
  return true;
}

PrefixExpert init_expert(const BackboneConfig& config, int index, std::uint64_t seed) {
  config.validate();
  Rng rng = make_rng(seed, "expert/init/" + std::to_string(index));
  std::normal_distribution<float> dist(0.0f, 0.02f);
  auto draw = [&] {
    std::vector<float> data(static_cast<std::size_t>(config.prefix_len) * config.d_model);
    for (float& v : data) v = dist(rng);
    return Tensor({config.prefix_len, config.d_model}, std::move(data));
  };
  PrefixExpert e;
  e.index = index;
  for (int l = 0; l < config.n_layers; ++l) {
    Tensor key = draw();
    Tensor value = draw();
    e.layers.push_back({std::move(key), std::move(value)});
  }
  return e;
}

ExpertPool init_pool(const BackboneConfig& config, int k, std::uint64_t seed) {
  if (k < 1) throw ContractError("init_pool: K must be at least 1");
  ExpertPool pool;
  pool.config = config;
  pool.provenance.k = k;
  pool.provenance.seed = seed;
  for (int i = 0; i < k; ++i) pool.experts.push_back(init_expert(config, i, seed));
  return pool;
}

const PrefixExpert& select_expert(const ExpertPool& pool, int cluster_index) {
  if (cluster_index < 0 || cluster_index >= pool.size()) {
    throw ContractError("select_expert: cluster index " + std::to_string(cluster_index) + " outside [0, " +
                        std::to_string(pool.size()) + ")");
  }
  return pool.experts[cluster_index];
}

namespace {

json provenance_json(const PoolProvenance& p) { return {{"k", p.k}, {"seed", p.seed}, {"mode", p.mode}}; }

NamedTensors expert_tensors(const PrefixExpert& e) {
  NamedTensors out;
  for (std::size_t l = 0; l < e.layers.size(); ++l) {
    out.emplace_back("layer." + std::to_string(l) + ".key", e.layers[l].key);
    out.emplace_back("layer." + std::to_string(l) + ".value", e.layers[l].value);
  }
  return out;
}

std::string expert_name(int k) { return "expert_" + std::to_string(k); }

}  // namespace

void save_pool(const fs::path& dir, const ExpertPool& pool) {
  if (pool.size() != pool.provenance.k) throw ContractError("save_pool: pool size differs from provenance K");
  fs::create_directories(dir);
  json names = json::array();
  for (const auto& e : pool.experts) {
    check_expert_shape(e, pool.config);
    json meta;
    meta["config"] = config_to_json(pool.config);
    meta["provenance"] = provenance_json(pool.provenance);
    meta["expert_index"] = e.index;
    write_checkpoint(dir / expert_name(e.index), "expert", meta, expert_tensors(e));
    names.push_back(expert_name(e.index));
  }
  json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["kind"] = "expert-pool";
  manifest["k"] = pool.size();
  manifest["config"] = config_to_json(pool.config);
  manifest["provenance"] = provenance_json(pool.provenance);
  manifest["experts"] = names;
  std::ofstream out(dir / "pool.json", std::ios::binary);
  if (!out) throw FormatError((dir / "pool.json").string() + ": cannot write");
  out << manifest.dump(1) << '\n';
}

ExpertPool load_pool(const fs::path& dir) {
  const fs::path mpath = dir / "pool.json";
  std::ifstream in(mpath);
  if (!in) throw FormatError(mpath.string() + ": cannot open pool manifest");
  json m;
  try {
    m = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(mpath.string() + ": malformed manifest: " + e.what());
  }
  if (m.value("format", "") != kCheckpointFormat || m.value("kind", "") != "expert-pool") {
    throw FormatError(mpath.string() + ": not a " + std::string(kCheckpointFormat) + " expert pool");
  }
  ExpertPool pool;
  std::vector<std::string> names;
  try {
    pool.config = config_from_json(m.at("config"));
    pool.config.validate();
    const json& p = m.at("provenance");
    pool.provenance.k = p.at("k").get<int>();
    pool.provenance.seed = p.at("seed").get<std::uint64_t>();
    pool.provenance.mode = p.at("mode").get<std::string>();
    names = m.at("experts").get<std::vector<std::string>>();
    const int k = m.at("k").get<int>();
    if (k < 1 || k != pool.provenance.k || static_cast<int>(names.size()) != k) {
      throw FormatError(mpath.string() + ": manifest declares K=" + std::to_string(k) + " but lists " +
                        std::to_string(names.size()) + " experts");
    }
  } catch (const json::exception& e) {
    throw FormatError(mpath.string() + ": malformed pool manifest: " + e.what());
  } catch (const ContractError& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (!fs::exists(manifest_path(dir / names[i])) || !fs::exists(payload_path(dir / names[i]))) {
      throw FormatError(mpath.string() + ": expert checkpoint \"" + names[i] + "\" is missing");
    }
    Checkpoint ck = read_checkpoint(dir / names[i], "expert");
    if (ck.manifest.value("expert_index", -1) != static_cast<int>(i)) {
      throw FormatError(names[i] + ": expert index does not match its position in the pool");
    }
    const auto& t = ck.tensors;
    if (static_cast<int>(t.size()) != 2 * pool.config.n_layers) {
      throw FormatError(names[i] + ": expected " + std::to_string(2 * pool.config.n_layers) + " prefix matrices");
    }
    PrefixExpert e;
    e.index = static_cast<int>(i);
    for (int l = 0; l < pool.config.n_layers; ++l) e.layers.push_back({t[2 * l].second, t[2 * l + 1].second});
    if (e.prefix_len() != pool.config.prefix_len) throw FormatError(names[i] + ": prefix length mismatch");
    try {
      check_expert_shape(e, pool.config);
    } catch (const ShapeError& err) {
      throw FormatError(names[i] + ": " + err.what());
    }
    pool.experts.push_back(std::move(e));
  }
  return pool;
}

}  // namespace mope
