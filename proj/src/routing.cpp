#include "mope/routing.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <set>

#include "mope/errors.hpp"
#include "mope/rng.hpp"

namespace mope {

using nlohmann::json;

std::string to_string(FeatureMode mode) { return mode == FeatureMode::hidden ? "hidden" : "embedding"; }

FeatureMode parse_feature_mode(const std::string& s) {
  if (s == "hidden") return FeatureMode::hidden;
  if (s == "embedding") return FeatureMode::embedding;
  throw ValidationError("unknown feature mode \"" + s + "\" (expected hidden or embedding)");
}

SlotFeature featurize(const BackboneParams& params, const Vocab& vocab, const SlotRef& slot, FeatureMode mode) {
  const std::vector<int> ids = vocab.encode(slot.text());
  SlotFeature f;
  f.slot = slot;
  f.mode = mode;
  f.vector = mode == FeatureMode::hidden ? hidden_feature(params, ids) : embedding_feature(params, ids);
  return f;
}

std::vector<SlotFeature> featurize_all(const BackboneParams& params, const Vocab& vocab,
                                       const std::vector<SlotRef>& slots, FeatureMode mode) {
  std::vector<SlotFeature> out;
  out.reserve(slots.size());
  for (const auto& s : slots) out.push_back(featurize(params, vocab, s, mode));
  return out;
}

namespace {

double sq_dist(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s;
}

int nearest(const std::vector<std::vector<float>>& centroids, std::span<const float> x) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = sq_dist(centroids[c], x);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

std::vector<std::vector<float>> member_means(const std::vector<SlotFeature>& features, const std::vector<int>& labels,
                                             int k, const std::vector<std::vector<float>>& previous) {
  const std::size_t d = features[0].vector.size();
  std::vector<std::vector<double>> sum(k, std::vector<double>(d, 0.0));
  std::vector<int> count(k, 0);
  for (std::size_t i = 0; i < features.size(); ++i) {
    ++count[labels[i]];
    for (std::size_t j = 0; j < d; ++j) sum[labels[i]][j] += features[i].vector[j];
  }
  std::vector<std::vector<float>> out(k, std::vector<float>(d));
  for (int c = 0; c < k; ++c) {
    if (count[c] == 0) {
      out[c] = previous[c];
      continue;
    }
    for (std::size_t j = 0; j < d; ++j) out[c][j] = static_cast<float>(sum[c][j] / count[c]);
  }
  return out;
}

}  // namespace

double within_cluster_sse(const std::vector<SlotFeature>& features, const std::vector<std::vector<float>>& centroids,
                          const std::vector<int>& labels) {
  double s = 0.0;
  for (std::size_t i = 0; i < features.size(); ++i) s += sq_dist(centroids[labels[i]], features[i].vector);
  return s;
}

namespace {

struct LloydRun {
  std::vector<std::vector<float>> centroids;
  std::vector<int> labels;
  std::vector<double> sse_trace;
  int iterations = 0;
};

// One Lloyd run from a k-means++ start drawn from rng.
LloydRun lloyd_run(const std::vector<SlotFeature>& features, int k, Rng& rng) {
  const std::size_t n = features.size();
  // k-means++ seeding.
  std::vector<std::vector<float>> centroids;
  centroids.push_back(features[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)].vector);
  while (static_cast<int>(centroids.size()) < k) {
    std::vector<double> weights(n);
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centroids) best = std::min(best, sq_dist(c, features[i].vector));
      weights[i] = best;
    }
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    centroids.push_back(features[pick(rng)].vector);
  }

  std::vector<int> labels(n, -1);
  LloydRun model;
  int repairs = 0;
  for (int iter = 0; iter < 100; ++iter) {
    std::vector<int> next(n);
    for (std::size_t i = 0; i < n; ++i) next[i] = nearest(centroids, features[i].vector);

    // Repair empty clusters: move the centroid onto the point farthest from
    // its own centroid, then assign that point to it.
    for (int c = 0; c < k; ++c) {
      if (std::find(next.begin(), next.end(), c) != next.end()) continue;
      if (++repairs > 10) throw ContractError("fit_kmeans: empty cluster persisted after 10 repairs");
      std::vector<int> size(k, 0);
      for (int l : next) ++size[l];
      std::size_t far = n;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (size[next[i]] < 2) continue;
        const double dd = sq_dist(centroids[next[i]], features[i].vector);
        if (dd > far_d) {
          far_d = dd;
          far = i;
        }
      }
      if (far == n) throw ContractError("fit_kmeans: cannot repair empty cluster");
      centroids[c] = features[far].vector;
      next[far] = c;
    }

    const bool stable = next == labels;
    labels = std::move(next);
    centroids = member_means(features, labels, k, centroids);
    model.sse_trace.push_back(within_cluster_sse(features, centroids, labels));
    model.iterations = iter + 1;
    if (stable) break;
  }
  model.centroids = std::move(centroids);
  model.labels = std::move(labels);
  return model;
}

}  // namespace

ClusterModel fit_kmeans(const std::vector<SlotFeature>& features, int k, std::uint64_t seed) {
  if (features.empty()) throw ContractError("fit_kmeans: no features");
  if (k < 1) throw ContractError("fit_kmeans: K must be at least 1");
  const std::size_t d = features[0].vector.size();
  std::set<std::vector<float>> distinct;
  for (const auto& f : features) {
    if (f.vector.size() != d) throw ShapeError("fit_kmeans: features have different widths");
    for (float v : f.vector) {
      if (!std::isfinite(v)) throw ContractError("fit_kmeans: non-finite feature for " + f.slot.text());
    }
    distinct.insert(f.vector);
  }
  if (static_cast<std::size_t>(k) > distinct.size()) {
    throw ContractError("fit_kmeans: K=" + std::to_string(k) + " exceeds the " + std::to_string(distinct.size()) +
                        " distinct feature vectors");
  }

  // Independent restarts; the lowest final SSE wins, ties to the earliest.
  std::optional<LloydRun> best;
  std::optional<ContractError> failure;
  for (int r = 0; r < kKMeansRestarts; ++r) {
    Rng rng = make_rng(seed, "kmeans/" + std::to_string(r));
    try {
      LloydRun run = lloyd_run(features, k, rng);
      if (!best || run.sse_trace.back() < best->sse_trace.back()) best = std::move(run);
    } catch (const ContractError& e) {
      failure = e;
    }
  }
  if (!best) throw *failure;
  ClusterModel model;
  model.k = k;
  model.mode = features[0].mode;
  model.seed = seed;
  model.centroids = std::move(best->centroids);
  model.sse_trace = std::move(best->sse_trace);
  model.iterations = best->iterations;
  for (std::size_t i = 0; i < features.size(); ++i) model.assignments[features[i].slot] = best->labels[i];
  return model;
}

int assign_nearest(const ClusterModel& model, std::span<const float> feature) {
  if (model.centroids.empty()) throw ContractError("assign_nearest: model has no centroids");
  if (feature.size() != model.centroids[0].size()) {
    throw ShapeError("assign_nearest: feature width " + std::to_string(feature.size()) + " vs centroid width " +
                     std::to_string(model.centroids[0].size()));
  }
  return nearest(model.centroids, feature);
}

int assign_nearest(const ClusterModel& model, const SlotFeature& feature) {
  return assign_nearest(model, std::span<const float>(feature.vector));
}

ClusterModel cluster_slots(const BackboneParams& params, const Vocab& vocab, const std::vector<SlotRef>& slots,
                           FeatureMode mode, int k, std::uint64_t seed) {
  if (static_cast<int>(slots.size()) < k) {
    throw ContractError("cluster_slots: " + std::to_string(slots.size()) + " slots cannot form " + std::to_string(k) +
                        " clusters");
  }
  return fit_kmeans(featurize_all(params, vocab, slots, mode), k, seed);
}

std::map<SlotRef, int> random_assignment(const ClusterModel& model, const std::vector<SlotRef>& slots,
                                         std::uint64_t seed) {
  Rng rng = make_rng(seed, "routing/random");
  std::uniform_int_distribution<int> dist(0, model.k - 1);
  std::map<SlotRef, int> out;
  for (const auto& s : slots) {
    if (!out.count(s)) out[s] = dist(rng);
  }
  return out;
}

json cluster_model_to_json(const ClusterModel& m) {
  json assign = json::object();
  for (const auto& [slot, idx] : m.assignments) assign[slot.text()] = idx;
  return {{"k", m.k}, {"mode", to_string(m.mode)}, {"seed", m.seed}, {"centroids", m.centroids}, {"assignments", assign}};
}

ClusterModel cluster_model_from_json(const json& j) {
  ClusterModel m;
  try {
    m.k = j.at("k").get<int>();
    m.mode = parse_feature_mode(j.at("mode").get<std::string>());
    m.seed = j.at("seed").get<std::uint64_t>();
    m.centroids = j.at("centroids").get<std::vector<std::vector<float>>>();
    for (const auto& [key, idx] : j.at("assignments").items()) {
      const auto space = key.find(' ');
      if (space == std::string::npos) throw ValidationError("cluster model: slot key \"" + key + "\" is not \"domain slot\"");
      m.assignments[{key.substr(0, space), key.substr(space + 1)}] = idx.get<int>();
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("cluster model: ") + e.what());
  }
  if (m.k < 1 || static_cast<int>(m.centroids.size()) != m.k) {
    throw ValidationError("cluster model: k does not match the number of centroids");
  }
  for (const auto& c : m.centroids) {
    if (c.size() != m.centroids[0].size()) throw ValidationError("cluster model: ragged centroids");
  }
  for (const auto& [slot, idx] : m.assignments) {
    if (idx < 0 || idx >= m.k) throw ValidationError("cluster model: assignment of " + slot.text() + " out of range");
  }
  return m;
}

void save_cluster_model(const std::filesystem::path& path, const ClusterModel& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError(path.string() + ": cannot write cluster model");
  out << cluster_model_to_json(m).dump(1) << '\n';
}

ClusterModel load_cluster_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(path.string() + ": cannot open cluster model");
  try {
    return cluster_model_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": malformed JSON: " + e.what());
  }
}

}  // namespace mope
