#include "mope/pipeline.hpp"

#include <algorithm>
#include <exception>
#include <functional>
#include <sstream>
#include <thread>

#include "mope/errors.hpp"
#include "mope/prompt.hpp"
#include "mope/rng.hpp"

namespace mope {

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("run config: expected an object");
  RunConfig c;
  try {
    if (j.contains("backbone")) {
      nlohmann::json merged = config_to_json(c.backbone);
      merged.merge_patch(j.at("backbone"));
      c.backbone = config_from_json(merged);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("backbone config: ") + e.what());
  }
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  return c;
}

nlohmann::json run_config_to_json(const RunConfig& c) {
  return {{"backbone", config_to_json(c.backbone)}, {"train", train_config_to_json(c.train)}};
}

std::string to_string(RoutingMode mode) {
  switch (mode) {
    case RoutingMode::specialized: return "specialized";
    case RoutingMode::random: return "random";
    case RoutingMode::single: return "single";
  }
  return "specialized";
}

RoutingMode parse_routing_mode(const std::string& s) {
  if (s == "specialized") return RoutingMode::specialized;
  if (s == "random") return RoutingMode::random;
  if (s == "single") return RoutingMode::single;
  throw ValidationError("unknown routing \"" + s + "\" (expected specialized, random or single)");
}

std::map<SlotRef, int> route_slots(const BackboneParams& backbone, const Vocab& vocab, const ClusterModel& model,
                                   const std::vector<SlotRef>& slots, RoutingMode mode, std::uint64_t seed) {
  std::map<SlotRef, int> out;
  switch (mode) {
    case RoutingMode::random:
      return random_assignment(model, slots, seed);
    case RoutingMode::single:
      for (const auto& s : slots) out[s] = 0;
      return out;
    case RoutingMode::specialized:
      for (const auto& s : slots) {
        auto it = model.assignments.find(s);
        out[s] = it != model.assignments.end() ? it->second
                                                : assign_nearest(model, featurize(backbone, vocab, s, model.mode));
      }
      return out;
  }
  return out;
}

std::vector<std::vector<TrainExample>> cluster_examples(const Corpus& train, const Vocab& vocab,
                                                        const ClusterModel& model, int max_context, double fraction,
                                                        std::uint64_t seed) {
  std::vector<std::vector<TrainExample>> out(model.k);
  for (const auto& d : train.dialogues) {
    if (!keep_dialogue(d.id, fraction, seed)) continue;
    const std::vector<SlotRef> slots = dialogue_slots(d, train.schema);
    for (int t = 0; t < static_cast<int>(d.turns.size()); ++t) {
      for (const auto& s : slots) {
        auto it = model.assignments.find(s);
        if (it == model.assignments.end()) throw ContractError("cluster_examples: slot " + s.text() + " is not clustered");
        out[it->second].push_back(build_example(vocab, d, t, s, gold_value(d, t, s), max_context));
      }
    }
  }
  return out;
}

PoolTrainResult train_pool(const BackboneParams& backbone, const Vocab& vocab, const Corpus& train,
                           const ClusterModel& model, const TrainConfig& config, std::uint64_t seed) {
  const auto examples = cluster_examples(train, vocab, model, backbone.config.max_context, config.fraction, seed);
  PoolTrainResult res;
  res.pool = init_pool(backbone.config, model.k, seed);
  res.pool.provenance = {model.k, model.seed, to_string(model.mode)};
  res.epoch_losses.resize(model.k);
  for (const auto& e : examples) res.example_counts.push_back(e.size());

  std::vector<std::exception_ptr> errors(model.k);
  auto work = [&](int k) {
    try {
      auto r = train_expert(backbone, res.pool.experts[k], examples[k], config, seed);
      res.pool.experts[k] = std::move(r.expert);
      res.epoch_losses[k] = std::move(r.epoch_losses);
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };
  const int threads = std::clamp(config.threads, 1, model.k);
  if (threads == 1) {
    for (int k = 0; k < model.k; ++k) work(k);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (int k = w; k < model.k; k += threads) work(k);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return res;
}

namespace {

struct GridQuery {
  const Dialogue* dialogue;
  int turn;
  SlotRef slot;
};

std::vector<GridQuery> grid_queries(const Corpus& test, const std::string& domain) {
  if (!test.schema.domains.count(domain)) throw ValidationError("unknown domain \"" + domain + "\"");
  const std::vector<SlotRef> slots = test.schema.slots_of(domain);
  std::vector<GridQuery> out;
  for (const auto& d : test.dialogues) {
    if (std::find(d.domains.begin(), d.domains.end(), domain) == d.domains.end()) continue;
    for (int t = 0; t < static_cast<int>(d.turns.size()); ++t) {
      for (const auto& s : slots) out.push_back({&d, t, s});
    }
  }
  return out;
}

PredictionRecord to_record(const GridQuery& q, const Prediction& p) {
  return {q.dialogue->id, q.turn, q.slot.domain, q.slot.slot, p.value, p.expert_used};
}

std::vector<PredictionRecord> predict_with(const BackboneParams& backbone, const Vocab& vocab, const Corpus& test,
                                           const std::string& domain,
                                           const std::function<const PrefixExpert*(const SlotRef&)>& expert_of) {
  const auto queries = grid_queries(test, domain);
  // Batch by (expert, dialogue) so each token tree shares one history.
  std::map<std::pair<const PrefixExpert*, const Dialogue*>, std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < queries.size(); ++i) batches[{expert_of(queries[i].slot), queries[i].dialogue}].push_back(i);
  std::vector<PredictionRecord> out(queries.size());
  for (const auto& [key, members] : batches) {
    std::vector<ValueQuery> vq;
    for (std::size_t i : members) vq.push_back({queries[i].dialogue, queries[i].turn, queries[i].slot});
    const auto preds = generate_values(backbone, vocab, key.first, vq);
    for (std::size_t m = 0; m < members.size(); ++m) out[members[m]] = to_record(queries[members[m]], preds[m]);
  }
  return out;
}

}  // namespace

std::vector<PredictionRecord> predict_domain(const BackboneParams& backbone, const Vocab& vocab, const ExpertPool& pool,
                                             const std::map<SlotRef, int>& routes, const Corpus& test,
                                             const std::string& domain) {
  return predict_with(backbone, vocab, test, domain, [&](const SlotRef& s) {
    auto it = routes.find(s);
    if (it == routes.end()) throw ContractError("predict_domain: no route for " + s.text());
    return &select_expert(pool, it->second);
  });
}

std::vector<PredictionRecord> predict_frozen(const BackboneParams& backbone, const Vocab& vocab, const Corpus& test,
                                             const std::string& domain) {
  return predict_with(backbone, vocab, test, domain, [](const SlotRef&) { return nullptr; });
}

std::vector<IclExemplar> select_exemplars(const Corpus& train, const SlotRef& slot, int shots,
                                          const std::map<SlotRef, int>* train_clusters, int target_cluster,
                                          std::uint64_t seed) {
  if (shots < 0) throw ContractError("select_exemplars: negative shot count");
  if (shots == 0) return {};
  auto matches = [&](const SlotRef& s) {
    if (train_clusters) {
      auto it = train_clusters->find(s);
      return it != train_clusters->end() && it->second == target_cluster;
    }
    return s.slot == slot.slot;
  };
  std::vector<IclExemplar> candidates;
  auto collect = [&](bool any) {
    for (const auto& d : train.dialogues) {
      const auto slots = dialogue_slots(d, train.schema);
      for (int t = 0; t < static_cast<int>(d.turns.size()); ++t) {
        for (const auto& s : slots) {
          if (any || matches(s)) candidates.push_back({&d, t, s, gold_value(d, t, s)});
        }
      }
    }
  };
  collect(false);
  if (candidates.empty()) collect(true);
  if (candidates.empty()) throw ContractError("select_exemplars: training corpus has no cells");
  Rng rng = make_rng(seed, "icl/" + slot.text());
  std::shuffle(candidates.begin(), candidates.end(), rng);
  candidates.resize(std::min<std::size_t>(candidates.size(), static_cast<std::size_t>(shots)));
  return candidates;
}

std::vector<PredictionRecord> predict_icl(const BackboneParams& backbone, const Vocab& vocab, const Corpus& train,
                                          const Corpus& test, const std::string& domain, int shots,
                                          const ClusterModel* model, std::uint64_t seed) {
  const auto queries = grid_queries(test, domain);
  std::map<SlotRef, std::vector<IclExemplar>> exemplars;
  for (const auto& s : test.schema.slots_of(domain)) {
    const int cluster = model ? route_slots(backbone, vocab, *model, {s}, RoutingMode::specialized, seed).at(s) : 0;
    exemplars[s] = select_exemplars(train, s, shots, model ? &model->assignments : nullptr, cluster, seed);
  }
  std::map<const Dialogue*, std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < queries.size(); ++i) batches[queries[i].dialogue].push_back(i);
  std::vector<PredictionRecord> out(queries.size());
  for (const auto& [dialogue, members] : batches) {
    std::vector<IclQuery> iq;
    for (std::size_t i : members) {
      iq.push_back({{queries[i].dialogue, queries[i].turn, queries[i].slot}, &exemplars.at(queries[i].slot)});
    }
    const auto preds = generate_icl_batch(backbone, vocab, iq);
    for (std::size_t m = 0; m < members.size(); ++m) out[members[m]] = to_record(queries[members[m]], preds[m]);
  }
  return out;
}

ValueGrid records_to_grid(const std::vector<PredictionRecord>& records) { return grid_from_records(records); }

SweepPoint run_sweep_point(const BackboneParams& backbone, const Vocab& vocab, const Corpus& train, const Corpus& test,
                           const std::string& domain, FeatureMode mode, int k, std::uint64_t seed,
                           const TrainConfig& config) {
  const std::vector<SlotRef> train_slots = corpus_slots(train);
  const std::vector<SlotRef> test_slots = test.schema.slots_of(domain);
  if (test_slots.empty()) throw ValidationError("sweep: domain \"" + domain + "\" has no slots");
  if (k < 1 || k > static_cast<int>(train_slots.size())) {
    throw ContractError("sweep: K=" + std::to_string(k) + " outside [1, " + std::to_string(train_slots.size()) + "]");
  }
  const auto train_features = featurize_all(backbone, vocab, train_slots, mode);
  const auto test_features = featurize_all(backbone, vocab, test_slots, mode);
  SweepPoint p;
  p.model = fit_kmeans(train_features, k, seed);
  p.trained = train_pool(backbone, vocab, train, p.model, config, seed);
  const auto routes = route_slots(backbone, vocab, p.model, test_slots, RoutingMode::specialized, seed);
  p.predictions = predict_domain(backbone, vocab, p.trained.pool, routes, test, domain);
  p.row.mode = to_string(mode);
  p.row.k = k;
  p.row.domain = domain;
  p.row.acs = average_cosine_similarity(train_features, p.model, test_features);
  p.row.scores = evaluate_grid(records_to_grid(p.predictions), gold_grid(test, domain)).overall;
  return p;
}

std::vector<std::pair<std::uint64_t, SweepRow>> sweep_clusters(const BackboneParams& backbone, const Vocab& vocab,
                                                                const Corpus& train, const Corpus& test,
                                                                const SweepSpec& spec, const TrainConfig& config) {
  const std::size_t n_train_slots = corpus_slots(train).size();
  if (test.schema.slots_of(spec.domain).empty()) throw ValidationError("sweep: domain \"" + spec.domain + "\" has no slots");
  for (int k : spec.ks) {
    if (k < 1 || k > static_cast<int>(n_train_slots)) {
      throw ContractError("sweep: K=" + std::to_string(k) + " outside [1, " + std::to_string(n_train_slots) + "]");
    }
  }
  std::vector<std::pair<std::uint64_t, SweepRow>> rows;
  for (std::uint64_t seed : spec.seeds) {
    for (FeatureMode mode : spec.modes) {
      for (int k : spec.ks) {
        rows.emplace_back(seed, run_sweep_point(backbone, vocab, train, test, spec.domain, mode, k, seed, config).row);
      }
    }
  }
  return rows;
}

std::string sweep_csv(const std::vector<std::pair<std::uint64_t, SweepRow>>& rows) {
  std::ostringstream out;
  out << "seed,mode,k,domain,train_acs,test_acs,jga,sa_with_none,sa_without_none\n";
  for (const auto& [seed, r] : rows) {
    out << seed << ',' << r.mode << ',' << r.k << ',' << csv_field(r.domain) << ',' << fmt6(r.acs.train_acs) << ','
        << fmt6(r.acs.test_acs) << ',' << fmt6(r.scores.jga.value()) << ',' << fmt6(r.scores.sa_with_none.value())
        << ',' << fmt6(r.scores.sa_without_none.value()) << '\n';
  }
  return out.str();
}

}  // namespace mope
