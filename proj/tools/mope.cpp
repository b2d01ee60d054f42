#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mope/checkpoint.hpp"
#include "mope/errors.hpp"
#include "mope/eval.hpp"
#include "mope/experts.hpp"
#include "mope/pipeline.hpp"
#include "mope/rng.hpp"
#include "mope/routing.hpp"
#include "mope/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mope;

namespace {

constexpr int kDefaultDialogues = 600;

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError(path.string() + ": cannot write");
  out << text;
  if (!out) throw ValidationError(path.string() + ": write failed");
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(1) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(path.string() + ": cannot open");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": malformed JSON: " + e.what());
  }
}

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError(path.string() + ": cannot open");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Resolved-config copy written next to a file output: a.json -> a.config.json.
fs::path config_beside(const fs::path& out) {
  fs::path p = out;
  return p.replace_extension(".config.json");
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string backbone_digest(const fs::path& stem) {
  const fs::path s = checkpoint_stem(stem);
  return hex64(fnv1a(read_bytes(manifest_path(s)) + read_bytes(payload_path(s))));
}

RunConfig load_run_config(const fs::path& path) {
  try {
    return run_config_from_json(read_json(path));
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

struct Loaded {
  BackboneParams params;
  Vocab vocab;
};

Loaded load_backbone_vocab(const fs::path& stem) {
  BackboneCheckpoint ck = load_backbone(stem);
  return {std::move(ck.params), Vocab(ck.vocab)};
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

int parse_int(const std::string& s, const char* what) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError(std::string("invalid ") + what + " \"" + s + "\"");
  }
}

std::string predictions_jsonl(const std::vector<PredictionRecord>& records) {
  std::string out;
  for (const auto& r : records) out += prediction_to_json(r).dump() + "\n";
  return out;
}

json eval_output(const std::vector<PredictionRecord>& preds, const Corpus& test, const std::string& domain) {
  const ValueGrid golds = gold_grid(test, domain);
  return eval_report_to_json(evaluate_grid(records_to_grid(preds), golds));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mope: mixture of prefix experts for dialogue state tracking"};
  app.require_subcommand(1);

  // gen-corpus
  std::uint64_t seed = 1;
  std::string out;
  int dialogues = kDefaultDialogues;
  std::string held_out = "flight";
  auto* gen = app.add_subcommand("gen-corpus", "Write a synthetic train/test corpus");
  gen->add_option("--seed", seed, "Random seed")->required();
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--dialogues", dialogues, "Number of dialogues")->capture_default_str();
  gen->add_option("--held-out", held_out, "Zero-shot test domain")->capture_default_str();

  // pretrain
  std::string corpus_path, config_path;
  auto* pre = app.add_subcommand("pretrain", "Pretrain the backbone language model");
  pre->add_option("--corpus", corpus_path, "Training corpus JSON")->required();
  pre->add_option("--config", config_path, "Run config JSON")->required();
  pre->add_option("--seed", seed, "Random seed")->required();
  pre->add_option("--out", out, "Checkpoint stem")->required();

  // cluster
  std::string backbone_path, feature = "hidden";
  int k = 1;
  auto* clu = app.add_subcommand("cluster", "Cluster training slots by backbone features");
  clu->add_option("--backbone", backbone_path, "Backbone checkpoint")->required();
  clu->add_option("--corpus", corpus_path, "Training corpus JSON")->required();
  clu->add_option("--feature", feature, "hidden or embedding")->capture_default_str();
  clu->add_option("--k", k, "Number of clusters")->required();
  clu->add_option("--seed", seed, "Random seed")->required();
  clu->add_option("--out", out, "Cluster model JSON")->required();

  // train-experts
  std::string clusters_path;
  double fraction = 1.0;
  int threads = 0;
  auto* tre = app.add_subcommand("train-experts", "Train one prefix expert per cluster");
  tre->add_option("--backbone", backbone_path, "Backbone checkpoint")->required();
  tre->add_option("--clusters", clusters_path, "Cluster model JSON")->required();
  tre->add_option("--corpus", corpus_path, "Training corpus JSON")->required();
  tre->add_option("--seed", seed, "Random seed")->required();
  tre->add_option("--fraction", fraction, "Fraction of training dialogues")->capture_default_str();
  tre->add_option("--config", config_path, "Run config JSON (default: the one recorded with the backbone)");
  tre->add_option("--threads", threads, "Parallel expert trainers");
  tre->add_option("--out", out, "Output directory")->required();

  // eval
  std::string experts_path, domain, routing = "specialized", report_path;
  auto* ev = app.add_subcommand("eval", "Evaluate a domain with an expert pool");
  ev->add_option("--backbone", backbone_path, "Backbone checkpoint")->required();
  ev->add_option("--clusters", clusters_path, "Cluster model JSON")->required();
  ev->add_option("--experts", experts_path, "Expert pool directory")->required();
  ev->add_option("--corpus", corpus_path, "Evaluation corpus JSON")->required();
  ev->add_option("--domain", domain, "Domain to evaluate")->required();
  ev->add_option("--routing", routing, "specialized, random or single")->capture_default_str();
  ev->add_option("--seed", seed, "Seed for random routing")->capture_default_str();
  ev->add_option("--report", report_path, "Report JSON")->required();

  // icl
  int shots = 0;
  std::string exemplar_path;
  auto* icl = app.add_subcommand("icl", "In-context-learning baseline with the frozen backbone");
  icl->add_option("--backbone", backbone_path, "Backbone checkpoint")->required();
  icl->add_option("--corpus", corpus_path, "Evaluation corpus JSON")->required();
  icl->add_option("--domain", domain, "Domain to evaluate")->required();
  icl->add_option("--shots", shots, "Exemplars per query")->required()->check(CLI::IsMember({0, 1, 3, 5}));
  icl->add_option("--exemplars", exemplar_path, "Training corpus the exemplars come from (needed when shots > 0)");
  icl->add_option("--clusters", clusters_path, "Cluster model used to pick exemplars");
  icl->add_option("--seed", seed, "Exemplar shuffle seed")->capture_default_str();
  icl->add_option("--report", report_path, "Report JSON")->required();

  // analyze
  auto* an = app.add_subcommand("analyze", "Analyses over clusters and reports");
  an->require_subcommand(1);
  std::string test_path, ks = "1,2,3", features = "hidden", seeds = "1", sweep_path, mode = "hidden";
  std::vector<std::string> reports;
  auto* sw = an->add_subcommand("sweep", "Cluster-count and feature-mode sweep");
  sw->add_option("--backbone", backbone_path, "Backbone checkpoint")->required();
  sw->add_option("--corpus", corpus_path, "Training corpus JSON")->required();
  sw->add_option("--test", test_path, "Evaluation corpus JSON")->required();
  sw->add_option("--domain", domain, "Domain to evaluate")->required();
  sw->add_option("--k", ks, "Comma-separated cluster counts")->capture_default_str();
  sw->add_option("--feature", features, "hidden, embedding or both")->capture_default_str();
  sw->add_option("--seeds", seeds, "Comma-separated seeds")->capture_default_str();
  sw->add_option("--config", config_path, "Run config JSON (default: the one recorded with the backbone)");
  sw->add_option("--threads", threads, "Parallel expert trainers");
  sw->add_option("--out", out, "Output CSV")->required();
  auto* acs = an->add_subcommand("acs", "ACS table and Spearman correlation from a sweep CSV");
  acs->add_option("--sweep", sweep_path, "Sweep CSV")->required();
  acs->add_option("--feature", mode, "Feature mode rows to use")->capture_default_str();
  acs->add_option("--out", out, "Output CSV")->required();
  auto* er = an->add_subcommand("errors", "Error-taxonomy bars from eval reports");
  er->add_option("--report", reports, "Eval report JSON (repeatable)")->required();
  er->add_option("--out", out, "Output SVG")->required();
  auto* hm = an->add_subcommand("heatmap", "Cosine-similarity matrix of slot features");
  hm->add_option("--backbone", backbone_path, "Backbone checkpoint")->required();
  hm->add_option("--corpus", corpus_path, "Corpus JSON (train and test slots may be combined with --test)")->required();
  hm->add_option("--test", test_path, "Optional second corpus whose slots are added");
  hm->add_option("--feature", feature, "hidden or embedding")->capture_default_str();
  hm->add_option("--out", out, "Output CSV (an SVG is written beside it)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  auto train_config_for = [&](const std::string& explicit_path) {
    if (!explicit_path.empty()) return load_run_config(explicit_path).train;
    const fs::path recorded = config_beside(checkpoint_stem(backbone_path).string() + ".json");
    if (fs::exists(recorded)) return train_config_from_json(read_json(recorded).at("train"));
    return TrainConfig{};
  };

  try {
    if (*gen) {
      if (dialogues < 1) throw ContractError("gen-corpus: --dialogues must be at least 1");
      const SyntheticCorpus sc = generate_synthetic(seed, dialogues, default_schema_spec(held_out));
      save_corpus(fs::path(out) / "train.json", sc.train);
      save_corpus(fs::path(out) / "test.json", sc.test);
      write_json(fs::path(out) / "config.json",
                 {{"command", "gen-corpus"}, {"seed", seed}, {"dialogues", dialogues}, {"held_out", held_out}});
    } else if (*pre) {
      const RunConfig rc = load_run_config(config_path);
      const Corpus corpus = load_corpus(corpus_path);
      const Vocab vocab = build_training_vocab(corpus);
      const PretrainResult r = pretrain_backbone(corpus, vocab, rc.backbone, rc.train, seed);
      const fs::path stem = checkpoint_stem(out);
      if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
      save_backbone(stem, r.params, vocab.words());
      std::string csv = "epoch,mean_loss\n0," + fmt6(r.initial_loss) + "\n";
      for (std::size_t e = 0; e < r.epoch_losses.size(); ++e) csv += std::to_string(e + 1) + "," + fmt6(r.epoch_losses[e]) + "\n";
      write_text(stem.string() + ".loss.csv", csv);
      write_json(config_beside(stem.string() + ".json"),
                 {{"command", "pretrain"}, {"corpus", corpus_path}, {"seed", seed},
                  {"backbone", config_to_json(r.params.config)}, {"train", train_config_to_json(rc.train)}});
    } else if (*clu) {
      const Loaded bb = load_backbone_vocab(backbone_path);
      const Corpus corpus = load_corpus(corpus_path);
      const FeatureMode fm = parse_feature_mode(feature);
      const ClusterModel model = cluster_slots(bb.params, bb.vocab, corpus_slots(corpus), fm, k, seed);
      save_cluster_model(out, model);
      write_json(config_beside(out), {{"command", "cluster"}, {"backbone", backbone_path}, {"corpus", corpus_path},
                                      {"feature", feature}, {"k", k}, {"seed", seed}});
    } else if (*tre) {
      TrainConfig tc = train_config_for(config_path);
      if (tre->count("--fraction")) tc.fraction = fraction;
      if (threads > 0) tc.threads = threads;
      if (!(tc.fraction > 0.0 && tc.fraction <= 1.0)) throw ValidationError("--fraction must be in (0, 1]");
      const std::string before = backbone_digest(backbone_path);
      const Loaded bb = load_backbone_vocab(backbone_path);
      const ClusterModel model = load_cluster_model(clusters_path);
      const Corpus corpus = load_corpus(corpus_path);
      const PoolTrainResult r = train_pool(bb.params, bb.vocab, corpus, model, tc, seed);
      if (backbone_digest(backbone_path) != before) throw ContractError("train-experts: backbone checkpoint changed");
      save_pool(out, r.pool);
      std::string csv = "epoch,expert,mean_loss\n";
      for (std::size_t e = 0; e < r.epoch_losses.size(); ++e) {
        for (std::size_t ep = 0; ep < r.epoch_losses[e].size(); ++ep) {
          csv += std::to_string(ep + 1) + "," + std::to_string(e) + "," + fmt6(r.epoch_losses[e][ep]) + "\n";
        }
      }
      write_text(fs::path(out) / "losses.csv", csv);
      json counts = json::array();
      for (auto c : r.example_counts) counts.push_back(c);
      tc.threads = 1;  // not part of the result; keep the record thread-independent
      write_json(fs::path(out) / "config.json",
                 {{"command", "train-experts"}, {"backbone", backbone_path}, {"backbone_digest", before},
                  {"clusters", clusters_path}, {"corpus", corpus_path}, {"seed", seed},
                  {"train", train_config_to_json(tc)}, {"example_counts", counts}});
    } else if (*ev) {
      const RoutingMode rm = parse_routing_mode(routing);
      const Loaded bb = load_backbone_vocab(backbone_path);
      const ClusterModel model = load_cluster_model(clusters_path);
      const ExpertPool pool = load_pool(experts_path);
      if (pool.size() != model.k) throw ValidationError("eval: pool has " + std::to_string(pool.size()) +
                                                        " experts but the cluster model has K=" + std::to_string(model.k));
      const Corpus test = load_corpus(corpus_path);
      const auto routes = route_slots(bb.params, bb.vocab, model, test.schema.slots_of(domain), rm, seed);
      const auto preds = predict_domain(bb.params, bb.vocab, pool, routes, test, domain);
      json route_json = json::object();
      for (const auto& [s, idx] : routes) route_json[s.text()] = idx;
      json report = eval_output(preds, test, domain);
      report["routes"] = route_json;
      write_json(report_path, report);
      write_text(fs::path(report_path).replace_extension(".predictions.jsonl"), predictions_jsonl(preds));
      write_json(config_beside(report_path),
                 {{"command", "eval"}, {"backbone", backbone_path}, {"clusters", clusters_path},
                  {"experts", experts_path}, {"corpus", corpus_path}, {"domain", domain}, {"routing", routing},
                  {"seed", seed}});
    } else if (*icl) {
      const Loaded bb = load_backbone_vocab(backbone_path);
      const Corpus test = load_corpus(corpus_path);
      if (shots > 0 && exemplar_path.empty()) throw ValidationError("icl: --exemplars is required when --shots > 0");
      const Corpus train = exemplar_path.empty() ? Corpus{} : load_corpus(exemplar_path);
      std::optional<ClusterModel> model;
      if (!clusters_path.empty()) model = load_cluster_model(clusters_path);
      const auto preds = predict_icl(bb.params, bb.vocab, train, test, domain, shots, model ? &*model : nullptr, seed);
      json report = eval_output(preds, test, domain);
      report["shots"] = shots;
      write_json(report_path, report);
      write_text(fs::path(report_path).replace_extension(".predictions.jsonl"), predictions_jsonl(preds));
      write_json(config_beside(report_path),
                 {{"command", "icl"}, {"backbone", backbone_path}, {"corpus", corpus_path}, {"domain", domain},
                  {"shots", shots}, {"exemplars", exemplar_path}, {"clusters", clusters_path}, {"seed", seed}});
    } else if (*sw) {
      TrainConfig tc = train_config_for(config_path);
      if (threads > 0) tc.threads = threads;
      const Loaded bb = load_backbone_vocab(backbone_path);
      const Corpus train = load_corpus(corpus_path);
      const Corpus test = load_corpus(test_path);
      SweepSpec spec;
      spec.domain = domain;
      for (const auto& s : split_list(ks)) spec.ks.push_back(parse_int(s, "K"));
      for (const auto& s : split_list(seeds)) spec.seeds.push_back(static_cast<std::uint64_t>(parse_int(s, "seed")));
      if (features == "both") {
        spec.modes = {FeatureMode::hidden, FeatureMode::embedding};
      } else {
        for (const auto& s : split_list(features)) spec.modes.push_back(parse_feature_mode(s));
      }
      if (spec.ks.empty() || spec.seeds.empty() || spec.modes.empty()) throw ValidationError("sweep: empty K, seed or feature list");
      const auto rows = sweep_clusters(bb.params, bb.vocab, train, test, spec, tc);
      write_text(out, sweep_csv(rows));
      tc.threads = 1;
      write_json(config_beside(out), {{"command", "analyze sweep"}, {"backbone", backbone_path}, {"corpus", corpus_path},
                                      {"test", test_path}, {"domain", domain}, {"k", ks}, {"feature", features},
                                      {"seeds", seeds}, {"train", train_config_to_json(tc)}});
    } else if (*acs) {
      std::istringstream in(read_bytes(sweep_path));
      std::string line;
      std::getline(in, line);
      if (line.rfind("seed,mode,k,domain,train_acs,test_acs,jga", 0) != 0) throw FormatError(sweep_path + ": not a sweep CSV");
      std::string csv = "seed,k,domain,train_acs,test_acs,jga\n";
      std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> series;  // seed|domain -> (test_acs, jga)
      while (std::getline(in, line)) {
        std::vector<std::string> f;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (f.size() < 7) throw FormatError(sweep_path + ": short row \"" + line + "\"");
        if (f[1] != mode) continue;
        csv += f[0] + "," + f[2] + "," + f[3] + "," + f[4] + "," + f[5] + "," + f[6] + "\n";
        auto& [acs_v, jga_v] = series[f[0] + "|" + f[3]];
        acs_v.push_back(std::stod(f[5]));
        jga_v.push_back(std::stod(f[6]));
      }
      write_text(out, csv);
      json corr = json::object();
      for (const auto& [key, xy] : series) {
        const double rho = spearman(xy.first, xy.second);
        corr[key] = std::isnan(rho) ? json(nullptr) : json(rho);
        std::cout << "spearman(test_acs, jga) " << key << ": " << (std::isnan(rho) ? std::string("undefined") : fmt6(rho))
                  << "\n";
      }
      write_json(config_beside(out), {{"command", "analyze acs"}, {"sweep", sweep_path}, {"feature", mode},
                                      {"spearman_test_acs_jga", corr}});
    } else if (*er) {
      std::map<std::string, ErrorCounts> bars;
      std::string csv = "report,partial,over,other,total\n";
      for (const auto& r : reports) {
        const json j = read_json(r);
        ErrorCounts e;
        try {
          const json& x = j.at("overall").at("errors");
          e = {x.at("partial").get<long>(), x.at("over").get<long>(), x.at("other").get<long>()};
        } catch (const json::exception& ex) {
          throw FormatError(r + ": not an eval report: " + ex.what());
        }
        const std::string name = fs::path(r).stem().string();
        bars[name] = e;
        csv += csv_field(name) + "," + std::to_string(e.partial) + "," + std::to_string(e.over) + "," +
               std::to_string(e.other) + "," + std::to_string(e.total()) + "\n";
      }
      write_text(out, taxonomy_svg(bars));
      write_text(fs::path(out).replace_extension(".csv"), csv);
    } else if (*hm) {
      const Loaded bb = load_backbone_vocab(backbone_path);
      std::vector<SlotRef> slots = corpus_slots(load_corpus(corpus_path));
      if (!test_path.empty()) {
        for (const auto& s : corpus_slots(load_corpus(test_path))) {
          if (std::find(slots.begin(), slots.end(), s) == slots.end()) slots.push_back(s);
        }
      }
      const SimilarityMatrix m = similarity_matrix(featurize_all(bb.params, bb.vocab, slots, parse_feature_mode(feature)));
      for (const auto& z : m.zero_norm) std::cerr << "warning: zero-norm feature for " << z << "\n";
      write_text(out, similarity_csv(m));
      write_text(fs::path(out).replace_extension(".svg"), similarity_svg(m));
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
