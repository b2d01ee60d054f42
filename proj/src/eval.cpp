#include "mope/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "mope/errors.hpp"
#include "mope/prompt.hpp"

namespace mope {

using nlohmann::json;

ValueGrid gold_grid(const Corpus& corpus, const std::string& domain) {
  const std::vector<SlotRef> slots = corpus.schema.slots_of(domain);
  ValueGrid g;
  for (const auto& d : corpus.dialogues) {
    if (std::find(d.domains.begin(), d.domains.end(), domain) == d.domains.end()) continue;
    for (int t = 0; t < static_cast<int>(d.turns.size()); ++t) {
      for (const auto& s : slots) g[{d.id, t, s.domain, s.slot}] = normalize_text(gold_value(d, t, s));
    }
  }
  return g;
}

ValueGrid grid_from_records(const std::vector<PredictionRecord>& records) {
  ValueGrid g;
  for (const auto& r : records) {
    if (!g.emplace(CellKey{r.dialogue_id, r.turn, r.domain, r.slot}, normalize_text(r.value)).second) {
      throw ContractError("duplicate prediction for " + r.dialogue_id + " turn " + std::to_string(r.turn) + " " +
                          r.domain + " " + r.slot);
    }
  }
  return g;
}

namespace {

std::string cell_text(const CellKey& k) {
  return k.dialogue_id + " turn " + std::to_string(k.turn) + " " + k.domain + " " + k.slot;
}

void require_cover(const ValueGrid& preds, const ValueGrid& golds) {
  for (const auto& [k, v] : golds) {
    if (!preds.count(k)) throw ContractError("missing prediction for " + cell_text(k));
  }
  for (const auto& [k, v] : preds) {
    if (!golds.count(k)) throw ContractError("prediction outside the evaluated grid: " + cell_text(k));
  }
}

}  // namespace

Fraction slot_accuracy(const ValueGrid& preds, const ValueGrid& golds, bool include_none) {
  require_cover(preds, golds);
  Fraction f;
  for (const auto& [k, gold] : golds) {
    if (!include_none && gold == "none") continue;
    ++f.total;
    if (preds.at(k) == gold) ++f.correct;
  }
  f.vacuous = f.total == 0;
  return f;
}

Fraction joint_goal_accuracy(const ValueGrid& preds, const ValueGrid& golds) {
  require_cover(preds, golds);
  std::map<std::pair<std::string, int>, bool> turns;
  for (const auto& [k, gold] : golds) {
    auto [it, fresh] = turns.try_emplace({k.dialogue_id, k.turn}, true);
    if (preds.at(k) != gold) it->second = false;
  }
  Fraction f;
  for (const auto& [t, ok] : turns) {
    ++f.total;
    if (ok) ++f.correct;
  }
  f.vacuous = f.total == 0;
  return f;
}

ErrorCounts error_taxonomy(const ValueGrid& preds, const ValueGrid& golds) {
  require_cover(preds, golds);
  ErrorCounts e;
  for (const auto& [k, gold] : golds) {
    const std::string& pred = preds.at(k);
    if (pred == gold) continue;
    if (pred == "none") {
      ++e.partial;
    } else if (gold == "none") {
      ++e.over;
    } else {
      ++e.other;
    }
  }
  return e;
}

namespace {

DomainScores score(const ValueGrid& preds, const ValueGrid& golds) {
  DomainScores s;
  s.sa_with_none = slot_accuracy(preds, golds, true);
  s.sa_without_none = slot_accuracy(preds, golds, false);
  s.jga = joint_goal_accuracy(preds, golds);
  s.errors = error_taxonomy(preds, golds);
  s.turns = s.jga.total;
  s.cells = static_cast<long>(golds.size());
  return s;
}

json fraction_json(const Fraction& f) {
  json j = {{"value", f.value()}, {"correct", f.correct}, {"total", f.total}};
  if (f.vacuous) j["zero_denominator"] = true;
  return j;
}

json scores_json(const DomainScores& s) {
  return {{"sa_with_none", fraction_json(s.sa_with_none)},
          {"sa_without_none", fraction_json(s.sa_without_none)},
          {"jga", fraction_json(s.jga)},
          {"errors", {{"partial", s.errors.partial}, {"over", s.errors.over}, {"other", s.errors.other},
                      {"total", s.errors.total()}}},
          {"turns", s.turns},
          {"cells", s.cells}};
}

}  // namespace

EvalReport evaluate_grid(const ValueGrid& preds, const ValueGrid& golds) {
  require_cover(preds, golds);
  std::map<std::string, std::pair<ValueGrid, ValueGrid>> split;
  for (const auto& [k, gold] : golds) {
    auto& [p, g] = split[k.domain];
    p.emplace(k, preds.at(k));
    g.emplace(k, gold);
  }
  EvalReport r;
  for (const auto& [domain, pg] : split) r.domains[domain] = score(pg.first, pg.second);
  r.overall = score(preds, golds);
  return r;
}

json eval_report_to_json(const EvalReport& r) {
  json domains = json::object();
  for (const auto& [d, s] : r.domains) domains[d] = scores_json(s);
  return {{"domains", domains}, {"overall", scores_json(r.overall)}};
}

// ---------------------------------------------------------------------------

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) throw ShapeError("cosine: vectors of different length");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

AcsEntry average_cosine_similarity(const std::vector<SlotFeature>& train, const ClusterModel& model,
                                   const std::vector<SlotFeature>& test) {
  std::map<int, std::vector<const SlotFeature*>> members;
  for (const auto& f : train) {
    auto it = model.assignments.find(f.slot);
    if (it == model.assignments.end()) throw ContractError("average_cosine_similarity: unclustered slot " + f.slot.text());
    members[it->second].push_back(&f);
  }
  AcsEntry e;
  double sum = 0.0;
  for (const auto& [c, fs] : members) {
    for (std::size_t i = 0; i < fs.size(); ++i) {
      for (std::size_t j = i + 1; j < fs.size(); ++j) {
        sum += cosine(fs[i]->vector, fs[j]->vector);
        ++e.train_pairs;
      }
    }
  }
  e.train_acs = e.train_pairs ? sum / static_cast<double>(e.train_pairs) : 0.0;
  sum = 0.0;
  for (const auto& f : test) {
    const auto it = members.find(assign_nearest(model, f));
    if (it == members.end()) continue;
    for (const SlotFeature* m : it->second) {
      sum += cosine(f.vector, m->vector);
      ++e.test_pairs;
    }
  }
  e.test_acs = e.test_pairs ? sum / static_cast<double>(e.test_pairs) : 0.0;
  return e;
}

SimilarityMatrix similarity_matrix(const std::vector<SlotFeature>& features) {
  if (features.empty()) throw ContractError("similarity_matrix: no features");
  SimilarityMatrix m;
  const std::size_t n = features.size();
  m.values.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    m.names.push_back(features[i].slot.text());
    const bool zero = std::all_of(features[i].vector.begin(), features[i].vector.end(), [](float v) { return v == 0.0f; });
    if (zero) m.zero_norm.push_back(features[i].slot.text());
    for (std::size_t j = 0; j < n; ++j) {
      m.values[i][j] = i == j && !zero ? 1.0 : (j < i ? m.values[j][i] : cosine(features[i].vector, features[j].vector));
    }
  }
  return m;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string fmt6(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  std::string s = buf;
  return s == "-0.000000" ? "0.000000" : s;
}

std::string similarity_csv(const SimilarityMatrix& m) {
  std::ostringstream out;
  out << "slot";
  for (const auto& n : m.names) out << ',' << csv_field(n);
  out << '\n';
  for (std::size_t i = 0; i < m.names.size(); ++i) {
    out << csv_field(m.names[i]);
    for (double v : m.values[i]) out << ',' << fmt6(v);
    out << '\n';
  }
  return out.str();
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Blue (-1) through white (0) to red (+1).
std::string heat_color(double v) {
  v = std::clamp(v, -1.0, 1.0);
  int r = 255, g = 255, b = 255;
  if (v >= 0) {
    g = b = static_cast<int>(std::lround(255 * (1.0 - v)));
  } else {
    r = g = static_cast<int>(std::lround(255 * (1.0 + v)));
  }
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

}  // namespace

std::string similarity_svg(const SimilarityMatrix& m) {
  const int n = static_cast<int>(m.names.size());
  const int cell = 18, margin = 150;
  const int size = margin + n * cell + 10;
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  for (int i = 0; i < n; ++i) {
    const int pos = margin + i * cell + cell / 2 + 3;
    out << "<text x=\"" << margin - 4 << "\" y=\"" << pos << "\" text-anchor=\"end\">" << xml_escape(m.names[i])
        << "</text>\n";
    out << "<text transform=\"translate(" << pos << ',' << margin - 4 << ") rotate(-90)\">" << xml_escape(m.names[i])
        << "</text>\n";
  }
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      out << "<rect x=\"" << margin + j * cell << "\" y=\"" << margin + i * cell << "\" width=\"" << cell
          << "\" height=\"" << cell << "\" fill=\"" << heat_color(m.values[i][j]) << "\"><title>"
          << xml_escape(m.names[i]) << " / " << xml_escape(m.names[j]) << ": " << fmt6(m.values[i][j])
          << "</title></rect>\n";
    }
  }
  out << "</svg>\n";
  return out.str();
}

std::string taxonomy_svg(const std::map<std::string, ErrorCounts>& bars) {
  long peak = 1;
  for (const auto& [name, e] : bars) peak = std::max({peak, e.partial, e.over, e.other});
  const int group = 110, bar = 30, height = 200, top = 20, base = top + height;
  const int width = 40 + group * static_cast<int>(bars.size());
  const char* colors[] = {"#4c72b0", "#dd8452", "#55a868"};
  const char* labels[] = {"partial", "over", "other"};
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << base + 50
      << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  int g = 0;
  for (const auto& [name, e] : bars) {
    const long counts[] = {e.partial, e.over, e.other};
    const int x0 = 30 + g * group;
    for (int b = 0; b < 3; ++b) {
      const int h = static_cast<int>(std::lround(static_cast<double>(height) * counts[b] / peak));
      out << "<rect x=\"" << x0 + b * bar << "\" y=\"" << base - h << "\" width=\"" << bar - 4 << "\" height=\"" << h
          << "\" fill=\"" << colors[b] << "\"><title>" << labels[b] << ": " << counts[b] << "</title></rect>\n";
      out << "<text x=\"" << x0 + b * bar + (bar - 4) / 2 << "\" y=\"" << base - h - 3 << "\" text-anchor=\"middle\">"
          << counts[b] << "</text>\n";
    }
    out << "<text x=\"" << x0 + (3 * bar - 4) / 2 << "\" y=\"" << base + 15 << "\" text-anchor=\"middle\">"
        << xml_escape(name) << "</text>\n";
    ++g;
  }
  for (int b = 0; b < 3; ++b) {
    out << "<rect x=\"" << 30 + b * 70 << "\" y=\"" << base + 28 << "\" width=\"10\" height=\"10\" fill=\"" << colors[b]
        << "\"/><text x=\"" << 44 + b * 70 << "\" y=\"" << base + 37 << "\">" << labels[b] << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t q = i; q <= j; ++q) r[idx[q]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ShapeError("spearman: samples of different length");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (x.size() < 2) return nan;
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return nan;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace mope
