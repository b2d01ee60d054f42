// Python bindings. Structured data crosses the boundary as JSON text; the
// pure-Python wrapper in the mope package turns it into dicts.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mope/checkpoint.hpp"
#include "mope/corpus.hpp"
#include "mope/errors.hpp"
#include "mope/eval.hpp"
#include "mope/experts.hpp"
#include "mope/routing.hpp"
#include "mope/train.hpp"

namespace py = pybind11;
using nlohmann::json;
using namespace mope;

namespace {

py::array_t<float> to_numpy(const Tensor& t) {
  py::array_t<float> out({t.rows(), t.cols()});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

using Cell = std::tuple<std::string, int, std::string, std::string, std::string>;

ValueGrid to_grid(const std::vector<Cell>& cells) {
  ValueGrid g;
  for (const auto& [d, t, dom, slot, value] : cells) {
    if (!g.emplace(CellKey{d, t, dom, slot}, value).second) throw ContractError("duplicate cell " + d + " " + slot);
  }
  return g;
}

struct Backbone {
  BackboneParams params;
  Vocab vocab;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Mixture of prefix experts for dialogue state tracking";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  auto contract = py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", contract.ptr());
  py::register_exception<IndexError>(m, "OutOfRangeError", contract.ptr());
  py::register_exception<CapacityError>(m, "CapacityError", contract.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());

  m.def(
      "generate_corpus",
      [](std::uint64_t seed, int dialogues, const std::string& held_out) {
        const SyntheticCorpus sc = generate_synthetic(seed, dialogues, default_schema_spec(held_out));
        return py::make_tuple(corpus_to_json(sc.train).dump(), corpus_to_json(sc.test).dump());
      },
      py::arg("seed"), py::arg("dialogues"), py::arg("held_out") = "flight");

  m.def("training_words", [](const std::string& text) {
    return build_training_vocab(corpus_from_json(json::parse(text))).words();
  });

  m.def("validate_corpus", [](const std::string& text) { return corpus_to_json(corpus_from_json(json::parse(text))).dump(); });

  m.def(
      "evaluate",
      [](const std::vector<Cell>& predictions, const std::vector<Cell>& gold) {
        return eval_report_to_json(evaluate_grid(to_grid(predictions), to_grid(gold))).dump();
      },
      py::arg("predictions"), py::arg("gold"));

  m.def(
      "fit_kmeans",
      [](const std::vector<std::vector<float>>& points, int k, std::uint64_t seed) {
        std::vector<SlotFeature> f;
        for (std::size_t i = 0; i < points.size(); ++i) f.push_back({{"points", std::to_string(i)}, points[i]});
        const ClusterModel model = fit_kmeans(f, k, seed);
        std::vector<int> labels;
        for (const auto& x : f) labels.push_back(model.assignments.at(x.slot));
        return py::make_tuple(labels, model.centroids, model.sse_trace);
      },
      py::arg("points"), py::arg("k"), py::arg("seed"));

  m.def("spearman", &spearman, py::arg("x"), py::arg("y"));

  py::class_<Backbone>(m, "Backbone")
      .def_static(
          "load", [](const std::filesystem::path& stem) {
            BackboneCheckpoint ck = load_backbone(stem);
            return Backbone{std::move(ck.params), Vocab(ck.vocab)};
          },
          py::arg("stem"))
      .def_static(
          "init",
          [](const std::vector<std::string>& words, const std::string& config, std::uint64_t seed) {
            Vocab vocab(words);
            BackboneConfig c = config_from_json(json::parse(config));
            c.vocab_size = vocab.size();
            return Backbone{init_backbone(c, seed), vocab};
          },
          py::arg("words"), py::arg("config") = "{}", py::arg("seed") = 1)
      .def("save", [](const Backbone& b, const std::filesystem::path& stem) { save_backbone(stem, b.params, b.vocab.words()); })
      .def_property_readonly("config", [](const Backbone& b) { return config_to_json(b.params.config).dump(); })
      .def_property_readonly("words", [](const Backbone& b) { return b.vocab.words(); })
      .def_property_readonly("parameter_count", [](const Backbone& b) { return b.params.parameter_count(); })
      .def("encode", [](const Backbone& b, const std::string& text) { return b.vocab.encode(text); })
      .def("decode", [](const Backbone& b, const std::vector<int>& ids) { return b.vocab.decode(ids); })
      .def(
          "logits",
          [](const Backbone& b, const std::vector<int>& tokens, const ExpertPool* pool, int expert) {
            const PrefixExpert* e = pool ? &select_expert(*pool, expert) : nullptr;
            return to_numpy(forward(b.params, e, tokens).logits);
          },
          py::arg("tokens"), py::arg("pool") = nullptr, py::arg("expert") = 0)
      .def(
          "slot_feature",
          [](const Backbone& b, const std::string& domain, const std::string& slot, const std::string& mode) {
            return featurize(b.params, b.vocab, {domain, slot}, parse_feature_mode(mode)).vector;
          },
          py::arg("domain"), py::arg("slot"), py::arg("mode") = "hidden");

  py::class_<ExpertPool>(m, "ExpertPool")
      .def_static("load", &load_pool, py::arg("directory"))
      .def_static(
          "init", [](const Backbone& b, int k, std::uint64_t seed) { return init_pool(b.params.config, k, seed); },
          py::arg("backbone"), py::arg("k"), py::arg("seed") = 1)
      .def("save", [](const ExpertPool& p, const std::filesystem::path& dir) { save_pool(dir, p); })
      .def("__len__", &ExpertPool::size)
      .def(
          "prefix",
          [](const ExpertPool& p, int expert, int layer) {
            const PrefixExpert& e = select_expert(p, expert);
            if (layer < 0 || layer >= static_cast<int>(e.layers.size())) throw IndexError("layer out of range");
            return py::make_tuple(to_numpy(e.layers[layer].key), to_numpy(e.layers[layer].value));
          },
          py::arg("expert"), py::arg("layer"));
}
