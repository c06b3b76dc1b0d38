#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "frigid/app.hpp"
#include "frigid/synth.hpp"

namespace py = pybind11;
using namespace frigid;

namespace {

chem::Fingerprint fp_from(const std::string& smiles_or_hex) {
  const bool hex = !smiles_or_hex.empty() && smiles_or_hex.find_first_not_of("0123456789abcdefABCDEF") == std::string::npos &&
                   smiles_or_hex.size() * 4 >= 4096;
  return hex ? chem::Fingerprint::from_hex(smiles_or_hex) : chem::morgan_fingerprint(chem::parse_smiles(smiles_or_hex));
}

py::dict candidate_dict(const sample::Candidate& c, int rank) {
  py::dict d;
  d["rank"] = rank;
  d["smiles"] = c.smiles;
  d["key"] = c.key;
  d["formula"] = c.formula.to_string();
  d["score"] = c.score;
  d["round_created"] = c.round_created;
  return d;
}

class Elucidator {
 public:
  Elucidator(const std::filesystem::path& checkpoint, const std::string& config_text)
      : model_(app::load_model(checkpoint)), cfg_(app::parse_config(config_text)) {}

  py::dict elucidate(const std::string& record_json, std::uint64_t seed) {
    const auto rec = app::parse_record(record_json, model_.net->config().fp_threshold);
    Rng rng(seed);
    app::SpectrumOutcome out;
    {
      py::gil_scoped_release release;
      out = app::elucidate_record(rec, model_, cfg_, rng);
    }
    py::list ranked, trace;
    int r = 1;
    for (const auto& c : out.ranked) ranked.append(candidate_dict(c, r++));
    for (const auto& t : out.trace) {
      py::dict d;
      d["round"] = t.round;
      d["cumulative_candidates"] = t.cumulative_candidates;
      d["cumulative_seconds"] = t.cumulative_seconds;
      d["denoiser_calls"] = t.denoiser_calls;
      d["top1_key"] = t.top1_key;
      d["top1_score"] = t.top1_score;
      d["exact_match"] = t.exact_match;
      trace.append(d);
    }
    py::dict res;
    res["id"] = out.id;
    res["ranked"] = ranked;
    res["trace"] = trace;
    if (out.has_truth) {
      res["accuracy"] = out.metrics.accuracy;
      res["tanimoto"] = out.metrics.tanimoto;
    }
    return res;
  }

  std::string config() const { return app::serialize_config(cfg_); }

 private:
  app::LoadedModel model_;
  app::RunConfig cfg_;
};

}  // namespace

PYBIND11_MODULE(_frigid, m) {
  m.doc() = "Structure elucidation from tandem mass spectra with a masked diffusion model";

  py::register_exception<chem::ChemError>(m, "ChemError", PyExc_ValueError);
  py::register_exception<tok::TokenizerError>(m, "TokenizerError", PyExc_ValueError);
  py::register_exception<app::InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<app::NumericFailure>(m, "NumericFailure", PyExc_ArithmeticError);
  py::register_exception<model::CheckpointError>(m, "CheckpointError", PyExc_IOError);

  m.def("canonical_smiles", [](const std::string& s) { return chem::canonical_key(chem::parse_smiles(s)); });
  m.def("molecular_formula", [](const std::string& s) { return chem::molecular_formula(chem::parse_smiles(s)).to_string(); });
  m.def(
      "monoisotopic_mass",
      [](const std::string& formula, bool protonated) {
        return chem::monoisotopic_mass(chem::Formula::parse(formula),
                                       protonated ? chem::Adduct::Proton : chem::Adduct::None);
      },
      py::arg("formula"), py::arg("protonated") = false);
  m.def(
      "fingerprint",
      [](const std::string& s, int radius, int nbits) {
        return chem::morgan_fingerprint(chem::parse_smiles(s), radius, nbits).bits();
      },
      py::arg("smiles"), py::arg("radius") = 2, py::arg("nbits") = 4096, "Sorted indices of the set Morgan bits.");
  m.def(
      "fingerprint_hex", [](const std::string& s) { return chem::morgan_fingerprint(chem::parse_smiles(s)).to_hex(); },
      py::arg("smiles"));
  m.def(
      "tanimoto", [](const std::string& a, const std::string& b) { return chem::tanimoto(fp_from(a), fp_from(b)); },
      py::arg("a"), py::arg("b"), "Similarity of two molecules or 4096-bit hex fingerprints.");
  m.def(
      "synthetic_corpus",
      [](std::size_t n, std::uint64_t seed) { return synth::generate_corpus(n, seed); }, py::arg("n"),
      py::arg("seed") = 0);

  py::class_<tok::Vocabulary>(m, "Vocabulary")
      .def_static("train", &tok::train_bpe, py::arg("corpus"), py::arg("vocab_size"))
      .def_static("from_json", [](const std::string& s) { return tok::Vocabulary::from_json(s); })
      .def("to_json", &tok::Vocabulary::to_json)
      .def("__len__", &tok::Vocabulary::size)
      .def("token", &tok::Vocabulary::token)
      .def(
          "encode", [](const tok::Vocabulary& v, const std::string& s, int max_len) { return tok::encode(s, v, max_len).ids; },
          py::arg("smiles"), py::arg("max_len") = 256)
      .def("decode", [](const tok::Vocabulary& v, const std::vector<int>& ids) { return tok::decode(ids, v); });

  m.def(
      "simulate_spectrum",
      [](const std::string& smiles, double beta, int max_breaks, int max_frags) {
        frag::SimulateOptions o{beta, max_breaks, max_frags};
        const auto s = frag::simulate_spectrum(chem::parse_smiles(smiles), o);
        py::list out;
        for (const auto& p : s.peaks) {
          py::dict d;
          d["mz"] = p.mz;
          d["intensity"] = p.intensity;
          d["atoms"] = p.fragment.atoms;
          d["formula"] = p.fragment.formula.to_string();
          d["n_breaks"] = p.fragment.n_breaks;
          out.append(d);
        }
        return out;
      },
      py::arg("smiles"), py::arg("beta") = 0.6, py::arg("max_breaks") = 2, py::arg("max_frags") = 256);
  m.def(
      "match_peaks",
      [](const std::string& candidate, const std::vector<std::pair<double, double>>& peaks, double precursor_mz,
         double tol_ppm) {
        frag::ObservedSpectrum obs{peaks, precursor_mz};
        obs.normalize();
        frag::MatchOptions mo;
        mo.tol_ppm = tol_ppm;
        const auto r = frag::match_peaks(frag::simulate_spectrum(chem::parse_smiles(candidate)), obs, mo);
        return py::make_tuple(r.matched, r.hallucinated);
      },
      py::arg("candidate"), py::arg("peaks"), py::arg("precursor_mz"), py::arg("tol_ppm") = 20.0,
      "Indices of matched and hallucinated peaks of the candidate's simulated spectrum.");
  m.def(
      "synthetic_record",
      [](const std::string& id, const std::string& smiles, std::optional<double> noise_q, std::uint64_t seed) {
        Rng rng(seed);
        return app::record_to_json(app::synthetic_record(id, smiles, {}, noise_q, &rng));
      },
      py::arg("id"), py::arg("smiles"), py::arg("noise_q") = py::none(), py::arg("seed") = 0,
      "JSONL dataset record with a simulated spectrum.");
  m.def(
      "noise_fingerprint",
      [](const std::string& smiles_or_hex, double q, std::uint64_t seed) {
        Rng rng(seed);
        return app::noise_fingerprint(fp_from(smiles_or_hex), q, rng).to_hex();
      },
      py::arg("fingerprint"), py::arg("q"), py::arg("seed") = 0);
  m.def(
      "formula_hypotheses",
      [](double precursor_mz, int n, double ppm) {
        std::vector<std::tuple<std::string, double, double>> out;
        for (const auto& h : app::formula_hypotheses(precursor_mz, n, ppm)) {
          out.emplace_back(h.formula.to_string(), h.ppm, h.rdbe);
        }
        return out;
      },
      py::arg("precursor_mz"), py::arg("n") = 5, py::arg("ppm") = 5.0);

  m.def("default_config", [] { return app::serialize_config(app::RunConfig{}); });
  m.def(
      "check_config", [](const std::string& text) { return app::serialize_config(app::parse_config(text)); },
      "Parses and validates a config, returning its canonical form.");

  m.def(
      "train",
      [](const std::filesystem::path& dataset, const std::filesystem::path& out, const std::string& config_text,
         const std::string& vocab, int max_steps, bool resume) {
        app::TrainOptions o;
        o.dataset = dataset;
        o.out = out;
        o.vocab = vocab;
        o.max_steps = max_steps;
        o.resume = resume;
        o.quiet = true;
        const auto cfg = app::parse_config(config_text);
        py::gil_scoped_release release;
        const auto s = app::cmd_train(o, cfg);
        return std::make_tuple(s.final_step, s.last_loss);
      },
      py::arg("dataset"), py::arg("out"), py::arg("config") = "", py::arg("vocab") = "",
      py::arg("max_steps") = 0, py::arg("resume") = false, "Trains a checkpoint; returns (final_step, last_loss).");

  py::class_<Elucidator>(m, "Elucidator")
      .def(py::init<const std::filesystem::path&, const std::string&>(), py::arg("checkpoint"), py::arg("config") = "")
      .def("elucidate", &Elucidator::elucidate, py::arg("record"), py::arg("seed") = 0,
           "Ranks candidates for one JSON dataset record.")
      .def_property_readonly("config", &Elucidator::config);
}
