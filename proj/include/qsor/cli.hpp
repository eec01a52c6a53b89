// SPDX-License-Identifier: Apache-2.0
// Command-line driver. Each subcommand loads inputs, runs one stage of the
// pipeline and writes plain CSV/JSON artifacts plus a manifest.
#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "qsor/analysis.hpp"
#include "qsor/baselines.hpp"
#include "qsor/dataset.hpp"
#include "qsor/datasplit.hpp"
#include "qsor/fingerprint.hpp"
#include "qsor/gnn.hpp"
#include "qsor/hash.hpp"
#include "qsor/metrics.hpp"
#include "qsor/molgraph.hpp"

namespace qsor::cli {

using nlohmann::json;
using nn::Tensor;

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitInput = 2;

/// Bad user input: missing files, schema violations, inconsistent artifacts.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Small I/O helpers

/// Shortest round-trip decimal; stable across runs.
inline std::string fmt(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

inline std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

inline json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write " + path);
  return os;
}

inline json read_json(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot read " + path);
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw InputError(path + ": " + e.what());
  }
}

inline std::vector<double> parse_ratios(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = data::trim(part);
    double v = 0;
    auto r = std::from_chars(part.data(), part.data() + part.size(), v);
    if (part.empty() || r.ec != std::errc() || r.ptr != part.data() + part.size()) throw InputError("bad ratio '" + part + "'");
    out.push_back(v);
  }
  return out;
}

/// Output path whose directory must already exist.
inline CLI::Validator writable_path() {
  return CLI::Validator(
      [](std::string& p) -> std::string {
        auto dir = std::filesystem::path(p).parent_path();
        if (!dir.empty() && !std::filesystem::is_directory(dir)) return "directory does not exist: " + dir.string();
        if (std::filesystem::is_directory(p)) return "path is a directory: " + p;
        return {};
      },
      "PATH");
}

// ---------------------------------------------------------------------------
// Dataset loading shared by every data-consuming subcommand

struct DatasetArgs {
  std::vector<std::string> inputs;
  std::string synonyms;
  std::string errors;
  std::size_t min_count = 30;
  bool keep_odorless = false;
};

inline void add_dataset_options(CLI::App* sub, DatasetArgs& a) {
  sub->add_option("-i,--input", a.inputs, "dataset CSV (smiles, descriptors[, id, source]); repeat to merge sources")
      ->required()
      ->check(CLI::ExistingFile)
      ->envname("QSOR_DATA_CSV");
  sub->add_option("--synonyms", a.synonyms, "CSV raw_label,canonical_label")->check(CLI::ExistingFile)->envname("QSOR_SYNONYMS");
  sub->add_option("--errors", a.errors, "write rejected rows here")->check(writable_path());
  sub->add_option("--min-count", a.min_count, "drop descriptors with fewer molecules")->capture_default_str();
  sub->add_flag("--keep-odorless", a.keep_odorless, "drop the 'odorless' descriptor but keep its molecules as all-negative rows");
}

struct LoadedData {
  data::LabeledDataset dataset;
  std::size_t rejected = 0;
  std::vector<std::string> dropped_labels;
};

inline LoadedData load_dataset(const DatasetArgs& a) {
  std::optional<data::SynonymMap> syn;
  if (!a.synonyms.empty()) syn = data::load_synonyms(a.synonyms);
  LoadedData out;
  std::vector<data::LoadError> errors;
  std::optional<data::LabeledDataset> merged;
  for (const auto& path : a.inputs) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open dataset: " + path);
    auto res = data::load_csv(in, syn ? &*syn : nullptr, std::filesystem::path(path).stem().string());
    errors.insert(errors.end(), res.errors.begin(), res.errors.end());
    merged = merged ? data::merge_sources(merged->records, res.records) : data::make_dataset(std::move(res.records));
  }
  out.rejected = errors.size();
  if (!a.errors.empty()) {
    auto os = open_out(a.errors);
    data::write_errors(os, errors);
  }
  auto f = data::filter_labels(*merged, {a.min_count, a.keep_odorless, "odorless"});
  out.dataset = std::move(f.dataset);
  out.dropped_labels = std::move(f.dropped_labels);
  if (out.dataset.size() == 0 || out.dataset.vocabulary.empty())
    throw InputError("no labelled molecules remain after filtering (min-count " + std::to_string(a.min_count) + ")");
  return out;
}

inline std::vector<gnn::GraphInput> graphs_of(const data::LabeledDataset& ds, const gnn::AtomFeatureConfig& atoms = {}) {
  std::vector<gnn::GraphInput> g;
  g.reserve(ds.size());
  for (const auto& r : ds.records) {
    try {
      g.push_back(gnn::prepare_graph(mol::parse_smiles(r.canonical), atoms));
    } catch (const gnn::UnsupportedElementError& e) {
      throw InputError("molecule " + r.id + ": " + e.what());
    }
  }
  return g;
}

inline std::vector<std::string> ids_of(const data::LabeledDataset& ds) {
  std::vector<std::string> ids;
  for (const auto& r : ds.records) ids.push_back(r.id);
  return ids;
}

// ---------------------------------------------------------------------------
// Fingerprint features

inline fp::FingerprintConfig feature_preset(const std::string& name) {
  if (name == "cfp") return fp::FingerprintConfig::morgan_counts();
  if (name == "bfp") return fp::FingerprintConfig::baseline_bits();
  throw InputError("unknown feature preset '" + name + "' (expected cfp or bfp)");
}

inline json fp_config_json(const fp::FingerprintConfig& c) {
  return {{"kind", fp::to_string(c.kind)}, {"radius", c.radius}, {"n_bits", c.n_bits}, {"counted", c.counted},
          {"dedup_environments", c.dedup_environments}};
}

inline fp::FingerprintConfig fp_config_from_json(const json& j) {
  fp::FingerprintConfig c;
  c.kind = fp::kind_from_string(j.at("kind").get<std::string>());
  c.radius = j.at("radius").get<int>();
  c.n_bits = j.at("n_bits").get<std::size_t>();
  c.counted = j.at("counted").get<bool>();
  c.dedup_environments = j.at("dedup_environments").get<bool>();
  c.validate();
  return c;
}

inline Tensor fingerprint_matrix(const data::LabeledDataset& ds, const fp::FingerprintConfig& cfg) {
  Tensor x(ds.size(), cfg.n_bits);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto f = fp::fingerprint(mol::parse_smiles(ds.records[i].canonical), cfg);
    for (std::size_t j = 0; j < cfg.n_bits; ++j) x(i, j) = f.values[j];
  }
  return x;
}

// ---------------------------------------------------------------------------
// Split files: id,split

inline void write_split(std::ostream& os, const data::LabeledDataset& ds, const split::SplitAssignment& a) {
  os << "id,split\n";
  for (std::size_t i = 0; i < ds.size(); ++i) os << data::csv_escape(ds.records[i].id) << ',' << split::split_name(a.split[i]) << '\n';
}

/// Row indices per split (train, val, test) for the dataset's records.
inline std::array<std::vector<std::size_t>, 3> read_split(const std::string& path, const data::LabeledDataset& ds) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read split file " + path);
  data::CsvReader csv(in);
  auto header = csv.next();
  if (!header || header->size() < 2 || data::trim((*header)[0]) != "id" || data::trim((*header)[1]) != "split")
    throw InputError(path + ": expected header id,split");
  std::map<std::string, std::size_t> which;
  while (auto row = csv.next()) {
    if (row->size() == 1 && data::trim((*row)[0]).empty()) continue;
    if (row->size() < 2) throw InputError(path + ": short row on line " + std::to_string(csv.line()));
    const auto name = data::trim((*row)[1]);
    std::size_t s = 0;
    while (s < 3 && split::split_name(s) != name) ++s;
    if (s == 3) throw InputError(path + ": unknown split '" + name + "' on line " + std::to_string(csv.line()));
    which[data::trim((*row)[0])] = s;
  }
  std::array<std::vector<std::size_t>, 3> rows;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto it = which.find(ds.records[i].id);
    if (it == which.end()) throw InputError(path + ": no split for molecule " + ds.records[i].id);
    rows[it->second].push_back(i);
  }
  if (rows[0].empty()) throw InputError(path + ": train split is empty");
  return rows;
}

// ---------------------------------------------------------------------------
// Embedding CSV: id,e0,...,e{d-1}

inline void write_embeddings(std::ostream& os, const analysis::EmbeddingTable& t) {
  os << "id";
  for (std::size_t j = 0; j < t.vectors.cols; ++j) os << ",e" << j;
  os << '\n';
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    os << data::csv_escape(t.ids[i]);
    for (std::size_t j = 0; j < t.vectors.cols; ++j) os << ',' << fmt(t.vectors(i, j));
    os << '\n';
  }
}

inline analysis::EmbeddingTable read_embeddings(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read embeddings " + path);
  data::CsvReader csv(in);
  auto header = csv.next();
  if (!header || header->size() < 2 || (*header)[0] != "id") throw InputError(path + ": expected header id,e0,...");
  const std::size_t d = header->size() - 1;
  std::vector<std::string> ids;
  std::vector<double> values;
  while (auto row = csv.next()) {
    if (row->size() == 1 && row->front().empty()) continue;
    if (row->size() != d + 1) throw InputError(path + ": wrong column count on line " + std::to_string(csv.line()));
    ids.push_back((*row)[0]);
    for (std::size_t j = 1; j <= d; ++j) {
      const auto& f = (*row)[j];
      double v = 0;
      auto r = std::from_chars(f.data(), f.data() + f.size(), v);
      if (r.ec != std::errc() || r.ptr != f.data() + f.size()) throw InputError(path + ": bad number on line " + std::to_string(csv.line()));
      values.push_back(v);
    }
  }
  const std::size_t n = ids.size();
  analysis::EmbeddingTable t{std::move(ids), Tensor(n, d, std::move(values)), "csv"};
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw InputError(path + ": " + e.what());
  }
  return t;
}

// ---------------------------------------------------------------------------
// Model checkpoints. GNN checkpoints come from gnn::checkpoint_json; forests
// and KNN carry their feature settings and label vocabulary alongside.

inline constexpr int kKnnFormatVersion = 1;

inline json knn_json(const Tensor& x, const Tensor& y, std::size_t k, baselines::Metric metric, const fp::FingerprintConfig& fc,
                     const std::vector<std::string>& vocabulary) {
  json rows = json::array(), labels = json::array();
  for (std::size_t i = 0; i < x.rows; ++i) {
    json r = json::array();
    for (std::size_t j = 0; j < x.cols; ++j)
      if (x(i, j) != 0) r.push_back({j, x(i, j)});
    rows.push_back(std::move(r));
    json l = json::array();
    for (std::size_t t = 0; t < y.cols; ++t)
      if (y(i, t) > 0.5) l.push_back(t);
    labels.push_back(std::move(l));
  }
  return {{"format_version", kKnnFormatVersion}, {"model", "knn"}, {"k", k}, {"metric", baselines::to_string(metric)},
          {"features", fp_config_json(fc)}, {"vocabulary", vocabulary}, {"n_features", x.cols},
          {"train_features", std::move(rows)}, {"train_labels", std::move(labels)}};
}

/// A trained model of any kind, able to score dataset rows.
struct ScoringModel {
  std::string kind;  // gnn | rf | knn
  std::vector<std::string> vocabulary;
  std::optional<gnn::GnnModel> gnn;
  std::optional<baselines::Forest> forest;
  fp::FingerprintConfig features;
  Tensor knn_x, knn_y;
  std::size_t k = 20;
  baselines::Metric metric = baselines::Metric::jaccard;

  /// Probabilities, rows.size() x vocabulary.size().
  Tensor score(const data::LabeledDataset& ds, std::span<const std::size_t> rows) const {
    if (kind == "gnn") {
      std::vector<gnn::GraphInput> g;
      for (auto r : rows) g.push_back(gnn::prepare_graph(mol::parse_smiles(ds.records[r].canonical), gnn->config().atoms));
      std::vector<std::size_t> all(g.size());
      std::iota(all.begin(), all.end(), 0);
      Tensor p = gnn::predict_logits(*gnn, g, all);
      for (auto& v : p.data) v = 1.0 / (1.0 + std::exp(-v));
      return p;
    }
    Tensor x = gnn::gather_rows(fingerprint_matrix(ds, features), rows);
    if (kind == "rf") return baselines::rf_predict(*forest, x);
    return baselines::knn_predict(knn_x, knn_y, x, std::min(k, knn_x.rows), metric);
  }
};

inline ScoringModel load_model(const std::string& path) {
  const json j = read_json(path);
  ScoringModel m;
  try {
    m.kind = j.at("model").get<std::string>();
    m.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    if (m.kind == "gnn") {
      m.gnn.emplace(gnn::model_from_checkpoint(j).model);
    } else if (m.kind == "rf") {
      m.forest = baselines::forest_from_json(j);
      m.features = fp_config_from_json(j.at("features"));
    } else if (m.kind == "knn") {
      if (j.at("format_version").get<int>() != kKnnFormatVersion) throw InputError(path + ": unsupported knn format_version");
      m.features = fp_config_from_json(j.at("features"));
      m.k = j.at("k").get<std::size_t>();
      m.metric = baselines::metric_from_string(j.at("metric").get<std::string>());
      const auto& rows = j.at("train_features");
      m.knn_x = Tensor(rows.size(), j.at("n_features").get<std::size_t>());
      m.knn_y = Tensor(rows.size(), m.vocabulary.size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (const auto& e : rows[i]) m.knn_x(i, e.at(0).get<std::size_t>()) = e.at(1).get<double>();
        for (const auto& t : j.at("train_labels").at(i)) m.knn_y(i, t.get<std::size_t>()) = 1.0;
      }
    } else {
      throw InputError(path + ": unknown model kind '" + m.kind + "'");
    }
  } catch (const json::exception& e) {
    throw InputError(path + ": malformed checkpoint: " + e.what());
  } catch (const std::runtime_error& e) {
    throw InputError(path + ": " + e.what());
  }
  return m;
}

inline void require_same_vocabulary(const ScoringModel& m, const data::LabeledDataset& ds, const std::string& what) {
  if (m.vocabulary != ds.vocabulary)
    throw InputError(what + " was trained on a different descriptor vocabulary (" + std::to_string(m.vocabulary.size()) +
                     " labels vs " + std::to_string(ds.vocabulary.size()) + "); use the same inputs and --min-count");
}

// ---------------------------------------------------------------------------
// Manifest

inline std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : bytes) h = (h ^ c) * 1099511628211ull;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Every option of the subcommand with the value it resolved to.
inline json options_json(const CLI::App* sub) {
  json cfg = json::object();
  for (const CLI::Option* o : sub->get_options()) {
    const auto name = o->get_name(false, true);
    const std::string key = o->get_lnames().empty() ? name : o->get_lnames().front();
    if (key.empty() || key == "help") continue;
    if (o->count() > 0) {
      const auto& r = o->results();
      if (o->get_expected_max() == 0) cfg[key] = true;
      else if (r.size() == 1) cfg[key] = r.front();
      else cfg[key] = r;
    } else {
      const auto d = o->get_default_str();
      cfg[key] = d.empty() ? json(nullptr) : json(d);
    }
  }
  return cfg;
}

struct Manifest {
  std::string command;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  json config = json::object();
  std::vector<std::string> inputs, outputs;
  json summary = json::object();

  json to_json() const {
    json in = json::array();
    for (const auto& p : inputs) in.push_back({{"path", p}, {"fnv1a64", file_digest(p)}});
    return {{"tool", "qsor"},
            {"version", kVersion},
            {"command", command},
            {"seed", seed},
            {"threads", threads},
            {"config", config},
            {"inputs", in},
            {"outputs", outputs},
            {"summary", summary},
            {"libraries",
             {{"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." + std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                    std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
              {"cli11", CLI11_VERSION},
              {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                            std::to_string(EIGEN_MINOR_VERSION)},
              {"compiler", __VERSION__}}}};
  }
};

// ---------------------------------------------------------------------------
// Subcommands

struct Globals {
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  std::string manifest;
};

// Seed streams per pipeline stage, all derived from --seed.
enum Stream : std::uint64_t { kSplitStream = 1, kModelStream = 2, kBootstrapStream = 3, kTransferStream = 4 };

inline std::uint64_t stream_seed(const Globals& g, Stream s) { return derive_seed(g.seed, s, 0); }

inline json graph_summary(const std::string& smiles) {
  auto g = mol::parse_smiles(smiles);
  json atoms = json::array(), bonds = json::array();
  for (std::size_t i = 0; i < g.atom_count(); ++i) {
    const auto& a = g.atom(i);
    atoms.push_back({{"index", i}, {"element", std::string(a.symbol())}, {"atomic_number", a.atomic_number},
                     {"charge", a.formal_charge}, {"hydrogens", a.total_h()}, {"degree", a.degree},
                     {"aromatic", a.aromatic}, {"in_ring", a.in_ring}});
  }
  for (const auto& b : g.bonds()) {
    const char* order = b.order == mol::BondOrder::single ? "single"
                        : b.order == mol::BondOrder::double_bond ? "double"
                        : b.order == mol::BondOrder::triple ? "triple" : "aromatic";
    bonds.push_back({{"begin", b.begin}, {"end", b.end}, {"order", order}, {"in_ring", b.in_ring}});
  }
  return {{"smiles", smiles}, {"canonical", mol::canonical_form(g)}, {"n_atoms", g.atom_count()}, {"n_bonds", g.bond_count()},
          {"rings", g.rings()}, {"atoms", atoms}, {"bonds", bonds}};
}

inline json report_json(const metrics::MetricReport& r) {
  json labels = json::array();
  for (const auto& l : r.labels)
    labels.push_back({{"label", l.label}, {"auroc", opt_json(l.auroc)}, {"auprc", opt_json(l.auprc)}, {"threshold", l.threshold},
                      {"precision", l.prf.precision}, {"recall", l.prf.recall}, {"f1", l.prf.f1}});
  json ci = nullptr;
  if (r.auroc_ci) ci = {{"lo", r.auroc_ci->lo}, {"hi", r.auroc_ci->hi}, {"resamples", r.auroc_ci->resamples}, {"skipped", r.auroc_ci->skipped}};
  return {{"mean_auroc", opt_json(r.mean_auroc)}, {"mean_auprc", opt_json(r.mean_auprc)}, {"mean_precision", r.mean_precision},
          {"mean_recall", r.mean_recall}, {"mean_f1", r.mean_f1}, {"auroc_ci", ci}, {"undefined_labels", r.undefined_labels},
          {"n_resamples", r.n_resamples}, {"seed", r.seed}, {"labels", labels}};
}

/// Per-label thresholds maximising F1 on `rows`; 0.5 everywhere when `rows` is empty.
inline std::vector<double> tuned_thresholds(const Tensor& scores, const std::vector<int>& y, std::size_t n_tasks) {
  std::vector<double> th(n_tasks, 0.5);
  if (scores.rows == 0) return th;
  std::vector<double> s(scores.rows);
  std::vector<int> l(scores.rows);
  for (std::size_t t = 0; t < n_tasks; ++t) {
    for (std::size_t i = 0; i < scores.rows; ++i) s[i] = scores(i, t), l[i] = y[i * n_tasks + t];
    th[t] = metrics::optimize_threshold(s, l);
  }
  return th;
}

inline std::vector<int> label_rows(const data::LabeledDataset& ds, std::span<const std::size_t> rows) {
  const auto all = ds.label_matrix();
  const std::size_t t = ds.vocabulary.size();
  std::vector<int> out;
  out.reserve(rows.size() * t);
  for (auto r : rows) out.insert(out.end(), all.begin() + static_cast<std::ptrdiff_t>(r * t), all.begin() + static_cast<std::ptrdiff_t>((r + 1) * t));
  return out;
}

/// Evaluates a model on `rows`, with thresholds tuned on `tune_rows`.
inline metrics::MetricReport evaluate_model(const ScoringModel& m, const data::LabeledDataset& ds, std::span<const std::size_t> rows,
                                            std::span<const std::size_t> tune_rows, std::size_t n_resamples, std::uint64_t seed) {
  const std::size_t t = ds.vocabulary.size();
  auto th = tuned_thresholds(tune_rows.empty() ? Tensor(0, t) : m.score(ds, tune_rows), label_rows(ds, tune_rows), t);
  Tensor s = m.score(ds, rows);
  auto y = label_rows(ds, rows);
  return metrics::evaluate({s.data, y, t}, ds.vocabulary, th, n_resamples, seed);
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"qsor: odor prediction from molecular structure", "qsor"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "master seed; every random stream derives from it")->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads (0 = available cores)")->capture_default_str();
  app.add_option("--manifest", g.manifest, "manifest path (default: <primary output>.manifest.json)")->check(writable_path());

  Manifest manifest;
  std::function<void()> action;

  // parse -------------------------------------------------------------------
  auto* parse = app.add_subcommand("parse", "print atom/bond/ring summaries as JSON");
  std::vector<std::string> parse_smiles;
  std::string parse_out;
  parse->add_option("smiles", parse_smiles, "SMILES strings")->required();
  parse->add_option("-o,--output", parse_out, "write JSON here instead of stdout")->check(writable_path());
  parse->callback([&] {
    action = [&] {
      json arr = json::array();
      for (const auto& s : parse_smiles) {
        try {
          arr.push_back(graph_summary(s));
        } catch (const mol::SmilesError& e) {
          throw InputError("'" + s + "': " + e.what());
        }
      }
      if (parse_out.empty()) {
        out << arr.dump(2) << '\n';
      } else {
        open_out(parse_out) << arr.dump(2) << '\n';
        manifest.outputs.push_back(parse_out);
      }
    };
  });

  // fp ----------------------------------------------------------------------
  auto* fpc = app.add_subcommand("fp", "fingerprint matrix as dense CSV or sparse JSON");
  DatasetArgs fp_data;
  add_dataset_options(fpc, fp_data);
  std::string fp_preset = "cfp", fp_kind, fp_format = "dense", fp_out;
  std::optional<int> fp_radius;
  std::optional<std::size_t> fp_bits;
  std::optional<bool> fp_counted;
  fpc->add_option("--preset", fp_preset, "cfp (counted Morgan r2, 2048) or bfp (path bits, 4096)")->capture_default_str();
  fpc->add_option("--kind", fp_kind, "override: morgan or path")->check(CLI::IsMember({"morgan", "path"}));
  fpc->add_option("--radius", fp_radius, "override: Morgan radius or maximum path length");
  fpc->add_option("--bits", fp_bits, "override: folded length (power of two)");
  fpc->add_option("--counted", fp_counted, "override: true for counts, false for bits");
  fpc->add_option("--format", fp_format, "dense or sparse")->check(CLI::IsMember({"dense", "sparse"}))->capture_default_str();
  fpc->add_option("-o,--output", fp_out, "output path")->required()->check(writable_path());
  fpc->callback([&] {
    action = [&] {
      auto cfg = feature_preset(fp_preset);
      if (!fp_kind.empty()) cfg.kind = fp::kind_from_string(fp_kind);
      if (fp_radius) cfg.radius = *fp_radius;
      if (fp_bits) cfg.n_bits = *fp_bits;
      if (fp_counted) cfg.counted = *fp_counted;
      try {
        cfg.validate();
      } catch (const std::invalid_argument& e) {
        throw InputError(e.what());
      }
      auto d = load_dataset(fp_data);
      const auto& ds = d.dataset;
      Tensor x = fingerprint_matrix(ds, cfg);
      auto os = open_out(fp_out);
      if (fp_format == "dense") {
        os << "id";
        for (std::size_t j = 0; j < x.cols; ++j) os << ",f" << j;
        os << '\n';
        for (std::size_t i = 0; i < x.rows; ++i) {
          os << data::csv_escape(ds.records[i].id);
          for (std::size_t j = 0; j < x.cols; ++j) os << ',' << static_cast<std::uint64_t>(x(i, j));
          os << '\n';
        }
      } else {
        json trip = json::array();
        for (std::size_t i = 0; i < x.rows; ++i)
          for (std::size_t j = 0; j < x.cols; ++j)
            if (x(i, j) != 0) trip.push_back({i, j, static_cast<std::uint64_t>(x(i, j))});
        os << json{{"config", fp_config_json(cfg)}, {"ids", ids_of(ds)}, {"n_rows", x.rows}, {"n_cols", x.cols}, {"triplets", trip}}.dump()
           << '\n';
      }
      manifest.inputs = fp_data.inputs;
      manifest.outputs.push_back(fp_out);
      manifest.summary = {{"molecules", ds.size()}, {"rejected_rows", d.rejected}};
    };
  });

  // split -------------------------------------------------------------------
  auto* spl = app.add_subcommand("split", "stratified train/val/test assignment");
  DatasetArgs split_data;
  add_dataset_options(spl, split_data);
  std::string ratios = "0.8,0.1,0.1", split_method = "stratified", split_out;
  int split_order = 2;
  spl->add_option("--ratios", ratios, "comma-separated split ratios")->capture_default_str();
  spl->add_option("--order", split_order, "label-combination order for stratification")->check(CLI::Range(1, 2))->capture_default_str();
  spl->add_option("--method", split_method, "stratified or random")->check(CLI::IsMember({"stratified", "random"}))->capture_default_str();
  spl->add_option("-o,--output", split_out, "split CSV (id,split)")->required()->check(writable_path());
  spl->callback([&] {
    action = [&] {
      auto r = parse_ratios(ratios);
      if (r.size() > 3) throw InputError("at most three split ratios (train, val, test)");
      auto d = load_dataset(split_data);
      const auto& ds = d.dataset;
      const auto y = ds.label_matrix();
      split::LabelMatrix lm{y, ds.size(), ds.vocabulary.size()};
      split::SplitAssignment a;
      try {
        a = split_method == "stratified" ? split::iterative_stratify(lm, r, split_order, stream_seed(g, kSplitStream))
                                         : split::random_split(ds.size(), r, stream_seed(g, kSplitStream));
      } catch (const std::invalid_argument& e) {
        throw InputError(e.what());
      }
      auto os = open_out(split_out);
      write_split(os, ds, a);
      manifest.inputs = split_data.inputs;
      manifest.outputs.push_back(split_out);
      json sizes = json::object();
      for (std::size_t s = 0; s < r.size(); ++s) sizes[std::string(split::split_name(s))] = a.members(s).size();
      manifest.summary = {{"molecules", ds.size()}, {"labels", ds.vocabulary.size()}, {"sizes", sizes},
                          {"max_deviation", split::deviation(lm, a, split_order)}};
    };
  });

  // train -------------------------------------------------------------------
  auto* trn = app.add_subcommand("train", "train gcn, mpnn, rf or knn on the train split");
  DatasetArgs train_data;
  add_dataset_options(trn, train_data);
  std::string model_kind = "gcn", split_path, model_out, history_out, train_features;
  std::optional<std::size_t> epochs, batch_size, max_depth;
  std::size_t trees = 500, knn_k = 20;
  std::string knn_metric = "jaccard";
  trn->add_option("--model", model_kind, "gcn, mpnn, rf or knn")->check(CLI::IsMember({"gcn", "mpnn", "rf", "knn"}))->capture_default_str();
  trn->add_option("--split", split_path, "split CSV from `qsor split`")->required()->check(CLI::ExistingFile);
  trn->add_option("-o,--output", model_out, "checkpoint JSON")->required()->check(writable_path());
  trn->add_option("--history", history_out, "per-epoch CSV (gnn only)")->check(writable_path());
  trn->add_option("--epochs", epochs, "gnn epochs (default 300)");
  trn->add_option("--batch-size", batch_size, "gnn batch size (default 32)");
  trn->add_option("--features", train_features, "cfp or bfp (default cfp for rf, bfp for knn)");
  trn->add_option("--trees", trees, "rf trees")->capture_default_str();
  trn->add_option("--max-depth", max_depth, "rf depth limit");
  trn->add_option("--k", knn_k, "knn neighbours")->capture_default_str();
  trn->add_option("--metric", knn_metric, "knn metric")->check(CLI::IsMember({"jaccard", "cosine", "euclidean"}))->capture_default_str();
  trn->callback([&] {
    action = [&] {
      auto d = load_dataset(train_data);
      const auto& ds = d.dataset;
      const auto rows = read_split(split_path, ds);
      const Tensor y = ds.label_tensor();
      manifest.inputs = train_data.inputs;
      manifest.inputs.push_back(split_path);
      manifest.outputs.push_back(model_out);
      manifest.summary = {{"molecules", ds.size()}, {"labels", ds.vocabulary.size()}, {"train_rows", rows[0].size()}};
      const std::uint64_t seed = stream_seed(g, kModelStream);
      if (model_kind == "gcn" || model_kind == "mpnn") {
        auto cfg = model_kind == "gcn" ? gnn::GnnConfig::gcn_default() : gnn::GnnConfig::mpnn_default();
        cfg.n_tasks = ds.vocabulary.size();
        cfg.seed = seed;
        if (epochs) cfg.epochs = *epochs;
        if (batch_size) cfg.batch_size = *batch_size;
        try {
          cfg.validate();
        } catch (const std::invalid_argument& e) {
          throw InputError(e.what());
        }
        const auto graphs = graphs_of(ds, cfg.atoms);
        gnn::GnnModel model(cfg);
        auto history = gnn::train(model, graphs, y, rows[0], rows[1]);
        gnn::save_checkpoint(model, model_out, ds.vocabulary);
        if (!history_out.empty()) {
          auto os = open_out(history_out);
          os << "epoch,lr,train_loss,val_loss,val_mean_auroc\n";
          for (const auto& h : history)
            os << h.epoch << ',' << fmt(h.lr) << ',' << fmt(h.train_loss) << ',' << fmt(h.val_loss) << ',' << fmt(h.val_mean_auroc) << '\n';
          manifest.outputs.push_back(history_out);
        }
        if (!history.empty()) manifest.summary["final_train_loss"] = history.back().train_loss;
        return;
      }
      const auto fc = feature_preset(train_features.empty() ? (model_kind == "rf" ? "cfp" : "bfp") : train_features);
      const Tensor x = gnn::gather_rows(fingerprint_matrix(ds, fc), rows[0]);
      const Tensor yt = gnn::gather_rows(y, rows[0]);
      json ckpt;
      if (model_kind == "rf") {
        baselines::ForestConfig rc;
        rc.n_trees = trees;
        rc.max_depth = max_depth;
        rc.seed = seed;
        try {
          ckpt = baselines::forest_json(baselines::fit_random_forest(x, yt, rc));
        } catch (const std::invalid_argument& e) {
          throw InputError(e.what());
        }
      } else {
        if (knn_k < 1 || knn_k > x.rows) throw InputError("--k must be in [1, train size]");
        ckpt = knn_json(x, yt, knn_k, baselines::metric_from_string(knn_metric), fc, ds.vocabulary);
      }
      ckpt["features"] = fp_config_json(fc);
      ckpt["vocabulary"] = ds.vocabulary;
      open_out(model_out) << ckpt.dump() << '\n';
    };
  });

  // eval --------------------------------------------------------------------
  auto* evl = app.add_subcommand("eval", "score a trained model on one split");
  DatasetArgs eval_data;
  add_dataset_options(evl, eval_data);
  std::string eval_model, eval_baseline, eval_split, eval_subset = "test", eval_out, per_label_out;
  std::size_t resamples = 1000;
  evl->add_option("--model", eval_model, "checkpoint from `qsor train`")->required()->check(CLI::ExistingFile);
  evl->add_option("--baseline", eval_baseline, "second checkpoint for the per-label comparison")->check(CLI::ExistingFile);
  evl->add_option("--split", eval_split, "split CSV")->required()->check(CLI::ExistingFile);
  evl->add_option("--subset", eval_subset, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  evl->add_option("--resamples", resamples, "bootstrap resamples for the mean-AUROC interval")->capture_default_str();
  evl->add_option("-o,--output", eval_out, "report JSON")->required()->check(writable_path());
  evl->add_option("--per-label", per_label_out, "per-descriptor CSV")->check(writable_path());
  evl->callback([&] {
    action = [&] {
      auto d = load_dataset(eval_data);
      const auto& ds = d.dataset;
      const auto rows = read_split(eval_split, ds);
      const std::size_t which = eval_subset == "train" ? 0 : eval_subset == "val" ? 1 : 2;
      if (rows[which].empty()) throw InputError("split '" + eval_subset + "' is empty");
      std::span<const std::size_t> tune;
      if (which != 1) tune = rows[1];
      const std::uint64_t seed = stream_seed(g, kBootstrapStream);

      auto model = load_model(eval_model);
      require_same_vocabulary(model, ds, eval_model);
      auto rep = evaluate_model(model, ds, rows[which], tune, resamples, seed);
      json j = report_json(rep);
      j["model"] = model.kind;
      j["subset"] = eval_subset;
      j["n_rows"] = rows[which].size();
      std::optional<metrics::MetricReport> base;
      if (!eval_baseline.empty()) {
        auto bm = load_model(eval_baseline);
        require_same_vocabulary(bm, ds, eval_baseline);
        base = evaluate_model(bm, ds, rows[which], tune, resamples, seed);
        j["baseline"] = report_json(*base);
        j["baseline"]["model"] = bm.kind;
        manifest.inputs.push_back(eval_baseline);
      }
      open_out(eval_out) << j.dump(2) << '\n';
      if (!per_label_out.empty()) {
        auto os = open_out(per_label_out);
        os << "label,AUROC_model,AUROC_baseline,AUPRC_model,AUPRC_baseline\n";
        for (std::size_t t = 0; t < rep.labels.size(); ++t) {
          const auto& l = rep.labels[t];
          os << data::csv_escape(l.label) << ',' << fmt(l.auroc) << ',' << (base ? fmt(base->labels[t].auroc) : "") << ','
             << fmt(l.auprc) << ',' << (base ? fmt(base->labels[t].auprc) : "") << '\n';
        }
        manifest.outputs.push_back(per_label_out);
      }
      manifest.inputs.insert(manifest.inputs.begin(), eval_data.inputs.begin(), eval_data.inputs.end());
      manifest.inputs.push_back(eval_split);
      manifest.inputs.push_back(eval_model);
      manifest.outputs.insert(manifest.outputs.begin(), eval_out);
      manifest.summary = {{"mean_auroc", opt_json(rep.mean_auroc)}};
    };
  });

  // embed -------------------------------------------------------------------
  auto* emb = app.add_subcommand("embed", "GNN embeddings for every molecule");
  DatasetArgs embed_data;
  add_dataset_options(emb, embed_data);
  std::string embed_model, embed_out;
  emb->add_option("--model", embed_model, "gnn checkpoint")->required()->check(CLI::ExistingFile);
  emb->add_option("-o,--output", embed_out, "embedding CSV")->required()->check(writable_path());
  emb->callback([&] {
    action = [&] {
      auto d = load_dataset(embed_data);
      auto m = load_model(embed_model);
      if (m.kind != "gnn") throw InputError(embed_model + ": embeddings need a gnn checkpoint");
      const auto graphs = graphs_of(d.dataset, m.gnn->config().atoms);
      const auto ids = ids_of(d.dataset);
      auto os = open_out(embed_out);
      write_embeddings(os, analysis::embed(*m.gnn, graphs, ids));
      manifest.inputs = embed_data.inputs;
      manifest.inputs.push_back(embed_model);
      manifest.outputs.push_back(embed_out);
      manifest.summary = {{"molecules", ids.size()}, {"dimensions", m.gnn->config().head_dims.back()}};
    };
  });

  // nn ----------------------------------------------------------------------
  auto* nnc = app.add_subcommand("nn", "nearest neighbours in embedding space");
  std::string nn_embeddings, nn_out, nn_metric = "cosine";
  std::vector<std::string> nn_queries;
  std::size_t nn_k = 5;
  nnc->add_option("--embeddings", nn_embeddings, "embedding CSV from `qsor embed`")->required()->check(CLI::ExistingFile);
  nnc->add_option("--query", nn_queries, "query molecule id (repeatable; default all)");
  nnc->add_option("--k", nn_k, "neighbours per query")->capture_default_str();
  nnc->add_option("--metric", nn_metric, "cosine, euclidean or jaccard")->check(CLI::IsMember({"cosine", "euclidean", "jaccard"}))->capture_default_str();
  nnc->add_option("-o,--output", nn_out, "CSV query,rank,neighbor,distance")->required()->check(writable_path());
  nnc->callback([&] {
    action = [&] {
      auto t = read_embeddings(nn_embeddings);
      const auto queries = nn_queries.empty() ? t.ids : nn_queries;
      const auto metric = baselines::metric_from_string(nn_metric);
      if (nn_k < 1 || nn_k >= t.ids.size()) throw InputError("--k must be in [1, table size - 1]");
      auto os = open_out(nn_out);
      os << "query,rank,neighbor,distance\n";
      for (const auto& q : queries) {
        if (!t.row_of(q)) throw InputError("unknown query id " + q);
        auto nb = analysis::nearest_neighbors(t, q, nn_k, metric);
        for (std::size_t r = 0; r < nb.size(); ++r)
          os << data::csv_escape(q) << ',' << r + 1 << ',' << data::csv_escape(nb[r].id) << ',' << fmt(nb[r].distance) << '\n';
      }
      manifest.inputs = {nn_embeddings};
      manifest.outputs.push_back(nn_out);
      manifest.summary = {{"queries", queries.size()}};
    };
  });

  // transfer ----------------------------------------------------------------
  auto* tfr = app.add_subcommand("transfer", "held-out-label transfer from GNN embeddings");
  DatasetArgs transfer_data;
  add_dataset_options(tfr, transfer_data);
  std::string tf_split, tf_label, tf_arch = "gcn", tf_out, tf_full;
  std::optional<std::size_t> tf_epochs;
  std::size_t tf_trees = 500, tf_resamples = 1000;
  tfr->add_option("--split", tf_split, "split CSV")->required()->check(CLI::ExistingFile);
  tfr->add_option("--held-out", tf_label, "descriptor to withhold from GNN training")->required();
  tfr->add_option("--model", tf_arch, "gcn or mpnn")->check(CLI::IsMember({"gcn", "mpnn"}))->capture_default_str();
  tfr->add_option("--full-model", tf_full, "already trained all-label gnn checkpoint")->check(CLI::ExistingFile);
  tfr->add_option("--epochs", tf_epochs, "gnn epochs (default 300)");
  tfr->add_option("--trees", tf_trees, "rf trees")->capture_default_str();
  tfr->add_option("--resamples", tf_resamples, "bootstrap resamples")->capture_default_str();
  tfr->add_option("-o,--output", tf_out, "report JSON")->required()->check(writable_path());
  tfr->callback([&] {
    action = [&] {
      auto d = load_dataset(transfer_data);
      const auto& ds = d.dataset;
      const auto rows = read_split(tf_split, ds);
      const auto held = ds.label_index(tf_label);
      if (!held) throw InputError("descriptor '" + tf_label + "' is not in the filtered vocabulary");
      auto cfg = tf_arch == "gcn" ? gnn::GnnConfig::gcn_default() : gnn::GnnConfig::mpnn_default();
      cfg.seed = stream_seed(g, kModelStream);
      if (tf_epochs) cfg.epochs = *tf_epochs;
      const auto graphs = graphs_of(ds, cfg.atoms);
      const Tensor y = ds.label_tensor();
      const Tensor x = fingerprint_matrix(ds, fp::FingerprintConfig::morgan_counts());
      baselines::ForestConfig rc;
      rc.n_trees = tf_trees;
      rc.seed = stream_seed(g, kTransferStream);
      std::optional<ScoringModel> full;
      if (!tf_full.empty()) {
        full = load_model(tf_full);
        if (full->kind != "gnn") throw InputError(tf_full + ": --full-model needs a gnn checkpoint");
        require_same_vocabulary(*full, ds, tf_full);
        manifest.inputs.push_back(tf_full);
      }
      analysis::TransferInputs in{graphs, &y, &x, ds.vocabulary, rows[0], rows[1], rows[2]};
      analysis::TransferReport rep;
      try {
        rep = analysis::transfer_ablation(in, *held, cfg, rc, tf_resamples, stream_seed(g, kBootstrapStream), full ? &*full->gnn : nullptr);
      } catch (const std::invalid_argument& e) {
        throw InputError(e.what());
      }
      auto score = [](const analysis::ScoreWithCi& s) {
        return json{{"auroc", s.auroc}, {"ci_lo", s.ci.lo}, {"ci_hi", s.ci.hi}, {"resamples", s.ci.resamples}, {"skipped", s.ci.skipped}};
      };
      json j = {{"held_out", rep.held_out}, {"training_labels", rep.training_labels}, {"test_rows", rows[2].size()},
                {"embedding_rf", score(rep.embedding_rf)}, {"fingerprint_rf", score(rep.fingerprint_rf)}, {"full_gnn", score(rep.full_gnn)}};
      open_out(tf_out) << j.dump(2) << '\n';
      manifest.inputs.insert(manifest.inputs.begin(), transfer_data.inputs.begin(), transfer_data.inputs.end());
      manifest.inputs.push_back(tf_split);
      manifest.outputs.push_back(tf_out);
      manifest.summary = j;
    };
  });

  // report ------------------------------------------------------------------
  auto* rpt = app.add_subcommand("report", "co-occurrence, PCA/KDE and per-descriptor exports");
  DatasetArgs report_data;
  add_dataset_options(rpt, report_data);
  std::string cooc_out, rep_embeddings, pca_out, kde_out, table_out, compare_out, compare_metric = "cosine";
  std::size_t skip_top = 0, components = 2, grid = 100;
  double max_z = 3.0;
  std::vector<std::string> kde_labels;
  rpt->add_option("--cooccurrence", cooc_out, "normalized co-occurrence CSV")->check(writable_path());
  rpt->add_option("--skip-top", skip_top, "exclude the N most frequent descriptors from the co-occurrence matrix")->capture_default_str();
  rpt->add_option("--label-table", table_out, "per-descriptor CSV: label,count,fraction")->check(writable_path());
  rpt->add_option("--embeddings", rep_embeddings, "embedding CSV for PCA/KDE/comparison")->check(CLI::ExistingFile);
  rpt->add_option("--pca", pca_out, "PCA coordinates CSV")->check(writable_path());
  rpt->add_option("--components", components, "PCA components")->capture_default_str();
  rpt->add_option("--max-z", max_z, "drop points beyond this z-score before KDE")->capture_default_str();
  rpt->add_option("--kde", kde_out, "KDE density grids JSON")->check(writable_path());
  rpt->add_option("--kde-label", kde_labels, "descriptor to draw a density for (repeatable)");
  rpt->add_option("--grid", grid, "KDE cells per axis")->capture_default_str();
  rpt->add_option("--compare", compare_out, "co-occurrence vs embedding distance JSON")->check(writable_path());
  rpt->add_option("--metric", compare_metric, "distance for --compare")->check(CLI::IsMember({"cosine", "euclidean"}))->capture_default_str();
  rpt->callback([&] {
    action = [&] {
      if (cooc_out.empty() && table_out.empty() && pca_out.empty() && kde_out.empty() && compare_out.empty())
        throw InputError("report: nothing requested (use --cooccurrence, --label-table, --pca, --kde or --compare)");
      if ((!pca_out.empty() || !kde_out.empty() || !compare_out.empty()) && rep_embeddings.empty())
        throw InputError("report: --pca, --kde and --compare need --embeddings");
      auto d = load_dataset(report_data);
      const auto& ds = d.dataset;
      manifest.inputs = report_data.inputs;
      if (!table_out.empty()) {
        auto os = open_out(table_out);
        os << "label,count,fraction\n";
        const auto counts = ds.label_counts();
        for (std::size_t t = 0; t < counts.size(); ++t)
          os << data::csv_escape(ds.vocabulary[t]) << ',' << counts[t] << ',' << fmt(static_cast<double>(counts[t]) / static_cast<double>(ds.size()))
             << '\n';
        manifest.outputs.push_back(table_out);
      }
      std::optional<data::CooccurrenceMatrix> cooc;
      if (!cooc_out.empty() || !compare_out.empty()) cooc = data::cooccurrence(ds, skip_top);
      if (!cooc_out.empty()) {
        auto os = open_out(cooc_out);
        os << "label";
        for (const auto& l : cooc->labels) os << ',' << data::csv_escape(l);
        os << '\n';
        for (std::size_t i = 0; i < cooc->labels.size(); ++i) {
          os << data::csv_escape(cooc->labels[i]);
          for (std::size_t j = 0; j < cooc->labels.size(); ++j) os << ',' << fmt(cooc->normalized(i, j));
          os << '\n';
        }
        manifest.outputs.push_back(cooc_out);
        manifest.summary["cooccurrence"] = {{"labels", cooc->labels.size()}, {"iterations", cooc->iterations},
                                            {"max_residual", cooc->max_residual}, {"converged", cooc->converged}};
      }
      if (rep_embeddings.empty()) return;
      manifest.inputs.push_back(rep_embeddings);
      auto table = read_embeddings(rep_embeddings);
      // Align embedding rows with dataset rows.
      analysis::EmbeddingTable aligned{ids_of(ds), Tensor(ds.size(), table.vectors.cols), table.source};
      for (std::size_t i = 0; i < ds.size(); ++i) {
        auto r = table.row_of(ds.records[i].id);
        if (!r) throw InputError(rep_embeddings + ": no embedding for molecule " + ds.records[i].id);
        std::copy(table.vectors.row_span(*r).begin(), table.vectors.row_span(*r).end(), aligned.vectors.row_span(i).begin());
      }
      if (!compare_out.empty()) {
        auto cmp = analysis::compare_with_cooccurrence(ds, aligned, *cooc, baselines::metric_from_string(compare_metric));
        open_out(compare_out) << json{{"labels", cmp.labels}, {"mean_distance", cmp.mean_distance.data}, {"pearson", cmp.pearson}}.dump(2)
                              << '\n';
        manifest.outputs.push_back(compare_out);
        manifest.summary["pearson"] = cmp.pearson;
      }
      if (pca_out.empty() && kde_out.empty()) return;
      analysis::Pca p;
      try {
        p = analysis::pca(aligned.vectors, components);
      } catch (const std::invalid_argument& e) {
        throw InputError(e.what());
      }
      if (!pca_out.empty()) {
        auto os = open_out(pca_out);
        os << "id";
        for (std::size_t k = 0; k < components; ++k) os << ",pc" << k + 1;
        os << '\n';
        for (std::size_t i = 0; i < ds.size(); ++i) {
          os << data::csv_escape(ds.records[i].id);
          for (std::size_t k = 0; k < components; ++k) os << ',' << fmt(p.projected(i, k));
          os << '\n';
        }
        manifest.outputs.push_back(pca_out);
        manifest.summary["explained_ratio"] = p.explained_ratio;
      }
      if (!kde_out.empty()) {
        if (components < 2) throw InputError("--kde needs at least two PCA components");
        const auto keep = analysis::zscore_inliers(p.projected, max_z);
        Tensor pts(keep.size(), 2);
        for (std::size_t i = 0; i < keep.size(); ++i) pts(i, 0) = p.projected(keep[i], 0), pts(i, 1) = p.projected(keep[i], 1);
        const auto bw = analysis::scott_bandwidth(pts);
        const auto spec = analysis::grid_around(pts, bw, grid, grid);
        auto grid_json = [&](const analysis::DensityGrid& dg) {
          return json{{"label", dg.label}, {"bandwidth", {dg.bandwidth.first, dg.bandwidth.second}},
                      {"levels_25_50_75", analysis::contour_levels(dg)}, {"density", dg.density}};
        };
        json grids = json::array();
        grids.push_back(grid_json(analysis::kde_grid(pts, bw, spec, {}, "all")));
        for (const auto& label : kde_labels) {
          if (!ds.label_index(label)) throw InputError("descriptor '" + label + "' is not in the filtered vocabulary");
          std::vector<double> w(keep.size());
          for (std::size_t i = 0; i < keep.size(); ++i) w[i] = ds.records[keep[i]].labels.count(label) ? 1.0 : 0.0;
          grids.push_back(grid_json(analysis::kde_grid(pts, bw, spec, w, label)));
        }
        json j = {{"grid", {{"x0", spec.x0}, {"x1", spec.x1}, {"y0", spec.y0}, {"y1", spec.y1}, {"nx", spec.nx}, {"ny", spec.ny}}},
                  {"points_kept", keep.size()}, {"points_total", ds.size()}, {"densities", grids}};
        open_out(kde_out) << j.dump() << '\n';
        manifest.outputs.push_back(kde_out);
      }
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInput;
  }

  CLI::App* sub = app.get_subcommands().front();
  manifest.command = sub->get_name();
  manifest.seed = g.seed;
  manifest.threads = g.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : g.threads;
  manifest.config = options_json(sub);
  try {
    action();
    std::string mpath = g.manifest;
    if (mpath.empty() && !manifest.outputs.empty()) mpath = manifest.outputs.front() + ".manifest.json";
    if (!mpath.empty()) open_out(mpath) << manifest.to_json().dump(2) << '\n';
  } catch (const InputError& e) {
    err << "qsor " << manifest.command << ": " << e.what() << '\n';
    return kExitInput;
  } catch (const data::SchemaError& e) {
    err << "qsor " << manifest.command << ": " << e.what() << '\n';
    return kExitInput;
  } catch (const mol::SmilesError& e) {
    err << "qsor " << manifest.command << ": " << e.what() << '\n';
    return kExitInput;
  } catch (const std::invalid_argument& e) {
    // Library precondition failures here trace back to user-supplied data or flags.
    err << "qsor " << manifest.command << ": " << e.what() << '\n';
    return kExitInput;
  } catch (const std::exception& e) {
    err << "qsor " << manifest.command << ": internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitOk;
}

}  // namespace qsor::cli
