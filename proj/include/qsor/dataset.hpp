// SPDX-License-Identifier: Apache-2.0
#pragma once

// Labelled molecule ingestion: CSV loading, merging sources on canonical
// structure, descriptor vocabulary filtering and label co-occurrence.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "qsor/molgraph.hpp"
#include "qsor/tensor.hpp"

namespace qsor::data {

using nn::Tensor;

class SchemaError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// CSV

/// RFC 4180 style: comma separated, double-quoted fields with "" escapes,
/// quoted fields may span lines. A leading UTF-8 BOM is skipped.
class CsvReader {
 public:
  explicit CsvReader(std::istream& in) : in_(in) {
    if (in_.peek() == 0xEF) {
      char bom[3];
      in_.read(bom, 3);
      if (!(bom[0] == '\xEF' && bom[1] == '\xBB' && bom[2] == '\xBF')) throw SchemaError("csv: malformed byte order mark");
    }
  }

  /// Next record, or nullopt at end of input. `line` is the 1-based line it started on.
  std::optional<std::vector<std::string>> next() {
    if (in_.peek() == EOF) return std::nullopt;
    record_line_ = line_ + 1;
    std::vector<std::string> fields(1);
    bool quoted = false, was_quoted = false;
    for (;;) {
      const int c = in_.get();
      if (c == EOF) {
        if (quoted) throw SchemaError("csv: unterminated quoted field starting on line " + std::to_string(record_line_));
        ++line_;
        break;
      }
      if (quoted) {
        if (c == '"') {
          if (in_.peek() == '"') {
            in_.get();
            fields.back() += '"';
          } else {
            quoted = false;
          }
        } else {
          if (c == '\n') ++line_;
          fields.back() += static_cast<char>(c);
        }
        continue;
      }
      if (c == '"' && fields.back().empty() && !was_quoted) {
        quoted = was_quoted = true;
      } else if (c == ',') {
        fields.emplace_back();
        was_quoted = false;
      } else if (c == '\n') {
        ++line_;
        break;
      } else if (c == '\r') {
        if (in_.peek() == '\n') continue;
        ++line_;
        break;
      } else {
        fields.back() += static_cast<char>(c);
      }
    }
    return fields;
  }

  std::size_t line() const { return record_line_; }

 private:
  std::istream& in_;
  std::size_t line_ = 0;
  std::size_t record_line_ = 0;
};

inline std::string csv_escape(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string lowercase(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// ---------------------------------------------------------------------------
// Descriptor canonicalisation

/// raw label -> canonical label; keys and values are stored lowercased and trimmed.
class SynonymMap {
 public:
  void add(std::string_view raw, std::string_view canonical) { map_[normalize(raw)] = normalize(canonical); }

  std::string canonical(std::string_view label) const {
    auto key = normalize(label);
    auto it = map_.find(key);
    return it == map_.end() ? key : it->second;
  }

  std::size_t size() const { return map_.size(); }

  static std::string normalize(std::string_view s) { return lowercase(trim(s)); }

 private:
  std::map<std::string, std::string> map_;
};

/// CSV with header `raw_label,canonical_label`.
inline SynonymMap load_synonyms(std::istream& in) {
  CsvReader csv(in);
  auto header = csv.next();
  if (!header || header->size() < 2 || trim((*header)[0]) != "raw_label" || trim((*header)[1]) != "canonical_label")
    throw SchemaError("synonym map: header must be raw_label,canonical_label");
  SynonymMap m;
  while (auto row = csv.next()) {
    if (row->size() == 1 && trim((*row)[0]).empty()) continue;
    if (row->size() < 2) throw SchemaError("synonym map: line " + std::to_string(csv.line()) + " has fewer than 2 fields");
    m.add((*row)[0], (*row)[1]);
  }
  return m;
}

inline SynonymMap load_synonyms(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SchemaError("cannot open synonym map: " + path);
  return load_synonyms(in);
}

// ---------------------------------------------------------------------------
// Records

struct Record {
  std::string id;
  std::string smiles;     // as first seen
  std::string canonical;  // canonical form, unique per dataset
  std::set<std::string> labels;
  std::set<std::string> sources;
};

struct LoadError {
  std::size_t line = 0;
  std::string smiles;
  std::string message;
};

struct LoadResult {
  std::vector<Record> records;
  std::vector<LoadError> errors;
  std::size_t duplicates_merged = 0;
};

inline std::set<std::string> split_descriptors(std::string_view field, const SynonymMap* synonyms) {
  std::set<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto end = field.find(';', start);
    const auto token = field.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
    auto label = synonyms ? synonyms->canonical(token) : SynonymMap::normalize(token);
    if (!label.empty()) out.insert(std::move(label));
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return out;
}

/// Columns: `smiles`, `descriptors` (required), `id`, `source` (optional).
/// Unparseable SMILES go to `errors`; repeated canonical forms are unioned.
inline LoadResult load_csv(std::istream& in, const SynonymMap* synonyms = nullptr, const std::string& default_source = {}) {
  CsvReader csv(in);
  auto header = csv.next();
  if (!header) throw SchemaError("csv: empty file");
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header->size(); ++i) col[lowercase(trim((*header)[i]))] = i;
  for (const char* required : {"smiles", "descriptors"})
    if (!col.count(required)) throw SchemaError(std::string("csv: missing required column '") + required + "'");
  auto field = [&](const std::vector<std::string>& row, const char* name) -> std::string {
    auto it = col.find(name);
    return it == col.end() || it->second >= row.size() ? std::string() : row[it->second];
  };

  LoadResult out;
  std::map<std::string, std::size_t> by_canonical;
  while (auto row = csv.next()) {
    if (row->size() == 1 && trim((*row)[0]).empty()) continue;  // blank line
    const std::size_t line = csv.line();
    const std::string smiles = trim(field(*row, "smiles"));
    std::string canonical;
    try {
      canonical = mol::canonical_smiles(smiles);
    } catch (const std::exception& e) {
      out.errors.push_back({line, smiles, e.what()});
      continue;
    }
    auto labels = split_descriptors(field(*row, "descriptors"), synonyms);
    std::string source = trim(field(*row, "source"));
    if (source.empty()) source = default_source;
    auto [it, fresh] = by_canonical.emplace(canonical, out.records.size());
    if (!fresh) {
      auto& r = out.records[it->second];
      r.labels.insert(labels.begin(), labels.end());
      if (!source.empty()) r.sources.insert(source);
      ++out.duplicates_merged;
      continue;
    }
    std::string id = trim(field(*row, "id"));
    if (id.empty()) id = "L" + std::to_string(line);
    Record r{id, smiles, canonical, std::move(labels), {}};
    if (!source.empty()) r.sources.insert(source);
    out.records.push_back(std::move(r));
  }
  return out;
}

inline LoadResult load_csv(const std::string& path, const SynonymMap* synonyms = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SchemaError("cannot open dataset: " + path);
  return load_csv(in, synonyms);
}

/// Sidecar listing rejected rows: line,smiles,error.
inline void write_errors(std::ostream& out, const std::vector<LoadError>& errors) {
  out << "line,smiles,error\n";
  for (const auto& e : errors) out << e.line << ',' << csv_escape(e.smiles) << ',' << csv_escape(e.message) << '\n';
}

// ---------------------------------------------------------------------------
// Dataset

struct LabeledDataset {
  std::vector<Record> records;
  std::vector<std::string> vocabulary;  // sorted

  std::size_t size() const { return records.size(); }

  std::optional<std::size_t> label_index(const std::string& label) const {
    auto it = std::lower_bound(vocabulary.begin(), vocabulary.end(), label);
    if (it == vocabulary.end() || *it != label) return std::nullopt;
    return static_cast<std::size_t>(it - vocabulary.begin());
  }

  /// Row-major records x vocabulary 0/1 matrix.
  std::vector<int> label_matrix() const {
    std::vector<int> m(records.size() * vocabulary.size(), 0);
    for (std::size_t r = 0; r < records.size(); ++r)
      for (const auto& l : records[r].labels)
        if (auto j = label_index(l)) m[r * vocabulary.size() + *j] = 1;
    return m;
  }

  Tensor label_tensor() const {
    auto m = label_matrix();
    return Tensor(records.size(), vocabulary.size(), std::vector<double>(m.begin(), m.end()));
  }

  std::vector<std::size_t> label_counts() const {
    std::vector<std::size_t> c(vocabulary.size(), 0);
    for (const auto& r : records)
      for (const auto& l : r.labels)
        if (auto j = label_index(l)) ++c[*j];
    return c;
  }

  std::optional<std::size_t> find_id(const std::string& id) const {
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].id == id) return i;
    return std::nullopt;
  }
};

inline std::vector<std::string> vocabulary_of(const std::vector<Record>& records) {
  std::set<std::string> v;
  for (const auto& r : records) v.insert(r.labels.begin(), r.labels.end());
  return {v.begin(), v.end()};
}

/// Records sorted by canonical form; vocabulary is every label present.
inline LabeledDataset make_dataset(std::vector<Record> records) {
  std::sort(records.begin(), records.end(), [](const Record& a, const Record& b) { return a.canonical < b.canonical; });
  for (std::size_t i = 1; i < records.size(); ++i)
    if (records[i].canonical == records[i - 1].canonical) throw std::invalid_argument("dataset: duplicate canonical form " + records[i].canonical);
  LabeledDataset ds;
  ds.vocabulary = vocabulary_of(records);
  ds.records = std::move(records);
  return ds;
}

struct MergeReport {
  std::size_t only_a = 0;
  std::size_t only_b = 0;
  std::size_t overlap = 0;
  std::size_t total = 0;
};

/// Join on canonical form; shared molecules get the union of labels and
/// sources, and keep the lexicographically smaller id.
inline LabeledDataset merge_sources(const std::vector<Record>& a, const std::vector<Record>& b, MergeReport* report = nullptr) {
  std::map<std::string, Record> merged;
  MergeReport rep;
  for (const auto& r : a) {
    auto [it, fresh] = merged.emplace(r.canonical, r);
    if (!fresh) {
      it->second.labels.insert(r.labels.begin(), r.labels.end());
      it->second.sources.insert(r.sources.begin(), r.sources.end());
    }
  }
  std::set<std::string> from_a;
  for (const auto& [k, v] : merged) from_a.insert(k);
  std::set<std::string> seen_b;
  for (const auto& r : b) {
    seen_b.insert(r.canonical);
    auto [it, fresh] = merged.emplace(r.canonical, r);
    if (fresh) continue;
    auto& m = it->second;
    m.labels.insert(r.labels.begin(), r.labels.end());
    m.sources.insert(r.sources.begin(), r.sources.end());
    if (r.id < m.id) {
      m.id = r.id;
      m.smiles = r.smiles;
    }
  }
  for (const auto& k : seen_b) (from_a.count(k) ? rep.overlap : rep.only_b) += 1;
  rep.only_a = from_a.size() - rep.overlap;
  rep.total = merged.size();
  if (report) *report = rep;
  std::vector<Record> records;
  records.reserve(merged.size());
  for (auto& [k, v] : merged) records.push_back(std::move(v));
  return make_dataset(std::move(records));
}

struct FilterOptions {
  std::size_t min_count = 30;
  bool keep_odorless = false;  ///< keep label-less records originally tagged odorless
  std::string odorless_label = "odorless";
};

struct FilterResult {
  LabeledDataset dataset;
  std::vector<std::string> dropped_labels;
  std::size_t dropped_records = 0;
  std::size_t iterations = 0;
};

/// Drops rare descriptors and label-less records, repeating until nothing changes.
inline FilterResult filter_labels(const LabeledDataset& ds, const FilterOptions& opt = {}) {
  if (opt.min_count < 1) throw std::invalid_argument("filter_labels: min_count must be >= 1");
  FilterResult out;
  std::vector<Record> records = ds.records;
  std::set<std::string> odorless_ids;
  if (opt.keep_odorless) {
    for (auto& r : records)
      if (r.labels.erase(opt.odorless_label)) odorless_ids.insert(r.canonical);
  }
  std::set<std::string> dropped;
  for (;;) {
    ++out.iterations;
    std::map<std::string, std::size_t> counts;
    for (const auto& r : records)
      for (const auto& l : r.labels) ++counts[l];
    std::set<std::string> rare;
    for (const auto& [l, c] : counts)
      if (c < opt.min_count) rare.insert(l);
    const std::size_t before = records.size();
    for (auto& r : records)
      for (const auto& l : rare) r.labels.erase(l);
    std::erase_if(records, [&](const Record& r) { return r.labels.empty() && !odorless_ids.count(r.canonical); });
    out.dropped_records += before - records.size();
    dropped.insert(rare.begin(), rare.end());
    if (rare.empty() && before == records.size()) break;
  }
  out.dropped_labels.assign(dropped.begin(), dropped.end());
  out.dataset = make_dataset(std::move(records));
  if (out.dataset.vocabulary.empty()) throw std::invalid_argument("filter_labels: no descriptor reaches min_count");
  return out;
}

// ---------------------------------------------------------------------------
// Co-occurrence

struct CooccurrenceMatrix {
  std::vector<std::string> labels;  ///< rows/columns, zero-count labels excluded
  Tensor counts;                    ///< molecules carrying both labels; diagonal = label counts
  Tensor normalized;                ///< doubly stochastic scaling of counts
  std::vector<std::string> excluded;
  std::size_t iterations = 0;
  double max_residual = 0;  ///< max |row or column sum - 1|
  bool converged = false;
};

inline double doubly_stochastic_residual(const Tensor& m) {
  double worst = 0;
  for (std::size_t i = 0; i < m.rows; ++i) {
    double rs = 0, cs = 0;
    for (std::size_t j = 0; j < m.cols; ++j) {
      rs += m(i, j);
      cs += m(j, i);
    }
    worst = std::max({worst, std::abs(rs - 1), std::abs(cs - 1)});
  }
  return worst;
}

/// Co-occurrence counts scaled to unit row and column sums. The symmetric
/// update d <- sqrt(d / (C d)) keeps every iterate symmetric.
inline CooccurrenceMatrix cooccurrence(const LabeledDataset& ds, std::size_t skip_most_frequent = 0, double tol = 1e-6,
                                       std::size_t max_iterations = 1000) {
  auto counts = ds.label_counts();
  std::vector<std::size_t> order(ds.vocabulary.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return counts[a] > counts[b]; });
  std::set<std::size_t> skipped(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(skip_most_frequent, order.size())));

  CooccurrenceMatrix out;
  std::vector<std::size_t> keep;
  for (std::size_t j = 0; j < ds.vocabulary.size(); ++j) {
    if (skipped.count(j)) continue;
    if (counts[j] == 0)
      out.excluded.push_back(ds.vocabulary[j]);
    else
      keep.push_back(j);
  }
  if (keep.size() < 2) throw std::invalid_argument("cooccurrence: needs at least two labels with positives");
  std::vector<std::size_t> pos(ds.vocabulary.size(), keep.size());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    pos[keep[k]] = k;
    out.labels.push_back(ds.vocabulary[keep[k]]);
  }
  const std::size_t n = keep.size();
  out.counts = Tensor(n, n);
  for (const auto& r : ds.records) {
    std::vector<std::size_t> idx;
    for (const auto& l : r.labels)
      if (auto j = ds.label_index(l); j && pos[*j] < n) idx.push_back(pos[*j]);
    for (auto a : idx)
      for (auto b : idx) out.counts(a, b) += 1;
  }

  std::vector<double> d(n, 1.0), cd(n);
  auto scaled = [&] {
    Tensor m(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) m(i, j) = d[i] * out.counts(i, j) * d[j];
    return m;
  };
  for (out.iterations = 0; out.iterations < max_iterations; ++out.iterations) {
    out.normalized = scaled();
    out.max_residual = doubly_stochastic_residual(out.normalized);
    if (out.max_residual <= tol) {
      out.converged = true;
      break;
    }
    for (std::size_t i = 0; i < n; ++i) {
      cd[i] = 0;
      for (std::size_t j = 0; j < n; ++j) cd[i] += out.counts(i, j) * d[j];
    }
    for (std::size_t i = 0; i < n; ++i) d[i] = std::sqrt(d[i] / cd[i]);
  }
  if (!out.converged) {
    out.normalized = scaled();
    out.max_residual = doubly_stochastic_residual(out.normalized);
    out.converged = out.max_residual <= tol;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Output

inline void write_dataset_csv(std::ostream& out, const LabeledDataset& ds) {
  out << "id,smiles,canonical,descriptors,source\n";
  for (const auto& r : ds.records) {
    std::string labels, sources;
    for (const auto& l : r.labels) labels += (labels.empty() ? "" : ";") + l;
    for (const auto& s : r.sources) sources += (sources.empty() ? "" : ";") + s;
    out << csv_escape(r.id) << ',' << csv_escape(r.smiles) << ',' << csv_escape(r.canonical) << ',' << csv_escape(labels)
        << ',' << csv_escape(sources) << '\n';
  }
}

}  // namespace qsor::data
