#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mhthfa/errors.hpp"
#include "mhthfa/fit.hpp"
#include "mhthfa/types.hpp"

namespace mhthfa {

/// Per-column z-scoring applied to the features.
struct Standardization {
  Vector mean;
  Vector sd;

  Matrix apply(const Matrix& x) const {
    if (x.cols() != mean.size()) throw DimensionMismatch("Standardization: column count differs");
    return (x.rowwise() - mean.transpose()) * sd.cwiseInverse().asDiagonal();
  }
  Matrix invert(const Matrix& z) const {
    if (z.cols() != mean.size()) throw DimensionMismatch("Standardization: column count differs");
    return (z * sd.asDiagonal()).rowwise() + mean.transpose();
  }
};

struct DataSet {
  Matrix X;
  std::vector<std::string> column_names;
  std::optional<IntVector> labels;       // 0 = unlabelled, 1..K = class
  std::vector<std::string> class_names;  // class_names[k - 1] is the text of label k
  std::optional<Standardization> standardization;

  Index n() const { return X.rows(); }
  Index p() const { return X.cols(); }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (ch == '"') {
      if (quoted && i + 1 < line.size() && line[i + 1] == '"') {
        cell += '"';
        ++i;
      } else {
        quoted = !quoted;
      }
    } else if (ch == ',' && !quoted) {
      out.push_back(cell);
      cell.clear();
    } else if (ch != '\r') {
      cell += ch;
    }
  }
  out.push_back(cell);
  for (auto& c : out) {
    const auto b = c.find_first_not_of(" \t");
    const auto e = c.find_last_not_of(" \t");
    c = b == std::string::npos ? std::string() : c.substr(b, e - b + 1);
  }
  return out;
}

inline std::optional<double> parse_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  std::size_t used = 0;
  try {
    const double v = std::stod(s, &used);
    if (used != s.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace detail

/// Reads a headed CSV; every column but the label column must be numeric.
inline DataSet load_csv(const std::string& path, const std::optional<std::string>& label_column = {},
                        const std::optional<std::string>& unlabelled_token = {}) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw InputError(path + ": empty file");
  const auto header = detail::split_csv_line(line);
  int label_idx = -1;
  if (label_column) {
    const auto it = std::find(header.begin(), header.end(), *label_column);
    if (it == header.end()) throw InputError(path + ": no column named '" + *label_column + "'");
    label_idx = static_cast<int>(it - header.begin());
  }
  DataSet ds;
  for (std::size_t j = 0; j < header.size(); ++j)
    if (static_cast<int>(j) != label_idx) ds.column_names.push_back(header[j]);
  std::vector<std::vector<double>> rows;
  std::vector<std::string> raw_labels;
  std::size_t row_no = 1;
  while (std::getline(in, line)) {
    ++row_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw InputError(path + ": row " + std::to_string(row_no) + " has " + std::to_string(cells.size()) +
                       " cells, header has " + std::to_string(header.size()));
    std::vector<double> values;
    for (std::size_t j = 0; j < cells.size(); ++j) {
      if (static_cast<int>(j) == label_idx) {
        raw_labels.push_back(cells[j]);
        continue;
      }
      const auto v = detail::parse_double(cells[j]);
      if (!v || !std::isfinite(*v))
        throw InputError(path + ": row " + std::to_string(row_no) + ", column '" + header[j] +
                         "': not a finite number ('" + cells[j] + "')");
      values.push_back(*v);
    }
    rows.push_back(std::move(values));
  }
  if (rows.empty()) throw InputError(path + ": no data rows");
  ds.X.resize(static_cast<Index>(rows.size()), static_cast<Index>(ds.column_names.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) ds.X(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
  if (label_idx >= 0) {
    std::map<std::string, int> codes;
    for (const auto& s : raw_labels)
      if (!(unlabelled_token && s == *unlabelled_token)) codes.emplace(s, 0);
    for (auto& [name, code] : codes) {
      ds.class_names.push_back(name);
      code = static_cast<int>(ds.class_names.size());
    }
    IntVector labels(static_cast<Index>(raw_labels.size()));
    for (std::size_t i = 0; i < raw_labels.size(); ++i)
      labels[static_cast<Index>(i)] =
          unlabelled_token && raw_labels[i] == *unlabelled_token ? 0 : codes.at(raw_labels[i]);
    ds.labels = labels;
  }
  return ds;
}

/// Text of one named column, header excluded; blank lines skipped.
inline std::vector<std::string> read_csv_column(const std::string& path, const std::string& column) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw InputError(path + ": empty file");
  const auto header = detail::split_csv_line(line);
  const auto it = std::find(header.begin(), header.end(), column);
  if (it == header.end()) throw InputError(path + ": no column named '" + column + "'");
  const std::size_t idx = static_cast<std::size_t>(it - header.begin());
  std::vector<std::string> out;
  std::size_t row_no = 1;
  while (std::getline(in, line)) {
    ++row_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw InputError(path + ": row " + std::to_string(row_no) + " has " + std::to_string(cells.size()) +
                       " cells, header has " + std::to_string(header.size()));
    out.push_back(cells[idx]);
  }
  return out;
}

/// Integer codes 1..K for text labels, in sorted order of the distinct values.
inline IntVector encode_labels(const std::vector<std::string>& text, std::vector<std::string>* names = nullptr) {
  std::map<std::string, int> codes;
  for (const auto& s : text) codes.emplace(s, 0);
  int next = 0;
  for (auto& [name, code] : codes) {
    code = ++next;
    if (names) names->push_back(name);
  }
  IntVector out(static_cast<Index>(text.size()));
  for (std::size_t i = 0; i < text.size(); ++i) out[static_cast<Index>(i)] = codes.at(text[i]);
  return out;
}

/// Columns of ds reordered to match names; extra columns are dropped.
inline Matrix select_columns(const DataSet& ds, const std::vector<std::string>& names) {
  Matrix out(ds.n(), static_cast<Index>(names.size()));
  for (std::size_t j = 0; j < names.size(); ++j) {
    const auto it = std::find(ds.column_names.begin(), ds.column_names.end(), names[j]);
    if (it == ds.column_names.end()) throw InputError("data has no column named '" + names[j] + "'");
    out.col(static_cast<Index>(j)) = ds.X.col(static_cast<Index>(it - ds.column_names.begin()));
  }
  return out;
}

inline Standardization fit_standardization(const Matrix& x) {
  Standardization s;
  s.mean = x.colwise().mean().transpose();
  const double denom = std::max<double>(1.0, static_cast<double>(x.rows() - 1));
  s.sd = ((x.rowwise() - s.mean.transpose()).array().square().colwise().sum() / denom).sqrt().matrix().transpose();
  for (Index j = 0; j < s.sd.size(); ++j)
    if (!(s.sd[j] > 0.0)) s.sd[j] = 1.0;
  return s;
}

inline DataSet standardize(const DataSet& ds) {
  DataSet out = ds;
  out.standardization = fit_standardization(ds.X);
  out.X = out.standardization->apply(ds.X);
  return out;
}

struct SemiSupervisedSplit {
  DataSet data;
  std::vector<Index> unlabelled_per_class;  // entry k counts hidden rows of class k + 1
  IntVector hidden;                         // row indices whose labels were zeroed
};

/// Zeroes the labels of a random max(1, round(fraction n)) rows.
inline SemiSupervisedSplit split_semisupervised(const DataSet& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw DomainError("split_semisupervised: fraction must be in (0, 1)");
  if (!ds.labels) throw InputError("split_semisupervised: data set has no labels");
  if ((ds.labels->array() == 0).any()) throw InputError("split_semisupervised: labels must be fully known");
  const Index n = ds.n();
  const Index count = std::clamp<Index>(static_cast<Index>(std::llround(fraction * static_cast<double>(n))), 1, n - 1);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(count));
  std::sort(order.begin(), order.end());
  SemiSupervisedSplit out;
  out.data = ds;
  out.unlabelled_per_class.assign(std::max<std::size_t>(ds.class_names.size(), ds.labels->maxCoeff()), 0);
  out.hidden.resize(count);
  for (Index k = 0; k < count; ++k) {
    const Index i = order[static_cast<std::size_t>(k)];
    ++out.unlabelled_per_class[static_cast<std::size_t>((*ds.labels)[i] - 1)];
    (*out.data.labels)[i] = 0;
    out.hidden[k] = static_cast<int>(i);
  }
  return out;
}

/// Run information stored next to the parameters.
struct FitMetadata {
  std::uint64_t seed = 0;
  std::size_t trace_length = 0;
  double log_likelihood = 0.0;
  double bic = 0.0;
  bool converged = false;
  int iterations = 0;
};

struct SerializedModel {
  MixtureModel model;
  FitMetadata metadata;
  std::vector<std::string> column_names;
  std::vector<std::string> class_names;
  std::optional<Standardization> standardization;
};

inline constexpr int kModelSchemaVersion = 1;

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const Index rows = j.at("rows").get<Index>();
  const Index cols = j.at("cols").get<Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || static_cast<Index>(data.size()) != rows * cols)
    throw SchemaError("matrix entry count does not match its dimensions");
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index k = 0; k < cols; ++k) m(i, k) = data[static_cast<std::size_t>(i * cols + k)];
  return m;
}

inline Vector vector_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  Vector out(static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Index>(i)] = v[i];
  return out;
}

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace detail

inline nlohmann::json model_to_json(const SerializedModel& sm) {
  const MixtureModel& m = sm.model;
  nlohmann::json j;
  j["schema_version"] = kModelSchemaVersion;
  j["dims"] = {{"G", m.G()}, {"p", m.p()}, {"q", m.q()}, {"r", m.r()}};
  j["weights"] = detail::to_std(m.weights);
  j["components"] = nlohmann::json::array();
  for (const auto& c : m.components) {
    nlohmann::json jc;
    jc["mu"] = detail::to_std(c.mu);
    jc["B_tilde"] = detail::matrix_to_json(c.B_tilde);
    const auto loading = to_loading_form(c);
    jc["B"] = loading ? detail::matrix_to_json(loading->B) : nlohmann::json(nullptr);
    jc["D"] = detail::to_std(c.D);
    jc["Lambda"] = detail::matrix_to_json(c.Lambda);
    jc["omega"] = c.omega;
    jc["lambda"] = c.lambda;
    j["components"].push_back(jc);
  }
  j["metadata"] = {{"seed", sm.metadata.seed},
                   {"trace_length", sm.metadata.trace_length},
                   {"log_likelihood", sm.metadata.log_likelihood},
                   {"bic", sm.metadata.bic},
                   {"converged", sm.metadata.converged},
                   {"iterations", sm.metadata.iterations}};
  j["column_names"] = sm.column_names;
  j["class_names"] = sm.class_names;
  if (sm.standardization)
    j["standardization"] = {{"mean", detail::to_std(sm.standardization->mean)},
                            {"sd", detail::to_std(sm.standardization->sd)}};
  else
    j["standardization"] = nullptr;
  return j;
}

inline SerializedModel model_from_json(const nlohmann::json& j) {
  try {
    if (!j.contains("schema_version")) throw SchemaError("model file has no schema_version");
    const int version = j.at("schema_version").get<int>();
    if (version != kModelSchemaVersion)
      throw SchemaError("model schema version " + std::to_string(version) + " is not supported (expected " +
                        std::to_string(kModelSchemaVersion) + ")");
    SerializedModel sm;
    const auto& dims = j.at("dims");
    const Index G = dims.at("G").get<Index>(), p = dims.at("p").get<Index>(), q = dims.at("q").get<Index>(),
                r = dims.at("r").get<Index>();
    sm.model.weights = detail::vector_from_json(j.at("weights"));
    for (const auto& jc : j.at("components")) {
      FactorComponent c;
      c.mu = detail::vector_from_json(jc.at("mu"));
      c.B_tilde = detail::matrix_from_json(jc.at("B_tilde"));
      c.D = detail::vector_from_json(jc.at("D"));
      c.Lambda = detail::matrix_from_json(jc.at("Lambda"));
      c.omega = jc.at("omega").get<double>();
      c.lambda = jc.at("lambda").get<double>();
      sm.model.components.push_back(std::move(c));
    }
    if (sm.model.G() != G || sm.model.p() != p || sm.model.q() != q || sm.model.r() != r)
      throw SchemaError("model dims do not match the stored parameters");
    sm.model.validate();
    const auto& md = j.at("metadata");
    sm.metadata.seed = md.at("seed").get<std::uint64_t>();
    sm.metadata.trace_length = md.at("trace_length").get<std::size_t>();
    sm.metadata.log_likelihood = md.at("log_likelihood").get<double>();
    sm.metadata.bic = md.at("bic").get<double>();
    sm.metadata.converged = md.at("converged").get<bool>();
    sm.metadata.iterations = md.at("iterations").get<int>();
    sm.column_names = j.at("column_names").get<std::vector<std::string>>();
    sm.class_names = j.at("class_names").get<std::vector<std::string>>();
    if (!j.at("standardization").is_null()) {
      Standardization s;
      s.mean = detail::vector_from_json(j.at("standardization").at("mean"));
      s.sd = detail::vector_from_json(j.at("standardization").at("sd"));
      if (s.mean.size() != p || s.sd.size() != p) throw SchemaError("standardization has the wrong length");
      sm.standardization = s;
    }
    return sm;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed model file: ") + e.what());
  } catch (const SchemaError&) {
    throw;
  } catch (const Error& e) {
    throw SchemaError(std::string("invalid model: ") + e.what());
  }
}

inline std::string model_to_string(const SerializedModel& sm) { return model_to_json(sm).dump(2) + "\n"; }

inline void save_model(const SerializedModel& sm, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  out << model_to_string(sm);
  if (!out) throw InputError("write to " + path + " failed");
}

inline SerializedModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(path + ": " + e.what());
  }
  return model_from_json(j);
}

inline SerializedModel serialize_fit(const FitResult& res, const FitConfig& config, const DataSet& ds) {
  SerializedModel sm;
  sm.model = res.model;
  sm.metadata.seed = config.seed;
  sm.metadata.trace_length = res.log_likelihood_trace.size();
  sm.metadata.log_likelihood = res.log_likelihood();
  sm.metadata.bic = res.bic;
  sm.metadata.converged = res.converged;
  sm.metadata.iterations = res.iterations;
  sm.column_names = ds.column_names;
  sm.class_names = ds.class_names;
  sm.standardization = ds.standardization;
  return sm;
}

}  // namespace mhthfa
