#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mhthfa/mhthfa.hpp"

using namespace mhthfa;

namespace {

constexpr int kExitInput = 2;
constexpr int kExitFit = 3;
constexpr int kExitConstraint = 4;

// "3", "1-6" or "1,2,5"
std::vector<Index> parse_set(const std::string& text, const std::string& what) {
  std::vector<Index> out;
  std::stringstream ss(text);
  std::string part;
  try {
    while (std::getline(ss, part, ',')) {
      const auto dash = part.find('-', 1);
      if (dash == std::string::npos) {
        out.push_back(std::stol(part));
      } else {
        const Index lo = std::stol(part.substr(0, dash)), hi = std::stol(part.substr(dash + 1));
        if (hi < lo) throw InputError(what + ": empty range '" + part + "'");
        for (Index v = lo; v <= hi; ++v) out.push_back(v);
      }
    }
  } catch (const std::logic_error&) {
    throw InputError(what + ": cannot parse '" + text + "'");
  }
  if (out.empty()) throw InputError(what + ": empty set");
  for (Index v : out)
    if (v < 1) throw InputError(what + ": values must be positive");
  return out;
}

struct DataOptions {
  std::string data;
  std::string labels;
  std::string truth;
  std::string unlabelled_token = "NA";
  double hide_fraction = 0.0;
  bool standardize = false;
};

void add_data_options(CLI::App* cmd, DataOptions& d) {
  cmd->add_option("--data", d.data, "CSV file with a header row")->required();
  cmd->add_option("--labels", d.labels, "column of known classes for semi-supervised fitting");
  cmd->add_option("--unlabelled-token", d.unlabelled_token, "label text marking an unlabelled row");
  cmd->add_option("--hide-fraction", d.hide_fraction,
                  "hide the labels of this fraction of rows (seeded by --seed) and score on them");
  cmd->add_option("--truth", d.truth, "column of reference classes, used only for ARI");
  cmd->add_flag("--standardize", d.standardize, "z-score every feature column");
}

struct LoadedData {
  DataSet ds;
  std::optional<IntVector> truth;  // scored on rows whose label is 0 (all rows when unlabelled)
};

LoadedData load_data(const DataOptions& d, std::uint64_t seed) {
  if (!d.labels.empty() && !d.truth.empty()) throw InputError("--labels and --truth cannot be combined");
  if (d.hide_fraction != 0.0 && d.labels.empty()) throw InputError("--hide-fraction needs --labels");
  LoadedData out;
  if (!d.labels.empty()) {
    out.ds = load_csv(d.data, d.labels, d.unlabelled_token);
  } else if (!d.truth.empty()) {
    out.ds = load_csv(d.data, d.truth);
    out.truth = out.ds.labels;
    out.ds.labels.reset();
  } else {
    out.ds = load_csv(d.data);
  }
  if (d.hide_fraction != 0.0) {
    out.truth = out.ds.labels;
    out.ds = split_semisupervised(out.ds, d.hide_fraction, seed).data;
  }
  if (d.standardize) out.ds = standardize(out.ds);
  return out;
}

struct FitOptions {
  std::uint64_t seed = 1;
  double epsilon = 0.01;
  int starts = 5;
  int max_iterations = 1000;
  int threads = 0;
};

void add_fit_options(CLI::App* cmd, FitOptions& f) {
  cmd->add_option("--seed", f.seed, "random seed");
  cmd->add_option("--epsilon", f.epsilon, "Aitken stopping tolerance");
  cmd->add_option("--starts", f.starts, "number of k-means starts");
  cmd->add_option("--max-iter", f.max_iterations, "iteration cap per fit");
}

FitConfig make_config(const FitOptions& f, const DataSet& ds) {
  FitConfig cfg;
  cfg.seed = f.seed;
  cfg.epsilon = f.epsilon;
  cfg.n_starts = f.starts;
  cfg.max_iterations = f.max_iterations;
  cfg.threads = f.threads;
  cfg.labels = ds.labels;
  return cfg;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

// ARI over the rows the fit was not told about; every row when nothing was labelled.
std::optional<double> score(const FitResult& res, const LoadedData& ld) {
  if (!ld.truth) return std::nullopt;
  std::vector<Index> rows;
  for (Index i = 0; i < ld.ds.n(); ++i)
    if (!ld.ds.labels || (*ld.ds.labels)[i] == 0) rows.push_back(i);
  if (rows.size() < 2) return std::nullopt;
  IntVector a(static_cast<Index>(rows.size())), b(static_cast<Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    a[static_cast<Index>(k)] = (*ld.truth)[rows[k]];
    b[static_cast<Index>(k)] = res.map_labels[rows[k]];
  }
  return adjusted_rand_index(a, b);
}

void print_fit(const FitResult& res, Index G, Index q, Index r, const std::optional<double>& ari) {
  std::cout << "G: " << G << "\nq: " << q << "\nr: " << r << "\nlog_likelihood: " << fmt(res.log_likelihood())
            << "\nbic: " << fmt(res.bic) << "\niterations: " << res.iterations
            << "\nconverged: " << (res.converged ? "yes" : "no") << "\nstart_used: " << res.start_used + 1
            << "\nascent_violations: " << res.ascent_violations << "\n";
  if (ari) std::cout << "ari: " << fmt(*ari) << "\n";
  for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
}

void write_table(std::ostream& os, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& row : rows)
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (width.size() <= j) width.push_back(0);
      width[j] = std::max(width[j], row[j].size());
    }
  for (const auto& row : rows) {
    for (std::size_t j = 0; j < row.size(); ++j)
      os << (j ? "  " : "") << std::setw(static_cast<int>(width[j])) << row[j];
    os << "\n";
  }
}

std::ostream& open_out(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path);
  if (!file) throw InputError("cannot write " + path);
  return file;
}

int run_grid(const LoadedData& ld, const std::vector<Index>& G_set, const std::vector<Index>& q_set,
             const std::vector<Index>& r_set, const FitOptions& f, const std::string& out_model) {
  const FitConfig cfg = make_config(f, ld.ds);
  const auto cells = grid_search(ld.ds.X, G_set, q_set, r_set, cfg);
  std::vector<std::vector<std::string>> table{{"rank", "G", "q", "r", "loglik", "BIC", "iters", "conv"}};
  if (ld.truth) table[0].push_back("ARI");
  int rank = 0;
  for (const auto& c : cells) {
    std::vector<std::string> row{std::to_string(++rank), std::to_string(c.G), std::to_string(c.q),
                                 std::to_string(c.r)};
    if (c.result) {
      row.insert(row.end(), {fmt(c.result->log_likelihood(), 2), fmt(c.result->bic, 2),
                             std::to_string(c.result->iterations), c.result->converged ? "yes" : "no"});
      if (ld.truth) {
        const auto ari = score(*c.result, ld);
        row.push_back(ari ? fmt(*ari) : "-");
      }
    } else {
      row.insert(row.end(), {"failed", "-", "-", "-"});
      if (ld.truth) row.push_back("-");
    }
    table.push_back(std::move(row));
  }
  write_table(std::cout, table);
  for (const auto& c : cells)
    if (!c.result) std::cerr << "cell G=" << c.G << " q=" << c.q << " r=" << c.r << ": " << c.error << "\n";
  if (!out_model.empty()) save_model(serialize_fit(*cells.front().result, cfg, ld.ds), out_model);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixtures of hidden truncation hyperbolic factor analyzers"};
  app.require_subcommand(1);

  DataOptions fit_data;
  FitOptions fit_opts;
  std::string fit_G = "2", fit_q, fit_r = "1", fit_out;
  auto* fit_cmd = app.add_subcommand("fit", "fit one model; a range in --q or --r keeps the best BIC");
  add_data_options(fit_cmd, fit_data);
  add_fit_options(fit_cmd, fit_opts);
  fit_cmd->add_option("--G", fit_G, "number of components");
  fit_cmd->add_option("--q", fit_q, "number of factors, e.g. 4 or 1-6")->required();
  fit_cmd->add_option("--r", fit_r, "skewness dimension, e.g. 2 or 1-3");
  fit_cmd->add_option("--out", fit_out, "write the fitted model as JSON");

  DataOptions grid_data;
  FitOptions grid_opts;
  std::string grid_G = "2", grid_q, grid_r = "1-3", grid_out;
  auto* grid_cmd = app.add_subcommand("grid", "fit every admissible (G, q, r) and rank by BIC");
  add_data_options(grid_cmd, grid_data);
  add_fit_options(grid_cmd, grid_opts);
  grid_cmd->add_option("--G-set", grid_G, "component counts, e.g. 2 or 1-3");
  grid_cmd->add_option("--q-set", grid_q, "factor counts, e.g. 1-6")->required();
  grid_cmd->add_option("--r-set", grid_r, "skewness dimensions, e.g. 1-3");
  grid_cmd->add_option("--threads", grid_opts.threads, "worker threads; 0 uses every core");
  grid_cmd->add_option("--out", grid_out, "write the best model as JSON");

  std::string pred_model, pred_data, pred_out, pred_labels;
  auto* pred_cmd = app.add_subcommand("predict", "posterior membership probabilities and MAP labels");
  pred_cmd->add_option("--model", pred_model, "model JSON written by fit or grid")->required();
  pred_cmd->add_option("--data", pred_data, "CSV with the model's feature columns")->required();
  pred_cmd->add_option("--labels", pred_labels, "non-numeric column to ignore");
  pred_cmd->add_option("--out", pred_out, "output CSV (default stdout)");

  std::string sim_model, sim_out;
  Index sim_n = 100;
  std::uint64_t sim_seed = 1;
  bool sim_latents = false;
  auto* sim_cmd = app.add_subcommand("simulate", "draw rows from a fitted model");
  sim_cmd->add_option("--model", sim_model, "model JSON")->required();
  sim_cmd->add_option("--n", sim_n, "number of rows");
  sim_cmd->add_option("--seed", sim_seed, "random seed");
  sim_cmd->add_flag("--latents", sim_latents, "append the latent w, v and u columns");
  sim_cmd->add_option("--out", sim_out, "output CSV (default stdout)");

  std::string eval_true, eval_pred;
  auto* eval_cmd = app.add_subcommand("evaluate", "adjusted Rand index and confusion table");
  eval_cmd->add_option("--true", eval_true, "file.csv:column of reference classes")->required();
  eval_cmd->add_option("--pred", eval_pred, "file.csv:column of predicted classes")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  }

  try {
    if (*fit_cmd) {
      const LoadedData ld = load_data(fit_data, fit_opts.seed);
      const auto G_set = parse_set(fit_G, "--G"), q_set = parse_set(fit_q, "--q"), r_set = parse_set(fit_r, "--r");
      if (G_set.size() == 1 && q_set.size() == 1 && r_set.size() == 1) {
        const FitConfig cfg = make_config(fit_opts, ld.ds);
        const FitResult res = fit(ld.ds.X, G_set[0], q_set[0], r_set[0], cfg);
        print_fit(res, G_set[0], q_set[0], r_set[0], score(res, ld));
        if (!fit_out.empty()) save_model(serialize_fit(res, cfg, ld.ds), fit_out);
        return 0;
      }
      return run_grid(ld, G_set, q_set, r_set, fit_opts, fit_out);
    }
    if (*grid_cmd) {
      const LoadedData ld = load_data(grid_data, grid_opts.seed);
      return run_grid(ld, parse_set(grid_G, "--G-set"), parse_set(grid_q, "--q-set"), parse_set(grid_r, "--r-set"),
                      grid_opts, grid_out);
    }
    if (*pred_cmd) {
      const SerializedModel sm = load_model(pred_model);
      const DataSet ds = pred_labels.empty() ? load_csv(pred_data) : load_csv(pred_data, pred_labels);
      Matrix X = sm.column_names.empty() ? ds.X : select_columns(ds, sm.column_names);
      if (X.cols() != sm.model.p()) throw InputError("data has " + std::to_string(X.cols()) + " columns, model expects " +
                                                     std::to_string(sm.model.p()));
      if (sm.standardization) X = sm.standardization->apply(X);
      const Matrix z = responsibilities(X, sm.model);
      const IntVector map = map_labels(z);
      std::ofstream file;
      std::ostream& os = open_out(pred_out, file);
      for (Index g = 0; g < z.cols(); ++g) os << "z" << g + 1 << ",";
      os << "map\n" << std::setprecision(10);
      for (Index i = 0; i < z.rows(); ++i) {
        for (Index g = 0; g < z.cols(); ++g) os << z(i, g) << ",";
        os << map[i] << "\n";
      }
      return 0;
    }
    if (*sim_cmd) {
      if (sim_n < 0) throw InputError("--n must be nonnegative");
      const SerializedModel sm = load_model(sim_model);
      std::mt19937_64 rng(sim_seed);
      const MixtureSample s = sample_mixture(sm.model, sim_n, rng, sim_latents);
      const Matrix X = sm.standardization ? sm.standardization->invert(s.X) : s.X;
      std::ofstream file;
      std::ostream& os = open_out(sim_out, file);
      for (Index j = 0; j < X.cols(); ++j)
        os << (static_cast<std::size_t>(j) < sm.column_names.size() ? sm.column_names[j] : "x" + std::to_string(j + 1))
           << ",";
      os << "component";
      if (sim_latents) {
        os << ",w";
        for (Index j = 0; j < sm.model.r(); ++j) os << ",v" << j + 1;
        for (Index j = 0; j < sm.model.q(); ++j) os << ",u" << j + 1;
      }
      os << "\n" << std::setprecision(10);
      for (Index i = 0; i < X.rows(); ++i) {
        for (Index j = 0; j < X.cols(); ++j) os << X(i, j) << ",";
        os << s.component[i];
        if (sim_latents) {
          os << "," << (*s.w)[i];
          for (Index j = 0; j < sm.model.r(); ++j) os << "," << (*s.v)(i, j);
          for (Index j = 0; j < sm.model.q(); ++j) os << "," << (*s.u)(i, j);
        }
        os << "\n";
      }
      return 0;
    }
    if (*eval_cmd) {
      auto column = [](const std::string& spec) {
        const auto colon = spec.rfind(':');
        if (colon == std::string::npos || colon == 0 || colon + 1 == spec.size())
          throw InputError("expected file.csv:column, got '" + spec + "'");
        return read_csv_column(spec.substr(0, colon), spec.substr(colon + 1));
      };
      const auto truth_text = column(eval_true), pred_text = column(eval_pred);
      if (truth_text.size() != pred_text.size())
        throw InputError("--true has " + std::to_string(truth_text.size()) + " rows, --pred has " +
                         std::to_string(pred_text.size()));
      std::vector<std::string> truth_names, pred_names;
      const IntVector truth = encode_labels(truth_text, &truth_names);
      const IntVector pred = encode_labels(pred_text, &pred_names);
      const ConfusionMatrix cm = confusion_matrix(truth, pred);
      std::cout << "ari: " << fmt(adjusted_rand_index(cm.counts)) << "\n";
      std::vector<std::vector<std::string>> table{{"true\\pred"}};
      for (int c : cm.col_labels) table[0].push_back(pred_names[static_cast<std::size_t>(c - 1)]);
      for (std::size_t i = 0; i < cm.row_labels.size(); ++i) {
        std::vector<std::string> row{truth_names[static_cast<std::size_t>(cm.row_labels[i] - 1)]};
        for (Index j = 0; j < cm.counts.cols(); ++j) row.push_back(std::to_string(cm.counts(static_cast<Index>(i), j)));
        table.push_back(std::move(row));
      }
      write_table(std::cout, table);
      return 0;
    }
  } catch (const ConstraintViolation& e) {
    std::cerr << "constraint violation: " << e.what() << "\n";
    return kExitConstraint;
  } catch (const FitFailure& e) {
    std::cerr << "fit failed: " << e.what() << "\n";
    return kExitFit;
  } catch (const ComponentCollapse& e) {
    std::cerr << "fit failed: " << e.what() << "\n";
    return kExitFit;
  } catch (const DegenerateLikelihood& e) {
    std::cerr << "fit failed: " << e.what() << "\n";
    return kExitFit;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return 0;
}
