#include "jointfit/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "jointfit/errors.hpp"
#include "jointfit/inference.hpp"
#include "jointfit/parallel.hpp"
#include "jointfit/simulate.hpp"

namespace jointfit {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

struct CsvTable {
  std::string path;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;  // row i lives at line i + 2
};

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open file: " + path, path);
  CsvTable table;
  table.path = path;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() && line_no > 1) continue;
    std::vector<std::string> fields;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.push_back("");
    if (line_no == 1) {
      table.header = std::move(fields);
    } else {
      if (fields.size() != table.header.size()) {
        throw IoError("row has " + std::to_string(fields.size()) +
                          " fields, header has " +
                          std::to_string(table.header.size()),
                      path, line_no);
      }
      table.rows.push_back(std::move(fields));
    }
  }
  if (table.header.empty()) {
    throw IoError("file is empty or has no header row", path, 1);
  }
  return table;
}

int find_column(const CsvTable& table, const std::string& name) {
  for (std::size_t j = 0; j < table.header.size(); ++j) {
    if (table.header[j] == name) return static_cast<int>(j);
  }
  throw IoError("missing required column '" + name + "'", table.path, 1, name);
}

double parse_double_cell(const CsvTable& table, std::size_t row, int col) {
  const std::string& cell = table.rows[row][static_cast<std::size_t>(col)];
  double value = 0.0;
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  auto res = std::from_chars(begin, end, value);
  if (res.ec != std::errc{} || res.ptr != end || !std::isfinite(value)) {
    throw IoError("cannot parse '" + cell + "' as a finite number",
                  table.path, static_cast<long>(row) + 2,
                  table.header[static_cast<std::size_t>(col)]);
  }
  return value;
}

}  // namespace

std::vector<SubjectData> load_bundle(const std::string& longitudinal_path,
                                     const std::string& survival_path,
                                     const LoadOptions& options,
                                     LoadSummary* summary) {
  if (!options.basis) throw InvalidInputError("load_bundle: basis is null");
  const CsvTable surv = read_csv(survival_path);
  const CsvTable lon = read_csv(longitudinal_path);

  const int surv_id = find_column(surv, options.columns.id);
  const int surv_time = find_column(surv, options.columns.time);
  const int surv_event = find_column(surv, options.columns.event);
  std::vector<int> w_cols;
  std::vector<std::string> w_names;
  for (std::size_t j = 0; j < surv.header.size(); ++j) {
    const int jj = static_cast<int>(j);
    if (jj == surv_id || jj == surv_time || jj == surv_event) continue;
    w_cols.push_back(jj);
    w_names.push_back(surv.header[j]);
  }

  struct SurvivalRow {
    double time;
    bool event;
    Eigen::VectorXd w;
    long line;
  };
  std::map<std::string, SurvivalRow> survival;
  std::vector<std::string> order;
  for (std::size_t i = 0; i < surv.rows.size(); ++i) {
    const std::string& id = surv.rows[i][static_cast<std::size_t>(surv_id)];
    if (survival.count(id)) {
      throw IoError("duplicate survival row for id '" + id + "'",
                    survival_path, static_cast<long>(i) + 2,
                    options.columns.id);
    }
    SurvivalRow row;
    row.time = parse_double_cell(surv, i, surv_time);
    if (!(row.time > 0.0)) {
      throw IoError("event time must be positive", survival_path,
                    static_cast<long>(i) + 2, options.columns.time);
    }
    const double ev = parse_double_cell(surv, i, surv_event);
    if (ev != 0.0 && ev != 1.0) {
      throw IoError("event indicator must be 0 or 1", survival_path,
                    static_cast<long>(i) + 2, options.columns.event);
    }
    row.event = ev == 1.0;
    row.w.resize(static_cast<Eigen::Index>(w_cols.size()));
    for (std::size_t k = 0; k < w_cols.size(); ++k) {
      row.w(static_cast<Eigen::Index>(k)) = parse_double_cell(surv, i, w_cols[k]);
    }
    row.line = static_cast<long>(i) + 2;
    survival.emplace(id, std::move(row));
    order.push_back(id);
  }

  const int lon_id = find_column(lon, options.columns.id);
  const int lon_time = find_column(lon, options.columns.time);
  const int lon_resp = find_column(lon, options.columns.response);

  struct RawRecord {
    double time;
    double response;
    long line;
  };
  std::map<std::string, std::vector<RawRecord>> records;
  for (std::size_t i = 0; i < lon.rows.size(); ++i) {
    const std::string& id = lon.rows[i][static_cast<std::size_t>(lon_id)];
    if (!survival.count(id)) {
      throw IoError("longitudinal id '" + id +
                        "' has no row in the survival table",
                    longitudinal_path, static_cast<long>(i) + 2,
                    options.columns.id);
    }
    RawRecord rec;
    rec.time = parse_double_cell(lon, i, lon_time);
    if (rec.time < 0.0) {
      throw IoError("measurement time must be nonnegative", longitudinal_path,
                    static_cast<long>(i) + 2, options.columns.time);
    }
    rec.response = parse_double_cell(lon, i, lon_resp);
    rec.line = static_cast<long>(i) + 2;
    records[id].push_back(rec);
  }

  std::vector<SubjectData> data;
  data.reserve(order.size());
  int dropped = 0;
  int n_records = 0;
  int n_events = 0;
  for (const std::string& id : order) {
    const SurvivalRow& row = survival.at(id);
    auto it = records.find(id);
    if (it == records.end() || it->second.empty()) {
      throw IoError("subject '" + id + "' has no longitudinal measurements",
                    survival_path, row.line, options.columns.id);
    }
    auto& raw = it->second;
    std::stable_sort(raw.begin(), raw.end(),
                     [](const RawRecord& a, const RawRecord& b) {
                       return a.time < b.time;
                     });
    std::vector<LongitudinalRecord> recs;
    double prev = -1.0;
    for (const RawRecord& rec : raw) {
      if (rec.time > row.time) {
        if (options.truncate) {
          ++dropped;
          continue;
        }
        throw IoError("measurement at time " + fmt_double(rec.time) +
                          " is after the event time " + fmt_double(row.time) +
                          " of subject '" + id + "' (use --truncate to drop)",
                      longitudinal_path, rec.line, options.columns.time);
      }
      if (rec.time == prev) {
        throw IoError("duplicate measurement time for subject '" + id + "'",
                      longitudinal_path, rec.line, options.columns.time);
      }
      prev = rec.time;
      recs.push_back({rec.time, rec.response});
    }
    if (recs.empty()) {
      throw IoError("subject '" + id +
                        "' has no longitudinal measurements left after "
                        "truncation",
                    survival_path, row.line, options.columns.id);
    }
    n_records += static_cast<int>(recs.size());
    if (row.event) ++n_events;
    data.push_back(SubjectData::make(id, row.time, row.event, row.w,
                                     std::move(recs), options.basis));
  }

  if (summary != nullptr) {
    summary->n_subjects = static_cast<int>(data.size());
    summary->n_records = n_records;
    summary->n_events = n_events;
    summary->n_dropped_records = dropped;
    summary->covariate_names = w_names;
  }
  return data;
}

void write_dataset_csv(const std::vector<SubjectData>& data,
                       const std::string& longitudinal_path,
                       const std::string& survival_path) {
  std::ofstream lon(longitudinal_path);
  if (!lon) throw IoError("cannot write file: " + longitudinal_path,
                          longitudinal_path);
  lon << "id,time,y\n";
  for (const auto& subject : data) {
    for (const auto& rec : subject.records) {
      lon << subject.id << ',' << fmt_double(rec.time) << ','
          << fmt_double(rec.response) << '\n';
    }
  }

  std::ofstream surv(survival_path);
  if (!surv) throw IoError("cannot write file: " + survival_path,
                           survival_path);
  surv << "id,time,event";
  const Eigen::Index p_w =
      data.empty() ? 0 : data.front().baseline_covariates.size();
  for (Eigen::Index j = 0; j < p_w; ++j) surv << ",w" << j;
  surv << '\n';
  for (const auto& subject : data) {
    surv << subject.id << ',' << fmt_double(subject.event_time) << ','
         << (subject.event ? 1 : 0);
    for (Eigen::Index j = 0; j < p_w; ++j) {
      surv << ',' << fmt_double(subject.baseline_covariates(j));
    }
    surv << '\n';
  }
}

nlohmann::json fit_result_to_json(const FitResult& result) {
  using nlohmann::json;
  json theta;
  theta["alpha"] = std::vector<double>(
      result.params_hat.alpha.begin(), result.params_hat.alpha.end());
  theta["beta"] = std::vector<double>(result.params_hat.beta.begin(),
                                      result.params_hat.beta.end());
  theta["gamma"] = std::vector<double>(result.params_hat.gamma.begin(),
                                       result.params_hat.gamma.end());
  theta["sigma"] = result.params_hat.sigma;
  json d_rows = json::array();
  for (Eigen::Index i = 0; i < result.params_hat.D.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < result.params_hat.D.cols(); ++j) {
      row.push_back(result.params_hat.D(i, j));
    }
    d_rows.push_back(row);
  }
  theta["D"] = d_rows;

  json j;
  j["theta"] = theta;
  if (result.standard_errors.size() > 0) {
    j["standard_errors"] = std::vector<double>(
        result.standard_errors.begin(), result.standard_errors.end());
  } else {
    j["standard_errors"] = nullptr;
  }
  if (result.info_matrix.size() > 0) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < result.info_matrix.rows(); ++i) {
      json row = json::array();
      for (Eigen::Index jj = 0; jj < result.info_matrix.cols(); ++jj) {
        row.push_back(result.info_matrix(i, jj));
      }
      rows.push_back(row);
    }
    j["information_matrix"] = rows;
  } else {
    j["information_matrix"] = nullptr;
  }
  j["hazard"] = {{"jump_times", result.hazard_hat.jump_times},
                 {"increments", result.hazard_hat.increments}};
  j["loglik_trace"] = result.loglik_trace;
  j["converged"] = result.converged;
  j["n_iters"] = result.n_iters;
  return j;
}

namespace {

struct BasisCliOptions {
  std::string name = "slope";
  int poly_fixed_degree = 1;
  int poly_random_degree = 1;

  std::shared_ptr<const TimeBasis> build() const {
    if (name == "poly") {
      return make_polynomial_basis(poly_fixed_degree, poly_random_degree);
    }
    return make_basis(name);
  }
};

void add_basis_options(CLI::App* cmd, BasisCliOptions& opts) {
  cmd->add_option("--basis", opts.name, "time basis: intercept, slope, poly")
      ->check(CLI::IsMember({"intercept", "slope", "poly"}))
      ->capture_default_str();
  cmd->add_option("--poly-fixed-degree", opts.poly_fixed_degree,
                  "fixed-basis polynomial degree (with --basis poly)")
      ->capture_default_str();
  cmd->add_option("--poly-random-degree", opts.poly_random_degree,
                  "random-basis polynomial degree (with --basis poly)")
      ->capture_default_str();
}

void print_fit_table(const FitResult& result) {
  const auto labels = result.params_hat.labels();
  const Eigen::VectorXd estimates = result.params_hat.stacked();
  std::printf("%-12s %14s %14s\n", "parameter", "estimate", "std.err");
  for (std::size_t j = 0; j < labels.size(); ++j) {
    if (result.standard_errors.size() ==
        static_cast<Eigen::Index>(labels.size())) {
      std::printf("%-12s %14.6f %14.6f\n", labels[j].c_str(),
                  estimates(static_cast<Eigen::Index>(j)),
                  result.standard_errors(static_cast<Eigen::Index>(j)));
    } else {
      std::printf("%-12s %14.6f %14s\n", labels[j].c_str(),
                  estimates(static_cast<Eigen::Index>(j)), "--");
    }
  }
}

int run_fit_command(const std::string& longitudinal_path,
                    const std::string& survival_path,
                    const BasisCliOptions& basis_opts, const ColumnMap& columns,
                    bool truncate, const FitConfig& config,
                    const std::string& out_path) {
  LoadOptions load_options;
  load_options.basis = basis_opts.build();
  load_options.columns = columns;
  load_options.truncate = truncate;
  LoadSummary summary;
  const std::vector<SubjectData> data =
      load_bundle(longitudinal_path, survival_path, load_options, &summary);
  std::printf("loaded %d subjects, %d measurements, %d events",
              summary.n_subjects, summary.n_records, summary.n_events);
  if (summary.n_dropped_records > 0) {
    std::printf(" (%d late measurements dropped)", summary.n_dropped_records);
  }
  std::printf("\n");

  FitResult result = fit(data, config);

  // post-fit inference at (theta_hat, Lambda_hat)
  const QuadratureRule base = gh_rule(config.quad_order,
                                      result.params_hat.r());
  std::vector<PosteriorSummary> posteriors(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    posteriors[i] = e_step_subject_with_rule(data[i], result.params_hat,
                                             result.hazard_hat, base);
  });
  const EfficientInfo info = efficient_information(
      data, result.params_hat, result.hazard_hat, posteriors);
  result.info_matrix = info.matrix;
  try {
    result.standard_errors =
        standard_errors(info, static_cast<Eigen::Index>(data.size()));
  } catch (const SingularInformationError& err) {
    std::fprintf(stderr, "warning: %s\n", err.what());
    for (const auto& dir : err.near_null_directions) {
      std::fprintf(stderr, "  %s\n", dir.c_str());
    }
  }

  print_fit_table(result);
  std::printf("loglik %.6f after %d iterations (%s)\n",
              result.loglik_trace.back(), result.n_iters,
              result.converged ? "converged" : "not converged");

  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw IoError("cannot write file: " + out_path, out_path);
    out << fit_result_to_json(result).dump(2) << '\n';
  }
  return result.converged ? 0 : 2;
}

int run_simulate_command(const SimDesign& design, const std::string& prefix) {
  SimReport report;
  const std::vector<SubjectData> data =
      simulate_dataset(design, nullptr, &report);
  const std::string lon_path = prefix + "_longitudinal.csv";
  const std::string surv_path = prefix + "_survival.csv";
  write_dataset_csv(data, lon_path, surv_path);
  std::printf("wrote %s and %s: %d subjects, %d events, %d censored\n",
              lon_path.c_str(), surv_path.c_str(), design.n_subjects,
              report.n_events, report.n_censored);
  if (report.n_bracket_censored > 0) {
    std::printf("note: %d subjects hit the event-time bracket cap and were "
                "treated as censored\n",
                report.n_bracket_censored);
  }
  return 0;
}

int run_validate_command(const std::string& longitudinal_path,
                         const std::string& survival_path,
                         const BasisCliOptions& basis_opts,
                         const ColumnMap& columns, bool truncate) {
  LoadOptions load_options;
  load_options.basis = basis_opts.build();
  load_options.columns = columns;
  load_options.truncate = truncate;
  LoadSummary summary;
  load_bundle(longitudinal_path, survival_path, load_options, &summary);
  std::printf("ok: %d subjects, %d measurements, %d events",
              summary.n_subjects, summary.n_records, summary.n_events);
  if (summary.n_dropped_records > 0) {
    std::printf(" (%d late measurements dropped)", summary.n_dropped_records);
  }
  std::printf("\n");
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"jointfit: semiparametric joint model of longitudinal and "
               "survival data (profile-likelihood EM, efficient-score "
               "standard errors).  JOINTFIT_THREADS caps worker threads."};
  app.require_subcommand(1);
  app.set_config("--config", "", "read options from an INI/TOML file");

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "fit the joint model to a CSV pair");
  std::string fit_lon, fit_surv, fit_out = "fit.json";
  BasisCliOptions fit_basis;
  ColumnMap fit_columns;
  bool fit_truncate = false;
  FitConfig config;
  fit_cmd->add_option("--longitudinal", fit_lon,
                      "longitudinal CSV (id,time,y)")->required();
  fit_cmd->add_option("--survival", fit_surv,
                      "survival CSV (id,time,event,covariates...)")->required();
  add_basis_options(fit_cmd, fit_basis);
  fit_cmd->add_option("--quad-order", config.quad_order,
                      "Gauss-Hermite order per axis")->capture_default_str();
  fit_cmd->add_option("--tol", config.param_tol,
                      "max absolute parameter change")->capture_default_str();
  fit_cmd->add_option("--loglik-tol", config.loglik_tol,
                      "relative log-likelihood change")->capture_default_str();
  fit_cmd->add_option("--max-iters", config.max_em_iters,
                      "EM iteration cap")->capture_default_str();
  fit_cmd->add_option("--mstep-max-iters", config.mstep_max_iters,
                      "inner ascent iteration cap")->capture_default_str();
  fit_cmd->add_option("--out", fit_out, "output JSON path")
      ->capture_default_str();
  fit_cmd->add_flag("--truncate", fit_truncate,
                    "drop measurements after the event time");
  fit_cmd->add_option("--id-col", fit_columns.id, "id column name")
      ->capture_default_str();
  fit_cmd->add_option("--time-col", fit_columns.time, "time column name")
      ->capture_default_str();
  fit_cmd->add_option("--response-col", fit_columns.response,
                      "response column name")->capture_default_str();
  fit_cmd->add_option("--event-col", fit_columns.event, "event column name")
      ->capture_default_str();

  // simulate
  auto* sim_cmd = app.add_subcommand("simulate",
                                     "generate a synthetic dataset pair");
  SimDesign design = default_design();
  std::vector<double> sim_beta(design.true_params.beta.begin(),
                               design.true_params.beta.end());
  std::vector<double> sim_dvech(design.true_params.D.rows() *
                                (design.true_params.D.rows() + 1) / 2);
  {
    const Eigen::VectorXd v = vech(design.true_params.D);
    for (Eigen::Index i = 0; i < v.size(); ++i) sim_dvech[i] = v(i);
  }
  double sim_alpha = design.true_params.alpha(0);
  double sim_gamma = design.true_params.gamma(0);
  std::string sim_out = "sim";
  BasisCliOptions sim_basis;
  std::uint64_t sim_seed = design.seed;
  sim_cmd->add_option("--n", design.n_subjects, "number of subjects")
      ->capture_default_str();
  sim_cmd->add_option("--seed", sim_seed, "RNG seed")->capture_default_str();
  sim_cmd->add_option("--alpha", sim_alpha, "association parameter")
      ->capture_default_str();
  sim_cmd->add_option("--gamma", sim_gamma, "baseline-covariate effect")
      ->capture_default_str();
  sim_cmd->add_option("--beta", sim_beta, "fixed effects (comma separated)")
      ->delimiter(',')->capture_default_str();
  sim_cmd->add_option("--sigma", design.true_params.sigma, "residual SD")
      ->capture_default_str();
  sim_cmd->add_option("--d-vech", sim_dvech,
                      "vech of the random-effects covariance")
      ->delimiter(',')->capture_default_str();
  sim_cmd->add_option("--rate", design.baseline_rate,
                      "constant baseline hazard rate")->capture_default_str();
  sim_cmd->add_option("--censoring", design.censoring_rate,
                      "exponential censoring rate")->capture_default_str();
  std::vector<double> sim_schedule = design.measurement_schedule;
  sim_cmd->add_option("--schedule", sim_schedule,
                      "measurement times (comma separated)")
      ->delimiter(',')->capture_default_str();
  sim_cmd->add_option("--w-prob", design.w_distribution.bernoulli_p,
                      "Bernoulli probability of each baseline covariate")
      ->capture_default_str();
  add_basis_options(sim_cmd, sim_basis);
  sim_cmd->add_option("--out", sim_out, "output file prefix")
      ->capture_default_str();

  // validate
  auto* val_cmd = app.add_subcommand("validate",
                                     "load a CSV pair and check invariants");
  std::string val_lon, val_surv;
  BasisCliOptions val_basis;
  ColumnMap val_columns;
  bool val_truncate = false;
  val_cmd->add_option("--longitudinal", val_lon, "longitudinal CSV")
      ->required();
  val_cmd->add_option("--survival", val_surv, "survival CSV")->required();
  add_basis_options(val_cmd, val_basis);
  val_cmd->add_flag("--truncate", val_truncate,
                    "drop measurements after the event time");
  val_cmd->add_option("--id-col", val_columns.id, "id column name")
      ->capture_default_str();
  val_cmd->add_option("--time-col", val_columns.time, "time column name")
      ->capture_default_str();
  val_cmd->add_option("--response-col", val_columns.response,
                      "response column name")->capture_default_str();
  val_cmd->add_option("--event-col", val_columns.event, "event column name")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (fit_cmd->parsed()) {
      return run_fit_command(fit_lon, fit_surv, fit_basis, fit_columns,
                             fit_truncate, config, fit_out);
    }
    if (sim_cmd->parsed()) {
      design.true_params.alpha = Eigen::VectorXd::Constant(1, sim_alpha);
      design.true_params.gamma = Eigen::VectorXd::Constant(1, sim_gamma);
      design.basis = sim_basis.build();
      design.true_params.beta = Eigen::Map<const Eigen::VectorXd>(
          sim_beta.data(), static_cast<Eigen::Index>(sim_beta.size()));
      const int r = design.basis->r;
      if (static_cast<int>(sim_dvech.size()) != r * (r + 1) / 2) {
        // degree change without a matching --d-vech: fall back to identity
        if (sim_cmd->count("--d-vech") > 0) {
          throw InvalidInputError("--d-vech must have length r(r+1)/2");
        }
        design.true_params.D = Eigen::MatrixXd::Identity(r, r);
      } else {
        design.true_params.D = unvech(
            Eigen::Map<const Eigen::VectorXd>(
                sim_dvech.data(), static_cast<Eigen::Index>(sim_dvech.size())),
            r);
      }
      design.measurement_schedule = sim_schedule;
      design.seed = sim_seed;
      return run_simulate_command(design, sim_out);
    }
    if (val_cmd->parsed()) {
      return run_validate_command(val_lon, val_surv, val_basis, val_columns,
                                  val_truncate);
    }
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s", e.what());
    if (e.row >= 0) std::fprintf(stderr, " [%s:%ld]", e.file.c_str(), e.row);
    std::fprintf(stderr, "\n");
    return 1;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}

}  // namespace jointfit
