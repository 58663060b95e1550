#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "jointfit/data.hpp"
#include "jointfit/em.hpp"

namespace jointfit {

// Column names of the two CSV tables.  The longitudinal table is
// (id, time, y); the survival table is (id, time, event, w-columns...),
// where every column not named here is treated as a baseline covariate.
struct ColumnMap {
  std::string id = "id";
  std::string time = "time";
  std::string response = "y";
  std::string event = "event";
};

struct LoadOptions {
  std::shared_ptr<const TimeBasis> basis;
  ColumnMap columns;
  // Drop (and count) measurements taken after the event time instead of
  // rejecting the file.
  bool truncate = false;
};

struct LoadSummary {
  int n_subjects = 0;
  int n_records = 0;
  int n_events = 0;
  int n_dropped_records = 0;
  std::vector<std::string> covariate_names;
};

// Merge + validate the CSV pair into SubjectData (survival-file order).
// Throws IoError with file/row/column context on structural problems.
std::vector<SubjectData> load_bundle(const std::string& longitudinal_path,
                                     const std::string& survival_path,
                                     const LoadOptions& options,
                                     LoadSummary* summary = nullptr);

// Inverse of load_bundle for simulated data; numbers are written in
// shortest round-trip form so the pair reloads bit-exactly.
void write_dataset_csv(const std::vector<SubjectData>& data,
                       const std::string& longitudinal_path,
                       const std::string& survival_path);

// Stable output schema: theta, standard_errors, information_matrix,
// hazard{jump_times, increments}, loglik_trace, converged, n_iters.
nlohmann::json fit_result_to_json(const FitResult& result);

// Command-line front end (subcommands fit / simulate / validate).  Returns
// the process exit code: 0 success, 1 input error, 2 fit did not converge
// (result still written).
int run_cli(int argc, const char* const* argv);

}  // namespace jointfit
