#include "jointfit/hazard.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "jointfit/quadrature.hpp"

namespace jointfit {

void StepHazard::validate() const {
  if (jump_times.size() != increments.size()) {
    throw InvalidInputError("hazard jump_times and increments differ in size");
  }
  double prev = 0.0;
  for (std::size_t k = 0; k < jump_times.size(); ++k) {
    if (!std::isfinite(jump_times[k]) || !(jump_times[k] > 0.0)) {
      throw InvalidInputError("hazard jump times must be positive and finite");
    }
    if (k > 0 && !(jump_times[k] > prev)) {
      throw InvalidInputError("hazard jump times must be strictly increasing");
    }
    if (!std::isfinite(increments[k]) || increments[k] < 0.0) {
      throw InvalidInputError("hazard increments must be nonnegative");
    }
    prev = jump_times[k];
  }
}

double cum_at(const StepHazard& hazard, double t) {
  double acc = 0.0;
  for (std::size_t k = 0; k < hazard.size(); ++k) {
    if (hazard.jump_times[k] > t) break;
    acc += hazard.increments[k];
  }
  return acc;
}

std::size_t jumps_at_or_before(const StepHazard& hazard, double t) {
  return static_cast<std::size_t>(
      std::upper_bound(hazard.jump_times.begin(), hazard.jump_times.end(), t) -
      hazard.jump_times.begin());
}

namespace {

// Distinct event times (delta = 1) in increasing order with tie counts.
std::map<double, int> event_times_with_ties(
    const std::vector<SubjectData>& data) {
  std::map<double, int> ties;
  for (const auto& subject : data) {
    if (subject.event) ++ties[subject.event_time];
  }
  return ties;
}

}  // namespace

StepHazard nelson_aalen(const std::vector<SubjectData>& data) {
  const auto ties = event_times_with_ties(data);
  StepHazard hazard;
  hazard.jump_times.reserve(ties.size());
  hazard.increments.reserve(ties.size());
  for (const auto& [time, count] : ties) {
    long at_risk = 0;
    for (const auto& subject : data) {
      if (subject.event_time >= time) ++at_risk;
    }
    if (at_risk <= 0) {
      throw DegenerateRiskSetError("empty risk set at event time " +
                                   std::to_string(time));
    }
    hazard.jump_times.push_back(time);
    hazard.increments.push_back(static_cast<double>(count) /
                                static_cast<double>(at_risk));
  }
  return hazard;
}

StepHazard breslow_update(const std::vector<SubjectData>& data,
                          const ModelParams& params,
                          const std::vector<PosteriorSummary>& posteriors) {
  if (data.empty()) {
    throw InvalidInputError("breslow_update: empty dataset");
  }
  if (posteriors.size() != data.size()) {
    throw InvalidInputError(
        "breslow_update: posteriors are not aligned with data");
  }
  const auto ties = event_times_with_ties(data);
  const double alpha = params.alpha(0);

  StepHazard hazard;
  hazard.jump_times.reserve(ties.size());
  hazard.increments.reserve(ties.size());
  for (const auto& [time, count] : ties) {
    const Eigen::RowVectorXd x_t = data.front().basis->fixed_basis(time);
    const Eigen::RowVectorXd z_t = data.front().basis->random_basis(time);
    const double xb_base = x_t.dot(params.beta);

    double denom = 0.0;
    for (std::size_t l = 0; l < data.size(); ++l) {
      if (data[l].event_time < time) continue;
      // log E_b[exp{gamma'w + alpha m(time)}] with a max shift over nodes
      const double fixed_part =
          params.gamma.dot(data[l].baseline_covariates) + alpha * xb_base;
      const Eigen::VectorXd zb = posteriors[l].nodes * z_t.transpose();
      const Eigen::ArrayXd ex = alpha * zb.array();
      const double shift = ex.maxCoeff();
      const double mean_exp =
          ((ex - shift).exp() * posteriors[l].weights.array()).sum();
      denom += std::exp(fixed_part + shift) * mean_exp;
    }
    if (!(denom > 0.0) || !std::isfinite(denom)) {
      throw DegenerateRiskSetError(
          "degenerate risk-set denominator at event time " +
          std::to_string(time));
    }
    hazard.jump_times.push_back(time);
    hazard.increments.push_back(static_cast<double>(count) / denom);
  }
  return hazard;
}

}  // namespace jointfit
