#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Core>

#include "jointfit/data.hpp"
#include "jointfit/errors.hpp"

namespace jointfit {

struct PosteriorSummary;  // quadrature.hpp

// NPMLE cumulative baseline hazard: a nondecreasing right-continuous step
// function with mass only at observed event times.
struct StepHazard {
  std::vector<double> jump_times;  // strictly increasing, > 0
  std::vector<double> increments;  // >= 0, aligned with jump_times

  std::size_t size() const { return jump_times.size(); }

  // Throws InvalidInputError when the step-function invariants fail.
  void validate() const;
};

// Lambda(t): sum of increments with jump time <= t (right-continuous).
double cum_at(const StepHazard& hazard, double t);

// Number of jump times <= t.
std::size_t jumps_at_or_before(const StepHazard& hazard, double t);

// int_0^upper f dLambda = sum over jumps t_k <= upper of f(t_k) * inc_k.
template <class F>
double integral_against(const StepHazard& hazard, F&& f, double upper) {
  double acc = 0.0;
  for (std::size_t k = 0; k < hazard.size(); ++k) {
    if (hazard.jump_times[k] > upper) break;
    acc += static_cast<double>(f(hazard.jump_times[k])) * hazard.increments[k];
  }
  return acc;
}

// Vector-valued variant; `dim` fixes the result size when no jump
// contributes.
template <class F>
Eigen::VectorXd integral_against_vec(const StepHazard& hazard, F&& f,
                                     double upper, Eigen::Index dim) {
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(dim);
  for (std::size_t k = 0; k < hazard.size(); ++k) {
    if (hazard.jump_times[k] > upper) break;
    acc += hazard.increments[k] * f(hazard.jump_times[k]);
  }
  return acc;
}

// Covariate-free special case d_k / #at-risk; also the engine's starting
// hazard.
StepHazard nelson_aalen(const std::vector<SubjectData>& data);

// Profiled NPMLE update: increment at each distinct event time t_k is
//   d_k / sum_{l: T_l >= t_k} E_b[exp{gamma'w_l + alpha'm_l(t_k)}],
// tied events share one jump, E_b taken under each subject's posterior.
StepHazard breslow_update(const std::vector<SubjectData>& data,
                          const ModelParams& params,
                          const std::vector<PosteriorSummary>& posteriors);

}  // namespace jointfit
