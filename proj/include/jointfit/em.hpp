#pragma once

#include <limits>
#include <vector>

#include <Eigen/Core>

#include "jointfit/data.hpp"
#include "jointfit/hazard.hpp"
#include "jointfit/quadrature.hpp"

namespace jointfit {

struct FitConfig {
  int quad_order = 15;
  int max_em_iters = 200;
  double param_tol = 1e-6;    // max absolute parameter change
  double loglik_tol = 1e-8;   // relative observed-loglik change
  int mstep_max_iters = 50;
  // The engine involves no randomness: deterministic reductions, fixed
  // iteration orders.  Kept as an explicit contract flag.
  bool seed_independent = true;

  void validate() const;
};

struct FitResult {
  ModelParams params_hat;
  StepHazard hazard_hat;
  std::vector<double> loglik_trace;  // observed-data loglik per iteration
  int n_iters = 0;
  bool converged = false;

  // Filled by the inference module after the fit.
  Eigen::VectorXd standard_errors;
  Eigen::MatrixXd info_matrix;

  // Convergence diagnostics: max-norm of the summed profile score at exit
  // and the number of post-convergence polish cycles spent reaching the
  // profiling fixed point.
  double final_score_norm = std::numeric_limits<double>::quiet_NaN();
  int n_polish_iters = 0;
};

// Starting values: beta and sigma from a pooled least-squares fit of y on
// the fixed basis, D = I scaled by the residual variance, alpha = gamma
// = 0.  Throws InvalidInputError on a rank-deficient pooled design, naming
// the collinear columns.
ModelParams initialize(const std::vector<SubjectData>& data);

// One M-step at the profiled hazard: joint quasi-Newton ascent over
// (alpha, beta, gamma) on the expected survival + longitudinal terms with
// the hazard and sigma held fixed, then closed-form sigma^2 and D.  Throws
// InternalError if the expected complete-data objective decreased.
// `inv_hessian_state`, when given, carries the BFGS inverse Hessian across
// calls (the engine's warm start).  `entry_score`, when given, receives
// the stacked score sum at the *input* (current, hazard, posteriors)
// state: with the hazard freshly profiled from these posteriors it equals
// the summed profile score of the inference module (the L1/L0 terms
// telescope against the Breslow denominators).
ModelParams m_step(const std::vector<SubjectData>& data,
                   const std::vector<PosteriorSummary>& posteriors,
                   const StepHazard& hazard, const ModelParams& current,
                   const FitConfig& config,
                   Eigen::MatrixXd* inv_hessian_state = nullptr,
                   Eigen::VectorXd* entry_score = nullptr);

// Profile-likelihood EM: { E-step -> hazard update -> M-step } until both
// the parameter-change and loglik-change criteria hold, then polish cycles
// until the hazard is a fixed point of the profiling step and the summed
// profile score is numerically zero.
FitResult fit(const std::vector<SubjectData>& data, const FitConfig& config);

}  // namespace jointfit
