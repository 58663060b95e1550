#pragma once

#include <vector>

#include <Eigen/Core>

#include "jointfit/data.hpp"
#include "jointfit/hazard.hpp"
#include "jointfit/quadrature.hpp"

namespace jointfit {

// Per-subject profile score in stacked theta order.  The survival part has
// structural zeros in the sigma and vech(D) directions; the longitudinal
// part lives in (beta, sigma); the random-effects part in vech(D).
struct ScoreVector {
  ThetaLayout layout;
  Eigen::VectorXd stacked;

  explicit ScoreVector(const ThetaLayout& lay)
      : layout(lay), stacked(Eigen::VectorXd::Zero(lay.total())) {}

  auto survival_block() { return stacked.head(layout.survival_dim()); }
  auto alpha_block() { return stacked.segment(layout.alpha_offset(), layout.p_alpha); }
  auto beta_block() { return stacked.segment(layout.beta_offset(), layout.p_beta); }
  auto gamma_block() { return stacked.segment(layout.gamma_offset(), layout.p_gamma); }
  double& sigma_component() { return stacked(layout.sigma_offset()); }
  auto d_block() {
    return stacked.segment(layout.d_offset(), layout.r * (layout.r + 1) / 2);
  }
};

// L0(u) = (1/n) sum_l 1{T_l >= u} E_b[exp{gamma'w_l + alpha m_l(u)}] and
// the matching vector functional L1 over the (alpha, beta, gamma)
// directions (m_l(u), alpha x(u), w_l).  `degenerate` marks u beyond every
// T_l; callers must not divide by L0 then.
struct L0L1 {
  double L0 = 0.0;
  Eigen::VectorXd L1;
  bool degenerate = false;
};

L0L1 l0_l1(const std::vector<SubjectData>& data, const ModelParams& params,
           const std::vector<PosteriorSummary>& posteriors, double u);

// L0/L1 evaluated once per hazard jump time, shared read-only by the
// per-subject scores.
struct L0L1Table {
  std::vector<double> times;  // = hazard jump times
  Eigen::VectorXd L0;         // K
  Eigen::MatrixXd L1;         // K x survival_dim
};

L0L1Table build_l0_l1_table(const std::vector<SubjectData>& data,
                            const ModelParams& params,
                            const std::vector<PosteriorSummary>& posteriors,
                            const StepHazard& hazard);

// Survival profile score (alpha, beta, gamma directions; zeros elsewhere):
//   E_b[delta {v(T) - L1(T)/L0(T)}]
//   - E_b[int_0^T {v(s) - L1(s)/L0(s)} exp{gamma'w + alpha m(s)} dLambda(s)]
// with v(s) = (m(s), alpha x(s), w).  Returned stacked to full theta
// length.
Eigen::VectorXd survival_score(const SubjectData& subject,
                               const ModelParams& params,
                               const StepHazard& hazard,
                               const L0L1Table& table,
                               const PosteriorSummary& posterior);

// Convenience overload building the L0/L1 table internally.
Eigen::VectorXd survival_score(const SubjectData& subject,
                               const ModelParams& params,
                               const StepHazard& hazard,
                               const std::vector<SubjectData>& data,
                               const std::vector<PosteriorSummary>& posteriors);

// Same score with the hazard held fixed (no L1/L0 terms): the gradient of
// the expected survival log-likelihood the M-step ascends.
Eigen::VectorXd survival_score_restricted(const SubjectData& subject,
                                          const ModelParams& params,
                                          const StepHazard& hazard,
                                          const PosteriorSummary& posterior);

// d/dtheta E_b[log p(y|b;theta)]: beta and sigma directions, zeros
// elsewhere.
Eigen::VectorXd longitudinal_score(const SubjectData& subject,
                                   const ModelParams& params,
                                   const PosteriorSummary& posterior);

// d/dvech(D) E_b[log p(b;theta)] =
//   vech-duplication of (1/2)(D^-1 E[bb'] D^-1 - D^-1), off-diagonals
//   doubled; zeros elsewhere.
Eigen::VectorXd random_effects_score(const ModelParams& params,
                                     const PosteriorSummary& posterior);

// n x dim matrix of stacked per-subject profile scores
// (survival + longitudinal + random effects).
Eigen::MatrixXd subject_scores(const std::vector<SubjectData>& data,
                               const ModelParams& params,
                               const StepHazard& hazard,
                               const std::vector<PosteriorSummary>& posteriors);

struct EfficientInfo {
  Eigen::MatrixXd matrix;            // (1/n) sum_i S_i S_i', symmetric PSD
  double condition_estimate = 0.0;   // lambda_max / lambda_min
};

// Outer-product average of per-subject scores; `scores` has one row per
// subject.
EfficientInfo info_from_scores(const Eigen::MatrixXd& scores);

EfficientInfo efficient_information(
    const std::vector<SubjectData>& data, const ModelParams& params,
    const StepHazard& hazard, const std::vector<PosteriorSummary>& posteriors);

// sqrt of the diagonal of (n * I)^-1 in stacked theta order.  Throws
// SingularInformationError when the smallest eigenvalue of I is <= 1e-10.
Eigen::VectorXd standard_errors(const EfficientInfo& info, Eigen::Index n);

// Full post-fit inference at (theta_hat, Lambda_hat): runs the E-step at
// the fitted values and assembles the information matrix and standard
// errors.
struct InferenceResult {
  EfficientInfo info;
  Eigen::VectorXd ses;
};

InferenceResult efficient_inference(const std::vector<SubjectData>& data,
                                    const ModelParams& params,
                                    const StepHazard& hazard, int quad_order);

}  // namespace jointfit
