#pragma once

#include <vector>

#include <Eigen/Core>

#include "jointfit/data.hpp"
#include "jointfit/hazard.hpp"

namespace jointfit {

struct QuadratureRule;  // quadrature.hpp

// m_i(t) = x_i(t)'beta + z_i(t)'b.
double trajectory_mean(const SubjectData& subject, const ModelParams& params,
                       const Eigen::VectorXd& b, double t);

// log p(y_i | b; theta): Gaussian product over the subject's records,
//   -(n_i/2) log(2 pi sigma^2) - sum_j (y_ij - m_i(t_ij))^2 / (2 sigma^2).
double log_density_longitudinal(const SubjectData& subject,
                                const ModelParams& params,
                                const Eigen::VectorXd& b);

// log p(b; theta) = -(r/2) log(2 pi) - (1/2) log det D - (1/2) b'D^-1 b.
double log_density_random(const ModelParams& params, const Eigen::VectorXd& b);

// log p(T_i, delta_i | b; theta, Lambda) with the step hazard:
//   delta * [log dLambda(T) + gamma'w + alpha'm(T)]
//   - sum_{t_k <= T} exp{gamma'w + alpha'm(t_k)} dLambda_k.
// Throws InconsistentHazardError when delta = 1 but Lambda has no jump
// at T.
double log_density_event(const SubjectData& subject, const ModelParams& params,
                         const StepHazard& hazard, const Eigen::VectorXd& b);

// Observed-data log-likelihood: sum_i log of the b-integral of the three
// factors, each integral by adaptive quadrature on the given base rule.
// The per-subject terms are accumulated in sorted order, so the result is
// invariant under subject reordering.
double observed_data_loglik(const std::vector<SubjectData>& data,
                            const ModelParams& params,
                            const StepHazard& hazard,
                            const QuadratureRule& quad);

}  // namespace jointfit
