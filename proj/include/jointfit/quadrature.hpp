#pragma once

#include <optional>
#include <string>

#include <Eigen/Core>

#include "jointfit/data.hpp"
#include "jointfit/hazard.hpp"

namespace jointfit {

// Tensor-product Gauss-Hermite rule.  Uncentered (centered_at = 0,
// scale = I) it integrates against the standard Gaussian density:
//   sum_q exp(log_weights[q]) * g(nodes.row(q))  ~  E_{N(0,I)}[g],
// exact for polynomials up to degree 2*order-1 per axis.  After
// adapt_rule() it targets the plain integral of g over R^r instead.
struct QuadratureRule {
  int order = 0;
  Eigen::MatrixXd nodes;        // (order^r) x r, row per node
  Eigen::VectorXd log_weights;  // order^r
  Eigen::VectorXd centered_at;  // r
  Eigen::MatrixXd scale;        // r x r lower-triangular Cholesky factor of
                                // the centering precision (I when uncentered)

  Eigen::Index size() const { return nodes.rows(); }
  int dim() const { return static_cast<int>(nodes.cols()); }
};

// Uncentered rule via the Golub-Welsch eigenproblem.  1 <= order <= 50,
// 1 <= r <= 3.
QuadratureRule gh_rule(int order, int r);

// Recenter `base` (which must be uncentered) on a Laplace approximation
// with the given mode and negative Hessian H = LL': nodes move to
// mode + L^-T u and the log-weights absorb the Gaussian importance ratio,
// so sum_q exp(log_weights[q]) g(nodes.row(q)) ~ integral of g.
QuadratureRule adapt_rule(const QuadratureRule& base,
                          const Eigen::VectorXd& mode,
                          const Eigen::MatrixXd& neg_hessian);

struct PosteriorMode {
  Eigen::VectorXd mode;
  Eigen::MatrixXd neg_hessian;  // positive definite at the mode
  int iterations = 0;
};

// Maximizes b -> log p(T,delta|b) + log p(y|b) + log p(b) by damped Newton
// (the objective is strictly concave).  Exits when the gradient 2-norm is
// <= 1e-8; throws OptimizationFailureError after 100 iterations.
PosteriorMode posterior_mode(
    const SubjectData& subject, const ModelParams& params,
    const StepHazard& hazard,
    const std::optional<Eigen::VectorXd>& initial = std::nullopt);

// Quadrature-based posterior of b given (T, delta, y): normalizer, moments,
// and an expectation functional over the stored nodes and normalized
// weights.
struct PosteriorSummary {
  std::string subject_id;
  double log_normalizer = 0.0;   // log of int p(T,delta|b) p(y|b) p(b) db
  Eigen::VectorXd mean;          // E[b | data]
  Eigen::MatrixXd second_moment; // E[b b' | data]
  Eigen::MatrixXd nodes;         // Q x r
  Eigen::VectorXd weights;       // Q, normalized to sum 1

  // E[g(b) | data] for any node-wise functional g.
  template <class F>
  double expectation(F&& g) const {
    double acc = 0.0;
    for (Eigen::Index q = 0; q < nodes.rows(); ++q) {
      acc += weights(q) * static_cast<double>(g(Eigen::VectorXd(nodes.row(q))));
    }
    return acc;
  }
};

// E-step for one subject: find the mode, adapt the rule, evaluate the
// unnormalized posterior at all nodes in log space.  `initial_mode` warm
// starts the Newton search (the engine passes the previous iteration's
// mode).
PosteriorSummary e_step_subject(
    const SubjectData& subject, const ModelParams& params,
    const StepHazard& hazard, int order,
    const std::optional<Eigen::VectorXd>& initial_mode = std::nullopt);

// Same computation with a caller-provided base rule, reused across
// subjects.
PosteriorSummary e_step_subject_with_rule(
    const SubjectData& subject, const ModelParams& params,
    const StepHazard& hazard, const QuadratureRule& base,
    const std::optional<Eigen::VectorXd>& initial_mode = std::nullopt);

// Basis rows evaluated at the hazard jump times; the jump times of the
// profiled hazard never change across EM iterations, so the engine builds
// this once per fit and shares it across subjects and iterations.
struct JumpDesign {
  Eigen::VectorXd times;   // K
  Eigen::MatrixXd x_rows;  // K x p
  Eigen::MatrixXd z_rows;  // K x r

  static JumpDesign of(const StepHazard& hazard, const TimeBasis& basis);
};

PosteriorSummary e_step_subject_cached(
    const SubjectData& subject, const ModelParams& params,
    const StepHazard& hazard, const JumpDesign& design,
    const QuadratureRule& base,
    const std::optional<Eigen::VectorXd>& initial_mode = std::nullopt);

}  // namespace jointfit
