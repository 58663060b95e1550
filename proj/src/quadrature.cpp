#include "jointfit/quadrature.hpp"

#include <cmath>
#include <numbers>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "jointfit/errors.hpp"

namespace jointfit {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// Per-axis probabilists' Gauss-Hermite nodes/weights: eigen-decomposition
// of the Jacobi matrix with off-diagonal sqrt(k); weights are the squared
// first components (mu_0 = 1 for the standard normal weight).
void gh_axis(int order, Eigen::VectorXd& nodes, Eigen::VectorXd& weights) {
  if (order == 1) {
    nodes = Eigen::VectorXd::Zero(1);
    weights = Eigen::VectorXd::Ones(1);
    return;
  }
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(order, order);
  for (int k = 1; k < order; ++k) {
    const double off = std::sqrt(static_cast<double>(k));
    jacobi(k, k - 1) = off;
    jacobi(k - 1, k) = off;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(jacobi);
  if (solver.info() != Eigen::Success) {
    throw NumericalDomainError("Gauss-Hermite eigenproblem failed");
  }
  nodes = solver.eigenvalues();
  weights = solver.eigenvectors().row(0).transpose().array().square();
}

}  // namespace

QuadratureRule gh_rule(int order, int r) {
  if (order < 1 || order > 50) {
    throw InvalidInputError("quadrature order must be in [1, 50]");
  }
  if (r < 1 || r > 3) {
    throw InvalidInputError("random-effects dimension must be in [1, 3]");
  }
  Eigen::VectorXd axis_nodes, axis_weights;
  gh_axis(order, axis_nodes, axis_weights);
  const Eigen::VectorXd axis_logw = axis_weights.array().log();

  Eigen::Index total = 1;
  for (int d = 0; d < r; ++d) total *= order;

  QuadratureRule rule;
  rule.order = order;
  rule.nodes.resize(total, r);
  rule.log_weights.resize(total);
  rule.centered_at = Eigen::VectorXd::Zero(r);
  rule.scale = Eigen::MatrixXd::Identity(r, r);

  for (Eigen::Index q = 0; q < total; ++q) {
    Eigen::Index rem = q;
    double logw = 0.0;
    for (int d = 0; d < r; ++d) {
      const Eigen::Index idx = rem % order;
      rem /= order;
      rule.nodes(q, d) = axis_nodes(idx);
      logw += axis_logw(idx);
    }
    rule.log_weights(q) = logw;
  }
  return rule;
}

QuadratureRule adapt_rule(const QuadratureRule& base,
                          const Eigen::VectorXd& mode,
                          const Eigen::MatrixXd& neg_hessian) {
  const int r = base.dim();
  if (mode.size() != r || neg_hessian.rows() != r || neg_hessian.cols() != r) {
    throw InvalidInputError("adapt_rule: dimension mismatch");
  }
  Eigen::LLT<Eigen::MatrixXd> llt(neg_hessian);
  if (llt.info() != Eigen::Success) {
    throw NumericalDomainError(
        "adapt_rule: negative Hessian is not positive definite");
  }
  const Eigen::MatrixXd chol_lower = llt.matrixL();

  QuadratureRule rule;
  rule.order = base.order;
  rule.centered_at = mode;
  rule.scale = chol_lower;
  // nodes: mode + L^-T u; weights: w * (2pi)^{r/2} det(L)^-1 exp(u'u / 2)
  rule.nodes = chol_lower.transpose()
                   .triangularView<Eigen::Upper>()
                   .solve(base.nodes.transpose())
                   .transpose();
  rule.nodes.rowwise() += mode.transpose();
  const double log_det_l = chol_lower.diagonal().array().log().sum();
  rule.log_weights =
      base.log_weights.array() + 0.5 * r * kLog2Pi - log_det_l +
      0.5 * base.nodes.array().square().rowwise().sum();
  return rule;
}

JumpDesign JumpDesign::of(const StepHazard& hazard, const TimeBasis& basis) {
  const Eigen::Index n_jumps = static_cast<Eigen::Index>(hazard.size());
  JumpDesign design;
  design.times.resize(n_jumps);
  design.x_rows.resize(n_jumps, basis.p);
  design.z_rows.resize(n_jumps, basis.r);
  for (Eigen::Index k = 0; k < n_jumps; ++k) {
    design.times(k) = hazard.jump_times[static_cast<std::size_t>(k)];
    design.x_rows.row(k) = basis.fixed_basis(design.times(k));
    design.z_rows.row(k) = basis.random_basis(design.times(k));
  }
  return design;
}

namespace {

// Shared per-subject evaluation state: the hazard jumps at or before the
// subject's event time with the basis rows at those times, plus D^-1 and
// normalizing constants.
struct SubjectEvalContext {
  const SubjectData& subject;
  const ModelParams& params;

  Eigen::Index n_jumps = 0;    // jumps at or before the event time
  Eigen::MatrixXd jump_z;      // own storage when no shared design given
  const Eigen::MatrixXd* jump_z_all = nullptr;  // shared K_all x r
  Eigen::VectorXd weighted_incs;  // K: inc_k * exp(gamma'w + alpha x_k'beta)
  double alpha = 0.0;
  double delta_const = 0.0;    // delta * (log inc(T) + gamma'w + alpha x(T)'beta)
  Eigen::RowVectorXd delta_z;  // delta * alpha * z(T)
  Eigen::VectorXd resid0;      // y - X beta
  double inv_sigma2 = 0.0;
  Eigen::MatrixXd d_inv;
  double log_norm_const = 0.0; // Gaussian constants of p(y|b) p(b)

  SubjectEvalContext(const SubjectData& subj, const ModelParams& par,
                     const StepHazard& hazard, const JumpDesign* design)
      : subject(subj), params(par) {
    const int r = par.r();
    alpha = par.alpha(0);
    const double gamma_w = par.gamma.dot(subj.baseline_covariates);

    n_jumps = static_cast<Eigen::Index>(
        jumps_at_or_before(hazard, subj.event_time));
    Eigen::VectorXd jump_xb(n_jumps);
    if (design != nullptr) {
      jump_z_all = &design->z_rows;
      jump_xb = design->x_rows.topRows(n_jumps) * par.beta;
    } else {
      jump_z.resize(n_jumps, r);
      for (Eigen::Index k = 0; k < n_jumps; ++k) {
        const double t = hazard.jump_times[static_cast<std::size_t>(k)];
        jump_z.row(k) = subj.basis->random_basis(t);
        jump_xb(k) = subj.basis->fixed_basis(t).dot(par.beta);
      }
      jump_z_all = &jump_z;
    }
    weighted_incs =
        (jump_xb.array() * alpha + gamma_w).exp() *
        Eigen::Map<const Eigen::VectorXd>(hazard.increments.data(), n_jumps)
            .array();

    delta_z = Eigen::RowVectorXd::Zero(r);
    if (subj.event) {
      const std::size_t pos =
          jumps_at_or_before(hazard, subj.event_time);
      if (pos == 0 || hazard.jump_times[pos - 1] != subj.event_time) {
        throw InconsistentHazardError(
            "subject " + subj.id +
            " has an observed event but the hazard has no jump at its "
            "event time");
      }
      delta_const = std::log(hazard.increments[pos - 1]) + gamma_w +
                    alpha * subj.basis->fixed_basis(subj.event_time)
                                .dot(par.beta);
      delta_z = alpha * subj.basis->random_basis(subj.event_time);
    }

    resid0 = subj.y - subj.X * par.beta;
    inv_sigma2 = 1.0 / (par.sigma * par.sigma);

    Eigen::LLT<Eigen::MatrixXd> llt(par.D);
    if (llt.info() != Eigen::Success) {
      throw NumericalDomainError("D must be positive definite");
    }
    d_inv = llt.solve(Eigen::MatrixXd::Identity(r, r));
    const double log_det_d =
        2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
    log_norm_const = -0.5 * subj.n_records() *
                         (kLog2Pi + 2.0 * std::log(par.sigma)) -
                     0.5 * (r * kLog2Pi + log_det_d);
  }

  auto jump_z_rows() const { return jump_z_all->topRows(n_jumps); }

  // log p(T,delta|b) + log p(y|b) + log p(b), all constants included.
  double log_joint(const Eigen::VectorXd& b) const {
    double value = delta_const + delta_z.dot(b);
    if (n_jumps > 0) {
      value -= (weighted_incs.array() *
                (alpha * (jump_z_rows() * b).array()).exp())
                   .sum();
    }
    value -= 0.5 * inv_sigma2 * (resid0 - subject.Z * b).squaredNorm();
    value -= 0.5 * b.dot(d_inv * b);
    return value + log_norm_const;
  }

  // log_joint at every rule node at once.
  Eigen::VectorXd log_joint_at_nodes(const Eigen::MatrixXd& nodes) const {
    const Eigen::Index n_nodes = nodes.rows();
    Eigen::VectorXd values =
        Eigen::VectorXd::Constant(n_nodes, delta_const + log_norm_const);
    values.noalias() += nodes * delta_z.transpose();
    if (n_jumps > 0) {
      // risk_q = sum_k weighted_incs_k exp(alpha zeta_kq)
      const Eigen::MatrixXd zeta = jump_z_rows() * nodes.transpose();  // K x Q
      values.noalias() -=
          ((alpha * zeta.array()).exp().matrix().transpose() * weighted_incs);
    }
    // residual part: columns of resid0 1' - Z B'
    Eigen::MatrixXd resid = (-(subject.Z * nodes.transpose())).colwise() + resid0;
    values.noalias() -=
        0.5 * inv_sigma2 * resid.colwise().squaredNorm().transpose();
    values.noalias() -=
        0.5 * ((nodes * d_inv).array() * nodes.array()).rowwise().sum().matrix();
    return values;
  }

  void gradient_and_neg_hessian(const Eigen::VectorXd& b,
                                Eigen::VectorXd& grad,
                                Eigen::MatrixXd& neg_hess) const {
    grad = delta_z.transpose();
    neg_hess = d_inv + inv_sigma2 * (subject.Z.transpose() * subject.Z);
    if (n_jumps > 0) {
      const auto z_rows = jump_z_rows();
      const Eigen::VectorXd risk =
          (weighted_incs.array() * (alpha * (z_rows * b).array()).exp())
              .matrix();
      grad.noalias() -= alpha * (z_rows.transpose() * risk);
      neg_hess.noalias() += (alpha * alpha) *
                            (z_rows.transpose() * risk.asDiagonal() * z_rows);
    }
    grad.noalias() +=
        inv_sigma2 * (subject.Z.transpose() * (resid0 - subject.Z * b));
    grad.noalias() -= d_inv * b;
  }
};

PosteriorMode find_mode(const SubjectEvalContext& ctx,
                        const std::optional<Eigen::VectorXd>& initial) {
  const int r = ctx.params.r();
  Eigen::VectorXd b = initial.value_or(Eigen::VectorXd::Zero(r));
  if (b.size() != r) {
    throw InvalidInputError("posterior_mode: initial point has wrong size");
  }
  double value = ctx.log_joint(b);
  Eigen::VectorXd grad(r);
  Eigen::MatrixXd neg_hess(r, r);

  constexpr int kMaxIterations = 100;
  constexpr double kGradTol = 1e-8;
  for (int it = 0; it < kMaxIterations; ++it) {
    ctx.gradient_and_neg_hessian(b, grad, neg_hess);
    if (grad.norm() <= kGradTol) {
      PosteriorMode out;
      out.mode = b;
      out.neg_hessian = neg_hess;
      out.iterations = it;
      return out;
    }
    const Eigen::VectorXd step = neg_hess.llt().solve(grad);
    const double slope = grad.dot(step);
    // Inside the quadratic-convergence basin the attainable improvement
    // falls below the evaluation noise of log_joint; the Armijo test is
    // meaningless there, so take the plain Newton step.
    if (slope <= 1e-12 * (1.0 + std::abs(value))) {
      b += step;
      value = ctx.log_joint(b);
      continue;
    }
    double stepsize = 1.0;
    bool accepted = false;
    for (int half = 0; half < 60; ++half) {
      const Eigen::VectorXd candidate = b + stepsize * step;
      const double cand_value = ctx.log_joint(candidate);
      if (std::isfinite(cand_value) &&
          cand_value >= value + 1e-4 * stepsize * slope) {
        b = candidate;
        value = cand_value;
        accepted = true;
        break;
      }
      stepsize *= 0.5;
    }
    if (!accepted) {
      throw OptimizationFailureError(
          "posterior_mode: line search failed for subject " + ctx.subject.id,
          b);
    }
  }
  throw OptimizationFailureError(
      "posterior_mode: no convergence in 100 iterations for subject " +
          ctx.subject.id,
      b);
}

PosteriorSummary e_step_from_context(const SubjectEvalContext& ctx,
                                     const QuadratureRule& base,
                                     const std::optional<Eigen::VectorXd>&
                                         initial_mode) {
  const PosteriorMode mode = find_mode(ctx, initial_mode);
  const QuadratureRule rule = adapt_rule(base, mode.mode, mode.neg_hessian);

  Eigen::VectorXd log_terms = rule.log_weights;
  log_terms += ctx.log_joint_at_nodes(rule.nodes);
  const double shift = log_terms.maxCoeff();
  if (!std::isfinite(shift)) {
    throw NumericalDomainError(
        "e_step_subject: posterior underflowed at every node for subject " +
        ctx.subject.id);
  }
  const Eigen::ArrayXd scaled = (log_terms.array() - shift).exp();
  const double total = scaled.sum();

  PosteriorSummary summary;
  summary.subject_id = ctx.subject.id;
  summary.log_normalizer = shift + std::log(total);
  summary.nodes = rule.nodes;
  summary.weights = (scaled / total).matrix();
  summary.mean = summary.nodes.transpose() * summary.weights;
  summary.second_moment =
      summary.nodes.transpose() * summary.weights.asDiagonal() * summary.nodes;
  return summary;
}

}  // namespace

PosteriorMode posterior_mode(const SubjectData& subject,
                             const ModelParams& params,
                             const StepHazard& hazard,
                             const std::optional<Eigen::VectorXd>& initial) {
  SubjectEvalContext ctx(subject, params, hazard, nullptr);
  return find_mode(ctx, initial);
}

PosteriorSummary e_step_subject_with_rule(
    const SubjectData& subject, const ModelParams& params,
    const StepHazard& hazard, const QuadratureRule& base,
    const std::optional<Eigen::VectorXd>& initial_mode) {
  if (base.dim() != params.r()) {
    throw InvalidInputError("e_step_subject: quadrature dimension mismatch");
  }
  SubjectEvalContext ctx(subject, params, hazard, nullptr);
  return e_step_from_context(ctx, base, initial_mode);
}

PosteriorSummary e_step_subject_cached(
    const SubjectData& subject, const ModelParams& params,
    const StepHazard& hazard, const JumpDesign& design,
    const QuadratureRule& base,
    const std::optional<Eigen::VectorXd>& initial_mode) {
  if (base.dim() != params.r()) {
    throw InvalidInputError("e_step_subject: quadrature dimension mismatch");
  }
  SubjectEvalContext ctx(subject, params, hazard, &design);
  return e_step_from_context(ctx, base, initial_mode);
}

PosteriorSummary e_step_subject(
    const SubjectData& subject, const ModelParams& params,
    const StepHazard& hazard, int order,
    const std::optional<Eigen::VectorXd>& initial_mode) {
  return e_step_subject_with_rule(subject, params, hazard,
                                  gh_rule(order, params.r()), initial_mode);
}

}  // namespace jointfit
