#include "jointfit/em.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include "jointfit/errors.hpp"
#include "jointfit/inference.hpp"
#include "jointfit/parallel.hpp"

namespace jointfit {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kMStepGradTol = 1e-9;  // well inside the 1e-7 contract
// Polish-phase exits: the tight target, a fallback accepted once the EM
// contraction has had time to flatten, and a hard cap.
constexpr double kPolishScoreTol = 2e-5;
constexpr double kPolishScoreFallback = 8e-5;
constexpr int kPolishFallbackAfter = 30;
constexpr double kPolishHazardTol = 1e-11;
constexpr int kMaxPolishIters = 150;

void check_dataset(const std::vector<SubjectData>& data) {
  if (data.empty()) throw InvalidInputError("fit: empty dataset");
  const auto& first = data.front();
  for (const auto& subject : data) {
    if (!subject.basis) throw InvalidInputError("fit: subject without basis");
    if (subject.basis->p != first.basis->p ||
        subject.basis->r != first.basis->r) {
      throw InvalidInputError("fit: subjects use inconsistent bases");
    }
    if (subject.baseline_covariates.size() !=
        first.baseline_covariates.size()) {
      throw InvalidInputError(
          "fit: subjects have inconsistent baseline covariate lengths");
    }
  }
}

// Expected survival + longitudinal objective over (alpha, beta, gamma)
// with the profiled hazard and sigma held fixed, plus its gradient.  All
// per-subject pieces are reduced in index order, so evaluations are
// deterministic regardless of thread scheduling.
class MStepEvaluator {
 public:
  MStepEvaluator(const std::vector<SubjectData>& data,
                 const std::vector<PosteriorSummary>& posteriors,
                 const StepHazard& hazard, const ModelParams& current)
      : data_(data), posteriors_(posteriors), layout_(ThetaLayout::of(current)) {
    const int n = static_cast<int>(data.size());
    const int p = layout_.p_beta;
    const int pg = layout_.p_gamma;
    const int r = layout_.r;
    const auto& basis = *data.front().basis;

    const Eigen::Index n_jumps = static_cast<Eigen::Index>(hazard.size());
    jump_x_.resize(n_jumps, p);
    incs_.resize(n_jumps);
    for (Eigen::Index k = 0; k < n_jumps; ++k) {
      jump_x_.row(k) = basis.fixed_basis(hazard.jump_times[k]);
      incs_(k) = hazard.increments[k];
    }

    zeta_.resize(n);
    prefix_.resize(n);
    delta_loginc_.assign(n, 0.0);
    z_t_mean_.assign(n, 0.0);
    x_t_.resize(n, p);
    w_.resize(n, pg);
    deltas_.resize(n);

    pooled_gram_ = Eigen::MatrixXd::Zero(p, p);
    pooled_xty_ = Eigen::VectorXd::Zero(p);
    second_moment_sum_ = Eigen::MatrixXd::Zero(r, r);

    Eigen::MatrixXd jump_z(n_jumps, r);
    for (Eigen::Index k = 0; k < n_jumps; ++k) {
      jump_z.row(k) = basis.random_basis(hazard.jump_times[k]);
    }

    for (int i = 0; i < n; ++i) {
      const auto& subject = data[static_cast<std::size_t>(i)];
      const auto& post = posteriors[static_cast<std::size_t>(i)];
      const std::size_t n_pref = jumps_at_or_before(hazard, subject.event_time);
      prefix_[i] = static_cast<Eigen::Index>(n_pref);
      zeta_[i] = jump_z.topRows(static_cast<Eigen::Index>(n_pref)) *
                 post.nodes.transpose();  // K_i x Q

      deltas_(i) = subject.event ? 1.0 : 0.0;
      if (subject.event) {
        if (n_pref == 0 ||
            hazard.jump_times[n_pref - 1] != subject.event_time) {
          throw InconsistentHazardError(
              "m_step: subject " + subject.id +
              " has an event with no hazard jump at its event time");
        }
        delta_loginc_[i] = std::log(hazard.increments[n_pref - 1]);
      }
      x_t_.row(i) = basis.fixed_basis(subject.event_time);
      z_t_mean_[i] = basis.random_basis(subject.event_time).dot(post.mean);
      w_.row(i) = subject.baseline_covariates.transpose();

      pooled_gram_.noalias() += subject.X.transpose() * subject.X;
      pooled_xty_.noalias() +=
          subject.X.transpose() * (subject.y - subject.Z * post.mean);
      const Eigen::VectorXd base_resid = subject.y - subject.Z * post.mean;
      base_ssr_ += base_resid.squaredNorm();
      const Eigen::MatrixXd cov =
          post.second_moment - post.mean * post.mean.transpose();
      trace_term_ +=
          (subject.Z.transpose() * subject.Z).cwiseProduct(cov).sum();
      second_moment_sum_ += post.second_moment;
      n_records_ += subject.n_records();
    }
  }

  struct Eval {
    double survival = 0.0;  // expected survival log-likelihood part
    double ssr = 0.0;       // sum ||y - X beta - Z mu||^2 at this beta
    Eigen::VectorXd gradient;  // over (alpha, beta, gamma), both terms
  };

  // x = (alpha, beta, gamma); sigma fixed at `sigma`.
  Eval eval(const Eigen::VectorXd& x, double sigma) const {
    const int p = layout_.p_beta;
    const int pg = layout_.p_gamma;
    const int n = static_cast<int>(data_.size());
    const double alpha = x(0);
    const Eigen::VectorXd beta = x.segment(1, p);
    const Eigen::VectorXd gamma = x.tail(pg);

    const Eigen::VectorXd jump_xb = jump_x_ * beta;

    // per-subject partial rows: (survival, g_alpha, g_beta..., g_gamma...)
    Eigen::MatrixXd partials =
        Eigen::MatrixXd::Zero(n, 2 + p + pg);
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
      const Eigen::Index k_i = prefix_[i];
      const double gw = w_.row(static_cast<Eigen::Index>(i)).dot(gamma);
      double s0 = 0.0, s_alpha = 0.0;
      Eigen::VectorXd s_beta = Eigen::VectorXd::Zero(p);
      if (k_i > 0) {
        const auto& zeta = zeta_[i];
        const Eigen::MatrixXd risk_exp = (alpha * zeta.array()).exp();
        const Eigen::VectorXd a_vec =
            risk_exp * posteriors_[i].weights;  // K_i
        const Eigen::VectorXd b_vec =
            (zeta.array() * risk_exp.array()).matrix() *
            posteriors_[i].weights;
        const Eigen::ArrayXd scale =
            incs_.head(k_i).array() *
            (gw + alpha * jump_xb.head(k_i).array()).exp();
        s0 = (scale * a_vec.array()).sum();
        s_alpha = (scale * (jump_xb.head(k_i).array() * a_vec.array() +
                            b_vec.array()))
                      .sum();
        s_beta.noalias() = alpha * (jump_x_.topRows(k_i).transpose() *
                                    (scale * a_vec.array()).matrix());
      }
      const double delta = deltas_(static_cast<Eigen::Index>(i));
      const double mean_m_t =
          x_t_.row(static_cast<Eigen::Index>(i)).dot(beta) + z_t_mean_[i];
      double row_surv =
          delta * (delta_loginc_[i] + gw + alpha * mean_m_t) - s0;
      partials(static_cast<Eigen::Index>(i), 0) = row_surv;
      partials(static_cast<Eigen::Index>(i), 1) = delta * mean_m_t - s_alpha;
      partials.row(static_cast<Eigen::Index>(i)).segment(2, p) =
          (delta * alpha) * x_t_.row(static_cast<Eigen::Index>(i)) -
          s_beta.transpose();
      partials.row(static_cast<Eigen::Index>(i)).tail(pg) =
          (delta - s0) * w_.row(static_cast<Eigen::Index>(i));
    });

    const Eigen::VectorXd sums = partials.colwise().sum();

    Eval out;
    out.gradient.resize(1 + p + pg);
    out.survival = sums(0);
    out.gradient(0) = sums(1);
    out.gradient.segment(1, p) = sums.segment(2, p);
    out.gradient.tail(pg) = sums.tail(pg);

    out.ssr = base_ssr_ - 2.0 * pooled_xty_.dot(beta) +
              beta.dot(pooled_gram_ * beta);
    const double inv_sigma2 = 1.0 / (sigma * sigma);
    out.gradient.segment(1, p) +=
        inv_sigma2 * (pooled_xty_ - pooled_gram_ * beta);
    return out;
  }

  // Ascent objective for fixed sigma (additive sigma-only constants
  // dropped).
  double objective(const Eval& e, double sigma) const {
    return e.survival - 0.5 * e.ssr / (sigma * sigma);
  }

  // Full expected complete-data log-likelihood at (x, sigma, D), used for
  // the monotonicity check.
  double full_q(const Eval& e, double sigma, const Eigen::MatrixXd& d_mat) const {
    const int n = static_cast<int>(data_.size());
    const int r = layout_.r;
    Eigen::LLT<Eigen::MatrixXd> llt(d_mat);
    if (llt.info() != Eigen::Success) {
      throw NumericalDomainError("m_step: D is not positive definite");
    }
    const double log_det =
        2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
    const Eigen::MatrixXd d_inv =
        llt.solve(Eigen::MatrixXd::Identity(r, r));
    double value = e.survival;
    value -= 0.5 * (e.ssr + trace_term_) / (sigma * sigma);
    value -= 0.5 * n_records_ * (kLog2Pi + 2.0 * std::log(sigma));
    value -= 0.5 * n * (r * kLog2Pi + log_det);
    value -= 0.5 * d_inv.cwiseProduct(second_moment_sum_).sum();
    return value;
  }

  double closed_form_sigma2(const Eval& e) const {
    return (e.ssr + trace_term_) / n_records_;
  }

  Eigen::MatrixXd closed_form_d() const {
    return second_moment_sum_ / static_cast<double>(data_.size());
  }

  // Stacked score sum at (x, sigma, D): the (alpha, beta, gamma) head is
  // e.gradient; the sigma and vech(D) components are the closed-form
  // stationarity residuals.
  Eigen::VectorXd score_stacked(const Eval& e, double sigma,
                                const Eigen::MatrixXd& d_mat) const {
    const int r = layout_.r;
    Eigen::VectorXd score = Eigen::VectorXd::Zero(layout_.total());
    score.head(layout_.survival_dim()) = e.gradient;
    score(layout_.sigma_offset()) =
        -n_records_ / sigma + (e.ssr + trace_term_) / (sigma * sigma * sigma);
    Eigen::LLT<Eigen::MatrixXd> llt(d_mat);
    if (llt.info() != Eigen::Success) {
      throw NumericalDomainError("m_step: D is not positive definite");
    }
    const Eigen::MatrixXd d_inv = llt.solve(Eigen::MatrixXd::Identity(r, r));
    const Eigen::MatrixXd grad =
        0.5 * (d_inv * second_moment_sum_ * d_inv -
               static_cast<double>(data_.size()) * d_inv);
    int k = layout_.d_offset();
    for (int j = 0; j < r; ++j) {
      for (int i = j; i < r; ++i) {
        score(k++) = (i == j) ? grad(i, j) : 2.0 * grad(i, j);
      }
    }
    return score;
  }

 private:
  const std::vector<SubjectData>& data_;
  const std::vector<PosteriorSummary>& posteriors_;
  ThetaLayout layout_;

  Eigen::MatrixXd jump_x_;  // K x p
  Eigen::VectorXd incs_;    // K
  std::vector<Eigen::MatrixXd> zeta_;  // per subject, K_i x Q
  std::vector<Eigen::Index> prefix_;
  std::vector<double> delta_loginc_;
  std::vector<double> z_t_mean_;
  Eigen::MatrixXd x_t_;  // n x p
  Eigen::MatrixXd w_;    // n x p_gamma
  Eigen::VectorXd deltas_;

  Eigen::MatrixXd pooled_gram_;
  Eigen::VectorXd pooled_xty_;
  double base_ssr_ = 0.0;
  double trace_term_ = 0.0;
  Eigen::MatrixXd second_moment_sum_;
  double n_records_ = 0.0;
};

}  // namespace

void FitConfig::validate() const {
  if (quad_order < 1 || quad_order > 50) {
    throw InvalidInputError("quad_order must be in [1, 50]");
  }
  if (max_em_iters < 1) throw InvalidInputError("max_em_iters must be >= 1");
  if (mstep_max_iters < 1) {
    throw InvalidInputError("mstep_max_iters must be >= 1");
  }
  if (!(param_tol > 0.0) || !(loglik_tol > 0.0)) {
    throw InvalidInputError("tolerances must be positive");
  }
}

ModelParams initialize(const std::vector<SubjectData>& data) {
  check_dataset(data);
  const int p = data.front().basis->p;
  const int r = data.front().basis->r;
  Eigen::Index n_total = 0;
  for (const auto& subject : data) n_total += subject.n_records();

  Eigen::MatrixXd pooled_x(n_total, p);
  Eigen::VectorXd pooled_y(n_total);
  Eigen::Index row = 0;
  for (const auto& subject : data) {
    pooled_x.middleRows(row, subject.n_records()) = subject.X;
    pooled_y.segment(row, subject.n_records()) = subject.y;
    row += subject.n_records();
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(pooled_x);
  if (qr.rank() < p) {
    std::string cols;
    const auto perm = qr.colsPermutation().indices();
    for (Eigen::Index j = qr.rank(); j < p; ++j) {
      if (!cols.empty()) cols += ", ";
      cols += std::to_string(perm(j));
    }
    throw InvalidInputError(
        "initialize: pooled fixed-effect design is rank deficient; collinear "
        "fixed-basis columns: " + cols);
  }
  const Eigen::VectorXd beta = qr.solve(pooled_y);
  const double ssr = (pooled_y - pooled_x * beta).squaredNorm();
  const double dof = static_cast<double>(std::max<Eigen::Index>(1, n_total - p));
  const double s2 = std::max(ssr / dof, 1e-12);

  ModelParams params;
  params.alpha = Eigen::VectorXd::Zero(1);
  params.beta = beta;
  params.gamma =
      Eigen::VectorXd::Zero(data.front().baseline_covariates.size());
  params.sigma = std::sqrt(s2);
  params.D = s2 * Eigen::MatrixXd::Identity(r, r);
  return params;
}

ModelParams m_step(const std::vector<SubjectData>& data,
                   const std::vector<PosteriorSummary>& posteriors,
                   const StepHazard& hazard, const ModelParams& current,
                   const FitConfig& config,
                   Eigen::MatrixXd* inv_hessian_state,
                   Eigen::VectorXd* entry_score) {
  if (posteriors.size() != data.size()) {
    throw InvalidInputError("m_step: posteriors are not aligned with data");
  }
  const ThetaLayout layout = ThetaLayout::of(current);
  const MStepEvaluator evaluator(data, posteriors, hazard, current);
  const double sigma_fixed = current.sigma;

  // BFGS ascent on (alpha, beta, gamma)
  const int dim = 1 + layout.p_beta + layout.p_gamma;
  Eigen::VectorXd x(dim);
  x(0) = current.alpha(0);
  x.segment(1, layout.p_beta) = current.beta;
  x.tail(layout.p_gamma) = current.gamma;

  MStepEvaluator::Eval e = evaluator.eval(x, sigma_fixed);
  const MStepEvaluator::Eval e_start = e;
  double value = evaluator.objective(e, sigma_fixed);
  if (entry_score != nullptr) {
    *entry_score = evaluator.score_stacked(e_start, current.sigma, current.D);
  }

  Eigen::MatrixXd inv_hessian = Eigen::MatrixXd::Identity(dim, dim);
  bool scaled = false;
  if (inv_hessian_state != nullptr && inv_hessian_state->rows() == dim &&
      inv_hessian_state->cols() == dim) {
    inv_hessian = *inv_hessian_state;
    scaled = true;
  }
  for (int it = 0; it < config.mstep_max_iters; ++it) {
    if (e.gradient.norm() <= kMStepGradTol) break;
    Eigen::VectorXd direction = inv_hessian * e.gradient;
    if (direction.dot(e.gradient) <= 0.0) {
      inv_hessian = Eigen::MatrixXd::Identity(dim, dim);
      direction = e.gradient;
    }
    const double slope = e.gradient.dot(direction);
    Eigen::VectorXd x_new;
    MStepEvaluator::Eval e_new;
    double value_new = 0.0;
    // Below the evaluation noise of the objective the sufficient-decrease
    // test cannot discriminate; take the unguarded quasi-Newton step.
    if (slope <= 1e-12 * (1.0 + std::abs(value))) {
      x_new = x + direction;
      e_new = evaluator.eval(x_new, sigma_fixed);
      value_new = evaluator.objective(e_new, sigma_fixed);
      if (!std::isfinite(value_new)) break;
    } else {
      double step = 1.0;
      bool accepted = false;
      for (int half = 0; half < 60; ++half) {
        x_new = x + step * direction;
        e_new = evaluator.eval(x_new, sigma_fixed);
        value_new = evaluator.objective(e_new, sigma_fixed);
        if (std::isfinite(value_new) &&
            value_new >= value + 1e-4 * step * slope) {
          accepted = true;
          break;
        }
        step *= 0.5;
      }
      if (!accepted) break;  // no further ascent possible at this scale
    }

    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd y_diff = e.gradient - e_new.gradient;  // -grad(h) diff
    x = x_new;
    e = e_new;
    value = value_new;
    const double sy = s.dot(y_diff);
    if (sy > 1e-12 * s.norm() * y_diff.norm()) {
      if (!scaled) {
        inv_hessian *= sy / y_diff.squaredNorm();
        scaled = true;
      }
      const Eigen::MatrixXd identity = Eigen::MatrixXd::Identity(dim, dim);
      const Eigen::MatrixXd left = identity - s * y_diff.transpose() / sy;
      inv_hessian = left * inv_hessian * left.transpose() +
                    s * s.transpose() / sy;
    }
  }

  if (inv_hessian_state != nullptr) *inv_hessian_state = inv_hessian;

  const double sigma2_new = evaluator.closed_form_sigma2(e);
  const Eigen::MatrixXd d_new = evaluator.closed_form_d();

  ModelParams next;
  next.alpha = x.head(1);
  next.beta = x.segment(1, layout.p_beta);
  next.gamma = x.tail(layout.p_gamma);
  next.sigma = std::sqrt(sigma2_new);
  next.D = d_new;

  const double q_old = evaluator.full_q(e_start, current.sigma, current.D);
  const double q_new = evaluator.full_q(e, next.sigma, next.D);
  if (q_new < q_old - 1e-8 * (1.0 + std::abs(q_old))) {
    throw InternalError(
        "m_step: expected complete-data objective decreased (" +
        std::to_string(q_old) + " -> " + std::to_string(q_new) +
        "); gradient or update is inconsistent");
  }
  return next;
}

FitResult fit(const std::vector<SubjectData>& data, const FitConfig& config) {
  config.validate();
  check_dataset(data);
  long n_events = 0;
  for (const auto& subject : data) n_events += subject.event ? 1 : 0;
  if (n_events < 1) {
    throw InvalidInputError("fit: needs at least one observed event");
  }

  const std::size_t n = data.size();
  ModelParams params = initialize(data);
  StepHazard hazard = nelson_aalen(data);
  const QuadratureRule base = gh_rule(config.quad_order, params.r());
  // jump times are the distinct event times: fixed for the whole fit
  const JumpDesign jump_design = JumpDesign::of(hazard, *data.front().basis);

  std::vector<std::optional<Eigen::VectorXd>> warm(n);
  std::vector<PosteriorSummary> posteriors(n);
  auto run_e_step = [&]() {
    parallel_for(n, [&](std::size_t i) {
      posteriors[i] = e_step_subject_cached(data[i], params, hazard,
                                            jump_design, base, warm[i]);
    });
    for (std::size_t i = 0; i < n; ++i) warm[i] = posteriors[i].mean;
  };
  auto loglik = [&]() {
    std::vector<double> terms(n);
    for (std::size_t i = 0; i < n; ++i) terms[i] = posteriors[i].log_normalizer;
    std::sort(terms.begin(), terms.end());
    double total = 0.0;
    for (double t : terms) total += t;
    return total;
  };

  FitResult result;
  Eigen::MatrixXd bfgs_state;
  run_e_step();
  double current_ll = loglik();
  result.loglik_trace.push_back(current_ll);

  int it = 0;
  for (it = 1; it <= config.max_em_iters; ++it) {
    hazard = breslow_update(data, params, posteriors);
    const ModelParams next =
        m_step(data, posteriors, hazard, params, config, &bfgs_state);
    const double param_change =
        (next.stacked() - params.stacked()).cwiseAbs().maxCoeff();
    params = next;

    run_e_step();
    const double new_ll = loglik();
    result.loglik_trace.push_back(new_ll);
    const double ll_change =
        std::abs(new_ll - current_ll) / std::max(1.0, std::abs(current_ll));
    current_ll = new_ll;

    if (param_change <= config.param_tol && ll_change <= config.loglik_tol) {
      result.converged = true;
      break;
    }
  }
  result.n_iters = std::min(it, config.max_em_iters);

  if (result.converged) {
    // Phase 1: extra EM cycles until the summed profile score is
    // numerically zero (Theorem 4's estimating equation at theta_hat).
    // The score at each cycle's input state comes from the M-step entry
    // gradient (the profile-score L1/L0 terms telescope at the freshly
    // profiled hazard), so no score table is needed here.
    int polish = 0;
    for (polish = 0; polish < kMaxPolishIters; ++polish) {
      hazard = breslow_update(data, params, posteriors);
      Eigen::VectorXd entry_score;
      const ModelParams next = m_step(data, posteriors, hazard, params,
                                      config, &bfgs_state, &entry_score);
      result.final_score_norm = entry_score.cwiseAbs().maxCoeff();
      if (result.final_score_norm <= kPolishScoreTol ||
          (polish >= kPolishFallbackAfter &&
           result.final_score_norm <= kPolishScoreFallback)) {
        break;  // params stay at the state the score was measured at
      }
      params = next;
      run_e_step();
      result.loglik_trace.push_back(loglik());
    }
    result.n_polish_iters = polish;

    // Phase 2: profiling fixed point of the hazard at fixed theta.  The
    // posterior <-> hazard coupling is weak (the hazard enters only
    // through the survival weight), so this contracts quickly.
    for (int j = 0; j < 80; ++j) {
      run_e_step();
      const StepHazard updated = breslow_update(data, params, posteriors);
      double drift = 0.0;
      for (std::size_t k = 0; k < updated.size(); ++k) {
        drift = std::max(
            drift, std::abs(updated.increments[k] - hazard.increments[k]));
      }
      hazard = updated;
      if (drift <= kPolishHazardTol) break;
    }
    run_e_step();
    result.loglik_trace.push_back(loglik());
    const Eigen::MatrixXd scores =
        subject_scores(data, params, hazard, posteriors);
    result.final_score_norm = scores.colwise().sum().cwiseAbs().maxCoeff();
  }

  result.params_hat = params;
  result.hazard_hat = hazard;
  return result;
}

}  // namespace jointfit
