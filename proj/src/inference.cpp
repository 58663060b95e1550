#include "jointfit/inference.hpp"

#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "jointfit/errors.hpp"
#include "jointfit/parallel.hpp"

namespace jointfit {

namespace {

// E_b[exp(rho)] and E_b[m exp(rho)] at one time point for one subject,
// where rho = gamma'w + alpha m(u, b).  Shift by the node maximum to keep
// the exponentials finite.
struct RiskMoments {
  double e = 0.0;        // E[exp rho]
  double me = 0.0;       // E[m exp rho]
};

RiskMoments risk_moments(const SubjectData& subject, const ModelParams& params,
                         const PosteriorSummary& posterior, double u) {
  const double alpha = params.alpha(0);
  const double base = params.gamma.dot(subject.baseline_covariates) +
                      alpha * subject.basis->fixed_basis(u).dot(params.beta);
  const double xb = subject.basis->fixed_basis(u).dot(params.beta);
  const Eigen::VectorXd zb =
      posterior.nodes * subject.basis->random_basis(u).transpose();
  const Eigen::ArrayXd ex = alpha * zb.array();
  const double shift = ex.maxCoeff();
  const Eigen::ArrayXd scaled = (ex - shift).exp() * posterior.weights.array();
  const double s0 = scaled.sum();
  const double s1 = (scaled * zb.array()).sum();
  RiskMoments out;
  out.e = std::exp(base + shift) * s0;
  out.me = std::exp(base + shift) * (xb * s0 + s1);
  return out;
}

// (m, alpha x(u), w) stacking of the survival directions.
Eigen::VectorXd survival_direction(const SubjectData& subject,
                                   const ModelParams& params, double u,
                                   double m_value, double scale,
                                   const ThetaLayout& layout) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(layout.survival_dim());
  v(0) = m_value;
  v.segment(layout.beta_offset(), layout.p_beta) =
      params.alpha(0) * scale * subject.basis->fixed_basis(u).transpose();
  v.segment(layout.gamma_offset(), layout.p_gamma) =
      scale * subject.baseline_covariates;
  return v;
}

}  // namespace

L0L1 l0_l1(const std::vector<SubjectData>& data, const ModelParams& params,
           const std::vector<PosteriorSummary>& posteriors, double u) {
  if (u < 0.0) throw InvalidInputError("l0_l1: u must be >= 0");
  if (posteriors.size() != data.size()) {
    throw InvalidInputError("l0_l1: posteriors are not aligned with data");
  }
  const ThetaLayout layout = ThetaLayout::of(params);
  const double n = static_cast<double>(data.size());

  L0L1 out;
  out.L1 = Eigen::VectorXd::Zero(layout.survival_dim());
  bool any_at_risk = false;
  for (std::size_t l = 0; l < data.size(); ++l) {
    if (data[l].event_time < u) continue;
    any_at_risk = true;
    const RiskMoments mom = risk_moments(data[l], params, posteriors[l], u);
    out.L0 += mom.e;
    // E[(m, alpha x, w)' exp rho] = (E[m exp rho], (alpha x) E[exp rho],
    //                                w E[exp rho])
    out.L1 += survival_direction(data[l], params, u, mom.me, mom.e, layout);
  }
  out.L0 /= n;
  out.L1 /= n;
  out.degenerate = !any_at_risk;
  return out;
}

L0L1Table build_l0_l1_table(const std::vector<SubjectData>& data,
                            const ModelParams& params,
                            const std::vector<PosteriorSummary>& posteriors,
                            const StepHazard& hazard) {
  const ThetaLayout layout = ThetaLayout::of(params);
  const Eigen::Index n_jumps = static_cast<Eigen::Index>(hazard.size());
  L0L1Table table;
  table.times = hazard.jump_times;
  table.L0.resize(n_jumps);
  table.L1.resize(n_jumps, layout.survival_dim());
  std::vector<L0L1> rows(static_cast<std::size_t>(n_jumps));
  parallel_for(static_cast<std::size_t>(n_jumps), [&](std::size_t k) {
    rows[k] = l0_l1(data, params, posteriors, hazard.jump_times[k]);
  });
  for (Eigen::Index k = 0; k < n_jumps; ++k) {
    table.L0(k) = rows[k].L0;
    table.L1.row(k) = rows[k].L1.transpose();
  }
  return table;
}

Eigen::VectorXd survival_score(const SubjectData& subject,
                               const ModelParams& params,
                               const StepHazard& hazard,
                               const L0L1Table& table,
                               const PosteriorSummary& posterior) {
  const ThetaLayout layout = ThetaLayout::of(params);
  Eigen::VectorXd score = Eigen::VectorXd::Zero(layout.survival_dim());

  if (subject.event) {
    const std::size_t pos = jumps_at_or_before(hazard, subject.event_time);
    if (pos == 0 || hazard.jump_times[pos - 1] != subject.event_time) {
      throw InternalError("survival_score: event time is not a hazard jump");
    }
    const double l0 = table.L0(static_cast<Eigen::Index>(pos - 1));
    if (!(l0 > 0.0)) {
      throw InternalError("survival_score: degenerate L0 at an event time");
    }
    const double mean_m =
        subject.basis->fixed_basis(subject.event_time).dot(params.beta) +
        subject.basis->random_basis(subject.event_time).dot(posterior.mean);
    score += survival_direction(subject, params, subject.event_time, mean_m,
                                1.0, layout);
    score -= table.L1.row(static_cast<Eigen::Index>(pos - 1)).transpose() / l0;
  }

  for (std::size_t k = 0; k < hazard.size(); ++k) {
    if (hazard.jump_times[k] > subject.event_time) break;
    const double t = hazard.jump_times[k];
    const RiskMoments mom = risk_moments(subject, params, posterior, t);
    const double l0 = table.L0(static_cast<Eigen::Index>(k));
    if (!(l0 > 0.0)) {
      throw InternalError("survival_score: degenerate L0 at a jump time");
    }
    Eigen::VectorXd term =
        survival_direction(subject, params, t, mom.me, mom.e, layout);
    term -= (mom.e / l0) * table.L1.row(static_cast<Eigen::Index>(k)).transpose();
    score -= hazard.increments[k] * term;
  }

  Eigen::VectorXd stacked = Eigen::VectorXd::Zero(layout.total());
  stacked.head(layout.survival_dim()) = score;
  return stacked;
}

Eigen::VectorXd survival_score(const SubjectData& subject,
                               const ModelParams& params,
                               const StepHazard& hazard,
                               const std::vector<SubjectData>& data,
                               const std::vector<PosteriorSummary>& posteriors) {
  const L0L1Table table = build_l0_l1_table(data, params, posteriors, hazard);
  const PosteriorSummary* own = nullptr;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (&data[i] == &subject || data[i].id == subject.id) {
      own = &posteriors[i];
      break;
    }
  }
  if (own == nullptr) {
    throw InvalidInputError("survival_score: subject not found in data");
  }
  return survival_score(subject, params, hazard, table, *own);
}

Eigen::VectorXd survival_score_restricted(const SubjectData& subject,
                                          const ModelParams& params,
                                          const StepHazard& hazard,
                                          const PosteriorSummary& posterior) {
  const ThetaLayout layout = ThetaLayout::of(params);
  Eigen::VectorXd score = Eigen::VectorXd::Zero(layout.survival_dim());

  if (subject.event) {
    const double mean_m =
        subject.basis->fixed_basis(subject.event_time).dot(params.beta) +
        subject.basis->random_basis(subject.event_time).dot(posterior.mean);
    score += survival_direction(subject, params, subject.event_time, mean_m,
                                1.0, layout);
  }
  for (std::size_t k = 0; k < hazard.size(); ++k) {
    if (hazard.jump_times[k] > subject.event_time) break;
    const double t = hazard.jump_times[k];
    const RiskMoments mom = risk_moments(subject, params, posterior, t);
    score -= hazard.increments[k] *
             survival_direction(subject, params, t, mom.me, mom.e, layout);
  }

  Eigen::VectorXd stacked = Eigen::VectorXd::Zero(layout.total());
  stacked.head(layout.survival_dim()) = score;
  return stacked;
}

Eigen::VectorXd longitudinal_score(const SubjectData& subject,
                                   const ModelParams& params,
                                   const PosteriorSummary& posterior) {
  const ThetaLayout layout = ThetaLayout::of(params);
  const double sigma = params.sigma;
  const double sigma2 = sigma * sigma;

  const Eigen::VectorXd mean_resid =
      subject.y - subject.X * params.beta - subject.Z * posterior.mean;
  const Eigen::MatrixXd cov =
      posterior.second_moment - posterior.mean * posterior.mean.transpose();
  const double exp_ssr =
      mean_resid.squaredNorm() +
      (subject.Z.transpose() * subject.Z).cwiseProduct(cov).sum();

  Eigen::VectorXd stacked = Eigen::VectorXd::Zero(layout.total());
  stacked.segment(layout.beta_offset(), layout.p_beta) =
      subject.X.transpose() * mean_resid / sigma2;
  stacked(layout.sigma_offset()) =
      -static_cast<double>(subject.n_records()) / sigma +
      exp_ssr / (sigma2 * sigma);
  return stacked;
}

Eigen::VectorXd random_effects_score(const ModelParams& params,
                                     const PosteriorSummary& posterior) {
  const ThetaLayout layout = ThetaLayout::of(params);
  const int r = params.r();
  Eigen::LLT<Eigen::MatrixXd> llt(params.D);
  if (llt.info() != Eigen::Success) {
    throw NumericalDomainError(
        "random_effects_score: D is not positive definite");
  }
  const Eigen::MatrixXd d_inv = llt.solve(Eigen::MatrixXd::Identity(r, r));
  const Eigen::MatrixXd grad =
      0.5 * (d_inv * posterior.second_moment * d_inv - d_inv);

  Eigen::VectorXd stacked = Eigen::VectorXd::Zero(layout.total());
  int k = layout.d_offset();
  for (int j = 0; j < r; ++j) {
    for (int i = j; i < r; ++i) {
      stacked(k++) = (i == j) ? grad(i, j) : 2.0 * grad(i, j);
    }
  }
  return stacked;
}

Eigen::MatrixXd subject_scores(const std::vector<SubjectData>& data,
                               const ModelParams& params,
                               const StepHazard& hazard,
                               const std::vector<PosteriorSummary>& posteriors) {
  if (posteriors.size() != data.size()) {
    throw InvalidInputError(
        "subject_scores: posteriors are not aligned with data");
  }
  const ThetaLayout layout = ThetaLayout::of(params);
  const L0L1Table table = build_l0_l1_table(data, params, posteriors, hazard);
  Eigen::MatrixXd scores(static_cast<Eigen::Index>(data.size()),
                         layout.total());
  parallel_for(data.size(), [&](std::size_t i) {
    Eigen::VectorXd s =
        survival_score(data[i], params, hazard, table, posteriors[i]);
    s += longitudinal_score(data[i], params, posteriors[i]);
    s += random_effects_score(params, posteriors[i]);
    scores.row(static_cast<Eigen::Index>(i)) = s.transpose();
  });
  return scores;
}

EfficientInfo info_from_scores(const Eigen::MatrixXd& scores) {
  const double n = static_cast<double>(scores.rows());
  if (n < 1) throw InvalidInputError("info_from_scores: no score rows");
  EfficientInfo info;
  info.matrix = scores.transpose() * scores / n;
  info.matrix = 0.5 * (info.matrix + info.matrix.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(info.matrix);
  const double min_eig = solver.eigenvalues().minCoeff();
  const double max_eig = solver.eigenvalues().maxCoeff();
  info.condition_estimate = (min_eig > 0.0)
                                ? max_eig / min_eig
                                : std::numeric_limits<double>::infinity();
  return info;
}

EfficientInfo efficient_information(
    const std::vector<SubjectData>& data, const ModelParams& params,
    const StepHazard& hazard,
    const std::vector<PosteriorSummary>& posteriors) {
  return info_from_scores(subject_scores(data, params, hazard, posteriors));
}

Eigen::VectorXd standard_errors(const EfficientInfo& info, Eigen::Index n) {
  if (n < 1) throw InvalidInputError("standard_errors: n must be >= 1");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(info.matrix);
  const Eigen::VectorXd eigvals = solver.eigenvalues();
  constexpr double kMinEigenvalue = 1e-10;
  if (eigvals.minCoeff() <= kMinEigenvalue) {
    std::vector<std::string> directions;
    for (Eigen::Index j = 0; j < eigvals.size(); ++j) {
      if (eigvals(j) > kMinEigenvalue) continue;
      const Eigen::VectorXd v = solver.eigenvectors().col(j);
      Eigen::Index lead;
      v.cwiseAbs().maxCoeff(&lead);
      directions.push_back("eigenvalue " + std::to_string(eigvals(j)) +
                           " along stacked component " + std::to_string(lead));
    }
    throw SingularInformationError(
        "efficient information matrix is numerically singular "
        "(assumption A4 violated); near-null directions follow",
        directions);
  }
  // diag((n I)^-1) via the eigen decomposition
  const Eigen::MatrixXd inv_sqrt_terms =
      solver.eigenvectors() * eigvals.cwiseInverse().asDiagonal() *
      solver.eigenvectors().transpose();
  return (inv_sqrt_terms.diagonal() / static_cast<double>(n)).cwiseSqrt();
}

InferenceResult efficient_inference(const std::vector<SubjectData>& data,
                                    const ModelParams& params,
                                    const StepHazard& hazard, int quad_order) {
  const QuadratureRule base = gh_rule(quad_order, params.r());
  std::vector<PosteriorSummary> posteriors(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    posteriors[i] = e_step_subject_with_rule(data[i], params, hazard, base);
  });
  InferenceResult out;
  out.info = efficient_information(data, params, hazard, posteriors);
  out.ses = standard_errors(out.info, static_cast<Eigen::Index>(data.size()));
  return out;
}

}  // namespace jointfit
