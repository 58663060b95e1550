#include "jointfit/model.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Cholesky>

#include "jointfit/errors.hpp"
#include "jointfit/parallel.hpp"
#include "jointfit/quadrature.hpp"

namespace jointfit {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

double trajectory_mean(const SubjectData& subject, const ModelParams& params,
                       const Eigen::VectorXd& b, double t) {
  if (t < 0.0) throw InvalidInputError("trajectory_mean: t must be >= 0");
  const Eigen::RowVectorXd x = subject.basis->fixed_basis(t);
  const Eigen::RowVectorXd z = subject.basis->random_basis(t);
  if (x.size() != params.beta.size()) {
    throw InvalidInputError(
        "trajectory_mean: fixed basis length does not match beta");
  }
  if (z.size() != b.size()) {
    throw InvalidInputError(
        "trajectory_mean: random basis length does not match b");
  }
  return x.dot(params.beta) + z.dot(b);
}

double log_density_longitudinal(const SubjectData& subject,
                                const ModelParams& params,
                                const Eigen::VectorXd& b) {
  if (subject.X.cols() != params.beta.size() || subject.Z.cols() != b.size()) {
    throw InvalidInputError(
        "log_density_longitudinal: design and parameter dimensions differ");
  }
  const double n = static_cast<double>(subject.n_records());
  const double sigma2 = params.sigma * params.sigma;
  const double ssr =
      (subject.y - subject.X * params.beta - subject.Z * b).squaredNorm();
  return -0.5 * n * (kLog2Pi + std::log(sigma2)) - 0.5 * ssr / sigma2;
}

double log_density_random(const ModelParams& params,
                          const Eigen::VectorXd& b) {
  const int r = params.r();
  if (b.size() != r) {
    throw InvalidInputError("log_density_random: b has wrong length");
  }
  Eigen::LLT<Eigen::MatrixXd> llt(params.D);
  if (llt.info() != Eigen::Success) {
    throw NumericalDomainError(
        "log_density_random: D is not positive definite");
  }
  const double log_det =
      2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
  return -0.5 * r * kLog2Pi - 0.5 * log_det - 0.5 * b.dot(llt.solve(b));
}

double log_density_event(const SubjectData& subject, const ModelParams& params,
                         const StepHazard& hazard, const Eigen::VectorXd& b) {
  const double alpha = params.alpha(0);
  const double gamma_w = params.gamma.dot(subject.baseline_covariates);

  double value = 0.0;
  if (subject.event) {
    const std::size_t pos = jumps_at_or_before(hazard, subject.event_time);
    if (pos == 0 || hazard.jump_times[pos - 1] != subject.event_time) {
      throw InconsistentHazardError(
          "subject " + subject.id +
          " has an observed event but the hazard has no jump at its event "
          "time");
    }
    value += std::log(hazard.increments[pos - 1]) + gamma_w +
             alpha * trajectory_mean(subject, params, b, subject.event_time);
  }
  for (std::size_t k = 0; k < hazard.size(); ++k) {
    if (hazard.jump_times[k] > subject.event_time) break;
    value -= hazard.increments[k] *
             std::exp(gamma_w + alpha * trajectory_mean(subject, params, b,
                                                        hazard.jump_times[k]));
  }
  return value;
}

double observed_data_loglik(const std::vector<SubjectData>& data,
                            const ModelParams& params,
                            const StepHazard& hazard,
                            const QuadratureRule& quad) {
  std::vector<double> terms(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    terms[i] =
        e_step_subject_with_rule(data[i], params, hazard, quad).log_normalizer;
  });
  // sorted accumulation: the total is exactly invariant under subject
  // reordering
  std::sort(terms.begin(), terms.end());
  double total = 0.0;
  for (double t : terms) {
    if (!std::isfinite(t)) {
      throw NumericalDomainError(
          "observed_data_loglik: non-finite subject contribution");
    }
    total += t;
  }
  return total;
}

}  // namespace jointfit
