#pragma once

#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "jointfit/basis.hpp"

namespace jointfit {

// One longitudinal measurement y(t) of a subject.
struct LongitudinalRecord {
  double time = 0.0;      // t_ij >= 0
  double response = 0.0;  // y_i(t_ij)
};

// One subject's survival record plus its longitudinal measurements.
// Immutable after construction; the design caches y, X, Z hold the response
// vector and the basis rows evaluated at the record times.
struct SubjectData {
  std::string id;
  double event_time = 0.0;  // T_i > 0
  bool event = false;       // delta_i
  Eigen::VectorXd baseline_covariates;  // w_i
  std::vector<LongitudinalRecord> records;
  std::shared_ptr<const TimeBasis> basis;

  Eigen::VectorXd y;  // n_i
  Eigen::MatrixXd X;  // n_i x p
  Eigen::MatrixXd Z;  // n_i x r

  int n_records() const { return static_cast<int>(records.size()); }

  // Validates the invariants (records nonempty with strictly increasing
  // times <= event_time, event_time > 0, finite covariates) and fills the
  // design caches.  Throws InvalidInputError on violation.
  static SubjectData make(std::string id, double event_time, bool event,
                          Eigen::VectorXd baseline_covariates,
                          std::vector<LongitudinalRecord> records,
                          std::shared_ptr<const TimeBasis> basis);
};

// theta = (alpha, beta, gamma, sigma, D): association, fixed effects,
// baseline-covariate effects, residual SD, random-effects covariance.
// Only the scalar-marker configuration (alpha of length 1) is supported.
struct ModelParams {
  Eigen::VectorXd alpha;
  Eigen::VectorXd beta;
  Eigen::VectorXd gamma;
  double sigma = 1.0;
  Eigen::MatrixXd D;

  int p_alpha() const { return static_cast<int>(alpha.size()); }
  int p_beta() const { return static_cast<int>(beta.size()); }
  int p_gamma() const { return static_cast<int>(gamma.size()); }
  int r() const { return static_cast<int>(D.rows()); }

  // Number of free parameters: p_alpha + p_beta + p_gamma + 1 + r(r+1)/2.
  int stacked_dim() const;

  // Stacked vector in theta order (alpha, beta, gamma, sigma, vech(D)).
  Eigen::VectorXd stacked() const;
  static ModelParams from_stacked(const Eigen::VectorXd& v, int p_alpha,
                                  int p_beta, int p_gamma, int r);

  // Component label per stacked index: alpha[0], beta[j], gamma[j], sigma,
  // D[i,j].
  std::vector<std::string> labels() const;

  // Throws InvalidInputError / NumericalDomainError when sigma <= 0, D is
  // not symmetric positive definite, or alpha is not a scalar.
  void validate() const;
};

// Column-stacked lower triangle of a symmetric matrix, diagonal included.
Eigen::VectorXd vech(const Eigen::MatrixXd& m);
Eigen::MatrixXd unvech(const Eigen::VectorXd& v, int r);

// Offsets of the parameter blocks inside the stacked theta vector.
struct ThetaLayout {
  int p_alpha = 0, p_beta = 0, p_gamma = 0, r = 0;

  static ThetaLayout of(const ModelParams& params) {
    return {params.p_alpha(), params.p_beta(), params.p_gamma(), params.r()};
  }
  int alpha_offset() const { return 0; }
  int beta_offset() const { return p_alpha; }
  int gamma_offset() const { return p_alpha + p_beta; }
  int sigma_offset() const { return p_alpha + p_beta + p_gamma; }
  int d_offset() const { return p_alpha + p_beta + p_gamma + 1; }
  int survival_dim() const { return p_alpha + p_beta + p_gamma; }
  int total() const { return p_alpha + p_beta + p_gamma + 1 + r * (r + 1) / 2; }
};

}  // namespace jointfit
