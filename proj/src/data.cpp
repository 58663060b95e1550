#include "jointfit/data.hpp"

#include <cmath>

#include <Eigen/Cholesky>

#include "jointfit/errors.hpp"

namespace jointfit {

SubjectData SubjectData::make(std::string id, double event_time, bool event,
                              Eigen::VectorXd baseline_covariates,
                              std::vector<LongitudinalRecord> records,
                              std::shared_ptr<const TimeBasis> basis) {
  if (!basis) throw InvalidInputError("subject " + id + ": basis is null");
  if (records.empty()) {
    throw InvalidInputError("subject " + id +
                            ": needs at least one longitudinal record");
  }
  if (!(event_time > 0.0) || !std::isfinite(event_time)) {
    throw InvalidInputError("subject " + id +
                            ": event time must be positive and finite");
  }
  if (!baseline_covariates.allFinite()) {
    throw InvalidInputError("subject " + id +
                            ": baseline covariates must be finite");
  }
  double prev = -1.0;
  for (const auto& rec : records) {
    if (!std::isfinite(rec.time) || !std::isfinite(rec.response)) {
      throw InvalidInputError("subject " + id +
                              ": non-finite measurement time or response");
    }
    if (rec.time < 0.0) {
      throw InvalidInputError("subject " + id +
                              ": measurement times must be nonnegative");
    }
    if (!(rec.time > prev)) {
      throw InvalidInputError(
          "subject " + id + ": measurement times must be strictly increasing");
    }
    if (rec.time > event_time) {
      throw InvalidInputError("subject " + id + ": measurement at time " +
                              std::to_string(rec.time) +
                              " is after the event time");
    }
    prev = rec.time;
  }

  SubjectData subject;
  subject.id = std::move(id);
  subject.event_time = event_time;
  subject.event = event;
  subject.baseline_covariates = std::move(baseline_covariates);
  subject.records = std::move(records);
  subject.basis = std::move(basis);

  const int n = subject.n_records();
  subject.y.resize(n);
  subject.X.resize(n, subject.basis->p);
  subject.Z.resize(n, subject.basis->r);
  for (int j = 0; j < n; ++j) {
    const double t = subject.records[j].time;
    Eigen::RowVectorXd x = subject.basis->fixed_basis(t);
    Eigen::RowVectorXd z = subject.basis->random_basis(t);
    if (x.size() != subject.basis->p || z.size() != subject.basis->r) {
      throw InvalidInputError("subject " + subject.id +
                              ": basis row length does not match declared "
                              "dimensions");
    }
    subject.y(j) = subject.records[j].response;
    subject.X.row(j) = x;
    subject.Z.row(j) = z;
  }
  return subject;
}

int ModelParams::stacked_dim() const {
  return ThetaLayout::of(*this).total();
}

Eigen::VectorXd ModelParams::stacked() const {
  const ThetaLayout lay = ThetaLayout::of(*this);
  Eigen::VectorXd v(lay.total());
  v.segment(lay.alpha_offset(), lay.p_alpha) = alpha;
  v.segment(lay.beta_offset(), lay.p_beta) = beta;
  v.segment(lay.gamma_offset(), lay.p_gamma) = gamma;
  v(lay.sigma_offset()) = sigma;
  v.segment(lay.d_offset(), lay.r * (lay.r + 1) / 2) = vech(D);
  return v;
}

ModelParams ModelParams::from_stacked(const Eigen::VectorXd& v, int p_alpha,
                                      int p_beta, int p_gamma, int r) {
  ThetaLayout lay{p_alpha, p_beta, p_gamma, r};
  if (v.size() != lay.total()) {
    throw InvalidInputError("stacked parameter vector has length " +
                            std::to_string(v.size()) + ", expected " +
                            std::to_string(lay.total()));
  }
  ModelParams params;
  params.alpha = v.segment(lay.alpha_offset(), p_alpha);
  params.beta = v.segment(lay.beta_offset(), p_beta);
  params.gamma = v.segment(lay.gamma_offset(), p_gamma);
  params.sigma = v(lay.sigma_offset());
  params.D = unvech(v.segment(lay.d_offset(), r * (r + 1) / 2), r);
  return params;
}

std::vector<std::string> ModelParams::labels() const {
  std::vector<std::string> out;
  for (int j = 0; j < p_alpha(); ++j) out.push_back("alpha[" + std::to_string(j) + "]");
  for (int j = 0; j < p_beta(); ++j) out.push_back("beta[" + std::to_string(j) + "]");
  for (int j = 0; j < p_gamma(); ++j) out.push_back("gamma[" + std::to_string(j) + "]");
  out.push_back("sigma");
  for (int j = 0; j < r(); ++j) {
    for (int i = j; i < r(); ++i) {
      out.push_back("D[" + std::to_string(i) + "," + std::to_string(j) + "]");
    }
  }
  return out;
}

void ModelParams::validate() const {
  if (alpha.size() != 1) {
    throw InvalidInputError(
        "alpha must have length 1 (scalar longitudinal marker)");
  }
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw InvalidInputError("sigma must be positive and finite");
  }
  if (!alpha.allFinite() || !beta.allFinite() || !gamma.allFinite()) {
    throw InvalidInputError("parameters must be finite");
  }
  if (D.rows() != D.cols() || D.rows() < 1) {
    throw InvalidInputError("D must be a square matrix");
  }
  if (!D.allFinite()) throw InvalidInputError("D must be finite");
  const double scale = D.cwiseAbs().maxCoeff();
  if ((D - D.transpose()).cwiseAbs().maxCoeff() > 1e-10 * (1.0 + scale)) {
    throw NumericalDomainError("D must be symmetric");
  }
  Eigen::LLT<Eigen::MatrixXd> llt(D);
  if (llt.info() != Eigen::Success) {
    throw NumericalDomainError("D must be positive definite");
  }
}

Eigen::VectorXd vech(const Eigen::MatrixXd& m) {
  const int r = static_cast<int>(m.rows());
  Eigen::VectorXd v(r * (r + 1) / 2);
  int k = 0;
  for (int j = 0; j < r; ++j) {
    for (int i = j; i < r; ++i) v(k++) = m(i, j);
  }
  return v;
}

Eigen::MatrixXd unvech(const Eigen::VectorXd& v, int r) {
  if (v.size() != r * (r + 1) / 2) {
    throw InvalidInputError("vech vector size does not match dimension");
  }
  Eigen::MatrixXd m(r, r);
  int k = 0;
  for (int j = 0; j < r; ++j) {
    for (int i = j; i < r; ++i) {
      m(i, j) = v(k);
      m(j, i) = v(k);
      ++k;
    }
  }
  return m;
}

}  // namespace jointfit
