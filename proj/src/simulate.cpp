#include "jointfit/simulate.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>

#include <Eigen/Eigenvalues>

#include "jointfit/errors.hpp"
#include "jointfit/parallel.hpp"

namespace jointfit {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}

}  // namespace

Rng::Rng(std::uint64_t seed) {
  std::uint64_t sm = seed;
  for (auto& s : state_) s = splitmix64(sm);
}

std::uint64_t Rng::next_raw() {
  // xoshiro256**
  const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double Rng::uniform() {
  return static_cast<double>(next_raw() >> 11) * 0x1.0p-53;
}

double Rng::uniform_positive() { return 1.0 - uniform(); }

double Rng::normal() {
  const double radius = std::sqrt(-2.0 * std::log(uniform_positive()));
  const double angle = 2.0 * std::numbers::pi * uniform();
  return radius * std::cos(angle);
}

double Rng::exponential(double rate) {
  return -std::log(uniform_positive()) / rate;
}

bool Rng::bernoulli(double p) { return uniform() < p; }

std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t sm = seed ^ (0x5851f42d4c957f2dULL * (index + 1));
  return splitmix64(sm);
}

void SimDesign::validate() const {
  if (n_subjects < 1) throw InvalidInputError("design: n_subjects must be >= 1");
  if (!(baseline_rate > 0.0) || !(censoring_rate > 0.0)) {
    throw InvalidInputError("design: rates must be positive");
  }
  if (measurement_schedule.empty()) {
    throw InvalidInputError("design: measurement schedule must be nonempty");
  }
  double prev = -1.0;
  for (double t : measurement_schedule) {
    if (!(t >= 0.0) || !(t > prev)) {
      throw InvalidInputError(
          "design: schedule times must be nonnegative and increasing");
    }
    prev = t;
  }
  if (!basis) throw InvalidInputError("design: basis is null");
  if (true_params.alpha.size() != 1) {
    throw InvalidInputError("design: alpha must be scalar");
  }
  if (true_params.sigma < 0.0) {
    throw InvalidInputError("design: sigma must be nonnegative");
  }
  if (true_params.D.rows() != basis->r || true_params.D.cols() != basis->r) {
    throw InvalidInputError("design: D does not match the basis dimension");
  }
  if (true_params.beta.size() != basis->p) {
    throw InvalidInputError("design: beta does not match the basis dimension");
  }
  if (w_distribution.bernoulli_p < 0.0 || w_distribution.bernoulli_p > 1.0) {
    throw InvalidInputError("design: bernoulli probability must be in [0,1]");
  }
}

SimDesign default_design() {
  SimDesign design;
  design.n_subjects = 300;
  design.basis = make_polynomial_basis(1, 1);
  design.true_params.alpha = Eigen::VectorXd::Constant(1, 0.5);
  design.true_params.beta = (Eigen::VectorXd(2) << 1.2, -0.5).finished();
  design.true_params.gamma = Eigen::VectorXd::Constant(1, -0.4);
  design.true_params.sigma = 0.4;
  design.true_params.D =
      (Eigen::MatrixXd(2, 2) << 0.6, 0.1, 0.1, 0.1).finished();
  design.baseline_rate = 0.3;
  design.censoring_rate = 0.25;
  design.measurement_schedule = {0.0, 0.5, 1.0, 1.5, 2.0};
  design.seed = 20240901ULL;
  return design;
}

namespace {

// PSD square root; tolerates singular D (degenerate test designs).
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
  if (solver.info() != Eigen::Success) {
    throw NumericalDomainError("design: eigendecomposition of D failed");
  }
  const double floor = -1e-12 * (1.0 + m.cwiseAbs().maxCoeff());
  Eigen::VectorXd eigvals = solver.eigenvalues();
  for (Eigen::Index j = 0; j < eigvals.size(); ++j) {
    if (eigvals(j) < floor) {
      throw NumericalDomainError("design: D has a negative eigenvalue");
    }
    eigvals(j) = std::sqrt(std::max(eigvals(j), 0.0));
  }
  return solver.eigenvectors() * eigvals.asDiagonal() *
         solver.eigenvectors().transpose();
}

// Risk exponent g(s) = gamma'w + alpha m(s) for a fixed subject draw.
struct RiskExponent {
  const SimDesign& design;
  const Eigen::VectorXd& b;
  double gamma_w;
  double alpha;

  double operator()(double s) const {
    const double m = design.basis->fixed_basis(s).dot(design.true_params.beta) +
                     design.basis->random_basis(s).dot(b);
    return gamma_w + alpha * m;
  }
};

// Cumulative hazard H(t) = lambda_0 int_0^t exp(g(s)) ds by composite
// 16-point Gauss-Legendre with panels short enough that the exponent moves
// by at most ~1/2 per panel.
const double kGl16Nodes[8] = {
    0.0950125098376374, 0.2816035507792589, 0.4580167776572274,
    0.6178762444026438, 0.7554044083550030, 0.8656312023878318,
    0.9445750230732326, 0.9894009349916499};
const double kGl16Weights[8] = {
    0.1894506104550685, 0.1826034150449236, 0.1691565193950025,
    0.1495959888165767, 0.1246289712555339, 0.0951585116824928,
    0.0622535239386479, 0.0271524594117541};

double integrate_exp_risk(const RiskExponent& g, double a, double b,
                          double lambda0) {
  if (b <= a) return 0.0;
  const double spread = std::abs(g(b) - g(a)) + std::abs(g(0.5 * (a + b)));
  const int panels =
      std::min(4096, std::max(4, static_cast<int>(2.0 * spread) + 4));
  double total = 0.0;
  const double h = (b - a) / panels;
  for (int p = 0; p < panels; ++p) {
    const double mid = a + (p + 0.5) * h;
    const double half = 0.5 * h;
    double acc = 0.0;
    for (int j = 0; j < 8; ++j) {
      acc += kGl16Weights[j] * (std::exp(g(mid - half * kGl16Nodes[j])) +
                                std::exp(g(mid + half * kGl16Nodes[j])));
    }
    total += half * acc;
  }
  return lambda0 * total;
}

constexpr double kBracketCap = 1e6;

struct EventTimeResult {
  double time = std::numeric_limits<double>::infinity();
  bool bracket_failed = false;
};

// Solve H(T) = target for the latent event time.
EventTimeResult invert_hazard(const SimDesign& design,
                              const Eigen::VectorXd& b, double gamma_w,
                              double target) {
  EventTimeResult out;
  const double lambda0 = design.baseline_rate;
  const double alpha = design.true_params.alpha(0);
  if (design.basis->is_linear_in_time()) {
    // g(s) = a + c s: H(t) = lambda0 e^a (e^{ct} - 1) / c
    const double m0 = design.basis->fixed_basis(0.0).dot(design.true_params.beta) +
                      design.basis->random_basis(0.0).dot(b);
    const double m1 = design.basis->fixed_basis(1.0).dot(design.true_params.beta) +
                      design.basis->random_basis(1.0).dot(b);
    const double a = gamma_w + alpha * m0;
    const double c = alpha * (m1 - m0);
    const double scale = lambda0 * std::exp(a);
    if (std::abs(c) < 1e-12) {
      out.time = target / scale;
    } else {
      const double arg = 1.0 + c * target / scale;
      out.time = (arg > 0.0) ? std::log1p(c * target / scale) / c
                             : std::numeric_limits<double>::infinity();
    }
    return out;
  }

  const RiskExponent g{design, b, gamma_w, alpha};
  // expand the bracket by doubling; accumulate H incrementally
  double lo = 0.0, hi = 1.0;
  double h_lo = 0.0;
  double h_hi = integrate_exp_risk(g, 0.0, hi, lambda0);
  while (h_hi < target && hi < kBracketCap) {
    lo = hi;
    h_lo = h_hi;
    hi = std::min(2.0 * hi, kBracketCap);
    h_hi += integrate_exp_risk(g, lo, hi, lambda0);
  }
  if (h_hi < target) {
    out.bracket_failed = true;
    return out;
  }
  // bisection on the bracket
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double h_mid = h_lo + integrate_exp_risk(g, lo, mid, lambda0);
    if (h_mid < target) {
      lo = mid;
      h_lo = h_mid;
    } else {
      hi = mid;
    }
    if (hi - lo <= 1e-13 * (1.0 + hi)) break;
  }
  out.time = 0.5 * (lo + hi);
  return out;
}

}  // namespace

std::vector<SubjectData> simulate_dataset(const SimDesign& design,
                                          std::vector<SubjectDraw>* draws,
                                          SimReport* report) {
  design.validate();
  const int n = design.n_subjects;
  const int r = design.basis->r;
  const int p_gamma = static_cast<int>(design.true_params.gamma.size());
  const Eigen::MatrixXd d_sqrt = psd_sqrt(design.true_params.D);

  int id_width = 1;
  for (int v = n; v >= 10; v /= 10) ++id_width;

  std::vector<SubjectData> data(static_cast<std::size_t>(n));
  std::vector<SubjectDraw> local_draws(static_cast<std::size_t>(n));
  std::vector<bool> bracket_flags(static_cast<std::size_t>(n), false);

  parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
    Rng rng(substream_seed(design.seed, i));

    Eigen::VectorXd raw(r);
    for (int j = 0; j < r; ++j) raw(j) = rng.normal();
    const Eigen::VectorXd b = d_sqrt * raw;

    Eigen::VectorXd w(p_gamma);
    for (int j = 0; j < p_gamma; ++j) {
      w(j) = rng.bernoulli(design.w_distribution.bernoulli_p) ? 1.0 : 0.0;
    }
    const double gamma_w = design.true_params.gamma.dot(w);

    const double u = rng.uniform_positive();
    const double target = -std::log(u);
    const EventTimeResult latent = invert_hazard(design, b, gamma_w, target);
    bracket_flags[i] = latent.bracket_failed;

    const double censor = rng.exponential(design.censoring_rate);
    const bool event = latent.time <= censor;
    const double observed = event ? latent.time : censor;

    std::vector<LongitudinalRecord> records;
    for (double t : design.measurement_schedule) {
      if (t > observed) break;
      const double m = design.basis->fixed_basis(t).dot(design.true_params.beta) +
                       design.basis->random_basis(t).dot(b);
      records.push_back({t, m + design.true_params.sigma * rng.normal()});
    }
    if (records.empty()) {
      // observed time fell before the first scheduled measurement; keep the
      // baseline measurement so n_i >= 1 (schedule starts at 0 in practice)
      const double t = 0.0;
      const double m = design.basis->fixed_basis(t).dot(design.true_params.beta) +
                       design.basis->random_basis(t).dot(b);
      records.push_back({t, m + design.true_params.sigma * rng.normal()});
    }

    char id_buf[32];
    std::snprintf(id_buf, sizeof(id_buf), "s%0*zu", id_width, i + 1);
    data[i] = SubjectData::make(id_buf, observed, event, w, std::move(records),
                                design.basis);

    SubjectDraw& draw = local_draws[i];
    draw.b = b;
    draw.w = w;
    draw.u_event = u;
    draw.censor_time = censor;
    draw.latent_event_time = latent.time;
    draw.event = event;
  });

  if (report != nullptr) {
    *report = SimReport{};
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data[i].event) {
        ++report->n_events;
      } else {
        ++report->n_censored;
      }
      if (bracket_flags[i]) ++report->n_bracket_censored;
    }
  }
  if (draws != nullptr) *draws = std::move(local_draws);
  return data;
}

std::vector<SubjectData> simulate_dataset(const SimDesign& design) {
  return simulate_dataset(design, nullptr, nullptr);
}

double inverse_hazard_check(const SimDesign& design, const SubjectDraw& draw) {
  if (!draw.event) return 0.0;
  const double gamma_w = design.true_params.gamma.dot(draw.w);
  const double alpha = design.true_params.alpha(0);
  double h_value;
  if (design.basis->is_linear_in_time()) {
    const double m0 =
        design.basis->fixed_basis(0.0).dot(design.true_params.beta) +
        design.basis->random_basis(0.0).dot(draw.b);
    const double m1 =
        design.basis->fixed_basis(1.0).dot(design.true_params.beta) +
        design.basis->random_basis(1.0).dot(draw.b);
    const double a = gamma_w + alpha * m0;
    const double c = alpha * (m1 - m0);
    const double scale = design.baseline_rate * std::exp(a);
    h_value = (std::abs(c) < 1e-12)
                  ? scale * draw.latent_event_time
                  : scale * std::expm1(c * draw.latent_event_time) / c;
  } else {
    const RiskExponent g{design, draw.b, gamma_w, alpha};
    h_value =
        integrate_exp_risk(g, 0.0, draw.latent_event_time, design.baseline_rate);
  }
  return std::abs(h_value + std::log(draw.u_event));
}

}  // namespace jointfit
