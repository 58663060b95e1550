#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "jointfit/data.hpp"

namespace jointfit {

// Deterministic variate generator: splitmix64-seeded xoshiro-free
// mt19937_64 core with hand-rolled transforms, so identical seeds give
// identical streams on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  double uniform();             // [0, 1)
  double uniform_positive();    // (0, 1]
  double normal();              // N(0, 1), Box-Muller
  double exponential(double rate);
  bool bernoulli(double p);

 private:
  std::uint64_t next_raw();
  std::uint64_t state_[4];
};

// Stream split: child seed for an indexed substream.
std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t index);

// Baseline-covariate generator: each of the p_gamma components iid
// Bernoulli(p).
struct WDistribution {
  double bernoulli_p = 0.5;
};

struct SimDesign {
  int n_subjects = 0;
  ModelParams true_params;
  double baseline_rate = 0.0;   // constant lambda_0
  double censoring_rate = 0.0;  // exponential censoring
  std::vector<double> measurement_schedule;  // nominal times, increasing
  std::shared_ptr<const TimeBasis> basis;
  WDistribution w_distribution;
  std::uint64_t seed = 0;

  // Unlike ModelParams::validate, sigma = 0 and singular D are allowed
  // here: degenerate designs are useful for generation-side tests.
  void validate() const;
};

// The desk-scale default: n=300, measurements at 0, 0.5, 1, 1.5, 2,
// intercept+slope random effects, scalar binary w.
SimDesign default_design();

// Latent draws kept for the sampler self-test.
struct SubjectDraw {
  Eigen::VectorXd b;
  Eigen::VectorXd w;
  double u_event = 0.0;        // uniform with H(T*) = -log(u)
  double censor_time = 0.0;
  double latent_event_time = 0.0;  // +inf when the hazard never accumulates
  bool event = false;
};

struct SimReport {
  int n_events = 0;
  int n_censored = 0;
  // general-basis subjects whose root bracket hit the cap and were treated
  // as censored
  int n_bracket_censored = 0;
};

std::vector<SubjectData> simulate_dataset(const SimDesign& design);
std::vector<SubjectData> simulate_dataset(const SimDesign& design,
                                          std::vector<SubjectDraw>* draws,
                                          SimReport* report);

// Sampler self-test: |H(T*) + log(u)| for an uncensored draw (0 for
// censored ones); contract <= 1e-8.
double inverse_hazard_check(const SimDesign& design, const SubjectDraw& draw);

}  // namespace jointfit
