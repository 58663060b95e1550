#pragma once

#include <functional>
#include <memory>
#include <string>

#include <Eigen/Core>

namespace jointfit {

// Time-varying design rows for the longitudinal trajectory
//   m(t) = fixed_basis(t) * beta + random_basis(t) * b.
// Both maps must be total on t >= 0 and deterministic.
struct TimeBasis {
  using BasisFn = std::function<Eigen::RowVectorXd(double)>;

  BasisFn fixed_basis;   // t -> length-p row x(t)
  BasisFn random_basis;  // t -> length-r row z(t)
  int p = 0;             // fixed-effect columns
  int r = 0;             // random-effect columns
  std::string description;

  // Polynomial degree of each map, -1 when not a polynomial in t.  Degrees
  // <= 1 let the simulator invert the cumulative hazard in closed form.
  int fixed_poly_degree = -1;
  int random_poly_degree = -1;

  bool is_linear_in_time() const {
    return fixed_poly_degree >= 0 && fixed_poly_degree <= 1 &&
           random_poly_degree >= 0 && random_poly_degree <= 1;
  }
};

// Monomial basis rows (1, t, t^2, ...) of the given degrees.
std::shared_ptr<const TimeBasis> make_polynomial_basis(int fixed_degree,
                                                       int random_degree);

// Named built-ins: "intercept" (r=1) and "intercept+slope" (r=2).
std::shared_ptr<const TimeBasis> make_basis(const std::string& name);

}  // namespace jointfit
