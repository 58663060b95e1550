#include "jointfit/basis.hpp"

#include "jointfit/errors.hpp"

namespace jointfit {

namespace {

Eigen::RowVectorXd monomial_row(double t, int degree) {
  Eigen::RowVectorXd row(degree + 1);
  double v = 1.0;
  for (int k = 0; k <= degree; ++k) {
    row(k) = v;
    v *= t;
  }
  return row;
}

}  // namespace

std::shared_ptr<const TimeBasis> make_polynomial_basis(int fixed_degree,
                                                       int random_degree) {
  if (fixed_degree < 0 || random_degree < 0) {
    throw InvalidInputError("polynomial basis degrees must be nonnegative");
  }
  auto basis = std::make_shared<TimeBasis>();
  basis->fixed_basis = [fixed_degree](double t) {
    return monomial_row(t, fixed_degree);
  };
  basis->random_basis = [random_degree](double t) {
    return monomial_row(t, random_degree);
  };
  basis->p = fixed_degree + 1;
  basis->r = random_degree + 1;
  basis->fixed_poly_degree = fixed_degree;
  basis->random_poly_degree = random_degree;
  if (fixed_degree == 0 && random_degree == 0) {
    basis->description = "intercept";
  } else if (fixed_degree == 1 && random_degree == 1) {
    basis->description = "intercept+slope";
  } else {
    basis->description = "poly(" + std::to_string(fixed_degree) + "," +
                         std::to_string(random_degree) + ")";
  }
  return basis;
}

std::shared_ptr<const TimeBasis> make_basis(const std::string& name) {
  if (name == "intercept") return make_polynomial_basis(0, 0);
  if (name == "intercept+slope" || name == "slope") {
    return make_polynomial_basis(1, 1);
  }
  throw InvalidInputError("unknown basis name: " + name);
}

}  // namespace jointfit
