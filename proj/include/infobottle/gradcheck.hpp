#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "infobottle/rng.hpp"
#include "infobottle/tape.hpp"

namespace infobottle {

// Builds a scalar from the leaf standing for the checked point.
using ScalarFn = std::function<Var(Tape&, Var)>;

// Central differences against reverse-mode gradients. Returns
// max_i |analytic - numeric| / max(1, |analytic|, |numeric|).
double finite_diff_check(const ScalarFn& fn, const Tensor& point, double step = 1e-5);

// Same error measure for functions whose inputs live outside a tape (model
// parameters). `coords` is perturbed in place and restored.
double finite_diff_check(const std::function<double()>& value, std::span<double> coords,
                         std::span<const double> analytic, double step = 1e-5);

struct OpCase {
  std::string name;
  std::vector<Tensor> inputs;
  // Which inputs are differentiable (gather ids, labels etc. are baked into the builder).
  std::vector<bool> differentiable;
  std::function<Var(Tape&, const std::vector<Var>&)> build;
};

// One randomized instance per registered op kind, drawn from `rng`.
std::vector<OpCase> registered_op_cases(Rng& rng);

struct OpCheckResult {
  std::string name;
  double max_error = 0.0;
};

// Checks every differentiable input of every registered op at `points`
// random instances. Outputs are contracted with a fixed random weight so
// that non-scalar ops yield a scalar.
std::vector<OpCheckResult> check_all_ops(std::uint64_t seed, int points, double step = 1e-5);

}  // namespace infobottle
