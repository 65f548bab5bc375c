#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "infobottle/ops.hpp"
#include "infobottle/rng.hpp"

namespace infobottle {

class MIError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Joint pmf over |X| x |Y| (rows are X).
struct DiscreteJoint {
  Tensor p;

  static DiscreteJoint from_rows(const std::vector<std::vector<double>>& rows);
  // Throws MIError unless entries are >= 0 and sum to 1 within 1e-12.
  void validate() const;
  std::vector<double> marginal_x() const;
  std::vector<double> marginal_y() const;
  DiscreteJoint transposed() const;
};

enum class EstimatorKind { exact, infonce, club };
std::string to_string(EstimatorKind kind);

struct MIEstimate {
  double value = 0.0;  // nats
  EstimatorKind kind = EstimatorKind::exact;
  std::size_t samples = 0;
  double std_error = 0.0;
  // InfoNCE only: the objective before adding ln(denominator size), i.e.
  // mean of g(t, z) - ln sum e^{g(t', z)}. value = raw + ln |denominator|.
  double raw = 0.0;
};

double entropy(std::span<const double> pmf);
MIEstimate exact_mi(const DiscreteJoint& joint);

// g(t, z) = w2 . tanh(W_t t + W_z z + b1). Splitting the first layer's weight
// by input block equals the affine map on concat(t, z). The output bias is
// dropped: it cancels in every InfoNCE term.
class Critic {
 public:
  Critic(std::size_t local_dim, std::size_t global_dim, std::size_t hidden, std::uint64_t seed);
  Critic(const Critic& other);
  Critic& operator=(const Critic& other);

  // Scores for (local row, global row) pairs; one entry per pair.
  Var scores(Tape& tape, Var locals, Var globals, std::span<const std::pair<std::size_t, std::size_t>> pairs);
  std::vector<Parameter*> parameters();
  std::size_t hidden() const { return hidden_; }

  // A critic whose output is identically zero (w2 = 0).
  static Critic constant(std::size_t local_dim, std::size_t global_dim, std::size_t hidden = 300);

 private:
  std::size_t hidden_;
  std::unique_ptr<Parameter> wt_, wz_, b1_, w2_;
};

// One InfoNCE problem: positive i pairs local row positives[i].first with
// global row positives[i].second; negatives[i] lists local rows scored
// against that same global row. All negative lists share one length.
struct ContrastiveSet {
  std::vector<std::pair<std::size_t, std::size_t>> positives;
  std::vector<std::vector<std::size_t>> negatives;

  // Every positive shares one negative list.
  static ContrastiveSet shared(std::vector<std::pair<std::size_t, std::size_t>> positives,
                               std::vector<std::size_t> negatives);
  // Row i of locals pairs with row i of globals; the other rows are negatives.
  static ContrastiveSet in_batch(std::size_t n);
};

// Mean over positives of g(t_i, z) - log sum over the denominator set of
// e^{g(t', z)}. The denominator holds the negatives plus the positive when
// include_positive is set, the negatives only otherwise. Differentiable.
Var infonce(Tape& tape, Critic& critic, Var locals, Var globals, const ContrastiveSet& set, bool include_positive);

// value is the InfoNCE bound in nats (raw + ln |denominator|); a constant
// critic gives raw = -ln |denominator| and value = 0.
MIEstimate infonce_estimate(Critic& critic, const Tensor& locals, const Tensor& globals, const ContrastiveSet& set,
                            bool include_positive = true);

using CondLogDensity = std::function<double(std::span<const double> x, std::span<const double> t)>;

// CLUB upper bound from paired rows of x and t ([N x dx], [N x dt]).
MIEstimate club_upper_bound(const Tensor& x, const Tensor& t, const CondLogDensity& log_density);

// Isotropic Gaussian conditional N(slope * x, variance).
CondLogDensity gaussian_conditional(double slope, double variance = 1.0);

// Closed form for a bivariate normal pair with correlation rho.
double gaussian_mi(double rho);

// Draws n pairs (x, y) of a standard bivariate normal with correlation rho.
std::pair<Tensor, Tensor> correlated_gaussians(double rho, std::size_t n, Rng& rng);

struct CriticTrainConfig {
  std::size_t steps = 500;
  std::size_t batch = 32;
  double learning_rate = 1e-3;
  std::size_t hidden = 300;
  bool include_positive = true;
};

// Trains a fresh critic on in-batch InfoNCE over paired rows, then returns
// the critic. Rows of `locals` and `globals` are paired by index.
Critic train_critic(const Tensor& locals, const Tensor& globals, const CriticTrainConfig& config, std::uint64_t seed);

// In-batch InfoNCE of `critic` averaged over consecutive batches of `batch` rows.
MIEstimate infonce_in_batches(Critic& critic, const Tensor& locals, const Tensor& globals, std::size_t batch,
                              bool include_positive = true);

double phi(double x);
bool lemma2_check(double a, double b);

struct Lemma1Result {
  double lhs = 0.0;
  double rhs = 0.0;
  bool ok = false;
};

// channels[i] is a row-stochastic |X_i| x |T_i| matrix; input_joint is the
// pmf over X_1 x ... x X_n in row-major (last index fastest) order.
Lemma1Result lemma1_check(std::size_t n, const std::vector<Tensor>& channels, std::span<const double> input_joint);

struct TheoryTrial {
  std::size_t n = 0;
  double lhs = 0.0;
  double rhs = 0.0;
  bool ok = false;
};

struct TheoryReport {
  std::uint64_t seed = 0;
  std::vector<TheoryTrial> lemma1;
  std::size_t lemma1_violations = 0;
  std::size_t lemma2_pairs = 0;
  std::size_t lemma2_violations = 0;
  double lemma2_max_slack = 0.0;  // max of lhs - phi(|a-b|)

  std::string to_json() const;
};

TheoryReport run_theory_check(std::size_t trials, std::size_t lemma2_pairs, std::uint64_t seed);

}  // namespace infobottle
