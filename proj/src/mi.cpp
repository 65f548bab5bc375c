#include "infobottle/mi.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "infobottle/optim.hpp"
#include "json.hpp"

namespace infobottle {

// ---------------------------------------------------------------- discrete

DiscreteJoint DiscreteJoint::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty() || rows[0].empty()) throw MIError("joint pmf needs a non-empty table");
  DiscreteJoint j;
  j.p = Tensor(Shape{rows.size(), rows[0].size()}, 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows[0].size()) throw MIError("joint pmf rows differ in length");
    for (std::size_t c = 0; c < rows[r].size(); ++c) j.p(r, c) = rows[r][c];
  }
  j.validate();
  return j;
}

void DiscreteJoint::validate() const {
  if (p.rank() != 2) throw MIError("joint pmf must be a matrix");
  long double total = 0.0L;
  for (double v : p.data) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw MIError("joint pmf has a negative or non-finite entry");
    total += v;
  }
  if (std::abs(static_cast<double>(total - 1.0L)) > 1e-12)
    throw MIError("joint pmf sums to " + std::to_string(static_cast<double>(total)) + ", not 1");
}

std::vector<double> DiscreteJoint::marginal_x() const {
  std::vector<double> m(p.rows(), 0.0);
  for (std::size_t r = 0; r < p.rows(); ++r)
    for (std::size_t c = 0; c < p.cols(); ++c) m[r] += p(r, c);
  return m;
}

std::vector<double> DiscreteJoint::marginal_y() const {
  std::vector<double> m(p.cols(), 0.0);
  for (std::size_t r = 0; r < p.rows(); ++r)
    for (std::size_t c = 0; c < p.cols(); ++c) m[c] += p(r, c);
  return m;
}

DiscreteJoint DiscreteJoint::transposed() const {
  DiscreteJoint t;
  t.p = Tensor(Shape{p.cols(), p.rows()}, 0.0);
  for (std::size_t r = 0; r < p.rows(); ++r)
    for (std::size_t c = 0; c < p.cols(); ++c) t.p(c, r) = p(r, c);
  return t;
}

std::string to_string(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::exact: return "exact";
    case EstimatorKind::infonce: return "infonce";
    case EstimatorKind::club: return "club";
  }
  return "unknown";
}

double entropy(std::span<const double> pmf) {
  double h = 0.0;
  for (double v : pmf)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

MIEstimate exact_mi(const DiscreteJoint& joint) {
  joint.validate();
  const auto px = joint.marginal_x();
  const auto py = joint.marginal_y();
  double mi = 0.0;
  for (std::size_t r = 0; r < joint.p.rows(); ++r) {
    for (std::size_t c = 0; c < joint.p.cols(); ++c) {
      const double v = joint.p(r, c);
      if (v > 0.0) mi += v * std::log(v / (px[r] * py[c]));
    }
  }
  if (mi < -1e-12) throw MIError("exact MI came out negative: " + std::to_string(mi));
  return MIEstimate{std::max(0.0, mi), EstimatorKind::exact, joint.p.size(), 0.0};
}

// ---------------------------------------------------------------- critic

Critic::Critic(std::size_t local_dim, std::size_t global_dim, std::size_t hidden, std::uint64_t seed)
    : hidden_(hidden) {
  if (local_dim == 0 || global_dim == 0 || hidden == 0) throw MIError("critic sizes must be positive");
  Rng rng = Rng::for_label(seed, "critic.init");
  const double s1 = 1.0 / std::sqrt(static_cast<double>(local_dim + global_dim));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  auto draw = [&](std::size_t r, std::size_t c, double sd) {
    Tensor t(Shape{r, c});
    for (double& v : t.data) v = rng.normal(0.0, sd);
    return t;
  };
  wt_ = std::make_unique<Parameter>("critic.w_t", draw(local_dim, hidden, s1));
  wz_ = std::make_unique<Parameter>("critic.w_z", draw(global_dim, hidden, s1));
  b1_ = std::make_unique<Parameter>("critic.b1", Tensor(Shape{hidden}, 0.0));
  Tensor w2 = draw(1, hidden, s2);
  w2.shape = Shape{hidden};
  w2_ = std::make_unique<Parameter>("critic.w2", std::move(w2));
}

Critic::Critic(const Critic& o)
    : hidden_(o.hidden_),
      wt_(std::make_unique<Parameter>(*o.wt_)),
      wz_(std::make_unique<Parameter>(*o.wz_)),
      b1_(std::make_unique<Parameter>(*o.b1_)),
      w2_(std::make_unique<Parameter>(*o.w2_)) {}

Critic& Critic::operator=(const Critic& o) {
  if (this != &o) {
    Critic tmp(o);
    std::swap(hidden_, tmp.hidden_);
    std::swap(wt_, tmp.wt_);
    std::swap(wz_, tmp.wz_);
    std::swap(b1_, tmp.b1_);
    std::swap(w2_, tmp.w2_);
  }
  return *this;
}

Critic Critic::constant(std::size_t local_dim, std::size_t global_dim, std::size_t hidden) {
  Critic c(local_dim, global_dim, hidden, 0);
  std::fill(c.w2_->value.data.begin(), c.w2_->value.data.end(), 0.0);
  return c;
}

Var Critic::scores(Tape& tape, Var locals, Var globals, std::span<const std::pair<std::size_t, std::size_t>> pairs) {
  Var u = ops::add(ops::matmul(locals, tape.param(*wt_)), tape.param(*b1_));
  Var v = ops::matmul(globals, tape.param(*wz_));
  return ops::additive_scores(u, v, tape.param(*w2_), pairs);
}

std::vector<Parameter*> Critic::parameters() { return {wt_.get(), wz_.get(), b1_.get(), w2_.get()}; }

// ---------------------------------------------------------------- InfoNCE

ContrastiveSet ContrastiveSet::shared(std::vector<std::pair<std::size_t, std::size_t>> positives,
                                      std::vector<std::size_t> negatives) {
  ContrastiveSet s;
  s.negatives.assign(positives.size(), negatives);
  s.positives = std::move(positives);
  return s;
}

ContrastiveSet ContrastiveSet::in_batch(std::size_t n) {
  ContrastiveSet s;
  for (std::size_t i = 0; i < n; ++i) {
    s.positives.emplace_back(i, i);
    std::vector<std::size_t> neg;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) neg.push_back(j);
    s.negatives.push_back(std::move(neg));
  }
  return s;
}

Var infonce(Tape& tape, Critic& critic, Var locals, Var globals, const ContrastiveSet& set, bool include_positive) {
  if (set.positives.empty()) throw MIError("infonce: no positive pairs");
  if (set.negatives.size() != set.positives.size()) throw MIError("infonce: one negative list per positive required");
  const std::size_t m = set.negatives[0].size();
  if (m == 0) throw MIError("infonce: empty negative set");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  pairs.reserve(set.positives.size() * (m + 1));
  for (std::size_t i = 0; i < set.positives.size(); ++i) {
    if (set.negatives[i].size() != m) throw MIError("infonce: negative lists differ in length");
    const auto [t, z] = set.positives[i];
    pairs.emplace_back(t, z);
    for (auto n : set.negatives[i]) pairs.emplace_back(n, z);
  }
  const std::size_t p = set.positives.size();
  Var s = ops::reshape(critic.scores(tape, locals, globals, pairs), Shape{p, m + 1});
  Var pos = ops::reshape(ops::slice(s, 1, 0, 1), Shape{p});
  Var denom = include_positive ? s : ops::slice(s, 1, 1, m + 1);
  return ops::mean(ops::sub(pos, ops::log_sum_exp(denom)));
}

MIEstimate infonce_estimate(Critic& critic, const Tensor& locals, const Tensor& globals, const ContrastiveSet& set,
                            bool include_positive) {
  Tape tape(false);
  Var v = infonce(tape, critic, tape.constant(locals), tape.constant(globals), set, include_positive);
  const double raw = v.value().item();
  const double denom = static_cast<double>(set.negatives.at(0).size() + (include_positive ? 1 : 0));
  return MIEstimate{raw + std::log(denom), EstimatorKind::infonce, set.positives.size(), 0.0, raw};
}

namespace {

Tensor take_rows(const Tensor& t, std::size_t begin, std::size_t count) {
  const std::size_t c = t.cols();
  Tensor out(Shape{count, c});
  std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(begin * c), count * c, out.data.begin());
  return out;
}

Tensor take_rows(const Tensor& t, std::span<const std::size_t> rows) {
  const std::size_t c = t.cols();
  Tensor out(Shape{rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(rows[i] * c), c,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * c));
  return out;
}

}  // namespace

Critic train_critic(const Tensor& locals, const Tensor& globals, const CriticTrainConfig& config, std::uint64_t seed) {
  const std::size_t n = locals.rows();
  if (globals.rows() != n) throw ShapeError("train-critic", locals.shape, globals.shape);
  if (n < 2 || config.batch < 2) throw MIError("critic training needs at least 2 paired rows");
  Critic critic(locals.cols(), globals.cols(), config.hidden, seed);
  OptimizerConfig oc;
  oc.kind = "adam";
  oc.learning_rate = config.learning_rate;
  oc.clip_norm = 0.0;
  Optimizer opt(critic.parameters(), oc);
  Rng rng = Rng::for_label(seed, "critic.batches");
  const std::size_t b = std::min(config.batch, n);
  const ContrastiveSet set = ContrastiveSet::in_batch(b);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;
  for (std::size_t step = 0; step < config.steps; ++step) {
    if (cursor + b > n) {
      rng.shuffle(order);
      cursor = 0;
    }
    std::span<const std::size_t> rows(order.data() + cursor, b);
    cursor += b;
    Tape tape;
    Var loss = ops::scale(infonce(tape, critic, tape.constant(take_rows(locals, rows)),
                                  tape.constant(take_rows(globals, rows)), set, config.include_positive),
                          -1.0);
    opt.zero_grad();
    tape.backward(loss);
    tape.accumulate_param_grads();
    opt.step();
  }
  return critic;
}

MIEstimate infonce_in_batches(Critic& critic, const Tensor& locals, const Tensor& globals, std::size_t batch,
                              bool include_positive) {
  const std::size_t n = locals.rows();
  if (globals.rows() != n) throw ShapeError("infonce-in-batches", locals.shape, globals.shape);
  if (batch < 2 || n < batch) throw MIError("infonce_in_batches: need at least one batch of >= 2 rows");
  std::vector<double> values;
  double raw = 0.0;
  const ContrastiveSet set = ContrastiveSet::in_batch(batch);
  for (std::size_t start = 0; start + batch <= n; start += batch) {
    const auto est = infonce_estimate(critic, take_rows(locals, start, batch), take_rows(globals, start, batch), set,
                                      include_positive);
    values.push_back(est.value);
    raw += est.raw;
  }
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  const double se = values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1) /
                                                  static_cast<double>(values.size()))
                                      : 0.0;
  return MIEstimate{mean, EstimatorKind::infonce, values.size() * batch, se,
                    raw / static_cast<double>(values.size())};
}

// ---------------------------------------------------------------- CLUB

MIEstimate club_upper_bound(const Tensor& x, const Tensor& t, const CondLogDensity& log_density) {
  const std::size_t n = x.rows();
  if (t.rows() != n) throw ShapeError("club", x.shape, t.shape);
  if (n < 2) throw MIError("club needs at least 2 samples");
  const std::size_t dx = x.cols(), dt = t.cols();
  std::vector<double> terms(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const double> xi(&x.data[i * dx], dx);
    const double own = log_density(xi, std::span<const double>(&t.data[i * dt], dt));
    double cross = 0.0;
    for (std::size_t j = 0; j < n; ++j) cross += log_density(xi, std::span<const double>(&t.data[j * dt], dt)) - own;
    terms[i] = -cross / static_cast<double>(n);
  }
  const double mean = std::accumulate(terms.begin(), terms.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double v : terms) var += (v - mean) * (v - mean);
  const double se = std::sqrt(var / static_cast<double>(n - 1) / static_cast<double>(n));
  return MIEstimate{mean, EstimatorKind::club, n, se};
}

CondLogDensity gaussian_conditional(double slope, double variance) {
  const double norm = -0.5 * std::log(2.0 * std::numbers::pi * variance);
  return [slope, variance, norm](std::span<const double> x, std::span<const double> t) {
    double s = 0.0;
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double diff = t[k] - slope * x[k];
      s += diff * diff;
    }
    return static_cast<double>(t.size()) * norm - 0.5 * s / variance;
  };
}

double gaussian_mi(double rho) { return -0.5 * std::log(1.0 - rho * rho); }

std::pair<Tensor, Tensor> correlated_gaussians(double rho, std::size_t n, Rng& rng) {
  Tensor x(Shape{n, 1}), y(Shape{n, 1});
  const double c = std::sqrt(1.0 - rho * rho);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = rng.normal();
    const double b = rng.normal();
    x.data[i] = a;
    y.data[i] = rho * a + c * b;
  }
  return {x, y};
}

// ---------------------------------------------------------------- lemmas

double phi(double x) {
  if (!(x >= 0.0)) throw MIError("phi: argument must be >= 0");
  if (x == 0.0) return 0.0;
  const double inv_e = std::exp(-1.0);
  if (x < inv_e) return -x * std::log(x);
  return inv_e;
}

namespace {

double xlogx(double v) { return v == 0.0 ? 0.0 : v * std::log(v); }

void require_unit(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0)) throw MIError(std::string("lemma2_check: ") + name + " must lie in [0, 1]");
}

}  // namespace

bool lemma2_check(double a, double b) {
  require_unit(a, "a");
  require_unit(b, "b");
  return std::abs(xlogx(a) - xlogx(b)) <= phi(std::abs(a - b)) + 1e-12;
}

Lemma1Result lemma1_check(std::size_t n, const std::vector<Tensor>& channels, std::span<const double> input_joint) {
  if (n == 0 || channels.size() != n) throw MIError("lemma1_check: need one channel per token");
  std::size_t nx = 1, nt = 1;
  for (const auto& c : channels) {
    if (c.rank() != 2) throw MIError("lemma1_check: channels must be matrices");
    for (std::size_t r = 0; r < c.rows(); ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < c.cols(); ++k) {
        if (c(r, k) < 0.0) throw MIError("lemma1_check: negative channel entry");
        s += c(r, k);
      }
      if (std::abs(s - 1.0) > 1e-12) throw MIError("lemma1_check: channel rows must sum to 1");
    }
    nx *= c.rows();
    nt *= c.cols();
    if (nx * nt > 1000000) throw MIError("lemma1_check: support too large for exact enumeration (> 1e6)");
  }
  if (input_joint.size() != nx) throw MIError("lemma1_check: input pmf size does not match channel inputs");

  // Full joint p(x, t) = p(x) prod_i C_i(x_i, t_i).
  DiscreteJoint full;
  full.p = Tensor(Shape{nx, nt}, 0.0);
  std::vector<std::size_t> xs(n), ts(n);
  for (std::size_t xi = 0; xi < nx; ++xi) {
    std::size_t rem = xi;
    for (std::size_t k = n; k-- > 0;) {
      xs[k] = rem % channels[k].rows();
      rem /= channels[k].rows();
    }
    for (std::size_t ti = 0; ti < nt; ++ti) {
      rem = ti;
      double prob = input_joint[xi];
      for (std::size_t k = n; k-- > 0;) {
        ts[k] = rem % channels[k].cols();
        rem /= channels[k].cols();
        prob *= channels[k](xs[k], ts[k]);
      }
      full.p(xi, ti) = prob;
    }
  }
  Lemma1Result res;
  res.lhs = exact_mi(full).value;

  double sum = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> marg(channels[k].rows(), 0.0);
    for (std::size_t xi = 0; xi < nx; ++xi) {
      std::size_t rem = xi;
      for (std::size_t j = n; j-- > 0;) {
        xs[j] = rem % channels[j].rows();
        rem /= channels[j].rows();
      }
      marg[xs[k]] += input_joint[xi];
    }
    DiscreteJoint local;
    local.p = Tensor(Shape{channels[k].rows(), channels[k].cols()}, 0.0);
    for (std::size_t r = 0; r < channels[k].rows(); ++r)
      for (std::size_t c = 0; c < channels[k].cols(); ++c) local.p(r, c) = marg[r] * channels[k](r, c);
    sum += exact_mi(local).value;
  }
  res.rhs = static_cast<double>(n) * sum;
  res.ok = res.lhs <= res.rhs + 1e-9;
  return res;
}

namespace {

std::vector<double> random_pmf(Rng& rng, std::size_t size) {
  std::vector<double> p(size);
  const int style = static_cast<int>(rng.index(3));
  for (auto& v : p) {
    v = -std::log(1.0 - rng.uniform());  // Dirichlet(1)
    if (style == 1 && rng.uniform() < 0.4) v = 0.0;
  }
  if (style == 2) {
    // Concentrate most mass on a few atoms (strongly dependent inputs).
    for (auto& v : p) v = std::pow(v, 4.0);
  }
  double s = std::accumulate(p.begin(), p.end(), 0.0);
  if (s == 0.0) {
    p[rng.index(size)] = 1.0;
    s = 1.0;
  }
  for (auto& v : p) v /= s;
  // Renormalize once more so the sum is within rounding of 1.
  s = std::accumulate(p.begin(), p.end(), 0.0);
  for (auto& v : p) v /= s;
  return p;
}

Tensor random_channel(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor c(Shape{rows, cols}, 0.0);
  const int style = static_cast<int>(rng.index(4));
  for (std::size_t r = 0; r < rows; ++r) {
    if (style == 0) {
      c(r, rng.index(cols)) = 1.0;  // deterministic
    } else if (style == 1) {
      c(r, std::min(r, cols - 1)) = 1.0;  // identity-like
    } else {
      auto row = random_pmf(rng, cols);
      for (std::size_t k = 0; k < cols; ++k) c(r, k) = row[k];
    }
  }
  return c;
}

}  // namespace

TheoryReport run_theory_check(std::size_t trials, std::size_t lemma2_pairs, std::uint64_t seed) {
  TheoryReport rep;
  rep.seed = seed;
  Rng rng = Rng::for_label(seed, "theory.lemma1");
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t n = 1 + rng.index(3);
    std::vector<Tensor> channels;
    std::size_t nx = 1;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t xs = 2 + rng.index(3), ts = 2 + rng.index(3);
      channels.push_back(random_channel(rng, xs, ts));
      nx *= xs;
    }
    const auto joint = random_pmf(rng, nx);
    const Lemma1Result r = lemma1_check(n, channels, joint);
    rep.lemma1.push_back({n, r.lhs, r.rhs, r.ok});
    if (!r.ok) ++rep.lemma1_violations;
  }
  Rng r2 = Rng::for_label(seed, "theory.lemma2");
  rep.lemma2_pairs = lemma2_pairs;
  rep.lemma2_max_slack = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < lemma2_pairs; ++i) {
    const double a = r2.uniform(), b = r2.uniform();
    if (!lemma2_check(a, b)) ++rep.lemma2_violations;
    rep.lemma2_max_slack = std::max(rep.lemma2_max_slack, std::abs(xlogx(a) - xlogx(b)) - phi(std::abs(a - b)));
  }
  return rep;
}

std::string TheoryReport::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["lemma1"]["trials"] = lemma1.size();
  j["lemma1"]["violations"] = lemma1_violations;
  auto& arr = j["lemma1"]["results"] = nlohmann::ordered_json::array();
  for (const auto& t : lemma1) arr.push_back({{"n", t.n}, {"lhs", t.lhs}, {"rhs", t.rhs}, {"ok", t.ok}});
  j["lemma2"]["pairs"] = lemma2_pairs;
  j["lemma2"]["violations"] = lemma2_violations;
  j["lemma2"]["max_slack"] = lemma2_max_slack;
  j["violations"] = lemma1_violations + lemma2_violations;
  return j.dump(2) + "\n";
}

}  // namespace infobottle
