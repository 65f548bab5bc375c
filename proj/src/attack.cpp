#include "infobottle/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace infobottle {

namespace {

double frobenius(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

std::vector<std::pair<std::size_t, double>> VirtualGradient::example_norms(const Batch& batch, std::size_t e) const {
  std::vector<std::pair<std::size_t, double>> out;
  for (std::size_t i = 0; i < batch.seq_len; ++i) {
    const std::size_t r = e * batch.seq_len + i;
    if (batch.words[r]) out.emplace_back(r, norms[r]);
  }
  return out;
}

VirtualGradient virtual_gradient(const DeltaLoss& loss, std::size_t rows, std::size_t d,
                                 const std::vector<std::uint8_t>& word_slots) {
  if (word_slots.size() != rows) throw std::invalid_argument("virtual_gradient: word mask size mismatch");
  Tape tape;
  Var delta = tape.leaf(Tensor(Shape{rows, d}, 0.0));
  Var l = loss(tape, delta);
  tape.backward(l);
  VirtualGradient out;
  out.loss = l.value().item();
  out.grad = tape.grad(delta);
  out.norms.assign(rows, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t r = 0; r < rows; ++r)
    if (word_slots[r]) out.norms[r] = frobenius(std::span<const double>(&out.grad.data[r * d], d));
  return out;
}

VirtualGradient virtual_gradient(Model& model, const Batch& batch, double loss_scale) {
  return virtual_gradient(
      [&](Tape& tape, Var delta) {
        const Forward f = model.forward(tape, batch, delta);
        return ops::scale(model.objective(tape, f, batch), loss_scale);
      },
      batch.rows(), model.config().d, batch.words);
}

void project_frobenius(std::span<double> block, double epsilon) {
  const double n = frobenius(block);
  if (n > epsilon) {
    const double s = n > 0.0 ? epsilon / n : 0.0;
    for (double& v : block) v *= s;
  }
}

namespace {

PerturbationState pgd_step(PerturbationState state, const Tensor& g, bool accumulate) {
  if (g.shape != state.delta.shape) throw ShapeError("pgd-update", state.delta.shape, g.shape);
  const double gn = frobenius(g.data);
  if (gn < 1e-12) return state;
  for (std::size_t i = 0; i < g.size(); ++i)
    state.delta.data[i] = (accumulate ? state.delta.data[i] : 0.0) + state.eta * g.data[i] / gn;
  project_frobenius(state.delta.data, state.epsilon);
  return state;
}

}  // namespace

PerturbationState pgd_update(PerturbationState state, const Tensor& g) { return pgd_step(std::move(state), g, false); }
PerturbationState pgd_accumulate(PerturbationState state, const Tensor& g) {
  return pgd_step(std::move(state), g, true);
}

void pgd_batch_step(Tensor& delta, const Tensor& g, const Batch& batch, double eta, double epsilon, bool accumulate) {
  if (g.shape != delta.shape) throw ShapeError("pgd-update", delta.shape, g.shape);
  const std::size_t d = delta.cols(), len = batch.seq_len * d;
  for (std::size_t e = 0; e < batch.size; ++e) {
    std::span<double> block(&delta.data[e * len], len);
    std::span<const double> gb(&g.data[e * len], len);
    const double gn = frobenius(gb);
    if (gn < 1e-12) continue;
    for (std::size_t i = 0; i < len; ++i) {
      const bool live = batch.mask[e * batch.seq_len + i / d];
      block[i] = live ? (accumulate ? block[i] : 0.0) + eta * gb[i] / gn : 0.0;
    }
    project_frobenius(block, epsilon);
  }
}

void FreeLBConfig::register_fields(FieldRegistry& reg) {
  reg.add("adv.steps", steps, "ascent rounds per batch (0 disables adversarial training)");
  reg.add("adv.eta", eta, "perturbation step size");
  reg.add("adv.epsilon", epsilon, "Frobenius budget per example");
  reg.add("adv.init_norm", init_norm, "norm of the random initial perturbation");
}

void FreeLBConfig::validate() const {
  if (eta < 0.0 || epsilon < 0.0 || init_norm < 0.0) throw ConfigError("adv.* values must be >= 0");
}

AdversarialLoss adversarial_training_loss(Model& model, const Batch& batch, const FreeLBConfig& config, Rng& rng,
                                          const RoundHook& hook) {
  if (config.steps == 0) throw std::invalid_argument("adversarial_training_loss: K must be >= 1");
  const std::size_t d = model.config().d, rows = batch.rows();
  Tensor delta(Shape{rows, d}, 0.0);
  if (config.init_norm > 0.0) {
    for (std::size_t r = 0; r < rows; ++r)
      if (batch.mask[r])
        for (std::size_t c = 0; c < d; ++c) delta(r, c) = rng.uniform(-1.0, 1.0);
    const std::size_t len = batch.seq_len * d;
    for (std::size_t e = 0; e < batch.size; ++e) {
      std::span<double> block(&delta.data[e * len], len);
      const double n = frobenius(block);
      if (n > 0.0)
        for (double& v : block) v *= std::min(config.init_norm, config.epsilon) / n;
    }
  }

  AdversarialLoss out;
  const double inv_k = 1.0 / static_cast<double>(config.steps);
  const bool need_clean = hook && config.init_norm > 0.0;
  if (need_clean) out.clean_grad = virtual_gradient(model, batch).grad;

  for (std::size_t k = 0; k < config.steps; ++k) {
    const bool last = k + 1 == config.steps;
    Tape tape;
    Var dv = tape.leaf(delta);
    const Forward f = model.forward(tape, batch, dv);
    Var task = model.objective(tape, f, batch);
    out.round_losses.push_back(task.value().item());

    if (!last || !hook) {
      tape.backward(ops::scale(task, inv_k));
      tape.accumulate_param_grads();
      if (k == 0 && config.init_norm == 0.0) {
        out.clean_grad = tape.grad(dv);
        for (double& v : out.clean_grad.data) v *= static_cast<double>(config.steps);
      }
      if (!last) pgd_batch_step(delta, tape.grad(dv), batch, config.eta, config.epsilon, true);
      continue;
    }

    // Last round with a hook: the clean gradient must exist before the hook
    // runs, so with K = 1 and no initial noise take it from this tape first.
    if (k == 0 && config.init_norm == 0.0) {
      tape.backward(task);
      out.clean_grad = tape.grad(dv);
    }
    Var total = ops::scale(task, inv_k);
    Var extra = hook(tape, f, dv, out.clean_grad);
    if (extra.tape) {
      out.extra = extra.value().item();
      total = ops::add(total, extra);
    }
    tape.backward(total);
    tape.accumulate_param_grads();
  }
  out.delta = delta;
  out.loss = std::accumulate(out.round_losses.begin(), out.round_losses.end(), 0.0) * inv_k;
  return out;
}

void WordSubConfig::register_fields(FieldRegistry& reg) {
  reg.add("attack.max_fraction", max_fraction, "max share of words an attack may swap");
  reg.add("attack.query_budget", query_budget, "max model queries per attacked example");
}

void WordSubConfig::validate() const {
  if (!(max_fraction >= 0.0 && max_fraction <= 1.0)) throw ConfigError("attack.max_fraction must lie in [0, 1]");
}

AttackResult word_substitution_attack(Model& model, const Example& example, const Vocabulary& vocab,
                                      const ReferenceEmbeddingTable& table, const WordSubConfig& config) {
  AttackResult out;
  out.adversarial = example;
  const std::span<const Example> one(&example, 1);
  const Batch clean = make_batch(one, vocab);
  const auto probs = model.probabilities(clean)[0];
  out.trace.queries = 1;
  const int label = example.label;
  const auto argmax = [](const std::vector<double>& p) {
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
  };
  if (argmax(probs) != label) {
    out.skipped = true;
    return out;
  }
  double current = probs[static_cast<std::size_t>(label)];
  out.trace.true_prob.push_back(current);

  const std::size_t max_swaps =
      static_cast<std::size_t>(std::floor(config.max_fraction * static_cast<double>(example.n) + 1e-9));
  if (max_swaps == 0) return out;

  const VirtualGradient vg = virtual_gradient(model, clean);
  auto order = vg.example_norms(clean, 0);
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

  struct Scored {
    std::vector<std::size_t> cands;
    std::vector<std::vector<double>> probs;
  };
  // Candidates for `pos` on top of `base`, trimmed to the remaining budget.
  const auto score = [&](std::size_t pos, const Example& base) {
    Scored s;
    const std::size_t left = config.query_budget > out.trace.queries ? config.query_budget - out.trace.queries : 0;
    const std::size_t original = example.token_ids[pos];
    for (auto c : vocab.synonyms(original))
      if (c != base.token_ids[pos] && table.distance(original, c) <= table.epsilon) s.cands.push_back(c);
    if (s.cands.size() > left) s.cands.resize(left);
    if (s.cands.empty()) return s;
    std::vector<Example> trial(s.cands.size(), base);
    for (std::size_t c = 0; c < s.cands.size(); ++c) trial[c].token_ids[pos] = s.cands[c];
    s.probs = model.probabilities(make_batch(trial, vocab));
    out.trace.queries += s.cands.size();
    return s;
  };
  // Index of the flipping candidate with the lowest true-class probability,
  // else of the largest drop below `floor`; cands.size() when neither exists.
  const auto choose = [&](const Scored& s, double floor, bool& flips) {
    std::size_t best = s.cands.size();
    double best_p = floor;
    flips = false;
    for (std::size_t c = 0; c < s.cands.size(); ++c) {
      const double p = s.probs[c][static_cast<std::size_t>(label)];
      const bool f = argmax(s.probs[c]) != label;
      if ((f && (!flips || p < best_p)) || (!f && !flips && p < best_p)) {
        best = c;
        flips = f;
        best_p = p;
      }
    }
    return best;
  };
  const auto commit = [&](std::size_t pos, std::size_t id, double p) {
    out.trace.positions.push_back(pos);
    out.trace.original_ids.push_back(example.token_ids[pos]);
    out.trace.chosen_ids.push_back(id);
    out.trace.true_prob.push_back(p);
    out.adversarial.token_ids[pos] = id;
    current = p;
  };

  // Single swaps against the clean input first, in rank order.
  std::vector<Scored> single;
  for (const auto& entry : order) {
    single.push_back(score(entry.first, example));
    bool flips = false;
    const std::size_t best = choose(single.back(), current, flips);
    if (flips) {
      commit(entry.first, single.back().cands[best], single.back().probs[best][static_cast<std::size_t>(label)]);
      out.success = true;
      return out;
    }
  }
  if (max_swaps < 2) return out;

  // Then accumulate the largest drops, rescoring on the modified input.
  std::size_t swaps = 0;
  for (std::size_t k = 0; k < order.size() && swaps < max_swaps && !out.success; ++k) {
    const std::size_t pos = order[k].first;
    const Scored s = swaps == 0 ? single[k] : score(pos, out.adversarial);
    bool flips = false;
    const std::size_t best = choose(s, current, flips);
    if (best == s.cands.size()) continue;
    commit(pos, s.cands[best], s.probs[best][static_cast<std::size_t>(label)]);
    ++swaps;
    out.success = flips;
  }
  return out;
}

}  // namespace infobottle
