#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "infobottle/config.hpp"
#include "infobottle/model.hpp"

namespace infobottle {

// Gradient of a loss w.r.t. an additive embedding perturbation at delta = 0.
struct VirtualGradient {
  Tensor grad;                // [rows x d]
  std::vector<double> norms;  // per row; NaN where the row is not a word slot
  double loss = 0.0;

  // (row, norm) pairs of word slots of example e, in position order.
  std::vector<std::pair<std::size_t, double>> example_norms(const Batch& batch, std::size_t e) const;
};

// Builds the loss from the tape and the delta leaf.
using DeltaLoss = std::function<Var(Tape&, Var delta)>;

VirtualGradient virtual_gradient(const DeltaLoss& loss, std::size_t rows, std::size_t d,
                                 const std::vector<std::uint8_t>& word_slots);
// Task loss of `model` on `batch`, scaled by `loss_scale`.
VirtualGradient virtual_gradient(Model& model, const Batch& batch, double loss_scale = 1.0);

struct PerturbationState {
  Tensor delta;
  double epsilon = 0.0;
  double eta = 0.0;
};

// Frobenius projection onto the epsilon ball.
void project_frobenius(std::span<double> block, double epsilon);

// delta <- P(eta * g / |g|_F); unchanged when |g|_F < 1e-12.
PerturbationState pgd_update(PerturbationState state, const Tensor& g);
// delta <- P(delta + eta * g / |g|_F).
PerturbationState pgd_accumulate(PerturbationState state, const Tensor& g);

// Per-example versions over a row-stacked batch: each block of seq_len rows
// is normalized and projected on its own. PAD rows stay zero.
void pgd_batch_step(Tensor& delta, const Tensor& g, const Batch& batch, double eta, double epsilon, bool accumulate);

struct FreeLBConfig {
  std::size_t steps = 3;
  double eta = 0.1;
  double epsilon = 0.3;
  double init_norm = 0.0;

  void register_fields(FieldRegistry& reg);
  void validate() const;
};

struct AdversarialLoss {
  double loss = 0.0;                // mean of the round losses
  std::vector<double> round_losses;
  Tensor delta;                     // perturbation used in the last round
  Tensor clean_grad;                // task-loss gradient w.r.t. delta at delta = 0
  double extra = 0.0;               // value returned by the hook
};

// Receives the last round's tape, forward pass, delta leaf and the clean
// delta-gradient; returns an extra scalar added to that round's loss (or a
// Var with tape == nullptr for none).
using RoundHook = std::function<Var(Tape&, const Forward&, Var delta, const Tensor& clean_grad)>;

// K rounds of forward / backward with an ascending perturbation. Parameter
// gradients of the mean task loss (plus the hook term) are accumulated into
// the model's Parameter::grad.
AdversarialLoss adversarial_training_loss(Model& model, const Batch& batch, const FreeLBConfig& config, Rng& rng,
                                          const RoundHook& hook = nullptr);

struct WordSubConfig {
  double max_fraction = 0.5;     // of the example's words
  std::size_t query_budget = 2000;

  void register_fields(FieldRegistry& reg);
  void validate() const;
};

struct AttackTrace {
  std::vector<std::size_t> positions;
  std::vector<std::size_t> original_ids;
  std::vector<std::size_t> chosen_ids;
  std::vector<double> true_prob;  // before any swap, then after each swap
  std::size_t queries = 0;
};

struct AttackResult {
  Example adversarial;
  bool skipped = false;  // the clean example was already misclassified
  bool success = false;  // the final prediction differs from the label
  AttackTrace trace;
};

// Greedy synonym substitution against `model`. Candidates are in-set
// alternatives within table.epsilon of the original word.
AttackResult word_substitution_attack(Model& model, const Example& example, const Vocabulary& vocab,
                                      const ReferenceEmbeddingTable& table, const WordSubConfig& config);

}  // namespace infobottle
