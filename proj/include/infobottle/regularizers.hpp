#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "infobottle/config.hpp"
#include "infobottle/mi.hpp"
#include "infobottle/model.hpp"

namespace infobottle {

struct IBConfig {
  double beta = 5e-2;
  std::string sample_mode = "identity";  // identity | gaussian_noise | adversarial
  double sigma = 0.0;
  std::size_t pool_size = 64;
  std::string layer = "embedding";  // embedding | hidden

  void register_fields(FieldRegistry& reg);
  void validate() const;
};

struct AnchorConfig {
  double alpha = 5e-3;
  double c_l = 0.5;
  double c_h = 0.9;
  std::size_t max_negatives = 64;  // complement tokens shared by a batch
  std::size_t max_positives = 64;  // anchored tokens scored per batch
  bool include_positive = true;
  std::size_t critic_hidden = 300;
  double critic_learning_rate = 1e-3;

  void register_fields(FieldRegistry& reg);
  void validate() const;
};

struct AnchoredIndexSet {
  std::vector<std::size_t> selected;    // ascending
  std::vector<std::size_t> complement;  // ascending

  std::size_t M() const { return selected.size(); }
  std::size_t M_prime() const { return complement.size(); }
};

// Sorts norms ascending (ties by index), gives position p (1-based) the rank
// fraction p/n and selects c_l <= p/n <= c_h.
AnchoredIndexSet anchored_select(std::span<const double> grad_norms, double c_l, double c_h);

// beta / B * sum over true tokens k of [ -|t'_k - t_k|^2 + mean_j |t_j - t_k|^2 ],
// the pool t_j being up to `pool_rows` true-token rows of the batch.
// `token_rows` index rows of `clean` / `sampled`; B is `batch_size`.
Var ib_penalty(Var clean, Var sampled, std::span<const std::size_t> token_rows,
               std::span<const std::size_t> pool_rows, double beta, std::size_t batch_size);

// Pool rows for ib_penalty: all of `token_rows` or a seeded subsample of size `pool_size`.
std::vector<std::size_t> ib_pool(std::span<const std::size_t> token_rows, std::size_t pool_size, Rng& rng);

// Per-example anchored sets from a [rows x d] gradient of the task loss
// w.r.t. delta; indices are batch rows.
struct BatchAnchors {
  std::vector<std::size_t> anchored_rows;
  std::vector<std::size_t> anchored_example;  // example index of each anchored row
  std::vector<std::size_t> complement_rows;
  std::size_t empty_examples = 0;
};
BatchAnchors select_batch_anchors(const Batch& batch, const Tensor& delta_grad, double c_l, double c_h);

// Mean InfoNCE (raw objective) of anchored (t, z) pairs against shared
// negatives drawn from the complement rows. `globals` has one row per
// example. Returns a Var with tape == nullptr when there is no anchored row
// or no negative.
Var anchored_alignment(Tape& tape, Critic& critic, Var locals, Var globals, const BatchAnchors& anchors,
                       const AnchorConfig& config, Rng& rng);

}  // namespace infobottle
