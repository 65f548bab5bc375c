#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "infobottle/attack.hpp"
#include "infobottle/optim.hpp"
#include "infobottle/regularizers.hpp"

namespace infobottle {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::string mode = "standard";  // standard | adversarial
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
  IBConfig ib;
  AnchorConfig anchor;
  FreeLBConfig adv;
  // Feature layer used by the alignment term.
  std::string anchor_layer = "embedding";  // embedding | hidden

  // A config with both regularizers switched off.
  static TrainConfig vanilla();

  void register_fields(FieldRegistry& reg);
  void validate() const;
};

struct StepStats {
  double total = 0.0;
  double task = 0.0;
  double ib = 0.0;
  double alignment = 0.0;  // raw InfoNCE; the loss subtracts alpha times this
  std::size_t anchored = 0;
  std::size_t complement = 0;
  std::size_t empty_examples = 0;
};

// Builds the full objective for one batch and accumulates its gradients
// into the model's and the critic's Parameter::grad. `critic` may be null
// when alpha = 0.
StepStats accumulate_loss(Model& model, Critic* critic, const Batch& batch, const TrainConfig& config, Rng& rng);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_accuracy = 0.0;
  double dev_loss = 0.0;  // mean objective on dev
};

struct TrainResult {
  Model best;
  Checkpoint checkpoint;  // of `best`, with the config snapshot
  std::vector<EpochRecord> history;
  std::vector<double> loss_trace;  // total loss per step
  std::size_t best_epoch = 0;      // 0 is the initialization
  std::size_t clipped_steps = 0;
};

double accuracy(Model& model, const std::vector<Example>& split, const Vocabulary& vocab, std::size_t batch = 256);
// Example-weighted mean of Model::objective over `split`.
double mean_objective(Model& model, const std::vector<Example>& split, const Vocabulary& vocab,
                      const CorpusConfig* corpus, std::size_t batch = 256);

// Training loop with best-dev selection: highest dev accuracy, ties broken
// by lower dev objective. `log` receives one key=value line
// per step when given. `config_text` is stored in the checkpoint.
TrainResult train(const TrainConfig& config, const ModelConfig& model_config, const Corpus& corpus,
                  std::ostream* log = nullptr, const std::string& config_text = "");

// Shuffled order of the training split for one epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

}  // namespace infobottle
