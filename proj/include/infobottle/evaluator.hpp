#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "infobottle/attack.hpp"
#include "infobottle/mi.hpp"
#include "infobottle/regularizers.hpp"

namespace infobottle {

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Fraction of `adversarial` examples the model labels correctly.
double robust_accuracy(Model& model, const std::vector<Example>& adversarial, const Vocabulary& vocab);

// F1 between two index sets; two empty sets score 1.
double span_f1(const std::set<std::size_t>& predicted, const std::set<std::size_t>& truth);
// Mean span F1 of the tagging head against indicator positions.
double robust_f1(Model& model, const std::vector<Example>& adversarial, const Vocabulary& vocab,
                 const CorpusConfig& corpus);

struct AdversarialSet {
  std::vector<Example> examples;  // one per input, the original where no attack applied
  std::vector<AttackResult> results;
  std::size_t attacked = 0;   // correctly classified by the victim
  std::size_t succeeded = 0;  // of those, flipped

  double success_rate() const { return attacked ? static_cast<double>(succeeded) / static_cast<double>(attacked) : 0.0; }
};

// Attacks every example against `victim`. `jobs` > 1 splits the work
// across threads, each with its own model copy; results do not depend on it.
AdversarialSet build_adversarial(const Model& victim, const std::vector<Example>& data, const Vocabulary& vocab,
                                 const ReferenceEmbeddingTable& table, const WordSubConfig& config,
                                 std::size_t jobs = 1);

struct EvalReport {
  double benign_accuracy = 0.0;
  double robust_accuracy = 0.0;
  double attack_success_rate = 0.0;
  bool has_robust_f1 = false;
  double benign_f1 = 0.0;
  double robust_f1 = 0.0;
  std::string attack = "none";
  std::uint64_t seed = 0;
  std::string config;
  std::vector<AttackResult> traces;

  std::string to_json(const Vocabulary& vocab) const;
};

struct MICell {
  std::string checkpoint;  // a | b
  std::string group;       // anchored | non_anchored
  std::string dataset;     // benign | adversarial
  MIEstimate estimate;
};

struct MIAnalysisReport {
  std::vector<MICell> cells;
  // b minus a, keyed like "anchored/adversarial".
  std::vector<std::pair<std::string, double>> deltas;
  std::uint64_t seed = 0;

  const MICell& cell(const std::string& ckpt, const std::string& group, const std::string& dataset) const;
  double delta(const std::string& group, const std::string& dataset) const;
  std::string to_json() const;
  std::string to_csv() const;
};

struct MIAnalysisConfig {
  double c_l = 0.5;
  double c_h = 0.9;
  std::string layer = "embedding";  // embedding | hidden
  CriticTrainConfig critic;
  std::size_t eval_batch = 32;

  MIAnalysisConfig() { critic.hidden = 64; }
  void register_fields(FieldRegistry& reg);
};

// Paired (local feature, global feature) rows for anchored and non-anchored
// tokens of `data` under `model`.
struct FeaturePairs {
  Tensor anchored_locals, anchored_globals;
  Tensor other_locals, other_globals;
  std::size_t examples = 0;
  std::size_t empty_examples = 0;
};
FeaturePairs collect_feature_pairs(Model& model, const std::vector<Example>& data, const Vocabulary& vocab,
                                   const MIAnalysisConfig& config);

MIAnalysisReport mi_analysis(const Model& a, const Model& b, const std::vector<Example>& benign,
                             const std::vector<Example>& adversarial, const Vocabulary& vocab,
                             const MIAnalysisConfig& config, std::uint64_t seed);

}  // namespace infobottle
