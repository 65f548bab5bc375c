#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "infobottle/checkpoint.hpp"
#include "infobottle/config.hpp"
#include "infobottle/corpus.hpp"
#include "infobottle/ops.hpp"
#include "infobottle/rng.hpp"

namespace infobottle {

struct ModelConfig {
  std::size_t d = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t vocab_size = 203;  // including the special ids
  std::size_t num_classes = 3;
  std::size_t max_len = 16;  // including CLS
  std::string pooling = "cls";  // cls | mean
  bool tagging = false;         // extra per-token indicator head
  bool freeze_embeddings = true;

  void register_fields(FieldRegistry& reg);
  void validate() const;
};

// Examples row-stacked into one [batch*seq_len x d] layout. seq_len is the
// longest non-PAD prefix in the batch, so shorter rows carry PAD tail slots.
struct Batch {
  std::size_t size = 0;
  std::size_t seq_len = 0;
  std::vector<std::size_t> ids;     // size * seq_len
  std::vector<std::uint8_t> mask;   // 1 for non-PAD slots (CLS, SEP, words)
  std::vector<std::uint8_t> words;  // 1 for word slots only (the "true tokens")
  std::vector<int> labels;
  std::vector<int> tags;  // per slot: 1 on indicator words, 0 elsewhere

  std::size_t rows() const { return size * seq_len; }
};

Batch make_batch(std::span<const Example> examples, const Vocabulary& vocab, const CorpusConfig* corpus = nullptr,
                 std::size_t seq_len = 0);

struct Forward {
  Var local;   // T, [rows x d] embedding output including delta
  Var hidden;  // final encoder states, [rows x d]
  Var global;  // Z, [batch x d]
  Var logits;  // [batch x classes]
};

class Model {
 public:
  Model() = default;
  // Embeddings start from `table` when given (its width must equal d), else
  // from a scaled normal draw.
  Model(const ModelConfig& config, std::uint64_t seed, const ReferenceEmbeddingTable* table = nullptr);
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return config_; }

  // T = token lookup + positional vectors + delta. delta, when given, is
  // [rows x d] with zero rows at PAD slots.
  Var embed(Tape& tape, const Batch& batch, std::optional<Var> delta = std::nullopt);
  // Masked self-attention stack; returns (hidden, global).
  std::pair<Var, Var> encode(Tape& tape, const Batch& batch, Var local);
  Var classify(Tape& tape, Var global);
  // Per-slot indicator logits, [rows x 2]; requires config.tagging.
  Var tag_logits(Tape& tape, Var hidden);
  Forward forward(Tape& tape, const Batch& batch, std::optional<Var> delta = std::nullopt);

  // Mean cross-entropy over the batch.
  static Var task_loss(Var logits, std::span<const int> labels);
  // Mean cross-entropy over word slots.
  Var tagging_loss(Var tag_logits, const Batch& batch);
  // Classification loss, plus the tagging loss when the tagging head is on.
  Var objective(Tape& tape, const Forward& f, const Batch& batch);

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  void zero_grad();

  Checkpoint to_checkpoint(std::uint64_t step = 0, const std::string& extra_config = "") const;
  static Model from_checkpoint(const Checkpoint& ckpt);
  std::vector<std::string> parameter_names() const;

  // Inference helpers (no gradient recording).
  std::vector<std::vector<double>> probabilities(const Batch& batch);
  std::vector<int> predict(const Batch& batch);

 private:
  Parameter& add(const std::string& name, Tensor value, bool trainable = true);
  Parameter& get(const std::string& name);
  void build(Rng& rng, const ReferenceEmbeddingTable* table);

  ModelConfig config_;
  std::vector<std::unique_ptr<Parameter>> params_;
};

struct ModelGradCheck {
  std::vector<std::pair<std::string, double>> parameters;  // name, max relative error
  double delta = 0.0;
  double max_error() const;
};

// Finite-difference check of Model::objective w.r.t. every trainable parameter
// tensor and w.r.t. a random delta (non-PAD rows only).
ModelGradCheck check_model_gradients(Model& model, const Batch& batch, Rng& rng, double step = 1e-5);

std::string model_config_text(const ModelConfig& config);
ModelConfig parse_model_config(const std::string& text);

}  // namespace infobottle
