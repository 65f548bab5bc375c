#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "infobottle/config.hpp"
#include "infobottle/tensor.hpp"

namespace infobottle {

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Word ids 0..2 are reserved; every other id belongs to exactly one synonym set.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kCls = 1;
  static constexpr std::size_t kSep = 2;
  static constexpr std::size_t kNumSpecial = 3;

  Vocabulary() = default;
  // Builds the standard synthetic vocabulary: `word_count` words in sets of `set_size`.
  static Vocabulary synthetic(std::size_t word_count, std::size_t set_size);
  // words/set ids for the non-special vocabulary, in id order.
  static Vocabulary from_entries(const std::vector<std::pair<std::string, std::size_t>>& entries);

  std::size_t size() const { return words_.size(); }
  std::size_t num_sets() const { return members_.size(); }
  const std::string& word(std::size_t id) const { return words_.at(id); }
  std::size_t id_of(const std::string& word) const;
  bool contains(const std::string& word) const { return index_.count(word) != 0; }
  bool is_special(std::size_t id) const { return id < kNumSpecial; }
  // Synonym set of a non-special id.
  std::size_t set_of(std::size_t id) const;
  const std::vector<std::size_t>& members(std::size_t set) const { return members_.at(set); }
  // In-set alternatives to `id`, excluding `id` itself.
  std::vector<std::size_t> synonyms(std::size_t id) const;

  // Throws CorpusError unless the sets partition the non-special words and
  // each has at least two members.
  void validate() const;

 private:
  std::vector<std::string> words_;
  std::vector<std::size_t> set_of_;
  std::vector<std::vector<std::size_t>> members_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct ReferenceEmbeddingTable {
  Tensor vectors;  // [vocab x d]; PAD row is zero
  double epsilon = 0.0;

  std::size_t dim() const { return vectors.cols(); }
  double distance(std::size_t a, std::size_t b) const;
};

// Centroids are drawn on a sphere and rejected until pairwise distance is at
// least 4 * epsilon; members sit within epsilon / 2 of their centroid. That
// yields intra-set distance <= epsilon and inter-set distance >= 3 * epsilon.
ReferenceEmbeddingTable build_reference_embeddings(const Vocabulary& vocab, std::size_t dim, double epsilon,
                                                   std::uint64_t seed, double radius = 1.0,
                                                   double member_alignment = 0.0);
// Exhaustive check of both margins; throws CorpusError on violation.
void verify_reference_embeddings(const Vocabulary& vocab, const ReferenceEmbeddingTable& table);

struct CorpusConfig {
  std::size_t vocab_size = 200;  // non-special words
  std::size_t set_size = 4;
  std::size_t num_classes = 3;
  // Sets [0, indicator_sets) carry the label: set s belongs to class s % num_classes.
  std::size_t indicator_sets = 12;
  std::size_t indicators_per_example = 2;
  std::size_t min_words = 6;
  std::size_t max_words = 15;
  std::size_t train_size = 5000;
  std::size_t dev_size = 500;
  std::size_t test_size = 1000;
  // Probability that a filler word uses the member slot tied to the label.
  // The slot carries no oracle information; it is a surface cue only.
  double cue_rate = 0.0;
  bool pair_task = false;
  std::size_t embed_dim = 32;
  double epsilon = 0.25;
  std::uint64_t embedding_seed = 0;
  // Weight of a per-slot direction shared across sets in the member jitter.
  double member_alignment = 0.0;

  void register_fields(FieldRegistry& reg);
  void validate() const;
  // Sequence capacity including the CLS slot (and SEP in pair mode).
  std::size_t capacity() const { return max_words + 1 + (pair_task ? 1 : 0); }
};

struct Example {
  std::vector<std::size_t> token_ids;  // CLS first, PAD-completed to capacity
  int label = 0;
  std::size_t n = 0;  // true word count (CLS and SEP excluded)

  // Positions holding words, i.e. not CLS/SEP/PAD.
  std::vector<std::size_t> word_positions(const Vocabulary& vocab) const;
  bool operator==(const Example&) const = default;
};

struct Corpus {
  CorpusConfig config;
  Vocabulary vocab;
  std::vector<Example> train, dev, test;

  bool operator==(const Corpus& o) const {
    return train == o.train && dev == o.dev && test == o.test && vocab.size() == o.vocab.size();
  }
};

// Oracle o(x): a function of which indicator sets occur, never of members.
int oracle_label(const CorpusConfig& config, const Vocabulary& vocab, const Example& ex);
// Word positions whose set is an indicator set (the "answer span" of the tagging variant).
std::vector<std::size_t> indicator_positions(const CorpusConfig& config, const Vocabulary& vocab, const Example& ex);

Corpus generate_corpus(const CorpusConfig& config, std::uint64_t seed);

// The reference table described by corpus.embed_dim / epsilon / embedding_seed.
ReferenceEmbeddingTable reference_table(const Corpus& corpus);

// Directory layout: corpus.cfg, vocab.tsv, train.tsv, dev.tsv, test.tsv and
// embeddings.ibrt (reference table, checked against corpus.cfg on load).
void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

// One split file: `words<TAB>label` per line.
std::string encode_split(const Vocabulary& vocab, const std::vector<Example>& split);
std::vector<Example> decode_split(const std::string& text, const Vocabulary& vocab, const CorpusConfig& config,
                                  const std::string& origin);

Example make_example(const std::vector<std::size_t>& words, int label, const CorpusConfig& config);

}  // namespace infobottle
