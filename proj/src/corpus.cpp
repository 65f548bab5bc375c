#include "infobottle/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "infobottle/checkpoint.hpp"
#include "infobottle/rng.hpp"

namespace infobottle {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- vocabulary

Vocabulary Vocabulary::synthetic(std::size_t word_count, std::size_t set_size) {
  if (set_size < 2) throw CorpusError("synonym sets need at least 2 members, got " + std::to_string(set_size));
  if (word_count == 0 || word_count % set_size != 0) {
    throw CorpusError("vocab size " + std::to_string(word_count) + " is not a multiple of set size " +
                      std::to_string(set_size));
  }
  std::vector<std::pair<std::string, std::size_t>> entries;
  const std::size_t sets = word_count / set_size;
  const int width = sets > 100 ? 3 : 2;
  for (std::size_t s = 0; s < sets; ++s) {
    for (std::size_t m = 0; m < set_size; ++m) {
      std::string num = std::to_string(s);
      num.insert(0, static_cast<std::size_t>(std::max(0, width - static_cast<int>(num.size()))), '0');
      entries.emplace_back("w" + num + "_" + std::to_string(m), s);
    }
  }
  return from_entries(entries);
}

Vocabulary Vocabulary::from_entries(const std::vector<std::pair<std::string, std::size_t>>& entries) {
  Vocabulary v;
  v.words_ = {"[PAD]", "[CLS]", "[SEP]"};
  v.set_of_ = {0, 0, 0};
  for (const auto& [word, set] : entries) {
    if (word.empty() || word.find_first_of(" \t\n") != std::string::npos)
      throw CorpusError("invalid vocabulary word '" + word + "'");
    if (set >= v.members_.size()) v.members_.resize(set + 1);
    const std::size_t id = v.words_.size();
    v.words_.push_back(word);
    v.set_of_.push_back(set);
    v.members_[set].push_back(id);
  }
  for (std::size_t id = 0; id < v.words_.size(); ++id) {
    if (!v.index_.emplace(v.words_[id], id).second) throw CorpusError("duplicate vocabulary word '" + v.words_[id] + "'");
  }
  v.validate();
  return v;
}

std::size_t Vocabulary::id_of(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw CorpusError("unknown word '" + word + "'");
  return it->second;
}

std::size_t Vocabulary::set_of(std::size_t id) const {
  if (is_special(id)) throw CorpusError("special token " + std::to_string(id) + " has no synonym set");
  return set_of_.at(id);
}

std::vector<std::size_t> Vocabulary::synonyms(std::size_t id) const {
  std::vector<std::size_t> out;
  if (is_special(id)) return out;
  for (auto m : members_[set_of(id)])
    if (m != id) out.push_back(m);
  return out;
}

void Vocabulary::validate() const {
  std::size_t covered = 0;
  for (std::size_t s = 0; s < members_.size(); ++s) {
    if (members_[s].size() < 2) {
      throw CorpusError("synonym set " + std::to_string(s) + " has " + std::to_string(members_[s].size()) +
                        " member(s); at least 2 required");
    }
    covered += members_[s].size();
  }
  if (covered + kNumSpecial != words_.size()) throw CorpusError("synonym sets do not partition the vocabulary");
}

// ---------------------------------------------------------------- embeddings

double ReferenceEmbeddingTable::distance(std::size_t a, std::size_t b) const {
  const std::size_t d = dim();
  double s = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    const double diff = vectors(a, c) - vectors(b, c);
    s += diff * diff;
  }
  return std::sqrt(s);
}

namespace {

std::vector<double> random_direction(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double n = 0.0;
  do {
    n = 0.0;
    for (double& x : v) {
      x = rng.normal();
      n += x * x;
    }
  } while (n < 1e-24);
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

}  // namespace

ReferenceEmbeddingTable build_reference_embeddings(const Vocabulary& vocab, std::size_t dim, double epsilon,
                                                   std::uint64_t seed, double radius, double member_alignment) {
  if (!(member_alignment >= 0.0 && member_alignment <= 1.0))
    throw CorpusError("member alignment must lie in [0, 1]");
  if (dim < 2) throw CorpusError("embedding dimension must be >= 2");
  if (!(epsilon > 0.0)) throw CorpusError("epsilon must be positive");
  vocab.validate();
  Rng rng = Rng::for_label(seed, "corpus.embeddings");
  // The special tokens get their own centroids so that CLS/SEP never sit
  // inside a synonym ball.
  const std::size_t groups = vocab.num_sets() + 2;
  const double min_sep = 4.0 * epsilon;
  constexpr int kMaxRetries = 2000;
  std::vector<std::vector<double>> centroids;
  for (std::size_t g = 0; g < groups; ++g) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxRetries && !placed; ++attempt) {
      auto c = random_direction(rng, dim);
      for (double& x : c) x *= radius;
      placed = std::all_of(centroids.begin(), centroids.end(), [&](const std::vector<double>& o) {
        double s = 0.0;
        for (std::size_t k = 0; k < dim; ++k) s += (c[k] - o[k]) * (c[k] - o[k]);
        return std::sqrt(s) >= min_sep;
      });
      if (placed) centroids.push_back(std::move(c));
    }
    if (!placed) {
      throw CorpusError("cannot place " + std::to_string(groups) + " synonym centroids " + format_double(min_sep) +
                        " apart after " + std::to_string(kMaxRetries) +
                        " retries; use a larger embedding dimension or a smaller epsilon");
    }
  }
  ReferenceEmbeddingTable table;
  table.epsilon = epsilon;
  table.vectors = Tensor(Shape{vocab.size(), dim}, 0.0);
  const std::size_t nsets = vocab.num_sets();
  for (std::size_t k = 0; k < dim; ++k) {
    table.vectors(Vocabulary::kCls, k) = centroids[nsets][k];
    table.vectors(Vocabulary::kSep, k) = centroids[nsets + 1][k];
  }
  // Member slot m of every set leans toward a shared direction u_m.
  std::vector<std::vector<double>> slot_dirs;
  if (member_alignment > 0.0) {
    std::size_t slots = 0;
    for (std::size_t s = 0; s < nsets; ++s) slots = std::max(slots, vocab.members(s).size());
    for (std::size_t m = 0; m < slots; ++m) slot_dirs.push_back(random_direction(rng, dim));
  }
  for (std::size_t s = 0; s < nsets; ++s) {
    const auto& members = vocab.members(s);
    for (std::size_t m = 0; m < members.size(); ++m) {
      const std::size_t id = members[m];
      auto dir = random_direction(rng, dim);
      if (member_alignment > 0.0) {
        double n = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
          dir[k] = member_alignment * slot_dirs[m][k] + (1.0 - member_alignment) * dir[k];
          n += dir[k] * dir[k];
        }
        n = std::sqrt(n);
        for (double& x : dir) x /= n;
      }
      // Jitter radius in [eps/4, eps/2] keeps members distinct yet inside the ball.
      const double r = 0.5 * epsilon * rng.uniform(0.5, 1.0);
      for (std::size_t k = 0; k < dim; ++k) table.vectors(id, k) = centroids[s][k] + r * dir[k];
    }
  }
  verify_reference_embeddings(vocab, table);
  return table;
}

void verify_reference_embeddings(const Vocabulary& vocab, const ReferenceEmbeddingTable& table) {
  if (table.vectors.rows() != vocab.size()) throw CorpusError("embedding table rows do not match vocabulary");
  const double eps = table.epsilon;
  for (std::size_t a = Vocabulary::kNumSpecial; a < vocab.size(); ++a) {
    for (std::size_t b = a + 1; b < vocab.size(); ++b) {
      const double d = table.distance(a, b);
      const bool same = vocab.set_of(a) == vocab.set_of(b);
      if (same && d > eps) {
        throw CorpusError("synonyms " + vocab.word(a) + "/" + vocab.word(b) + " are " + format_double(d) +
                          " apart, exceeding epsilon " + format_double(eps));
      }
      if (!same && d < 3.0 * eps) {
        throw CorpusError("non-synonyms " + vocab.word(a) + "/" + vocab.word(b) + " are only " + format_double(d) +
                          " apart (< 3 epsilon)");
      }
    }
  }
}

// ---------------------------------------------------------------- config

void CorpusConfig::register_fields(FieldRegistry& reg) {
  reg.add("corpus.vocab_size", vocab_size, "number of non-special words");
  reg.add("corpus.set_size", set_size, "members per synonym set");
  reg.add("corpus.num_classes", num_classes, "label classes");
  reg.add("corpus.indicator_sets", indicator_sets, "synonym sets that determine the label");
  reg.add("corpus.indicators_per_example", indicators_per_example, "indicator words planted per sentence");
  reg.add("corpus.min_words", min_words, "shortest sentence (words)");
  reg.add("corpus.max_words", max_words, "longest sentence (words)");
  reg.add("corpus.train_size", train_size, "training examples");
  reg.add("corpus.dev_size", dev_size, "development examples");
  reg.add("corpus.test_size", test_size, "test examples");
  reg.add("corpus.cue_rate", cue_rate, "probability a filler word uses the label-tied member slot");
  reg.add("corpus.pair_task", pair_task, "two segments joined by [SEP]; label = sum of segment classes mod C");
  reg.add("corpus.embed_dim", embed_dim, "reference embedding width");
  reg.add("corpus.epsilon", epsilon, "synonym radius in the reference embedding space");
  reg.add("corpus.embedding_seed", embedding_seed, "seed of the reference embedding table");
  reg.add("corpus.member_alignment", member_alignment, "share of member jitter along a per-slot direction common to all sets");
}

void CorpusConfig::validate() const {
  if (set_size < 2) throw CorpusError("corpus.set_size must be >= 2");
  if (vocab_size % set_size != 0) throw CorpusError("corpus.vocab_size must be a multiple of corpus.set_size");
  const std::size_t sets = vocab_size / set_size;
  if (num_classes < 2) throw CorpusError("corpus.num_classes must be >= 2");
  if (num_classes > indicator_sets) {
    throw CorpusError("inconsistent corpus config: " + std::to_string(num_classes) + " classes but only " +
                      std::to_string(indicator_sets) + " indicator sets");
  }
  if (indicator_sets >= sets) throw CorpusError("corpus.indicator_sets leaves no filler sets");
  if (indicators_per_example == 0) throw CorpusError("corpus.indicators_per_example must be >= 1");
  if (min_words == 0 || min_words > max_words) throw CorpusError("corpus.min_words must be in [1, max_words]");
  const std::size_t per_segment = pair_task ? std::max<std::size_t>(1, indicators_per_example / 2) : indicators_per_example;
  if (per_segment > min_words) throw CorpusError("corpus.min_words cannot hold the indicator words");
  if (cue_rate < 0.0 || cue_rate > 1.0) throw CorpusError("corpus.cue_rate must be in [0, 1]");
  if (member_alignment < 0.0 || member_alignment > 1.0) throw CorpusError("corpus.member_alignment must be in [0, 1]");
}

// ---------------------------------------------------------------- examples

std::vector<std::size_t> Example::word_positions(const Vocabulary& vocab) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < token_ids.size(); ++i)
    if (!vocab.is_special(token_ids[i])) out.push_back(i);
  return out;
}

Example make_example(const std::vector<std::size_t>& words, int label, const CorpusConfig& config) {
  Example ex;
  ex.label = label;
  ex.token_ids.assign(config.capacity(), Vocabulary::kPad);
  if (words.size() + 1 > ex.token_ids.size()) throw CorpusError("sentence longer than capacity");
  ex.token_ids[0] = Vocabulary::kCls;
  for (std::size_t i = 0; i < words.size(); ++i) {
    ex.token_ids[i + 1] = words[i];
    if (words[i] >= Vocabulary::kNumSpecial) ++ex.n;
  }
  return ex;
}

namespace {

int majority_class(const std::vector<std::size_t>& counts) {
  int best = -1;
  std::size_t best_count = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] > best_count) {
      best = static_cast<int>(c);
      best_count = counts[c];
    }
  }
  return best;
}

}  // namespace

int oracle_label(const CorpusConfig& config, const Vocabulary& vocab, const Example& ex) {
  std::vector<std::vector<std::size_t>> segments(1, std::vector<std::size_t>(config.num_classes, 0));
  for (std::size_t i = 1; i < ex.token_ids.size(); ++i) {
    const std::size_t id = ex.token_ids[i];
    if (id == Vocabulary::kSep) {
      segments.emplace_back(config.num_classes, 0);
      continue;
    }
    if (vocab.is_special(id)) continue;
    const std::size_t set = vocab.set_of(id);
    if (set < config.indicator_sets) ++segments.back()[set % config.num_classes];
  }
  if (!config.pair_task) return majority_class(segments[0]);
  if (segments.size() != 2) return -1;
  const int a = majority_class(segments[0]);
  const int b = majority_class(segments[1]);
  if (a < 0 || b < 0) return -1;
  return (a + b) % static_cast<int>(config.num_classes);
}

std::vector<std::size_t> indicator_positions(const CorpusConfig& config, const Vocabulary& vocab, const Example& ex) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ex.token_ids.size(); ++i) {
    const std::size_t id = ex.token_ids[i];
    if (vocab.is_special(id)) continue;
    if (vocab.set_of(id) < config.indicator_sets) out.push_back(i);
  }
  return out;
}

namespace {

// One segment of `len` words whose indicator sets all belong to `cls`.
std::vector<std::size_t> make_segment(const CorpusConfig& cfg, const Vocabulary& vocab, Rng& rng, std::size_t len,
                                      std::size_t indicators, int cls, int cue_label) {
  std::vector<std::size_t> class_sets;
  for (std::size_t s = 0; s < cfg.indicator_sets; ++s)
    if (static_cast<int>(s % cfg.num_classes) == cls) class_sets.push_back(s);
  const std::size_t sets = vocab.num_sets();
  std::vector<std::size_t> slots(len);
  for (std::size_t i = 0; i < len; ++i) slots[i] = i;
  rng.shuffle(slots);
  std::vector<std::size_t> words(len);
  for (std::size_t k = 0; k < len; ++k) {
    std::size_t set = 0;
    std::size_t member = 0;
    if (k < indicators) {
      set = class_sets[rng.index(class_sets.size())];
      member = rng.index(cfg.set_size);
    } else {
      set = cfg.indicator_sets + rng.index(sets - cfg.indicator_sets);
      member = rng.uniform() < cfg.cue_rate ? static_cast<std::size_t>(cue_label) % cfg.set_size
                                            : rng.index(cfg.set_size);
    }
    words[slots[k]] = vocab.members(set)[member];
  }
  return words;
}

}  // namespace

ReferenceEmbeddingTable reference_table(const Corpus& corpus) {
  return build_reference_embeddings(corpus.vocab, corpus.config.embed_dim, corpus.config.epsilon,
                                    corpus.config.embedding_seed, 1.0, corpus.config.member_alignment);
}

Corpus generate_corpus(const CorpusConfig& config, std::uint64_t seed) {
  config.validate();
  Corpus corpus;
  corpus.config = config;
  corpus.vocab = Vocabulary::synthetic(config.vocab_size, config.set_size);
  Rng rng = Rng::for_label(seed, "corpus.generate");
  std::set<std::vector<std::size_t>> seen;
  const int C = static_cast<int>(config.num_classes);

  auto make_split = [&](std::size_t count) {
    std::vector<Example> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      const int label = static_cast<int>(i % config.num_classes);
      for (int attempt = 0;; ++attempt) {
        if (attempt > 1000) throw CorpusError("cannot generate distinct examples; enlarge the vocabulary");
        std::vector<std::size_t> words;
        if (!config.pair_task) {
          const std::size_t len = config.min_words + rng.index(config.max_words - config.min_words + 1);
          words = make_segment(config, corpus.vocab, rng, len, config.indicators_per_example, label, label);
        } else {
          const std::size_t per = std::max<std::size_t>(1, config.indicators_per_example / 2);
          const std::size_t total = config.min_words + rng.index(config.max_words - config.min_words + 1);
          const std::size_t len_a = std::max(per, total / 2);
          const std::size_t len_b = std::max(per, total - len_a);
          const int a = static_cast<int>(rng.index(config.num_classes));
          const int b = ((label - a) % C + C) % C;
          words = make_segment(config, corpus.vocab, rng, len_a, per, a, label);
          words.push_back(Vocabulary::kSep);
          const auto seg_b = make_segment(config, corpus.vocab, rng, len_b, per, b, label);
          words.insert(words.end(), seg_b.begin(), seg_b.end());
        }
        Example ex = make_example(words, label, config);
        if (seen.insert(ex.token_ids).second) {
          out.push_back(std::move(ex));
          break;
        }
      }
    }
    rng.shuffle(out);
    return out;
  };
  corpus.train = make_split(config.train_size);
  corpus.dev = make_split(config.dev_size);
  corpus.test = make_split(config.test_size);
  return corpus;
}

// ---------------------------------------------------------------- files

std::string encode_split(const Vocabulary& vocab, const std::vector<Example>& split) {
  std::ostringstream os;
  for (const auto& ex : split) {
    bool first = true;
    for (std::size_t i = 1; i < ex.token_ids.size(); ++i) {
      const std::size_t id = ex.token_ids[i];
      if (id == Vocabulary::kPad) break;
      os << (first ? "" : " ") << vocab.word(id);
      first = false;
    }
    os << '\t' << ex.label << '\n';
  }
  return os.str();
}

std::vector<Example> decode_split(const std::string& text, const Vocabulary& vocab, const CorpusConfig& config,
                                  const std::string& origin) {
  std::vector<Example> out;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    ++line_no;
    const std::size_t line_start = pos;
    const std::size_t nl = text.find('\n', pos);
    auto fail = [&](const std::string& why) {
      throw CorpusError(origin + ":" + std::to_string(line_no) + " (byte offset " + std::to_string(line_start) +
                        "): " + why);
    };
    if (nl == std::string::npos) fail("truncated record (missing newline)");
    const std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) fail("expected 'tokens<TAB>label'");
    std::vector<std::size_t> words;
    std::istringstream ws(line.substr(0, tab));
    std::string w;
    while (ws >> w) {
      if (!vocab.contains(w)) fail("unknown word '" + w + "'");
      const std::size_t id = vocab.id_of(w);
      if (id == Vocabulary::kPad || id == Vocabulary::kCls) fail("reserved token '" + w + "' in sentence");
      words.push_back(id);
    }
    if (words.empty()) fail("empty sentence");
    if (words.size() + 1 > config.capacity()) fail("sentence exceeds capacity " + std::to_string(config.capacity()));
    const std::string label_text = line.substr(tab + 1);
    int label = 0;
    try {
      std::size_t used = 0;
      label = std::stoi(label_text, &used);
      if (used != label_text.size()) fail("malformed label '" + label_text + "'");
    } catch (const std::logic_error&) {
      fail("malformed label '" + label_text + "'");
    }
    if (label < 0 || static_cast<std::size_t>(label) >= config.num_classes) fail("label out of range");
    out.push_back(make_example(words, label, config));
  }
  return out;
}

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CorpusError("cannot write " + path.string());
  out << text;
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::string& dir) {
  fs::create_directories(dir);
  FieldRegistry reg;
  CorpusConfig cfg = corpus.config;
  cfg.register_fields(reg);
  write_file(fs::path(dir) / "corpus.cfg", reg.dump());
  std::ostringstream vs;
  for (std::size_t id = Vocabulary::kNumSpecial; id < corpus.vocab.size(); ++id)
    vs << corpus.vocab.word(id) << '\t' << corpus.vocab.set_of(id) << '\n';
  write_file(fs::path(dir) / "vocab.tsv", vs.str());
  write_file(fs::path(dir) / "train.tsv", encode_split(corpus.vocab, corpus.train));
  write_file(fs::path(dir) / "dev.tsv", encode_split(corpus.vocab, corpus.dev));
  write_file(fs::path(dir) / "test.tsv", encode_split(corpus.vocab, corpus.test));
  Checkpoint emb;
  emb.tensors.push_back({"reference.vectors", reference_table(corpus).vectors});
  emb.config = reg.dump();
  save_checkpoint(emb, (fs::path(dir) / "embeddings.ibrt").string());
}

Corpus load_corpus(const std::string& dir) {
  Corpus corpus;
  {
    FieldRegistry reg;
    corpus.config.register_fields(reg);
    const auto path = (fs::path(dir) / "corpus.cfg").string();
    reg.apply(parse_key_values(read_text_file(path), path));
    corpus.config.validate();
  }
  {
    const auto path = (fs::path(dir) / "vocab.tsv").string();
    const std::string text = read_text_file(path);
    std::vector<std::pair<std::string, std::size_t>> entries;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      std::size_t set = 0;
      try {
        if (tab == std::string::npos) throw std::invalid_argument("tab");
        std::size_t used = 0;
        set = std::stoul(line.substr(tab + 1), &used);
        if (used != line.size() - tab - 1) throw std::invalid_argument("set");
      } catch (const std::logic_error&) {
        throw CorpusError(path + ":" + std::to_string(line_no) + ": expected 'word<TAB>set_id'");
      }
      entries.emplace_back(line.substr(0, tab), set);
    }
    corpus.vocab = Vocabulary::from_entries(entries);
  }
  for (auto [name, split] : {std::pair{"train.tsv", &corpus.train}, std::pair{"dev.tsv", &corpus.dev},
                             std::pair{"test.tsv", &corpus.test}}) {
    const auto path = (fs::path(dir) / name).string();
    *split = decode_split(read_text_file(path), corpus.vocab, corpus.config, path);
  }
  {
    const auto path = (fs::path(dir) / "embeddings.ibrt").string();
    const Checkpoint emb = load_checkpoint(path);
    emb.require({"reference.vectors"});
    if (emb.at("reference.vectors").data != reference_table(corpus).vectors.data)
      throw CorpusError(path + ": embedding table does not match corpus.cfg");
  }
  return corpus;
}

}  // namespace infobottle
