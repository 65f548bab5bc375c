#include "infobottle/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "infobottle/gradcheck.hpp"

namespace infobottle {

void ModelConfig::register_fields(FieldRegistry& reg) {
  reg.add("model.d", d, "feature width");
  reg.add("model.layers", layers, "encoder depth");
  reg.add("model.heads", heads, "attention heads");
  reg.add("model.vocab_size", vocab_size, "vocabulary size including special ids");
  reg.add("model.num_classes", num_classes, "output classes");
  reg.add("model.max_len", max_len, "longest sequence including CLS");
  reg.add_choice("model.pooling", pooling, {"cls", "mean"}, "global feature Z");
  reg.add("model.tagging", tagging, "add the per-token indicator tagging head");
  reg.add("model.freeze_embeddings", freeze_embeddings, "keep token embeddings fixed");
}

void ModelConfig::validate() const {
  if (d == 0 || layers == 0 || heads == 0 || vocab_size == 0 || num_classes < 2 || max_len == 0)
    throw ConfigError("model sizes must be positive");
  if (d % heads != 0) throw ConfigError("model.d must be divisible by model.heads");
}

std::string model_config_text(const ModelConfig& config) {
  ModelConfig copy = config;
  FieldRegistry reg;
  copy.register_fields(reg);
  return reg.dump();
}

ModelConfig parse_model_config(const std::string& text) {
  ModelConfig cfg;
  FieldRegistry reg;
  cfg.register_fields(reg);
  for (const auto& e : parse_key_values(text, "<checkpoint config>"))
    if (reg.has(e.key)) reg.set(e.key, e.value);
  cfg.validate();
  return cfg;
}

Batch make_batch(std::span<const Example> examples, const Vocabulary& vocab, const CorpusConfig* corpus,
                 std::size_t seq_len) {
  if (examples.empty()) throw std::invalid_argument("make_batch: empty batch");
  Batch b;
  b.size = examples.size();
  if (seq_len == 0) {
    for (const auto& ex : examples) {
      std::size_t used = 0;
      for (std::size_t i = 0; i < ex.token_ids.size(); ++i)
        if (ex.token_ids[i] != Vocabulary::kPad) used = i + 1;
      seq_len = std::max(seq_len, used);
    }
  }
  b.seq_len = seq_len;
  b.ids.assign(b.rows(), Vocabulary::kPad);
  b.mask.assign(b.rows(), 0);
  b.words.assign(b.rows(), 0);
  b.tags.assign(b.rows(), 0);
  for (std::size_t e = 0; e < b.size; ++e) {
    const auto& ex = examples[e];
    for (std::size_t i = 0; i < ex.token_ids.size(); ++i) {
      const std::size_t id = ex.token_ids[i];
      if (id == Vocabulary::kPad) continue;
      if (i >= seq_len) throw std::invalid_argument("make_batch: example longer than seq_len");
      const std::size_t r = e * seq_len + i;
      b.ids[r] = id;
      b.mask[r] = 1;
      b.words[r] = vocab.is_special(id) ? 0 : 1;
    }
    if (corpus)
      for (auto p : indicator_positions(*corpus, vocab, ex)) b.tags[e * seq_len + p] = 1;
    b.labels.push_back(ex.label);
  }
  return b;
}

Model::Model(const ModelConfig& config, std::uint64_t seed, const ReferenceEmbeddingTable* table) : config_(config) {
  config_.validate();
  Rng rng = Rng::for_label(seed, "model.init");
  build(rng, table);
}

Model::Model(const Model& other) : config_(other.config_) {
  for (const auto& p : other.params_) params_.push_back(std::make_unique<Parameter>(*p));
}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    config_ = other.config_;
    params_.clear();
    for (const auto& p : other.params_) params_.push_back(std::make_unique<Parameter>(*p));
  }
  return *this;
}

Parameter& Model::add(const std::string& name, Tensor value, bool trainable) {
  params_.push_back(std::make_unique<Parameter>(name, std::move(value), trainable));
  return *params_.back();
}

Parameter& Model::get(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return *p;
  throw std::logic_error("no parameter " + name);
}

namespace {

Tensor normal_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Tensor t(Shape{rows, cols});
  for (double& v : t.data) v = rng.normal(0.0, stddev);
  return t;
}

std::string layer_key(std::size_t l, const char* suffix) { return "layer" + std::to_string(l) + "." + suffix; }

}  // namespace

void Model::build(Rng& rng, const ReferenceEmbeddingTable* table) {
  const std::size_t d = config_.d;
  Tensor emb;
  if (table) {
    if (table->dim() != d || table->vectors.rows() != config_.vocab_size)
      throw ShapeError("model-embeddings", Shape{config_.vocab_size, d}, table->vectors.shape);
    emb = table->vectors;
  } else {
    emb = normal_matrix(rng, config_.vocab_size, d, 1.0 / std::sqrt(static_cast<double>(d)));
    for (std::size_t c = 0; c < d; ++c) emb(Vocabulary::kPad, c) = 0.0;
  }
  add("embed.tokens", std::move(emb), !config_.freeze_embeddings);
  add("embed.positions", normal_matrix(rng, config_.max_len, d, 0.02));
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(2 * d));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    add(layer_key(l, "ln1.g"), Tensor(Shape{d}, 1.0));
    add(layer_key(l, "ln1.b"), Tensor(Shape{d}, 0.0));
    for (const char* w : {"wq", "wk", "wv", "wo"}) add(layer_key(l, w), normal_matrix(rng, d, d, s));
    for (const char* b : {"bq", "bk", "bv", "bo"}) add(layer_key(l, b), Tensor(Shape{d}, 0.0));
    add(layer_key(l, "ln2.g"), Tensor(Shape{d}, 1.0));
    add(layer_key(l, "ln2.b"), Tensor(Shape{d}, 0.0));
    add(layer_key(l, "ff1.w"), normal_matrix(rng, d, 2 * d, s));
    add(layer_key(l, "ff1.b"), Tensor(Shape{2 * d}, 0.0));
    add(layer_key(l, "ff2.w"), normal_matrix(rng, 2 * d, d, s2));
    add(layer_key(l, "ff2.b"), Tensor(Shape{d}, 0.0));
  }
  add("final_ln.g", Tensor(Shape{d}, 1.0));
  add("final_ln.b", Tensor(Shape{d}, 0.0));
  add("head.w", normal_matrix(rng, d, config_.num_classes, s));
  add("head.b", Tensor(Shape{config_.num_classes}, 0.0));
  if (config_.tagging) {
    add("tag.w", normal_matrix(rng, d, 2, s));
    add("tag.b", Tensor(Shape{2}, 0.0));
  }
}

Var Model::embed(Tape& tape, const Batch& batch, std::optional<Var> delta) {
  if (batch.seq_len > config_.max_len)
    throw std::invalid_argument("sequence length " + std::to_string(batch.seq_len) + " exceeds model.max_len " +
                                std::to_string(config_.max_len));
  std::vector<std::size_t> pos(batch.rows());
  for (std::size_t r = 0; r < pos.size(); ++r) pos[r] = r % batch.seq_len;
  Var tokens = ops::gather(tape.param(get("embed.tokens")), batch.ids);
  Var t = ops::add(tokens, ops::gather(tape.param(get("embed.positions")), pos));
  if (delta) {
    const Tensor& dv = delta->value();
    if (dv.shape != t.shape()) throw ShapeError("embed-delta", t.shape(), dv.shape);
    for (std::size_t r = 0; r < batch.rows(); ++r) {
      if (batch.mask[r]) continue;
      for (std::size_t c = 0; c < config_.d; ++c)
        if (dv(r, c) != 0.0) throw std::invalid_argument("embed: delta row " + std::to_string(r) + " is a PAD slot but nonzero");
    }
    t = ops::add(t, *delta);
  }
  return t;
}

std::pair<Var, Var> Model::encode(Tape& tape, const Batch& batch, Var local) {
  ops::AttentionLayout layout{batch.size, batch.seq_len, config_.heads, batch.mask};
  Var x = local;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    auto P = [&](const char* s) { return tape.param(get(layer_key(l, s))); };
    Var h = ops::layer_norm(x, P("ln1.g"), P("ln1.b"));
    Var q = ops::add(ops::matmul(h, P("wq")), P("bq"));
    Var k = ops::add(ops::matmul(h, P("wk")), P("bk"));
    Var v = ops::add(ops::matmul(h, P("wv")), P("bv"));
    Var a = ops::masked_attention(q, k, v, layout);
    x = ops::add(x, ops::add(ops::matmul(a, P("wo")), P("bo")));
    Var h2 = ops::layer_norm(x, P("ln2.g"), P("ln2.b"));
    Var f = ops::gelu(ops::add(ops::matmul(h2, P("ff1.w")), P("ff1.b")));
    x = ops::add(x, ops::add(ops::matmul(f, P("ff2.w")), P("ff2.b")));
  }
  Var hidden = ops::layer_norm(x, tape.param(get("final_ln.g")), tape.param(get("final_ln.b")));
  Var global;
  if (config_.pooling == "cls") {
    std::vector<std::size_t> cls(batch.size);
    for (std::size_t e = 0; e < batch.size; ++e) cls[e] = e * batch.seq_len;
    global = ops::gather(hidden, cls);
  } else {
    Tensor pool(Shape{batch.size, batch.rows()}, 0.0);
    for (std::size_t e = 0; e < batch.size; ++e) {
      double n = 0.0;
      for (std::size_t i = 0; i < batch.seq_len; ++i) n += batch.mask[e * batch.seq_len + i];
      for (std::size_t i = 0; i < batch.seq_len; ++i)
        if (batch.mask[e * batch.seq_len + i]) pool(e, e * batch.seq_len + i) = 1.0 / n;
    }
    global = ops::matmul(tape.constant(std::move(pool)), hidden);
  }
  return {hidden, global};
}

Var Model::classify(Tape& tape, Var global) {
  return ops::add(ops::matmul(global, tape.param(get("head.w"))), tape.param(get("head.b")));
}

Var Model::tag_logits(Tape& tape, Var hidden) {
  if (!config_.tagging) throw std::logic_error("model has no tagging head");
  return ops::add(ops::matmul(hidden, tape.param(get("tag.w"))), tape.param(get("tag.b")));
}

Forward Model::forward(Tape& tape, const Batch& batch, std::optional<Var> delta) {
  Forward f;
  f.local = embed(tape, batch, delta);
  std::tie(f.hidden, f.global) = encode(tape, batch, f.local);
  f.logits = classify(tape, f.global);
  return f;
}

Var Model::task_loss(Var logits, std::span<const int> labels) { return ops::cross_entropy_with_logits(logits, labels); }

Var Model::tagging_loss(Var logits, const Batch& batch) {
  std::vector<std::size_t> rows;
  std::vector<int> labels;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    if (!batch.words[r]) continue;
    rows.push_back(r);
    labels.push_back(batch.tags[r]);
  }
  return ops::cross_entropy_with_logits(ops::gather(logits, rows), labels);
}

Var Model::objective(Tape& tape, const Forward& f, const Batch& batch) {
  Var loss = task_loss(f.logits, batch.labels);
  if (config_.tagging) loss = ops::add(loss, tagging_loss(tag_logits(tape, f.hidden), batch));
  return loss;
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

void Model::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

std::vector<std::string> Model::parameter_names() const {
  std::vector<std::string> out;
  for (const auto& p : params_) out.push_back(p->name);
  return out;
}

Checkpoint Model::to_checkpoint(std::uint64_t step, const std::string& extra_config) const {
  Checkpoint c;
  c.step = step;
  c.config = model_config_text(config_) + extra_config;
  for (const auto& p : params_) c.tensors.push_back({p->name, p->value});
  return c;
}

Model Model::from_checkpoint(const Checkpoint& ckpt) {
  Model m;
  m.config_ = parse_model_config(ckpt.config);
  Rng rng(0);
  m.build(rng, nullptr);
  ckpt.require(m.parameter_names());
  for (auto& p : m.params_) {
    const Tensor& t = ckpt.at(p->name);
    if (t.shape != p->value.shape) throw ShapeError("checkpoint-load " + p->name, p->value.shape, t.shape);
    p->value = t;
  }
  return m;
}

std::vector<std::vector<double>> Model::probabilities(const Batch& batch) {
  Tape tape(false);
  const Forward f = forward(tape, batch);
  const Tensor p = ops::softmax(f.logits).value();
  std::vector<std::vector<double>> out(batch.size, std::vector<double>(p.cols()));
  for (std::size_t e = 0; e < batch.size; ++e)
    for (std::size_t c = 0; c < p.cols(); ++c) out[e][c] = p(e, c);
  return out;
}

std::vector<int> Model::predict(const Batch& batch) {
  std::vector<int> out;
  for (const auto& row : probabilities(batch))
    out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
  return out;
}

double ModelGradCheck::max_error() const {
  double m = delta;
  for (const auto& [name, e] : parameters) m = std::max(m, e);
  return m;
}

ModelGradCheck check_model_gradients(Model& model, const Batch& batch, Rng& rng, double step) {
  const std::size_t d = model.config().d;
  Tensor delta(Shape{batch.rows(), d}, 0.0);
  for (std::size_t r = 0; r < batch.rows(); ++r)
    if (batch.mask[r])
      for (std::size_t c = 0; c < d; ++c) delta(r, c) = rng.normal(0.0, 0.05);

  model.zero_grad();
  Tensor delta_grad;
  {
    Tape tape;
    Var dv = tape.leaf(delta);
    Var loss = model.objective(tape, model.forward(tape, batch, dv), batch);
    tape.backward(loss);
    tape.accumulate_param_grads();
    delta_grad = tape.grad(dv);
  }
  auto value = [&] {
    Tape tape(false);
    return model.objective(tape, model.forward(tape, batch, tape.constant(delta)), batch).value().item();
  };

  ModelGradCheck out;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    if (!batch.mask[r]) continue;
    std::span<double> row(&delta.data[r * d], d);
    std::span<const double> g(&delta_grad.data[r * d], d);
    out.delta = std::max(out.delta, finite_diff_check(value, row, g, step));
  }
  for (Parameter* p : model.parameters()) {
    if (!p->trainable) continue;
    const Tensor analytic = p->grad;
    out.parameters.emplace_back(p->name, finite_diff_check(value, p->value.data, analytic.data, step));
  }
  model.zero_grad();
  return out;
}

}  // namespace infobottle
