#include <chrono>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "infobottle/model.hpp"

using namespace infobottle;

namespace {

struct Fixture {
  Corpus corpus;
  ReferenceEmbeddingTable table;
  ModelConfig mc;

  explicit Fixture(bool freeze = true) {
    CorpusConfig cc;
    cc.train_size = 30;
    cc.dev_size = 3;
    cc.test_size = 3;
    corpus = generate_corpus(cc, 5);
    table = build_reference_embeddings(corpus.vocab, cc.embed_dim, cc.epsilon, 5);
    mc.vocab_size = corpus.vocab.size();
    mc.freeze_embeddings = freeze;
  }
};

std::vector<double> logits_of(Model& m, const Batch& b) {
  Tape t(false);
  return m.forward(t, b).logits.value().data;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("uniform logits give ln 3") {
    Tape t;
    Var l = Model::task_loss(t.leaf(Tensor(Shape{1, 3}, 0.0)), std::vector<int>{2});
    CHECK(l.value().item() == doctest::Approx(std::log(3.0)).epsilon(1e-14));
    Var big = Model::task_loss(t.leaf(Tensor(Shape{1, 3}, std::vector<double>{0, 800, 0})), std::vector<int>{1});
    CHECK(big.value().item() < 1e-300);
    Var two = Model::task_loss(t.leaf(Tensor(Shape{2, 2}, std::vector<double>{1, 0, 0, 3})), std::vector<int>{0, 0});
    const double a = std::log1p(std::exp(-1.0)), b = std::log1p(std::exp(3.0));
    CHECK(two.value().item() == doctest::Approx((a + b) / 2).epsilon(1e-14));
    CHECK_THROWS_AS(Model::task_loss(t.leaf(Tensor(Shape{1, 3}, 0.0)), std::vector<int>{3}), std::out_of_range);
  }

  TEST_CASE("zero delta equals plain lookup and delta is additive") {
    Fixture f;
    Model m(f.mc, 1, &f.table);
    const Batch b = make_batch(std::span(f.corpus.train).first(2), f.corpus.vocab);
    Tape t;
    const Tensor plain = m.embed(t, b).value();
    const Tensor zero = m.embed(t, b, t.constant(Tensor(plain.shape, 0.0))).value();
    CHECK(plain.data == zero.data);
    Tensor delta(plain.shape, 0.0);
    delta(1, 0) = 0.06;
    delta(2, 3) = 0.08;
    const Tensor moved = m.embed(t, b, t.constant(delta)).value();
    double diff = 0.0;
    for (std::size_t i = 0; i < plain.size(); ++i) diff += std::pow(moved.data[i] - plain.data[i], 2);
    CHECK(std::sqrt(diff) == doctest::Approx(0.1).epsilon(1e-12));
  }

  TEST_CASE("delta errors") {
    Fixture f;
    Model m(f.mc, 1, &f.table);
    const Batch b = make_batch(std::span(f.corpus.train).first(2), f.corpus.vocab, nullptr, 16);
    Tape t;
    CHECK_THROWS_AS(m.embed(t, b, t.constant(Tensor(Shape{3, 32}, 0.0))), ShapeError);
    Tensor delta(Shape{b.rows(), 32}, 0.0);
    std::size_t pad = 0;
    while (b.mask[pad]) ++pad;
    delta(pad, 0) = 1e-3;
    CHECK_THROWS_AS(m.embed(t, b, t.constant(delta)), std::invalid_argument);
  }

  TEST_CASE("PAD slots do not influence logits") {
    Fixture f;
    Model m(f.mc, 2, &f.table);
    const auto ex = std::span(f.corpus.train).first(4);
    const auto tight = logits_of(m, make_batch(ex, f.corpus.vocab));
    const auto wide = logits_of(m, make_batch(ex, f.corpus.vocab, nullptr, 16));
    REQUIRE(tight.size() == wide.size());
    for (std::size_t i = 0; i < tight.size(); ++i) CHECK(tight[i] == doctest::Approx(wide[i]).epsilon(1e-12));
    for (std::size_t e = 0; e < ex.size(); ++e) {
      const auto alone = logits_of(m, make_batch(ex.subspan(e, 1), f.corpus.vocab));
      for (std::size_t c = 0; c < alone.size(); ++c) CHECK(alone[c] == doctest::Approx(tight[e * 3 + c]).epsilon(1e-12));
    }
  }

  TEST_CASE("single token input is deterministic") {
    Fixture f;
    Model m(f.mc, 3, &f.table);
    const Example ex = make_example({f.corpus.vocab.id_of("w05_1")}, 0, f.corpus.config);
    const Batch b = make_batch(std::span(&ex, 1), f.corpus.vocab);
    CHECK(logits_of(m, b) == logits_of(m, b));
    Model other(f.mc, 3, &f.table);
    CHECK(logits_of(other, b) == logits_of(m, b));
  }

  TEST_CASE("global feature depends on unmasked tokens") {
    Fixture f;
    Model m(f.mc, 4, &f.table);
    const Batch b = make_batch(std::span(f.corpus.train).first(1), f.corpus.vocab);
    Tape t;
    Var delta = t.leaf(Tensor(Shape{b.rows(), 32}, 0.0));
    Forward fw = m.forward(t, b, delta);
    t.backward(ops::sum(fw.global));
    const Tensor& g = t.grad(delta);
    for (std::size_t r = 0; r < b.rows(); ++r) {
      double n = 0.0;
      for (std::size_t c = 0; c < 32; ++c) n += g(r, c) * g(r, c);
      if (b.mask[r]) CHECK(n > 0.0);
    }
  }

  TEST_CASE("end-to-end gradient check") {
    // The tagging head puts both heads on the checked loss.
    {
      Fixture f(false);
      f.mc.tagging = true;
      Model m(f.mc, 6, &f.table);
      const Batch b = make_batch(std::span(f.corpus.train).first(2), f.corpus.vocab, &f.corpus.config);
      Rng rng(9);
      const auto res = check_model_gradients(m, b, rng);
      CHECK(res.delta <= 1e-4);
      for (const auto& [name, err] : res.parameters) {
        INFO(name);
        CHECK(err <= 1e-4);
      }
      CHECK(res.parameters.size() == m.parameters().size());
    }
  }

  TEST_CASE("mean pooling and tagging head") {
    Fixture f;
    f.mc.pooling = "mean";
    f.mc.tagging = true;
    Model m(f.mc, 7, &f.table);
    const Batch b = make_batch(std::span(f.corpus.train).first(3), f.corpus.vocab, &f.corpus.config);
    Tape t;
    Forward fw = m.forward(t, b);
    Var tl = m.tagging_loss(m.tag_logits(t, fw.hidden), b);
    CHECK(std::isfinite(tl.value().item()));
    CHECK(std::accumulate(b.tags.begin(), b.tags.end(), 0) == 6);
  }

  TEST_CASE("checkpoint round trip reproduces outputs") {
    Fixture f;
    Model m(f.mc, 8, &f.table);
    const Batch b = make_batch(std::span(f.corpus.train).first(5), f.corpus.vocab);
    const Model back = Model::from_checkpoint(decode_checkpoint(encode_checkpoint(m.to_checkpoint(3))));
    Model copy = back;
    CHECK(logits_of(copy, b) == logits_of(m, b));
    Checkpoint partial = m.to_checkpoint();
    partial.tensors.pop_back();
    CHECK_THROWS_AS(Model::from_checkpoint(partial), CheckpointError);
  }
}
