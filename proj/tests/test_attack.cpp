#include <cmath>
#include <numeric>

#include "doctest.h"
#include "infobottle/attack.hpp"

using namespace infobottle;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Tensor t(Shape{r, c});
  for (double& v : t.data) v = scale * rng.normal();
  return t;
}

double norm_of(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data) s += v * v;
  return std::sqrt(s);
}

struct SmallCorpus {
  CorpusConfig cc;
  Corpus corpus;
  ReferenceEmbeddingTable table;
  ModelConfig mc;

  explicit SmallCorpus(std::size_t words = 8) {
    cc.min_words = 2;
    cc.max_words = words;
    cc.train_size = 60;
    cc.dev_size = 1;
    cc.test_size = 1;
    corpus = generate_corpus(cc, 3);
    table = build_reference_embeddings(corpus.vocab, cc.embed_dim, cc.epsilon, 3);
    mc.vocab_size = corpus.vocab.size();
  }
};

void zero_head(Model& m) {
  for (Parameter* p : m.parameters())
    if (p->name == "head.w" || p->name == "head.b") std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
}

}  // namespace

TEST_SUITE("attack") {
  TEST_CASE("virtual gradient of a two-token linear toy") {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t d = 3, classes = 3;
      const Tensor emb = random_matrix(rng, 2, d);
      const Tensor w = random_matrix(rng, d, classes);
      const int y = static_cast<int>(rng.index(classes));
      const VirtualGradient vg = virtual_gradient(
          [&](Tape& tape, Var delta) {
            Var t = ops::add(tape.constant(emb), delta);
            Var pooled = ops::matmul(tape.constant(Tensor(Shape{1, 2}, 1.0)), t);
            return Model::task_loss(ops::matmul(pooled, tape.constant(w)), std::vector<int>{y});
          },
          2, d, {1, 1});
      // dCE/dt_i = W (softmax(s) - e_y) with s = (t_0 + t_1) W, the same row for both tokens.
      std::vector<double> s(classes, 0.0);
      for (std::size_t c = 0; c < classes; ++c)
        for (std::size_t k = 0; k < d; ++k) s[c] += (emb(0, k) + emb(1, k)) * w(k, c);
      const double mx = *std::max_element(s.begin(), s.end());
      double z = 0.0;
      for (double v : s) z += std::exp(v - mx);
      double expect = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        double gk = 0.0;
        for (std::size_t c = 0; c < classes; ++c)
          gk += w(k, c) * (std::exp(s[c] - mx) / z - (static_cast<int>(c) == y ? 1.0 : 0.0));
        expect += gk * gk;
        CHECK(vg.grad(0, k) == doctest::Approx(gk).epsilon(1e-12));
      }
      CHECK(vg.norms[0] == doctest::Approx(std::sqrt(expect)).epsilon(1e-12));
      CHECK(vg.norms[1] == doctest::Approx(std::sqrt(expect)).epsilon(1e-12));
    }
  }

  TEST_CASE("virtual gradient on the model") {
    SmallCorpus f;
    Model m(f.mc, 5, &f.table);
    const Batch b = make_batch(std::span<const Example>(f.corpus.train.data(), 4), f.corpus.vocab);
    const VirtualGradient g1 = virtual_gradient(m, b);
    const VirtualGradient g2 = virtual_gradient(m, b, 2.0);
    for (std::size_t r = 0; r < b.rows(); ++r) {
      if (!b.words[r]) {
        CHECK(std::isnan(g1.norms[r]));
        continue;
      }
      CHECK(g1.norms[r] > 0.0);
      CHECK(g2.norms[r] == doctest::Approx(2.0 * g1.norms[r]).epsilon(1e-12));
    }
    zero_head(m);
    for (std::size_t r = 0; r < b.rows(); ++r)
      if (b.words[r]) CHECK(virtual_gradient(m, b).norms[r] == 0.0);
  }

  TEST_CASE("pgd update examples") {
    Tensor g(Shape{2, 2}, std::vector<double>{2, 0, 0, 0});
    PerturbationState s{Tensor(Shape{2, 2}, 0.0), 0.05, 0.1};
    CHECK(norm_of(pgd_update(s, g).delta) == doctest::Approx(0.05).epsilon(1e-14));
    s.eta = 0.01;
    CHECK(norm_of(pgd_update(s, g).delta) == doctest::Approx(0.01).epsilon(1e-14));
    s.delta = Tensor(Shape{2, 2}, std::vector<double>{0.01, 0.02, 0, 0});
    const auto same = pgd_update(s, Tensor(Shape{2, 2}, 0.0));
    CHECK(same.delta.data == s.delta.data);
    CHECK_THROWS_AS(pgd_update(s, Tensor(Shape{1, 2}, 1.0)), ShapeError);
  }

  TEST_CASE("pgd respects the budget") {
    Rng rng(2);
    for (int trial = 0; trial < 500; ++trial) {
      const std::size_t r = 1 + rng.index(6), c = 1 + rng.index(6);
      PerturbationState s{random_matrix(rng, r, c, 0.1), rng.uniform(), 3.0 * rng.uniform()};
      project_frobenius(s.delta.data, s.epsilon);
      const Tensor g = random_matrix(rng, r, c, std::exp(8.0 * (rng.uniform() - 0.5)));
      CHECK(norm_of(pgd_update(s, g).delta) <= s.epsilon + 1e-9);
      CHECK(norm_of(pgd_accumulate(s, g).delta) <= s.epsilon + 1e-9);
    }
  }

  TEST_CASE("batched pgd keeps PAD rows at zero") {
    SmallCorpus f;
    const Batch b = make_batch(std::span<const Example>(f.corpus.train.data(), 6), f.corpus.vocab);
    Rng rng(3);
    Tensor delta(Shape{b.rows(), 4}, 0.0);
    for (int k = 0; k < 3; ++k) pgd_batch_step(delta, random_matrix(rng, b.rows(), 4), b, 0.2, 0.3, true);
    for (std::size_t e = 0; e < b.size; ++e) {
      double s = 0.0;
      for (std::size_t i = 0; i < b.seq_len; ++i)
        for (std::size_t c = 0; c < 4; ++c) {
          const double v = delta(e * b.seq_len + i, c);
          if (!b.mask[e * b.seq_len + i]) CHECK(v == 0.0);
          s += v * v;
        }
      CHECK(std::sqrt(s) <= 0.3 + 1e-9);
    }
  }

  TEST_CASE("adversarial loss reductions") {
    SmallCorpus f;
    ModelConfig mc = f.mc;
    mc.freeze_embeddings = false;
    const Batch b = make_batch(std::span<const Example>(f.corpus.train.data(), 8), f.corpus.vocab);

    auto plain_grads = [&](Model& m) {
      m.zero_grad();
      Tape tape;
      const Forward fw = m.forward(tape, b);
      Var l = Model::task_loss(fw.logits, b.labels);
      tape.backward(l);
      tape.accumulate_param_grads();
      std::vector<double> g;
      for (Parameter* p : m.parameters()) g.insert(g.end(), p->grad.data.begin(), p->grad.data.end());
      return std::make_pair(l.value().item(), g);
    };
    auto adv_grads = [&](Model& m, const FreeLBConfig& cfg) {
      m.zero_grad();
      Rng rng(9);
      const auto out = adversarial_training_loss(m, b, cfg, rng);
      std::vector<double> g;
      for (Parameter* p : m.parameters()) g.insert(g.end(), p->grad.data.begin(), p->grad.data.end());
      return std::make_pair(out, g);
    };

    Model m(mc, 4, &f.table);
    const auto [l0, g0] = plain_grads(m);

    FreeLBConfig one{1, 0.0, 0.3, 0.0};
    const auto [a1, g1] = adv_grads(m, one);
    CHECK(a1.loss == doctest::Approx(l0).epsilon(1e-14));
    REQUIRE(g1.size() == g0.size());
    for (std::size_t i = 0; i < g0.size(); ++i) CHECK(g1[i] == doctest::Approx(g0[i]).epsilon(1e-12));

    FreeLBConfig zero_budget{3, 0.1, 0.0, 0.1};
    const auto [a2, g2] = adv_grads(m, zero_budget);
    for (double r : a2.round_losses) CHECK(r == doctest::Approx(l0).epsilon(1e-12));
    for (std::size_t i = 0; i < g0.size(); ++i) CHECK(g2[i] == doctest::Approx(g0[i]).epsilon(1e-10));
  }

  TEST_CASE("ascent raises the loss") {
    SmallCorpus f(12);
    Model m(f.mc, 6, &f.table);
    const FreeLBConfig cfg;
    Rng pick(4), rng(5);
    int raised = 0;
    const int batches = 50;
    for (int t = 0; t < batches; ++t) {
      std::vector<Example> ex;
      for (int k = 0; k < 4; ++k) ex.push_back(f.corpus.train[pick.index(f.corpus.train.size())]);
      const Batch b = make_batch(ex, f.corpus.vocab);
      m.zero_grad();
      const auto out = adversarial_training_loss(m, b, cfg, rng);
      Tape tape(false);
      const double at_delta =
          Model::task_loss(m.forward(tape, b, tape.constant(out.delta)).logits, b.labels).value().item();
      const double at_zero = Model::task_loss(m.forward(tape, b).logits, b.labels).value().item();
      if (at_delta >= at_zero) ++raised;
    }
    CHECK(raised >= 45);
  }

  TEST_CASE("hook runs on the last round with the clean gradient") {
    SmallCorpus f;
    Model m(f.mc, 7, &f.table);
    const Batch b = make_batch(std::span<const Example>(f.corpus.train.data(), 4), f.corpus.vocab);
    const VirtualGradient clean = virtual_gradient(m, b);
    for (double init : {0.0, 0.1}) {
      for (std::size_t k : {1u, 3u}) {
        int calls = 0;
        Rng rng(1);
        FreeLBConfig cfg{k, 0.1, 0.3, init};
        const auto out = adversarial_training_loss(m, b, cfg, rng, [&](Tape& t, const Forward&, Var, const Tensor& g) {
          ++calls;
          for (std::size_t i = 0; i < g.size(); ++i) CHECK(g.data[i] == doctest::Approx(clean.grad.data[i]).epsilon(1e-10));
          return t.constant(Tensor(Shape{}, 0.5));
        });
        CHECK(calls == 1);
        CHECK(out.extra == 0.5);
        CHECK(out.round_losses.size() == k);
      }
    }
  }

  TEST_CASE("constant classifier cannot be attacked") {
    SmallCorpus f;
    Model m(f.mc, 8, &f.table);
    zero_head(m);
    for (Parameter* p : m.parameters())
      if (p->name == "head.b") p->value.data = {1.0, 0.0, 0.0};
    WordSubConfig cfg;
    cfg.max_fraction = 1.0;
    int attacked = 0;
    for (const auto& ex : f.corpus.train) {
      const auto r = word_substitution_attack(m, ex, f.corpus.vocab, f.table, cfg);
      if (ex.label != 0) {
        CHECK(r.skipped);
        continue;
      }
      ++attacked;
      CHECK_FALSE(r.success);
      CHECK(r.adversarial == ex);
    }
    CHECK(attacked > 0);
  }

  TEST_CASE("fraction zero means no swaps") {
    SmallCorpus f;
    Model m(f.mc, 9);
    WordSubConfig cfg;
    cfg.max_fraction = 0.0;
    for (const auto& ex : f.corpus.train) {
      const auto r = word_substitution_attack(m, ex, f.corpus.vocab, f.table, cfg);
      CHECK(r.trace.positions.empty());
      CHECK(r.adversarial == ex);
    }
  }

  TEST_CASE("attack outputs stay inside synonym sets") {
    SmallCorpus f;
    WordSubConfig cfg;
    cfg.max_fraction = 1.0;
    int successes = 0;
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      Model m(f.mc, 100 + seed);
      for (const auto& ex : f.corpus.train) {
        const auto r = word_substitution_attack(m, ex, f.corpus.vocab, f.table, cfg);
        if (r.skipped) continue;
        successes += r.success;
        const auto pred = m.predict(make_batch(std::span<const Example>(&r.adversarial, 1), f.corpus.vocab))[0];
        CHECK(r.success == (pred != ex.label));
        CHECK(oracle_label(f.cc, f.corpus.vocab, r.adversarial) == ex.label);
        CHECK(r.trace.positions.size() <= ex.n);
        CHECK(r.trace.true_prob.size() == r.trace.positions.size() + 1);
        for (std::size_t i = 0; i < ex.token_ids.size(); ++i) {
          const std::size_t a = ex.token_ids[i], b = r.adversarial.token_ids[i];
          if (a == b) continue;
          CHECK(f.corpus.vocab.set_of(a) == f.corpus.vocab.set_of(b));
          CHECK(f.table.distance(a, b) <= f.table.epsilon);
        }
        for (std::size_t k = 1; k < r.trace.true_prob.size(); ++k)
          CHECK(r.trace.true_prob[k] < r.trace.true_prob[k - 1]);
      }
    }
    CHECK(successes > 0);
  }

  TEST_CASE("greedy attack finds every one-swap flip on two-word inputs") {
    SmallCorpus f(2);
    WordSubConfig cfg;
    cfg.max_fraction = 1.0;
    int exhaustive_flips = 0;
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
      Model m(f.mc, 200 + seed);
      for (const auto& ex : f.corpus.train) {
        const auto r = word_substitution_attack(m, ex, f.corpus.vocab, f.table, cfg);
        if (r.skipped) continue;
        bool any = false;
        for (auto pos : ex.word_positions(f.corpus.vocab))
          for (auto s : f.corpus.vocab.synonyms(ex.token_ids[pos])) {
            if (f.table.distance(ex.token_ids[pos], s) > f.table.epsilon) continue;
            Example alt = ex;
            alt.token_ids[pos] = s;
            if (m.predict(make_batch(std::span<const Example>(&alt, 1), f.corpus.vocab))[0] != ex.label) any = true;
          }
        if (any) {
          ++exhaustive_flips;
          CHECK(r.success);
        }
      }
    }
    CHECK(exhaustive_flips > 0);
  }
}
