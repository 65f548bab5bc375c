#include <cmath>

#include "doctest.h"
#include "infobottle/evaluator.hpp"
#include "infobottle/trainer.hpp"

using namespace infobottle;

namespace {

struct Setup {
  Corpus corpus;
  ReferenceEmbeddingTable table;
  ModelConfig mc;

  explicit Setup(std::size_t train = 300, bool tagging = false) {
    CorpusConfig cc;
    cc.train_size = train;
    cc.dev_size = 60;
    cc.test_size = 90;
    cc.max_words = 10;
    cc.indicators_per_example = 1;
    cc.cue_rate = 1.0;
    cc.member_alignment = 1.0;
    corpus = generate_corpus(cc, 21);
    table = reference_table(corpus);
    mc.vocab_size = corpus.vocab.size();
    mc.layers = 1;
    mc.tagging = tagging;
  }

  Model trained(std::uint64_t seed, std::size_t epochs = 3) const {
    TrainConfig tc = TrainConfig::vanilla();
    tc.epochs = epochs;
    tc.seed = seed;
    return train(tc, mc, corpus).best;
  }
};

Model constant_model(const ModelConfig& mc, int cls) {
  Model m(mc, 1);
  for (Parameter* p : m.parameters()) {
    if (p->name == "head.w") std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
    if (p->name == "head.b") {
      std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
      p->value.data[static_cast<std::size_t>(cls)] = 1.0;
    }
  }
  return m;
}

MIAnalysisConfig quick_mi() {
  MIAnalysisConfig c;
  c.critic.steps = 60;
  c.critic.hidden = 16;
  c.critic.batch = 16;
  return c;
}

}  // namespace

TEST_SUITE("evaluator") {
  TEST_CASE("robust accuracy arithmetic") {
    Setup s(30);
    Model m = constant_model(s.mc, 0);
    std::vector<Example> d(s.corpus.test.begin(), s.corpus.test.begin() + 4);
    for (std::size_t i = 0; i < 4; ++i) d[i].label = i < 3 ? 0 : 1;
    CHECK(robust_accuracy(m, d, s.corpus.vocab) == 0.75);
    CHECK_THROWS_AS(robust_accuracy(m, {}, s.corpus.vocab), EvalError);
  }

  TEST_CASE("constant model on balanced classes") {
    Setup s(30);
    Model m = constant_model(s.mc, 2);
    std::size_t counts[3] = {0, 0, 0};
    for (const auto& e : s.corpus.test) ++counts[e.label];
    const double expect = static_cast<double>(counts[2]) / static_cast<double>(s.corpus.test.size());
    CHECK(robust_accuracy(m, s.corpus.test, s.corpus.vocab) == doctest::Approx(expect).epsilon(1e-15));
    CHECK(std::abs(expect - 1.0 / 3.0) <= 0.05);
  }

  TEST_CASE("span F1") {
    CHECK(span_f1({1, 2}, {1, 2}) == 1.0);
    CHECK(span_f1({1}, {2}) == 0.0);
    CHECK(span_f1({1, 2}, {2, 3}) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(span_f1({}, {}) == 1.0);
    CHECK(span_f1({}, {3}) == 0.0);
  }

  TEST_CASE("robust F1 needs the tagging head") {
    Setup plain(30);
    Model m(plain.mc, 1);
    CHECK_THROWS_AS(robust_f1(m, plain.corpus.test, plain.corpus.vocab, plain.corpus.config), EvalError);
    Setup tagged(1500, true);
    Model t = tagged.trained(1, 5);
    const double f1 = robust_f1(t, tagged.corpus.test, tagged.corpus.vocab, tagged.corpus.config);
    CHECK(f1 >= 0.9);
    CHECK(f1 <= 1.0);
  }

  TEST_CASE("attacked victim and transfer bounds") {
    Setup s;
    Model victim = s.trained(2);
    WordSubConfig wc;
    wc.max_fraction = 1.0;
    const AdversarialSet adv = build_adversarial(victim, s.corpus.test, s.corpus.vocab, s.table, wc);
    REQUIRE(adv.examples.size() == s.corpus.test.size());

    std::vector<Example> flipped;
    for (std::size_t i = 0; i < adv.results.size(); ++i)
      if (adv.results[i].success) flipped.push_back(adv.examples[i]);
    if (!flipped.empty()) CHECK(robust_accuracy(victim, flipped, s.corpus.vocab) == 0.0);
    const double benign = accuracy(victim, s.corpus.test, s.corpus.vocab);
    CHECK(robust_accuracy(victim, adv.examples, s.corpus.vocab) <= benign);
    CHECK(adv.success_rate() >= 0.0);
    CHECK(adv.success_rate() <= 1.0);

    Model other = s.trained(3);
    CHECK(robust_accuracy(other, adv.examples, s.corpus.vocab) <= accuracy(other, s.corpus.test, s.corpus.vocab) + 0.05);

    const AdversarialSet threaded = build_adversarial(victim, s.corpus.test, s.corpus.vocab, s.table, wc, 3);
    CHECK(threaded.examples == adv.examples);
    CHECK(threaded.succeeded == adv.succeeded);

    EvalReport r1, r2;
    for (EvalReport* r : {&r1, &r2}) {
      r->attack = "word-sub";
      r->benign_accuracy = benign;
      r->robust_accuracy = robust_accuracy(victim, adv.examples, s.corpus.vocab);
      r->traces = adv.results;
    }
    const std::string j = r1.to_json(s.corpus.vocab);
    CHECK(j == r2.to_json(s.corpus.vocab));
    CHECK(j.find("\"robust_accuracy\"") != std::string::npos);
    CHECK(j.find("\"true_prob\"") != std::string::npos);
  }

  TEST_CASE("MI analysis of identical checkpoints") {
    Setup s(200);
    Model m = s.trained(4, 2);
    const auto cfg = quick_mi();
    const MIAnalysisReport r = mi_analysis(m, m, s.corpus.test, s.corpus.dev, s.corpus.vocab, cfg, 9);
    CHECK(r.cells.size() == 8);
    for (const auto& [key, d] : r.deltas) CHECK(d == 0.0);
    for (const auto& c : r.cells) {
      CHECK(c.estimate.samples > 0);
      CHECK(c.estimate.kind == EstimatorKind::infonce);
      // The constant critic scores value 0 (raw -ln K).
      CHECK(c.estimate.value >= -2.0 * c.estimate.std_error);
      CHECK(c.estimate.value <= std::log(static_cast<double>(cfg.critic.batch)) + 1e-12);
    }
    const std::string csv = r.to_csv();
    CHECK(csv.rfind("group,dataset,mi_nats\n", 0) == 0);
    CHECK(r.to_json() == mi_analysis(m, m, s.corpus.test, s.corpus.dev, s.corpus.vocab, cfg, 9).to_json());
  }

  TEST_CASE("MI analysis rejects mostly empty anchored sets") {
    Setup s(30);
    Model m(s.mc, 1);
    MIAnalysisConfig cfg = quick_mi();
    cfg.c_l = 0.95;
    cfg.c_h = 0.96;
    try {
      mi_analysis(m, m, s.corpus.test, s.corpus.dev, s.corpus.vocab, cfg, 1);
      FAIL("expected an error");
    } catch (const EvalError& e) {
      CHECK(std::string(e.what()).find("widen the band") != std::string::npos);
    }
  }
}
