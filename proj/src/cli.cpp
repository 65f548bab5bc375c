#include "infobottle/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "infobottle/checkpoint.hpp"
#include "infobottle/gradcheck.hpp"
#include "infobottle/mi.hpp"

namespace infobottle {

namespace fs = std::filesystem;

void RunConfig::register_fields(FieldRegistry& reg) {
  corpus.register_fields(reg);
  reg.add("corpus.seed", corpus_seed, "seed of corpus generation when no --data is given");
  model.register_fields(reg);
  train.register_fields(reg);
  attack.register_fields(reg);
  mi.register_fields(reg);
}

void RunConfig::validate() const {
  corpus.validate();
  model.validate();
  train.validate();
  attack.validate();
  if (!(mi.c_l >= 0.0 && mi.c_l <= mi.c_h && mi.c_h <= 1.0)) throw ConfigError("need 0 <= mi.c_l <= mi.c_h <= 1");
  if (model.max_len < corpus.capacity())
    throw ConfigError("model.max_len = " + std::to_string(model.max_len) + " is shorter than the corpus capacity " +
                      std::to_string(corpus.capacity()));
}

namespace {

struct Options {
  std::vector<std::string> config_files;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  std::string out;
  std::string data;
  std::size_t jobs = 1;

  // train
  std::vector<std::string> augment;
  // evaluate / mi-analysis
  std::string checkpoint, victim, attack = "none", split = "test";
  std::string ckpt_a, ckpt_b, adversarial;
  // theory-check / grad-check
  std::size_t trials = 200, pairs = 100000;
  int points = 2;
  double tolerance = 1e-4;
};

// Files produced under --out, listed in manifest.json with their CRC32.
class Outputs {
 public:
  explicit Outputs(const std::string& dir) : dir_(dir) { fs::create_directories(dir_); }

  fs::path path(const std::string& name) const { return dir_ / name; }

  void write(const std::string& name, const std::string& content) {
    const fs::path p = path(name);
    fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    f << content;
    if (!f) throw std::runtime_error("cannot write " + p.string());
    add(name);
  }
  void add(const std::string& name) {
    if (std::find(files_.begin(), files_.end(), name) == files_.end()) files_.push_back(name);
  }

  void manifest(const std::string& command) {
    std::sort(files_.begin(), files_.end());
    nlohmann::ordered_json j;
    j["command"] = command;
    auto list = nlohmann::ordered_json::array();
    for (const auto& name : files_) {
      char crc[9];
      std::snprintf(crc, sizeof crc, "%08x", crc32_of_file(path(name).string()));
      list.push_back({{"path", name}, {"bytes", fs::file_size(path(name))}, {"crc32", crc}});
    }
    j["files"] = list;
    std::ofstream f(path("manifest.json"), std::ios::binary);
    f << j.dump(2) << '\n';
    if (!f) throw std::runtime_error("cannot write manifest.json");
  }

 private:
  fs::path dir_;
  std::vector<std::string> files_;
};

void configure_logging() {
  auto logger = spdlog::get("infobottle");
  if (!logger) logger = spdlog::stderr_color_mt("infobottle");
  spdlog::set_default_logger(logger);
  const char* env = std::getenv("INFOBOTTLE_LOG");
  const std::string level = env ? env : "info";
  if (level == "quiet") spdlog::set_level(spdlog::level::off);
  else if (level == "info") spdlog::set_level(spdlog::level::info);
  else if (level == "debug") spdlog::set_level(spdlog::level::debug);
  else throw ConfigError("INFOBOTTLE_LOG must be quiet, info or debug (got '" + level + "')");
}

// Defaults < --config files in order < --set overrides < --seed.
void resolve(RunConfig& rc, FieldRegistry& reg, const Options& o, bool seed_given) {
  for (const auto& f : o.config_files) reg.apply(parse_key_values(read_text_file(f), f));
  for (const auto& s : o.overrides) reg.apply(parse_key_values(s, "--set"));
  if (seed_given) rc.corpus_seed = rc.train.seed = o.seed;
  rc.validate();
}

Corpus obtain_corpus(const Options& o, const RunConfig& rc) {
  if (!o.data.empty()) return load_corpus(o.data);
  return generate_corpus(rc.corpus, rc.corpus_seed);
}

void require_vocab(const ModelConfig& mc, const Corpus& corpus, const std::string& what) {
  if (mc.vocab_size != corpus.vocab.size())
    throw ConfigError(what + " has vocab_size " + std::to_string(mc.vocab_size) + " but the corpus has " +
                      std::to_string(corpus.vocab.size()) + " ids (set model.vocab_size)");
}

const std::vector<Example>& pick_split(const Corpus& c, const std::string& name) {
  if (name == "train") return c.train;
  if (name == "dev") return c.dev;
  return c.test;
}

Model load_model(const std::string& path) { return Model::from_checkpoint(load_checkpoint(path)); }

int cmd_gen_data(const RunConfig& rc, Outputs& out, std::ostream& os) {
  const Corpus corpus = generate_corpus(rc.corpus, rc.corpus_seed);
  save_corpus(corpus, out.path("corpus").string());
  for (const char* f : {"corpus.cfg", "vocab.tsv", "train.tsv", "dev.tsv", "test.tsv", "embeddings.ibrt"})
    out.add(std::string("corpus/") + f);
  os << "vocab=" << corpus.vocab.size() << " train=" << corpus.train.size() << " dev=" << corpus.dev.size()
     << " test=" << corpus.test.size() << '\n';
  return kExitOk;
}

int cmd_train(const RunConfig& rc, const std::string& config_text, const Options& o, Outputs& out,
              std::ostream& os) {
  Corpus corpus = obtain_corpus(o, rc);
  for (const auto& f : o.augment) {
    auto extra = decode_split(read_text_file(f), corpus.vocab, corpus.config, f);
    spdlog::info("adding {} examples from {}", extra.size(), f);
    corpus.train.insert(corpus.train.end(), extra.begin(), extra.end());
  }
  require_vocab(rc.model, corpus, "model config");
  std::ostringstream log;
  const TrainResult r = train(rc.train, rc.model, corpus, &log, config_text);
  save_checkpoint(r.checkpoint, out.path("checkpoint.ibrt").string());
  out.add("checkpoint.ibrt");
  out.write("train.log", log.str());
  std::ostringstream hist;
  hist << "epoch,train_loss,dev_accuracy,dev_loss\n";
  for (const auto& h : r.history)
    hist << h.epoch << ',' << format_double(h.train_loss) << ',' << format_double(h.dev_accuracy) << ','
         << format_double(h.dev_loss) << '\n';
  out.write("history.csv", hist.str());
  out.write("config.cfg", config_text);
  os << "best_epoch=" << r.best_epoch << " dev_accuracy=" << format_double(r.history[r.best_epoch].dev_accuracy)
     << " steps=" << r.loss_trace.size() << '\n';
  return kExitOk;
}

int cmd_evaluate(const RunConfig& rc, const std::string& config_text, const Options& o, Outputs& out,
                 std::ostream& os) {
  const Corpus corpus = obtain_corpus(o, rc);
  Model model = load_model(o.checkpoint);
  require_vocab(model.config(), corpus, o.checkpoint);
  const auto& split = pick_split(corpus, o.split);

  EvalReport rep;
  rep.attack = o.attack;
  rep.seed = rc.corpus_seed;
  rep.config = config_text;
  rep.benign_accuracy = accuracy(model, split, corpus.vocab);
  rep.robust_accuracy = rep.benign_accuracy;
  std::vector<Example> evaluated = split;
  if (o.attack == "word-sub") {
    const Model victim = o.victim.empty() ? model : load_model(o.victim);
    require_vocab(victim.config(), corpus, o.victim);
    const AdversarialSet adv =
        build_adversarial(victim, split, corpus.vocab, reference_table(corpus), rc.attack, o.jobs);
    evaluated = adv.examples;
    rep.robust_accuracy = robust_accuracy(model, adv.examples, corpus.vocab);
    rep.attack_success_rate = adv.success_rate();
    rep.traces = adv.results;
    std::vector<Example> flipped;
    for (std::size_t i = 0; i < adv.results.size(); ++i)
      if (adv.results[i].success) flipped.push_back(adv.examples[i]);
    out.write("adversarial.tsv", encode_split(corpus.vocab, adv.examples));
    out.write("flipped.tsv", encode_split(corpus.vocab, flipped));
  }
  if (model.config().tagging) {
    rep.has_robust_f1 = true;
    rep.benign_f1 = robust_f1(model, split, corpus.vocab, corpus.config);
    rep.robust_f1 = robust_f1(model, evaluated, corpus.vocab, corpus.config);
  }
  out.write("report.json", rep.to_json(corpus.vocab));
  os << "benign_accuracy=" << format_double(rep.benign_accuracy)
     << " robust_accuracy=" << format_double(rep.robust_accuracy)
     << " attack_success_rate=" << format_double(rep.attack_success_rate) << '\n';
  return kExitOk;
}

int cmd_mi_analysis(const RunConfig& rc, const Options& o, Outputs& out, std::ostream& os) {
  const Corpus corpus = obtain_corpus(o, rc);
  const Model a = load_model(o.ckpt_a);
  const Model b = load_model(o.ckpt_b);
  require_vocab(a.config(), corpus, o.ckpt_a);
  require_vocab(b.config(), corpus, o.ckpt_b);
  const auto& benign = pick_split(corpus, o.split);
  std::vector<Example> adversarial;
  if (!o.adversarial.empty()) {
    adversarial = decode_split(read_text_file(o.adversarial), corpus.vocab, corpus.config, o.adversarial);
  } else {
    adversarial = build_adversarial(a, benign, corpus.vocab, reference_table(corpus), rc.attack, o.jobs).examples;
  }
  const MIAnalysisReport rep = mi_analysis(a, b, benign, adversarial, corpus.vocab, rc.mi, rc.train.seed);
  out.write("mi_report.json", rep.to_json());
  out.write("mi_report.csv", rep.to_csv());
  for (const auto& [key, d] : rep.deltas) os << "delta " << key << " = " << format_double(d) << '\n';
  return kExitOk;
}

int cmd_theory_check(const Options& o, Outputs& out, std::ostream& os) {
  const TheoryReport rep = run_theory_check(o.trials, o.pairs, o.seed);
  out.write("theory.json", rep.to_json());
  os << "lemma1_violations=" << rep.lemma1_violations << " lemma2_violations=" << rep.lemma2_violations << '\n';
  return rep.lemma1_violations + rep.lemma2_violations == 0 ? kExitOk : kExitRuntime;
}

int cmd_grad_check(const Options& o, Outputs& out, std::ostream& os) {
  nlohmann::ordered_json j;
  double worst = 0.0;
  auto ops = nlohmann::ordered_json::array();
  for (const auto& r : check_all_ops(o.seed, o.points)) {
    ops.push_back({{"name", r.name}, {"max_error", r.max_error}});
    worst = std::max(worst, r.max_error);
  }
  j["ops"] = ops;

  CorpusConfig cc;
  cc.vocab_size = 40;
  cc.indicator_sets = 6;
  cc.train_size = 8;
  cc.dev_size = 2;
  cc.test_size = 2;
  cc.max_words = 8;
  const Corpus corpus = generate_corpus(cc, o.seed);
  const ReferenceEmbeddingTable table = reference_table(corpus);
  // Tagging on, so the loss runs through both heads.
  ModelConfig mc;
  mc.vocab_size = corpus.vocab.size();
  mc.tagging = true;
  mc.freeze_embeddings = false;
  Model m(mc, o.seed, &table);
  const Batch batch = make_batch(std::span(corpus.train).first(2), corpus.vocab, &corpus.config);
  Rng rng = Rng::for_label(o.seed, "grad_check.model");
  const ModelGradCheck res = check_model_gradients(m, batch, rng);
  nlohmann::ordered_json params = nlohmann::ordered_json::object();
  for (const auto& [name, err] : res.parameters) params[name] = err;
  worst = std::max(worst, res.max_error());
  j["model"] = {{"delta", res.delta}, {"parameters", params}};
  j["max_error"] = worst;
  j["tolerance"] = o.tolerance;
  j["passed"] = worst <= o.tolerance;
  out.write("gradcheck.json", j.dump(2) + "\n");
  os << "max_relative_error=" << format_double(worst) << (worst <= o.tolerance ? " ok" : " FAILED") << '\n';
  return worst <= o.tolerance ? kExitOk : kExitRuntime;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Information-bottleneck robust training on a synthetic text task", "infobottle"};
  app.require_subcommand(1);

  Options o;
  std::string key_help;
  {
    RunConfig defaults;
    FieldRegistry reg;
    defaults.register_fields(reg);
    key_help = "\nConfiguration keys (set with --config FILE or --set key=value):\n" + reg.help();
  }

  std::vector<CLI::Option*> seed_opts;
  auto common = [&](CLI::App* sub, bool keys) {
    sub->add_option("--out", o.out, "output directory")->required();
    seed_opts.push_back(sub->add_option("--seed", o.seed, "run seed (overrides train.seed and corpus.seed)"));
    if (keys) {
      sub->add_option("--config", o.config_files, "key = value configuration file (repeatable)");
      sub->add_option("--set", o.overrides, "single key=value override (repeatable)");
      sub->footer(key_help);
    }
  };
  auto with_data = [&](CLI::App* sub) {
    sub->add_option("--data", o.data, "corpus directory written by gen-data (default: generate from corpus.*)");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  common(gen, true);

  CLI::App* tr = app.add_subcommand("train", "train a model and write its checkpoint");
  common(tr, true);
  with_data(tr);
  tr->add_option("--augment", o.augment, "extra training examples (split file, repeatable)");

  CLI::App* ev = app.add_subcommand("evaluate", "benign and robust accuracy of a checkpoint");
  common(ev, true);
  with_data(ev);
  ev->add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate")->required();
  ev->add_option("--attack", o.attack, "attack applied to the split")->check(CLI::IsMember({"none", "word-sub"}));
  ev->add_option("--victim", o.victim, "checkpoint the attack queries (default: --checkpoint)");
  ev->add_option("--split", o.split, "split to evaluate")->check(CLI::IsMember({"train", "dev", "test"}));
  ev->add_option("--jobs", o.jobs, "attack worker threads")->check(CLI::PositiveNumber);

  CLI::App* mi = app.add_subcommand("mi-analysis", "local/global MI of anchored and non-anchored tokens");
  common(mi, true);
  with_data(mi);
  mi->add_option("--a", o.ckpt_a, "baseline checkpoint")->required();
  mi->add_option("--b", o.ckpt_b, "compared checkpoint")->required();
  mi->add_option("--adversarial", o.adversarial, "adversarial split file (default: attack --a on --split)");
  mi->add_option("--split", o.split, "benign split")->check(CLI::IsMember({"train", "dev", "test"}));
  mi->add_option("--jobs", o.jobs, "attack worker threads")->check(CLI::PositiveNumber);

  CLI::App* th = app.add_subcommand("theory-check", "randomized checks of the two information inequalities");
  common(th, false);
  th->add_option("--trials", o.trials, "exact-enumeration trials");
  th->add_option("--pairs", o.pairs, "random (a, b) pairs for the phi bound");

  CLI::App* gc = app.add_subcommand("grad-check", "finite-difference check of every op and the model loss");
  common(gc, false);
  gc->add_option("--points", o.points, "random instances per op");
  gc->add_option("--tolerance", o.tolerance, "maximum accepted relative error");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitValidation;
  }

  try {
    configure_logging();
    const bool seed_given = std::any_of(seed_opts.begin(), seed_opts.end(), [](CLI::Option* s) { return s->count() > 0; });
    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();

    RunConfig rc;
    FieldRegistry reg;
    rc.register_fields(reg);
    if (sub != th && sub != gc) resolve(rc, reg, o, seed_given);
    const std::string config_text = reg.dump();

    Outputs outputs(o.out);
    int code = kExitOk;
    if (sub == gen) code = cmd_gen_data(rc, outputs, out);
    else if (sub == tr) code = cmd_train(rc, config_text, o, outputs, out);
    else if (sub == ev) code = cmd_evaluate(rc, config_text, o, outputs, out);
    else if (sub == mi) code = cmd_mi_analysis(rc, o, outputs, out);
    else if (sub == th) code = cmd_theory_check(o, outputs, out);
    else code = cmd_grad_check(o, outputs, out);
    outputs.manifest(name);
    return code;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const CorpusError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace infobottle
