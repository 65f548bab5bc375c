#include "infobottle/evaluator.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace infobottle {

double robust_accuracy(Model& model, const std::vector<Example>& adversarial, const Vocabulary& vocab) {
  if (adversarial.empty()) throw EvalError("robust accuracy needs a non-empty adversarial set");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < adversarial.size(); i += 256) {
    const std::size_t n = std::min<std::size_t>(256, adversarial.size() - i);
    const auto pred = model.predict(make_batch(std::span<const Example>(&adversarial[i], n), vocab));
    for (std::size_t k = 0; k < n; ++k) correct += pred[k] == adversarial[i + k].label;
  }
  return static_cast<double>(correct) / static_cast<double>(adversarial.size());
}

double span_f1(const std::set<std::size_t>& predicted, const std::set<std::size_t>& truth) {
  if (predicted.empty() && truth.empty()) return 1.0;
  std::size_t overlap = 0;
  for (auto p : predicted) overlap += truth.count(p);
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(predicted.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(truth.size());
  return 2.0 * precision * recall / (precision + recall);
}

double robust_f1(Model& model, const std::vector<Example>& adversarial, const Vocabulary& vocab,
                 const CorpusConfig& corpus) {
  if (adversarial.empty()) throw EvalError("robust F1 needs a non-empty adversarial set");
  if (!model.config().tagging) throw EvalError("robust F1 needs a model with the tagging head");
  double total = 0.0;
  for (std::size_t i = 0; i < adversarial.size(); i += 256) {
    const std::size_t n = std::min<std::size_t>(256, adversarial.size() - i);
    const Batch b = make_batch(std::span<const Example>(&adversarial[i], n), vocab, &corpus);
    Tape tape(false);
    const Forward f = model.forward(tape, b);
    const Tensor logits = model.tag_logits(tape, f.hidden).value();
    for (std::size_t e = 0; e < n; ++e) {
      std::set<std::size_t> pred, truth;
      for (std::size_t p = 0; p < b.seq_len; ++p) {
        const std::size_t r = e * b.seq_len + p;
        if (!b.words[r]) continue;
        if (logits(r, 1) > logits(r, 0)) pred.insert(p);
        if (b.tags[r]) truth.insert(p);
      }
      total += span_f1(pred, truth);
    }
  }
  return total / static_cast<double>(adversarial.size());
}

AdversarialSet build_adversarial(const Model& victim, const std::vector<Example>& data, const Vocabulary& vocab,
                                 const ReferenceEmbeddingTable& table, const WordSubConfig& config, std::size_t jobs) {
  config.validate();
  AdversarialSet out;
  out.results.resize(data.size());
  jobs = std::max<std::size_t>(1, std::min(jobs, data.size()));
  auto work = [&](std::size_t w) {
    Model m = victim;
    for (std::size_t i = w; i < data.size(); i += jobs)
      out.results[i] = word_substitution_attack(m, data[i], vocab, table, config);
  };
  if (jobs == 1) {
    work(0);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < jobs; ++w) threads.emplace_back(work, w);
    for (auto& t : threads) t.join();
  }
  for (const auto& r : out.results) {
    out.examples.push_back(r.adversarial);
    if (!r.skipped) {
      ++out.attacked;
      out.succeeded += r.success;
    }
  }
  return out;
}

std::string EvalReport::to_json(const Vocabulary& vocab) const {
  nlohmann::ordered_json j;
  j["attack"] = attack;
  j["seed"] = seed;
  j["benign_accuracy"] = benign_accuracy;
  j["robust_accuracy"] = robust_accuracy;
  j["attack_success_rate"] = attack_success_rate;
  if (has_robust_f1) {
    j["benign_f1"] = benign_f1;
    j["robust_f1"] = robust_f1;
  }
  j["config"] = config;
  auto traces_json = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto& r = traces[i];
    nlohmann::ordered_json t;
    t["index"] = i;
    t["skipped"] = r.skipped;
    t["success"] = r.success;
    t["positions"] = r.trace.positions;
    auto words = [&](const std::vector<std::size_t>& ids) {
      std::vector<std::string> w;
      for (auto id : ids) w.push_back(vocab.word(id));
      return w;
    };
    t["original"] = words(r.trace.original_ids);
    t["chosen"] = words(r.trace.chosen_ids);
    t["true_prob"] = r.trace.true_prob;
    t["queries"] = r.trace.queries;
    traces_json.push_back(std::move(t));
  }
  j["traces"] = std::move(traces_json);
  return j.dump(2) + "\n";
}

const MICell& MIAnalysisReport::cell(const std::string& ckpt, const std::string& group,
                                     const std::string& dataset) const {
  for (const auto& c : cells)
    if (c.checkpoint == ckpt && c.group == group && c.dataset == dataset) return c;
  throw EvalError("no MI cell " + ckpt + "/" + group + "/" + dataset);
}

double MIAnalysisReport::delta(const std::string& group, const std::string& dataset) const {
  return cell("b", group, dataset).estimate.value - cell("a", group, dataset).estimate.value;
}

std::string MIAnalysisReport::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& c : cells) {
    nlohmann::ordered_json o;
    o["checkpoint"] = c.checkpoint;
    o["group"] = c.group;
    o["dataset"] = c.dataset;
    o["mi_nats"] = c.estimate.value;
    o["std_error"] = c.estimate.std_error;
    o["samples"] = c.estimate.samples;
    o["estimator"] = to_string(c.estimate.kind);
    arr.push_back(std::move(o));
  }
  j["cells"] = std::move(arr);
  nlohmann::ordered_json d;
  for (const auto& [k, v] : deltas) d[k] = v;
  j["deltas"] = std::move(d);
  return j.dump(2) + "\n";
}

std::string MIAnalysisReport::to_csv() const {
  std::ostringstream out;
  out << "group,dataset,mi_nats\n";
  for (const auto& c : cells) out << c.checkpoint << ':' << c.group << ',' << c.dataset << ',' << format_double(c.estimate.value) << '\n';
  for (const auto& [k, v] : deltas) {
    const auto slash = k.find('/');
    out << "delta:" << k.substr(0, slash) << ',' << k.substr(slash + 1) << ',' << format_double(v) << '\n';
  }
  return out.str();
}

void MIAnalysisConfig::register_fields(FieldRegistry& reg) {
  reg.add("mi.c_l", c_l, "lower rank-fraction threshold of the anchored set");
  reg.add("mi.c_h", c_h, "upper rank-fraction threshold of the anchored set");
  reg.add_choice("mi.layer", layer, {"embedding", "hidden"}, "local features entering the estimate");
  reg.add("mi.critic_steps", critic.steps, "critic training steps per cell");
  reg.add("mi.critic_batch", critic.batch, "critic batch (in-batch negatives)");
  reg.add("mi.critic_learning_rate", critic.learning_rate, "critic Adam step size");
  reg.add("mi.critic_hidden", critic.hidden, "critic hidden width");
  reg.add("mi.eval_batch", eval_batch, "examples per feature-extraction batch");
}

namespace {

Tensor rows_of(const std::vector<std::vector<double>>& rows, std::size_t d) {
  if (rows.empty()) return Tensor();
  Tensor t(Shape{rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].begin(), rows[r].end(), &t.data[r * d]);
  return t;
}

Tensor permuted(const Tensor& t, const std::vector<std::size_t>& order, std::size_t begin, std::size_t end) {
  const std::size_t d = t.cols();
  Tensor out(Shape{end - begin, d});
  for (std::size_t i = begin; i < end; ++i) std::copy_n(&t.data[order[i] * d], d, &out.data[(i - begin) * d]);
  return out;
}

MIEstimate estimate_cell(const Tensor& locals, const Tensor& globals, const MIAnalysisConfig& config,
                         std::uint64_t seed) {
  const std::size_t n = locals.size() == 0 ? 0 : locals.rows();
  if (n < 2 * config.critic.batch) throw EvalError("too few feature pairs for an MI estimate");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::for_label(seed, "mi.split");
  rng.shuffle(order);
  const std::size_t half = n / 2;
  Critic critic = train_critic(permuted(locals, order, 0, half), permuted(globals, order, 0, half), config.critic, seed);
  return infonce_in_batches(critic, permuted(locals, order, half, n), permuted(globals, order, half, n),
                            config.critic.batch, config.critic.include_positive);
}

std::uint64_t cell_seed(std::uint64_t seed, const std::string& group, const std::string& dataset) {
  Rng r = Rng::for_label(seed, "mi." + group + "." + dataset);
  return static_cast<std::uint64_t>(r.uniform() * 9007199254740992.0);
}

}  // namespace

FeaturePairs collect_feature_pairs(Model& model, const std::vector<Example>& data, const Vocabulary& vocab,
                                   const MIAnalysisConfig& config) {
  FeaturePairs out;
  const std::size_t d = model.config().d;
  std::vector<std::vector<double>> al, ag, ol, og;
  for (std::size_t i = 0; i < data.size(); i += config.eval_batch) {
    const std::size_t n = std::min(config.eval_batch, data.size() - i);
    const Batch b = make_batch(std::span<const Example>(&data[i], n), vocab);
    Tape tape;
    Var delta = tape.leaf(Tensor(Shape{b.rows(), d}, 0.0));
    const Forward f = model.forward(tape, b, delta);
    tape.backward(model.objective(tape, f, b));
    const BatchAnchors anchors = select_batch_anchors(b, tape.grad(delta), config.c_l, config.c_h);
    out.examples += n;
    out.empty_examples += anchors.empty_examples;
    const Tensor& locals = (config.layer == "hidden" ? f.hidden : f.local).value();
    const Tensor& globals = f.global.value();
    auto row = [&](const Tensor& t, std::size_t r) { return std::vector<double>(&t.data[r * d], &t.data[(r + 1) * d]); };
    for (std::size_t k = 0; k < anchors.anchored_rows.size(); ++k) {
      al.push_back(row(locals, anchors.anchored_rows[k]));
      ag.push_back(row(globals, anchors.anchored_example[k]));
    }
    for (auto r : anchors.complement_rows) {
      ol.push_back(row(locals, r));
      og.push_back(row(globals, r / b.seq_len));
    }
  }
  out.anchored_locals = rows_of(al, d);
  out.anchored_globals = rows_of(ag, d);
  out.other_locals = rows_of(ol, d);
  out.other_globals = rows_of(og, d);
  return out;
}

MIAnalysisReport mi_analysis(const Model& a, const Model& b, const std::vector<Example>& benign,
                             const std::vector<Example>& adversarial, const Vocabulary& vocab,
                             const MIAnalysisConfig& config, std::uint64_t seed) {
  MIAnalysisReport report;
  report.seed = seed;
  const std::pair<std::string, const Model*> models[] = {{"a", &a}, {"b", &b}};
  const std::pair<std::string, const std::vector<Example>*> sets[] = {{"benign", &benign},
                                                                       {"adversarial", &adversarial}};
  for (const auto& [name, model] : models) {
    Model m = *model;
    for (const auto& [dataset, data] : sets) {
      const FeaturePairs fp = collect_feature_pairs(m, *data, vocab, config);
      if (2 * fp.empty_examples > fp.examples) {
        std::ostringstream msg;
        msg << "anchored set empty on " << fp.empty_examples << " of " << fp.examples << " " << dataset
            << " examples for checkpoint " << name << "; widen the band (lower mi.c_l or raise mi.c_h)";
        throw EvalError(msg.str());
      }
      report.cells.push_back({name, "anchored", dataset,
                              estimate_cell(fp.anchored_locals, fp.anchored_globals, config,
                                            cell_seed(seed, "anchored", dataset))});
      report.cells.push_back({name, "non_anchored", dataset,
                              estimate_cell(fp.other_locals, fp.other_globals, config,
                                            cell_seed(seed, "non_anchored", dataset))});
    }
  }
  for (const std::string group : {"anchored", "non_anchored"})
    for (const std::string dataset : {"benign", "adversarial"})
      report.deltas.emplace_back(group + "/" + dataset, report.delta(group, dataset));
  return report;
}

}  // namespace infobottle
