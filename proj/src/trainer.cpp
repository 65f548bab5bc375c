#include "infobottle/trainer.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

namespace infobottle {

TrainConfig TrainConfig::vanilla() {
  TrainConfig c;
  c.ib.beta = 0.0;
  c.anchor.alpha = 0.0;
  return c;
}

void TrainConfig::register_fields(FieldRegistry& reg) {
  reg.add_choice("train.mode", mode, {"standard", "adversarial"}, "standard or embedding-space adversarial training");
  reg.add("train.epochs", epochs, "passes over the training split");
  reg.add("train.batch_size", batch_size, "examples per step");
  reg.add("train.seed", seed, "seed of initialization, shuffling and sampling");
  reg.add_choice("train.optimizer", optimizer.kind, {"sgd", "adam"}, "update rule");
  reg.add("train.learning_rate", optimizer.learning_rate, "step size");
  reg.add("train.clip_norm", optimizer.clip_norm, "global gradient norm cap (0 disables)");
  reg.add_choice("train.anchor_layer", anchor_layer, {"embedding", "hidden"}, "local features for the alignment term");
  ib.register_fields(reg);
  anchor.register_fields(reg);
  adv.register_fields(reg);
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (!(optimizer.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
  if (mode == "adversarial" && adv.steps == 0) throw ConfigError("adversarial mode needs adv.steps >= 1");
  ib.validate();
  anchor.validate();
  adv.validate();
}

namespace {

std::vector<std::size_t> word_rows(const Batch& batch) {
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < batch.rows(); ++r)
    if (batch.words[r]) rows.push_back(r);
  return rows;
}

struct RegTerms {
  Var extra;  // tape == nullptr when no term is active
  StepStats stats;
};

// `perturbed` is the forward at delta (zero in standard mode); `delta` its value.
RegTerms regularizers(Model& model, Critic* critic, Tape& tape, const Batch& batch, const Forward& perturbed,
                      const Tensor& delta, const Tensor& clean_grad, bool adversarial, const TrainConfig& config,
                      Rng& rng) {
  RegTerms out;
  auto add = [&](Var v) { out.extra = out.extra.tape ? ops::add(out.extra, v) : v; };

  if (config.ib.beta > 0.0) {
    const auto rows = word_rows(batch);
    const auto pool = ib_pool(rows, config.ib.pool_size, rng);
    const bool hidden = config.ib.layer == "hidden";
    const std::string& mode = config.ib.sample_mode;

    Tensor shift;  // perturbation of the embedding output for the sampled features
    if (mode == "adversarial") {
      if (adversarial) {
        shift = delta;
      } else {
        shift = Tensor(delta.shape, 0.0);
        pgd_batch_step(shift, clean_grad, batch, config.adv.eta, config.adv.epsilon, false);
      }
    }

    Var clean;
    if (!hidden) {
      clean = adversarial ? model.embed(tape, batch) : perturbed.local;
    } else {
      clean = adversarial ? model.forward(tape, batch).hidden : perturbed.hidden;
    }

    Var sampled = clean;
    if (mode == "gaussian_noise") {
      Tensor noise(clean.shape());
      for (std::size_t r = 0; r < batch.rows(); ++r)
        if (batch.mask[r])
          for (std::size_t c = 0; c < noise.cols(); ++c) noise(r, c) = rng.normal(0.0, config.ib.sigma);
      sampled = ops::add(clean, tape.constant(std::move(noise)));
    } else if (mode == "adversarial") {
      if (!hidden)
        sampled = ops::add(clean, tape.constant(shift));
      else
        sampled = adversarial ? perturbed.hidden : model.forward(tape, batch, tape.constant(shift)).hidden;
    }
    Var ib = ib_penalty(clean, sampled, rows, pool, config.ib.beta, batch.size);
    out.stats.ib = ib.value().item();
    add(ib);
  }

  if (config.anchor.alpha > 0.0) {
    if (!critic) throw std::invalid_argument("alignment term needs a critic");
    const BatchAnchors anchors = select_batch_anchors(batch, clean_grad, config.anchor.c_l, config.anchor.c_h);
    out.stats.anchored = anchors.anchored_rows.size();
    out.stats.complement = anchors.complement_rows.size();
    out.stats.empty_examples = anchors.empty_examples;
    Var locals = config.anchor_layer == "hidden" ? perturbed.hidden : perturbed.local;
    Var v = anchored_alignment(tape, *critic, locals, perturbed.global, anchors, config.anchor, rng);
    if (v.tape) {
      out.stats.alignment = v.value().item();
      add(ops::scale(v, -config.anchor.alpha));
    }
  }
  return out;
}

}  // namespace

StepStats accumulate_loss(Model& model, Critic* critic, const Batch& batch, const TrainConfig& config, Rng& rng) {
  const bool regularized = config.ib.beta > 0.0 || config.anchor.alpha > 0.0;
  const bool need_clean_grad =
      config.anchor.alpha > 0.0 || (config.ib.beta > 0.0 && config.ib.sample_mode == "adversarial");
  StepStats stats;

  if (config.mode == "adversarial") {
    RoundHook hook;
    if (regularized)
      hook = [&](Tape& tape, const Forward& f, Var delta, const Tensor& clean_grad) {
        RegTerms r = regularizers(model, critic, tape, batch, f, delta.value(), clean_grad, true, config, rng);
        const double task = stats.task;
        stats = r.stats;
        stats.task = task;
        return r.extra;
      };
    const AdversarialLoss adv = adversarial_training_loss(model, batch, config.adv, rng, hook);
    stats.task = adv.loss;
    stats.total = adv.loss + adv.extra;
    return stats;
  }

  Tape tape;
  const Tensor zero(Shape{batch.rows(), model.config().d}, 0.0);
  Var dv = tape.leaf(zero);
  const Forward f = model.forward(tape, batch, dv);
  Var total = model.objective(tape, f, batch);
  stats.task = total.value().item();
  if (regularized) {
    Tensor clean_grad;
    if (need_clean_grad) {
      tape.backward(total);
      clean_grad = tape.grad(dv);
    }
    RegTerms r = regularizers(model, critic, tape, batch, f, zero, clean_grad, false, config, rng);
    const double task = stats.task;
    stats = r.stats;
    stats.task = task;
    if (r.extra.tape) total = ops::add(total, r.extra);
  }
  stats.total = total.value().item();
  tape.backward(total);
  tape.accumulate_param_grads();
  return stats;
}

double accuracy(Model& model, const std::vector<Example>& split, const Vocabulary& vocab, std::size_t batch) {
  if (split.empty()) throw std::invalid_argument("accuracy: empty split");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < split.size(); i += batch) {
    const std::size_t n = std::min(batch, split.size() - i);
    const auto pred = model.predict(make_batch(std::span<const Example>(&split[i], n), vocab));
    for (std::size_t k = 0; k < n; ++k) correct += pred[k] == split[i + k].label;
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

double mean_objective(Model& model, const std::vector<Example>& split, const Vocabulary& vocab,
                      const CorpusConfig* corpus, std::size_t batch) {
  if (split.empty()) throw std::invalid_argument("mean_objective: empty split");
  double total = 0.0;
  for (std::size_t i = 0; i < split.size(); i += batch) {
    const std::size_t n = std::min(batch, split.size() - i);
    const Batch b = make_batch(std::span<const Example>(&split[i], n), vocab, corpus);
    Tape tape(false);
    total += model.objective(tape, model.forward(tape, b), b).value().item() * static_cast<double>(n);
  }
  return total / static_cast<double>(split.size());
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::for_label(seed, "train.shuffle." + std::to_string(epoch));
  rng.shuffle(order);
  return order;
}

TrainResult train(const TrainConfig& config, const ModelConfig& model_config, const Corpus& corpus, std::ostream* log,
                  const std::string& config_text) {
  config.validate();
  if (corpus.train.empty() || corpus.dev.empty()) throw TrainingError("train and dev splits must be non-empty");
  const ReferenceEmbeddingTable table = reference_table(corpus);
  Model model(model_config, config.seed, table.dim() == model_config.d ? &table : nullptr);

  std::unique_ptr<Critic> critic;
  std::unique_ptr<Optimizer> critic_opt;
  if (config.anchor.alpha > 0.0) {
    critic = std::make_unique<Critic>(model_config.d, model_config.d, config.anchor.critic_hidden, config.seed);
    OptimizerConfig oc;
    oc.kind = "adam";
    oc.learning_rate = config.anchor.critic_learning_rate;
    oc.clip_norm = config.optimizer.clip_norm;
    critic_opt = std::make_unique<Optimizer>(critic->parameters(), oc);
  }
  Optimizer opt(model.parameters(), config.optimizer);
  Rng rng = Rng::for_label(config.seed, "train.step");

  TrainResult result;
  auto dev_loss = [&] { return mean_objective(model, corpus.dev, corpus.vocab, &corpus.config); };
  result.history.push_back({0, 0.0, accuracy(model, corpus.dev, corpus.vocab), dev_loss()});
  result.best = model;
  double best_acc = result.history.back().dev_accuracy;
  double best_loss = result.history.back().dev_loss;

  std::uint64_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto order = epoch_order(corpus.train.size(), config.seed, epoch);
    double epoch_loss = 0.0;
    std::size_t batches = 0, empty_examples = 0;
    for (std::size_t i = 0; i < order.size(); i += config.batch_size) {
      std::vector<Example> ex;
      for (std::size_t k = i; k < std::min(order.size(), i + config.batch_size); ++k) ex.push_back(corpus.train[order[k]]);
      const Batch batch = make_batch(ex, corpus.vocab, &corpus.config);

      opt.zero_grad();
      if (critic_opt) critic_opt->zero_grad();
      const StepStats s = accumulate_loss(model, critic.get(), batch, config, rng);
      ++step;
      if (!std::isfinite(s.total)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << step << " (epoch " << epoch << "): total=" << s.total
            << " task=" << s.task << " ib=" << s.ib << " alignment=" << s.alignment
            << " grad_norm=" << global_grad_norm(model.parameters());
        throw TrainingError(msg.str());
      }
      const double norm = opt.step();
      if (critic_opt) critic_opt->step();
      result.loss_trace.push_back(s.total);
      result.clipped_steps += opt.clipped();
      if (opt.clipped()) spdlog::debug("step {} clipped gradient norm {}", step, norm);
      epoch_loss += s.total;
      ++batches;
      empty_examples += s.empty_examples;
      if (log)
        *log << "step=" << step << " epoch=" << epoch << " loss=" << format_double(s.total)
             << " task=" << format_double(s.task) << " ib=" << format_double(s.ib)
             << " alignment=" << format_double(s.alignment) << " anchored=" << s.anchored
             << " complement=" << s.complement << " grad_norm=" << format_double(norm)
             << " clipped=" << (opt.clipped() ? 1 : 0) << '\n';
    }
    if (empty_examples > 0)
      spdlog::warn("epoch {}: {} examples had no anchored token", epoch, empty_examples);
    const double dev = accuracy(model, corpus.dev, corpus.vocab);
    const double dl = dev_loss();
    result.history.push_back({epoch, epoch_loss / static_cast<double>(std::max<std::size_t>(batches, 1)), dev, dl});
    spdlog::info("epoch {} loss {:.6f} dev_accuracy {:.4f} dev_loss {:.6f}", epoch, result.history.back().train_loss,
                 dev, dl);
    if (dev > best_acc || (dev == best_acc && dl < best_loss)) {
      best_acc = dev;
      best_loss = dl;
      result.best = model;
      result.best_epoch = epoch;
    }
  }
  result.checkpoint = result.best.to_checkpoint(step, config_text);
  return result;
}

}  // namespace infobottle
