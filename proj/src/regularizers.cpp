#include "infobottle/regularizers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace infobottle {

void IBConfig::register_fields(FieldRegistry& reg) {
  reg.add("ib.beta", beta, "weight of the localized information bottleneck penalty");
  reg.add_choice("ib.sample_mode", sample_mode, {"identity", "gaussian_noise", "adversarial"},
                 "how t' is drawn from p(t|x)");
  reg.add("ib.sigma", sigma, "noise scale for gaussian_noise");
  reg.add("ib.pool_size", pool_size, "max true-token features in the distance pool");
  reg.add_choice("ib.layer", layer, {"embedding", "hidden"}, "where the local features T are taken");
}

void IBConfig::validate() const {
  if (beta < 0.0) throw ConfigError("ib.beta must be >= 0");
  if (sigma < 0.0) throw ConfigError("ib.sigma must be >= 0");
  if (pool_size == 0) throw ConfigError("ib.pool_size must be >= 1");
}

void AnchorConfig::register_fields(FieldRegistry& reg) {
  reg.add("anchor.alpha", alpha, "weight of the anchored feature alignment term");
  reg.add("anchor.c_l", c_l, "lower rank-fraction threshold");
  reg.add("anchor.c_h", c_h, "upper rank-fraction threshold");
  reg.add("anchor.max_negatives", max_negatives, "non-anchored negatives shared per batch");
  reg.add("anchor.max_positives", max_positives, "anchored tokens scored per batch");
  reg.add("anchor.include_positive", include_positive, "keep the positive in the InfoNCE denominator");
  reg.add("anchor.critic_hidden", critic_hidden, "critic hidden width");
  reg.add("anchor.critic_learning_rate", critic_learning_rate, "critic Adam step size");
}

void AnchorConfig::validate() const {
  if (alpha < 0.0) throw ConfigError("anchor.alpha must be >= 0");
  if (!(c_l >= 0.0 && c_h <= 1.0 && c_l <= c_h)) throw ConfigError("anchor thresholds need 0 <= c_l <= c_h <= 1");
  if (max_negatives == 0 || max_positives == 0) throw ConfigError("anchor sample caps must be >= 1");
  if (critic_hidden == 0) throw ConfigError("anchor.critic_hidden must be >= 1");
}

AnchoredIndexSet anchored_select(std::span<const double> grad_norms, double c_l, double c_h) {
  const std::size_t n = grad_norms.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return grad_norms[a] < grad_norms[b]; });
  AnchoredIndexSet out;
  for (std::size_t pos = 0; pos < n; ++pos) {
    const double r = static_cast<double>(pos + 1) / static_cast<double>(n);
    (c_l <= r && r <= c_h ? out.selected : out.complement).push_back(order[pos]);
  }
  std::sort(out.selected.begin(), out.selected.end());
  std::sort(out.complement.begin(), out.complement.end());
  return out;
}

std::vector<std::size_t> ib_pool(std::span<const std::size_t> token_rows, std::size_t pool_size, Rng& rng) {
  std::vector<std::size_t> pool(token_rows.begin(), token_rows.end());
  if (pool.size() > pool_size) {
    rng.shuffle(pool);
    pool.resize(pool_size);
    std::sort(pool.begin(), pool.end());
  }
  return pool;
}

Var ib_penalty(Var clean, Var sampled, std::span<const std::size_t> token_rows,
               std::span<const std::size_t> pool_rows, double beta, std::size_t batch_size) {
  if (pool_rows.empty()) throw std::invalid_argument("ib_penalty: empty feature pool");
  if (token_rows.empty()) throw std::invalid_argument("ib_penalty: no true tokens");
  if (clean.shape() != sampled.shape()) throw ShapeError("ib-penalty", clean.shape(), sampled.shape());
  Var t = ops::gather(clean, token_rows);
  Var tp = ops::gather(sampled, token_rows);
  Var pool = ops::gather(clean, pool_rows);
  Var own = ops::squared_l2_norm(ops::sub(tp, t));
  Var spread = ops::scale(ops::sum(ops::pairwise_sq_dist(t, pool)), 1.0 / static_cast<double>(pool_rows.size()));
  return ops::scale(ops::sub(spread, own), beta / static_cast<double>(batch_size));
}

BatchAnchors select_batch_anchors(const Batch& batch, const Tensor& delta_grad, double c_l, double c_h) {
  BatchAnchors out;
  const std::size_t d = delta_grad.cols();
  for (std::size_t e = 0; e < batch.size; ++e) {
    std::vector<std::size_t> rows;
    std::vector<double> norms;
    for (std::size_t i = 0; i < batch.seq_len; ++i) {
      const std::size_t r = e * batch.seq_len + i;
      if (!batch.words[r]) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += delta_grad(r, c) * delta_grad(r, c);
      rows.push_back(r);
      norms.push_back(std::sqrt(s));
    }
    if (rows.empty()) {
      ++out.empty_examples;
      continue;
    }
    const AnchoredIndexSet set = anchored_select(norms, c_l, c_h);
    if (set.selected.empty()) ++out.empty_examples;
    for (auto k : set.selected) {
      out.anchored_rows.push_back(rows[k]);
      out.anchored_example.push_back(e);
    }
    for (auto k : set.complement) out.complement_rows.push_back(rows[k]);
  }
  return out;
}

Var anchored_alignment(Tape& tape, Critic& critic, Var locals, Var globals, const BatchAnchors& anchors,
                       const AnchorConfig& config, Rng& rng) {
  (void)tape;
  if (anchors.anchored_rows.empty() || anchors.complement_rows.empty()) return Var{};
  std::vector<std::size_t> pick(anchors.anchored_rows.size());
  std::iota(pick.begin(), pick.end(), 0);
  if (pick.size() > config.max_positives) {
    rng.shuffle(pick);
    pick.resize(config.max_positives);
    std::sort(pick.begin(), pick.end());
  }
  std::vector<std::size_t> negatives = anchors.complement_rows;
  if (negatives.size() > config.max_negatives) {
    rng.shuffle(negatives);
    negatives.resize(config.max_negatives);
    std::sort(negatives.begin(), negatives.end());
  }
  std::vector<std::pair<std::size_t, std::size_t>> positives;
  for (auto k : pick) positives.emplace_back(anchors.anchored_rows[k], anchors.anchored_example[k]);
  return infonce(tape, critic, locals, globals, ContrastiveSet::shared(std::move(positives), std::move(negatives)),
                 config.include_positive);
}

}  // namespace infobottle
