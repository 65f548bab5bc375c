#include "infobottle/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "infobottle/ops.hpp"

namespace infobottle {

namespace {

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

Tensor random_tensor(Rng& rng, Shape shape, double sd = 1.0) {
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.data) v = rng.normal(0.0, sd);
  return t;
}

}  // namespace

double finite_diff_check(const ScalarFn& fn, const Tensor& point, double step) {
  Tape tape;
  Var x = tape.leaf(point, true);
  Var root = fn(tape, x);
  tape.backward(root);
  const Tensor analytic = tape.grad(x);

  Tensor probe = point;
  auto eval = [&](const Tensor& at) {
    Tape t(false);
    return fn(t, t.leaf(at, false)).value().item();
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + step;
    const double up = eval(probe);
    probe.data[i] = orig - step;
    const double down = eval(probe);
    probe.data[i] = orig;
    worst = std::max(worst, rel_error(analytic.data[i], (up - down) / (2.0 * step)));
  }
  return worst;
}

double finite_diff_check(const std::function<double()>& value, std::span<double> coords,
                         std::span<const double> analytic, double step) {
  double worst = 0.0;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const double orig = coords[i];
    coords[i] = orig + step;
    const double up = value();
    coords[i] = orig - step;
    const double down = value();
    coords[i] = orig;
    worst = std::max(worst, rel_error(analytic[i], (up - down) / (2.0 * step)));
  }
  return worst;
}

std::vector<OpCase> registered_op_cases(Rng& rng) {
  std::vector<OpCase> cases;
  auto add = [&](std::string name, std::vector<Tensor> inputs, std::vector<bool> diff,
                 std::function<Var(Tape&, const std::vector<Var>&)> build) {
    cases.push_back(OpCase{std::move(name), std::move(inputs), std::move(diff), std::move(build)});
  };
  using V = std::vector<Var>;

  add("matmul", {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 2})}, {true, true},
      [](Tape&, const V& in) { return ops::matmul(in[0], in[1]); });
  add("add", {random_tensor(rng, {3, 4}), random_tensor(rng, {4})}, {true, true},
      [](Tape&, const V& in) { return ops::add(in[0], in[1]); });
  add("scale", {random_tensor(rng, {2, 3})}, {true}, [](Tape&, const V& in) { return ops::scale(in[0], -1.7); });
  add("elementwise-mul", {random_tensor(rng, {3, 3}), random_tensor(rng, {3, 3})}, {true, true},
      [](Tape&, const V& in) { return ops::mul(in[0], in[1]); });
  add("softmax", {random_tensor(rng, {3, 5})}, {true}, [](Tape&, const V& in) { return ops::softmax(in[0]); });
  add("log-softmax", {random_tensor(rng, {3, 5})}, {true},
      [](Tape&, const V& in) { return ops::log_softmax(in[0]); });
  Tensor gain = random_tensor(rng, {6});
  for (double& g : gain.data) g += 1.0;
  add("layer-norm", {random_tensor(rng, {4, 6}), gain, random_tensor(rng, {6})}, {true, true, true},
      [](Tape&, const V& in) { return ops::layer_norm(in[0], in[1], in[2]); });
  add("gelu", {random_tensor(rng, {3, 4}, 1.5)}, {true}, [](Tape&, const V& in) { return ops::gelu(in[0]); });
  add("tanh", {random_tensor(rng, {3, 4})}, {true}, [](Tape&, const V& in) { return ops::tanh(in[0]); });
  std::vector<std::size_t> ids{3, 0, 3, 5, 1};
  add("embedding-gather", {random_tensor(rng, {6, 4})}, {true},
      [ids](Tape&, const V& in) { return ops::gather(in[0], ids); });
  add("concat", {random_tensor(rng, {3, 2}), random_tensor(rng, {3, 4})}, {true, true}, [](Tape&, const V& in) {
    Var c1 = ops::concat(in, 1);
    std::vector<Var> rows{c1, c1};
    return ops::concat(rows, 0);
  });
  add("slice", {random_tensor(rng, {5, 4})}, {true}, [](Tape&, const V& in) {
    return ops::slice(ops::slice(in[0], 0, 1, 4), 1, 2, 4);
  });
  add("squared-l2-norm", {random_tensor(rng, {3, 4})}, {true},
      [](Tape&, const V& in) { return ops::squared_l2_norm(in[0]); });
  add("mean", {random_tensor(rng, {3, 4})}, {true}, [](Tape&, const V& in) { return ops::mean(in[0]); });
  std::vector<int> labels{2, 0, 1, 2};
  add("cross-entropy-with-logits", {random_tensor(rng, {4, 3}, 2.0)}, {true},
      [labels](Tape&, const V& in) { return ops::cross_entropy_with_logits(in[0], labels); });
  add("log-sum-exp", {random_tensor(rng, {3, 5}, 3.0)}, {true},
      [](Tape&, const V& in) { return ops::log_sum_exp(in[0]); });

  ops::AttentionLayout layout;
  layout.batch = 2;
  layout.seq_len = 3;
  layout.heads = 2;
  layout.key_mask = {1, 1, 0, 1, 1, 1};
  add("masked-attention",
      {random_tensor(rng, {6, 4}), random_tensor(rng, {6, 4}), random_tensor(rng, {6, 4})}, {true, true, true},
      [layout](Tape&, const V& in) { return ops::masked_attention(in[0], in[1], in[2], layout); });
  add("pairwise-sq-dist", {random_tensor(rng, {3, 4}), random_tensor(rng, {5, 4})}, {true, true},
      [](Tape&, const V& in) { return ops::pairwise_sq_dist(in[0], in[1]); });
  std::vector<std::pair<std::size_t, std::size_t>> pairs{{0, 0}, {1, 0}, {2, 1}, {0, 1}, {2, 0}};
  add("additive-scores", {random_tensor(rng, {3, 5}), random_tensor(rng, {2, 5}), random_tensor(rng, {5})},
      {true, true, true}, [pairs](Tape&, const V& in) { return ops::additive_scores(in[0], in[1], in[2], pairs); });
  return cases;
}

std::vector<OpCheckResult> check_all_ops(std::uint64_t seed, int points, double step) {
  std::map<std::string, double> worst;
  std::vector<std::string> order;
  Rng rng = Rng::for_label(seed, "gradcheck.ops");
  for (int p = 0; p < points; ++p) {
    for (const OpCase& c : registered_op_cases(rng)) {
      if (!worst.count(c.name)) {
        worst[c.name] = 0.0;
        order.push_back(c.name);
      }
      // Fix the contraction weight by probing the output shape once.
      Tape probe(false);
      std::vector<Var> vars;
      for (const Tensor& t : c.inputs) vars.push_back(probe.leaf(t, false));
      const Shape out_shape = c.build(probe, vars).shape();
      const Tensor weight = random_tensor(rng, out_shape);
      for (std::size_t k = 0; k < c.inputs.size(); ++k) {
        if (!c.differentiable[k]) continue;
        ScalarFn fn = [&c, &weight, k](Tape& tape, Var x) {
          std::vector<Var> in;
          for (std::size_t j = 0; j < c.inputs.size(); ++j) in.push_back(j == k ? x : tape.constant(c.inputs[j]));
          Var out = c.build(tape, in);
          return ops::sum(ops::mul(out, tape.constant(weight)));
        };
        worst[c.name] = std::max(worst[c.name], finite_diff_check(fn, c.inputs[k], step));
      }
    }
  }
  std::vector<OpCheckResult> results;
  for (const auto& name : order) results.push_back({name, worst[name]});
  return results;
}

}  // namespace infobottle
