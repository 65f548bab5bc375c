#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "infobottle/tape.hpp"

// Differentiable ops over 2-D (or scalar / row-vector) tensors. Every op
// validates operand shapes and throws ShapeError naming the op on mismatch.
namespace infobottle::ops {

Var matmul(Var a, Var b);
// Same shape, or `b` a single row broadcast over the rows of `a`.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double factor);
Var mul(Var a, Var b);

// Row-wise; a rank-1 input is one row.
Var softmax(Var a);
Var log_softmax(Var a);
// Reduces the last axis with max-shift stabilization: [m x n] -> [m], [n] -> [].
Var log_sum_exp(Var a);

Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var tanh(Var a);
// Tanh approximation of GELU.
Var gelu(Var a);

// Rows of `table` selected by `ids`; throws std::out_of_range on a bad id.
Var gather(Var table, std::span<const std::size_t> ids);
// axis 0 stacks rows, axis 1 joins columns.
Var concat(std::span<const Var> parts, int axis);
Var slice(Var a, int axis, std::size_t begin, std::size_t end);
Var reshape(Var a, Shape shape);

Var squared_l2_norm(Var a);
Var sum(Var a);
Var mean(Var a);
// Mean over rows of -log softmax(logits)[label].
Var cross_entropy_with_logits(Var logits, std::span<const int> labels);

struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t seq_len = 1;
  std::size_t heads = 1;
  // batch * seq_len entries; zero marks a key that no query may attend to.
  std::vector<std::uint8_t> key_mask;
};

// Multi-head scaled dot-product attention over row-stacked sequences.
// q, k, v are [batch*seq_len x d] with d divisible by heads.
Var masked_attention(Var q, Var k, Var v, const AttentionLayout& layout);

// [r x d], [m x d] -> [r x m] of squared euclidean distances.
Var pairwise_sq_dist(Var a, Var b);

// For each (i, j) pair: sum_h w[h] * tanh(u[i,h] + v[j,h]). u is [R x H],
// v is [S x H], w has H entries. Result has one entry per pair.
Var additive_scores(Var u, Var v, Var w, std::span<const std::pair<std::size_t, std::size_t>> pairs);

}  // namespace infobottle::ops
