#include "infobottle/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace infobottle::ops {
namespace {

bool is_matrix_like(const Tensor& t) { return t.rank() <= 2; }

void require_matrix(const char* op, const Tensor& t) {
  if (!is_matrix_like(t)) throw ShapeError(op, "expected rank <= 2, got " + shape_str(t.shape));
}

bool is_row(const Tensor& t) { return t.rank() == 1 || (t.rank() == 2 && t.shape[0] == 1); }

void add_into(Tensor* dst, const Tensor& src, double factor = 1.0) {
  if (dst == nullptr) return;
  for (std::size_t i = 0; i < src.data.size(); ++i) dst->data[i] += factor * src.data[i];
}

// exp-based tanh; about 3x faster than std::tanh here, within a few ulp.
inline double tanh_fast(double x) {
  const double ax = std::abs(x);
  if (ax < 0.05) return std::tanh(x);
  if (ax > 19.0) return x > 0 ? 1.0 : -1.0;
  const double e = std::exp(2.0 * ax);
  const double t = (e - 1.0) / (e + 1.0);
  return x > 0 ? t : -t;
}

}  // namespace

namespace {

// C[m x n] += A[m x k] * B[k x n]
void gemm_acc(const double* __restrict A, const double* __restrict B, double* __restrict C, std::size_t m,
              std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* __restrict brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[k x n] += A[m x k]^T * G[m x n]
void gemm_tn_acc(const double* __restrict A, const double* __restrict G, double* __restrict C, std::size_t m,
                 std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* __restrict grow = G + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      double* __restrict crow = C + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

std::vector<double> transposed(const double* X, std::size_t rows, std::size_t cols) {
  std::vector<double> T(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) T[c * rows + r] = X[r * cols + c];
  return T;
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_matrix("matmul", A);
  require_matrix("matmul", B);
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  if (B.rows() != k || A.rank() != 2 || B.rank() != 2) throw ShapeError("matmul", A.shape, B.shape);
  Tensor C(Shape{m, n}, 0.0);
  gemm_acc(A.data.data(), B.data.data(), C.data.data(), m, k, n);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(C), {ia, ib}, [ia, ib, m, k, n](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_for(ia)) {
      // dA = G B^T
      const auto bt = transposed(t.value(ib).data.data(), k, n);
      gemm_acc(g.data.data(), bt.data(), ga->data.data(), m, n, k);
    }
    if (Tensor* gb = t.grad_for(ib)) {
      // dB = A^T G
      gemm_tn_acc(t.value(ia).data.data(), g.data.data(), gb->data.data(), m, k, n);
    }
  });
}

namespace {

Var add_scaled(const char* op, Var a, Var b, double sign) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t ia = a.id, ib = b.id;
  if (A.shape == B.shape) {
    Tensor C = A;
    for (std::size_t i = 0; i < C.data.size(); ++i) C.data[i] += sign * B.data[i];
    return a.tape->push(std::move(C), {ia, ib}, [ia, ib, sign](Tape& t, const Tensor& g) {
      add_into(t.grad_for(ia), g);
      add_into(t.grad_for(ib), g, sign);
    });
  }
  if (A.rank() == 2 && is_row(B) && B.size() == A.cols()) {
    const std::size_t rows = A.rows(), cols = A.cols();
    Tensor C = A;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) C.data[r * cols + c] += sign * B.data[c];
    return a.tape->push(std::move(C), {ia, ib}, [ia, ib, sign, rows, cols](Tape& t, const Tensor& g) {
      add_into(t.grad_for(ia), g);
      if (Tensor* gb = t.grad_for(ib)) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gb->data[c] += sign * g.data[r * cols + c];
      }
    });
  }
  throw ShapeError(op, A.shape, B.shape);
}

}  // namespace

Var add(Var a, Var b) { return add_scaled("add", a, b, 1.0); }
Var sub(Var a, Var b) { return add_scaled("sub", a, b, -1.0); }

Var scale(Var a, double factor) {
  Tensor C = a.value();
  for (double& v : C.data) v *= factor;
  const std::size_t ia = a.id;
  return a.tape->push(std::move(C), {ia}, [ia, factor](Tape& t, const Tensor& g) {
    add_into(t.grad_for(ia), g, factor);
  });
}

Var mul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape != B.shape) throw ShapeError("mul", A.shape, B.shape);
  Tensor C = A;
  for (std::size_t i = 0; i < C.data.size(); ++i) C.data[i] *= B.data[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(C), {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    if (Tensor* ga = t.grad_for(ia))
      for (std::size_t i = 0; i < g.data.size(); ++i) ga->data[i] += g.data[i] * B.data[i];
    if (Tensor* gb = t.grad_for(ib))
      for (std::size_t i = 0; i < g.data.size(); ++i) gb->data[i] += g.data[i] * A.data[i];
  });
}

Var softmax(Var a) {
  const Tensor& A = a.value();
  require_matrix("softmax", A);
  if (A.rank() == 0) throw ShapeError("softmax", "scalar input");
  const std::size_t rows = A.rows(), cols = A.cols();
  Tensor S = A;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = &S.data[r * cols];
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) row[c] /= z;
  }
  const std::size_t ia = a.id;
  Tensor copy = S;
  return a.tape->push(std::move(S), {ia}, [ia, rows, cols, S = std::move(copy)](Tape& t, const Tensor& g) {
    Tensor* ga = t.grad_for(ia);
    if (ga == nullptr) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* s = &S.data[r * cols];
      const double* gr = &g.data[r * cols];
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += s[c] * gr[c];
      for (std::size_t c = 0; c < cols; ++c) ga->data[r * cols + c] += s[c] * (gr[c] - dot);
    }
  });
}

Var log_softmax(Var a) {
  const Tensor& A = a.value();
  require_matrix("log-softmax", A);
  if (A.rank() == 0) throw ShapeError("log-softmax", "scalar input");
  const std::size_t rows = A.rows(), cols = A.cols();
  Tensor L = A;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = &L.data[r * cols];
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) row[c] -= lse;
  }
  const std::size_t ia = a.id;
  Tensor copy = L;
  return a.tape->push(std::move(L), {ia}, [ia, rows, cols, out = std::move(copy)](Tape& t, const Tensor& g) {
    Tensor* ga = t.grad_for(ia);
    if (ga == nullptr) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* lr = &out.data[r * cols];
      const double* gr = &g.data[r * cols];
      double gs = 0.0;
      for (std::size_t c = 0; c < cols; ++c) gs += gr[c];
      for (std::size_t c = 0; c < cols; ++c) ga->data[r * cols + c] += gr[c] - std::exp(lr[c]) * gs;
    }
  });
}

Var log_sum_exp(Var a) {
  const Tensor& A = a.value();
  require_matrix("log-sum-exp", A);
  if (A.rank() == 0) throw ShapeError("log-sum-exp", "scalar input");
  const std::size_t rows = A.rows(), cols = A.cols();
  Tensor out = A.rank() == 1 ? Tensor(Shape{}, 0.0) : Tensor(Shape{rows}, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &A.data[r * cols];
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(row[c] - mx);
    out.data[r] = mx + std::log(z);
  }
  const std::size_t ia = a.id;
  Tensor lse = out;
  return a.tape->push(std::move(out), {ia}, [ia, rows, cols, lse = std::move(lse)](Tape& t, const Tensor& g) {
    Tensor* ga = t.grad_for(ia);
    if (ga == nullptr) return;
    const Tensor& A = t.value(ia);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        ga->data[r * cols + c] += g.data[r] * std::exp(A.data[r * cols + c] - lse.data[r]);
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& X = x.value();
  const Tensor& G = gain.value();
  const Tensor& B = bias.value();
  require_matrix("layer-norm", X);
  const std::size_t rows = X.rows(), cols = X.cols();
  if (G.size() != cols || !is_row(G)) throw ShapeError("layer-norm", X.shape, G.shape);
  if (B.size() != cols || !is_row(B)) throw ShapeError("layer-norm", X.shape, B.shape);
  Tensor Y(X.shape, 0.0);
  Tensor xhat(X.shape, 0.0);
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &X.data[r * cols];
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mu) * inv_std[r];
      xhat.data[r * cols + c] = h;
      Y.data[r * cols + c] = G.data[c] * h + B.data[c];
    }
  }
  const std::size_t ix = x.id, ig = gain.id, ibias = bias.id;
  return x.tape->push(std::move(Y), {ix, ig, ibias},
                      [ix, ig, ibias, rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                          Tape& t, const Tensor& g) {
                        const Tensor& G = t.value(ig);
                        if (Tensor* gg = t.grad_for(ig))
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < cols; ++c)
                              gg->data[c] += g.data[r * cols + c] * xhat.data[r * cols + c];
                        if (Tensor* gb = t.grad_for(ibias))
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < cols; ++c) gb->data[c] += g.data[r * cols + c];
                        Tensor* gx = t.grad_for(ix);
                        if (gx == nullptr) return;
                        const double inv_n = 1.0 / static_cast<double>(cols);
                        for (std::size_t r = 0; r < rows; ++r) {
                          double m1 = 0.0, m2 = 0.0;
                          for (std::size_t c = 0; c < cols; ++c) {
                            const double dh = g.data[r * cols + c] * G.data[c];
                            m1 += dh;
                            m2 += dh * xhat.data[r * cols + c];
                          }
                          m1 *= inv_n;
                          m2 *= inv_n;
                          for (std::size_t c = 0; c < cols; ++c) {
                            const double dh = g.data[r * cols + c] * G.data[c];
                            gx->data[r * cols + c] += inv_std[r] * (dh - m1 - xhat.data[r * cols + c] * m2);
                          }
                        }
                      });
}

Var tanh(Var a) {
  Tensor Y = a.value();
  for (double& v : Y.data) v = tanh_fast(v);
  const std::size_t ia = a.id;
  Tensor y = Y;
  return a.tape->push(std::move(Y), {ia}, [ia, y = std::move(y)](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_for(ia))
      for (std::size_t i = 0; i < g.data.size(); ++i) ga->data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
  });
}

Var gelu(Var a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Tensor Y = a.value();
  std::vector<double> ths(Y.size());
  for (std::size_t i = 0; i < Y.size(); ++i) {
    const double x = Y.data[i];
    ths[i] = tanh_fast(kC * (x + kA * x * x * x));
    Y.data[i] = 0.5 * x * (1.0 + ths[i]);
  }
  const std::size_t ia = a.id;
  if (!a.tape->recording()) ths.clear();
  return a.tape->push(std::move(Y), {ia}, [ia, ths = std::move(ths)](Tape& t, const Tensor& g) {
    Tensor* ga = t.grad_for(ia);
    if (ga == nullptr) return;
    const Tensor& X = t.value(ia);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      const double x = X.data[i];
      const double th = ths[i];
      const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * x * x);
      ga->data[i] += g.data[i] * d;
    }
  });
}

Var gather(Var table, std::span<const std::size_t> ids) {
  const Tensor& T = table.value();
  require_matrix("embedding-gather", T);
  if (ids.empty()) throw ShapeError("embedding-gather", "empty index list");
  const std::size_t vocab = T.rows(), cols = T.cols();
  Tensor out(Shape{ids.size(), cols}, 0.0);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw std::out_of_range("embedding-gather: index " + std::to_string(ids[i]) + " out of range [0, " +
                              std::to_string(vocab) + ")");
    }
    std::copy_n(&T.data[ids[i] * cols], cols, &out.data[i * cols]);
  }
  const std::size_t it = table.id;
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return table.tape->push(std::move(out), {it}, [it, cols, idx = std::move(idx)](Tape& t, const Tensor& g) {
    Tensor* gt = t.grad_for(it);
    if (gt == nullptr) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < cols; ++c) gt->data[idx[i] * cols + c] += g.data[i * cols + c];
  });
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  if (axis != 0 && axis != 1) throw ShapeError("concat", "axis must be 0 or 1");
  Tape* tape = parts[0].tape;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> extents;
  const Tensor& first = parts[0].value();
  require_matrix("concat", first);
  const std::size_t fixed = axis == 0 ? first.cols() : first.rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    require_matrix("concat", v);
    const std::size_t f = axis == 0 ? v.cols() : v.rows();
    if (f != fixed) throw ShapeError("concat", first.shape, v.shape);
    const std::size_t e = axis == 0 ? v.rows() : v.cols();
    ids.push_back(p.id);
    extents.push_back(e);
    total += e;
  }
  const std::size_t rows = axis == 0 ? total : fixed;
  const std::size_t cols = axis == 0 ? fixed : total;
  Tensor out(Shape{rows, cols}, 0.0);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    if (axis == 0) {
      std::copy(v.data.begin(), v.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(offset * cols));
    } else {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < extents[k]; ++c) out.data[r * cols + offset + c] = v.data[r * extents[k] + c];
    }
    offset += extents[k];
  }
  return tape->push(std::move(out), ids, [ids, extents, axis, rows, cols](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (Tensor* gp = t.grad_for(ids[k])) {
        if (axis == 0) {
          for (std::size_t i = 0; i < gp->data.size(); ++i) gp->data[i] += g.data[off * cols + i];
        } else {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < extents[k]; ++c) gp->data[r * extents[k] + c] += g.data[r * cols + off + c];
        }
      }
      off += extents[k];
    }
  });
}

Var slice(Var a, int axis, std::size_t begin, std::size_t end) {
  const Tensor& A = a.value();
  require_matrix("slice", A);
  if (axis != 0 && axis != 1) throw ShapeError("slice", "axis must be 0 or 1");
  const std::size_t rows = A.rows(), cols = A.cols();
  const std::size_t extent = axis == 0 ? rows : cols;
  if (begin >= end || end > extent) {
    throw ShapeError("slice", "range [" + std::to_string(begin) + ", " + std::to_string(end) + ") outside " +
                                  shape_str(A.shape));
  }
  const std::size_t out_rows = axis == 0 ? end - begin : rows;
  const std::size_t out_cols = axis == 0 ? cols : end - begin;
  Tensor out(Shape{out_rows, out_cols}, 0.0);
  for (std::size_t r = 0; r < out_rows; ++r)
    for (std::size_t c = 0; c < out_cols; ++c)
      out.data[r * out_cols + c] = axis == 0 ? A.data[(r + begin) * cols + c] : A.data[r * cols + c + begin];
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia, axis, begin, cols, out_rows, out_cols](Tape& t, const Tensor& g) {
    Tensor* ga = t.grad_for(ia);
    if (ga == nullptr) return;
    for (std::size_t r = 0; r < out_rows; ++r)
      for (std::size_t c = 0; c < out_cols; ++c) {
        const std::size_t src = axis == 0 ? (r + begin) * cols + c : r * cols + c + begin;
        ga->data[src] += g.data[r * out_cols + c];
      }
  });
}

Var reshape(Var a, Shape shape) {
  const Tensor& A = a.value();
  if (numel(shape) != A.size()) throw ShapeError("reshape", A.shape, shape);
  Tensor out(std::move(shape), A.data);
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia](Tape& t, const Tensor& g) { add_into(t.grad_for(ia), g); });
}

Var squared_l2_norm(Var a) {
  const Tensor& A = a.value();
  double s = 0.0;
  for (double v : A.data) s += v * v;
  const std::size_t ia = a.id;
  return a.tape->push(Tensor::scalar(s), {ia}, [ia](Tape& t, const Tensor& g) {
    Tensor* ga = t.grad_for(ia);
    if (ga == nullptr) return;
    const Tensor& A = t.value(ia);
    for (std::size_t i = 0; i < A.data.size(); ++i) ga->data[i] += 2.0 * g.data[0] * A.data[i];
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  const std::size_t ia = a.id;
  return a.tape->push(Tensor::scalar(s), {ia}, [ia](Tape& t, const Tensor& g) {
    if (Tensor* ga = t.grad_for(ia))
      for (double& v : ga->data) v += g.data[0];
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var cross_entropy_with_logits(Var logits, std::span<const int> labels) {
  const Tensor& L = logits.value();
  require_matrix("cross-entropy-with-logits", L);
  const std::size_t rows = L.rows(), cols = L.cols();
  if (labels.size() != rows) {
    throw ShapeError("cross-entropy-with-logits",
                     std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  }
  Tensor probs(Shape{rows, cols}, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= cols) {
      throw std::out_of_range("cross-entropy-with-logits: label " + std::to_string(labels[r]) + " outside [0, " +
                              std::to_string(cols) + ")");
    }
    const double* row = &L.data[r * cols];
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (probs.data[r * cols + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) probs.data[r * cols + c] /= z;
    total += mx + std::log(z) - row[labels[r]];
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  const std::size_t il = logits.id;
  std::vector<int> y(labels.begin(), labels.end());
  return logits.tape->push(Tensor::scalar(total * inv_rows), {il},
                           [il, rows, cols, inv_rows, probs = std::move(probs), y = std::move(y)](Tape& t,
                                                                                                  const Tensor& g) {
                             Tensor* gl = t.grad_for(il);
                             if (gl == nullptr) return;
                             const double s = g.data[0] * inv_rows;
                             for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t c = 0; c < cols; ++c) gl->data[r * cols + c] += s * probs.data[r * cols + c];
                               gl->data[r * cols + static_cast<std::size_t>(y[r])] -= s;
                             }
                           });
}

Var masked_attention(Var q, Var k, Var v, const AttentionLayout& layout) {
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  if (Q.shape != K.shape) throw ShapeError("masked-attention", Q.shape, K.shape);
  if (Q.shape != V.shape) throw ShapeError("masked-attention", Q.shape, V.shape);
  const std::size_t B = layout.batch, L = layout.seq_len, H = layout.heads;
  const std::size_t d = Q.cols();
  if (Q.rank() != 2 || Q.rows() != B * L) {
    throw ShapeError("masked-attention", "expected " + std::to_string(B * L) + " rows, got " + shape_str(Q.shape));
  }
  if (H == 0 || d % H != 0) throw ShapeError("masked-attention", "width " + std::to_string(d) + " not divisible by heads");
  if (layout.key_mask.size() != B * L) throw ShapeError("masked-attention", "key mask length mismatch");
  const std::size_t dh = d / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs layout: [b][h][i][j]
  std::vector<double> probs(B * H * L * L, 0.0);
  Tensor out(Shape{B * L, d}, 0.0);
  std::vector<double> scores(L);
  for (std::size_t b = 0; b < B; ++b) {
    const std::uint8_t* mask = &layout.key_mask[b * L];
    bool any = false;
    for (std::size_t j = 0; j < L; ++j) any = any || mask[j];
    if (!any) throw ShapeError("masked-attention", "sequence " + std::to_string(b) + " has no attendable key");
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < L; ++i) {
        const double* qi = &Q.data[(b * L + i) * d + off];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          if (!mask[j]) continue;
          const double* kj = &K.data[(b * L + j) * d + off];
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        double* p = &probs[((b * H + h) * L + i) * L];
        double z = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
          if (!mask[j]) continue;
          z += (p[j] = std::exp(scores[j] - mx));
        }
        double* oi = &out.data[(b * L + i) * d + off];
        for (std::size_t j = 0; j < L; ++j) {
          if (!mask[j]) continue;
          p[j] /= z;
          const double* vj = &V.data[(b * L + j) * d + off];
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }
  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  return q.tape->push(
      std::move(out), {iq, ik, iv},
      [iq, ik, iv, B, L, H, d, dh, inv_sqrt, probs = std::move(probs), mask = layout.key_mask](Tape& t,
                                                                                                 const Tensor& g) {
        const Tensor& Q = t.value(iq);
        const Tensor& K = t.value(ik);
        const Tensor& V = t.value(iv);
        Tensor* gq = t.grad_for(iq);
        Tensor* gk = t.grad_for(ik);
        Tensor* gv = t.grad_for(iv);
        std::vector<double> dp(L);
        for (std::size_t b = 0; b < B; ++b) {
          const std::uint8_t* m = &mask[b * L];
          for (std::size_t h = 0; h < H; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < L; ++i) {
              const double* p = &probs[((b * H + h) * L + i) * L];
              const double* go = &g.data[(b * L + i) * d + off];
              double dot = 0.0;
              for (std::size_t j = 0; j < L; ++j) {
                if (!m[j]) continue;
                const double* vj = &V.data[(b * L + j) * d + off];
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += go[c] * vj[c];
                dp[j] = s;
                dot += p[j] * s;
                if (gv) {
                  double* gvj = &gv->data[(b * L + j) * d + off];
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * go[c];
                }
              }
              const double* qi = &Q.data[(b * L + i) * d + off];
              for (std::size_t j = 0; j < L; ++j) {
                if (!m[j]) continue;
                const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
                if (ds == 0.0) continue;
                const double* kj = &K.data[(b * L + j) * d + off];
                if (gq) {
                  double* gqi = &gq->data[(b * L + i) * d + off];
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  double* gkj = &gk->data[(b * L + j) * d + off];
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

Var pairwise_sq_dist(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_matrix("pairwise-sq-dist", A);
  require_matrix("pairwise-sq-dist", B);
  if (A.cols() != B.cols()) throw ShapeError("pairwise-sq-dist", A.shape, B.shape);
  const std::size_t r = A.rows(), m = B.rows(), d = A.cols();
  Tensor D(Shape{r, m}, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = A.data[i * d + c] - B.data[j * d + c];
        s += diff * diff;
      }
      D.data[i * m + j] = s;
    }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(D), {ia, ib}, [ia, ib, r, m, d](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    Tensor* ga = t.grad_for(ia);
    Tensor* gb = t.grad_for(ib);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double w = 2.0 * g.data[i * m + j];
        if (w == 0.0) continue;
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = A.data[i * d + c] - B.data[j * d + c];
          if (ga) ga->data[i * d + c] += w * diff;
          if (gb) gb->data[j * d + c] -= w * diff;
        }
      }
  });
}

Var additive_scores(Var u, Var v, Var w, std::span<const std::pair<std::size_t, std::size_t>> pairs) {
  const Tensor& U = u.value();
  const Tensor& Vt = v.value();
  const Tensor& W = w.value();
  require_matrix("additive-scores", U);
  require_matrix("additive-scores", Vt);
  const std::size_t H = U.cols();
  if (Vt.cols() != H) throw ShapeError("additive-scores", U.shape, Vt.shape);
  if (W.size() != H) throw ShapeError("additive-scores", U.shape, W.shape);
  if (pairs.empty()) throw ShapeError("additive-scores", "no pairs");
  const std::size_t P = pairs.size();
  std::vector<double> act(P * H);
  Tensor out(Shape{P}, 0.0);
  for (std::size_t p = 0; p < P; ++p) {
    const auto [i, j] = pairs[p];
    if (i >= U.rows() || j >= Vt.rows()) throw std::out_of_range("additive-scores: pair index out of range");
    const double* ui = &U.data[i * H];
    const double* vj = &Vt.data[j * H];
    double* a = &act[p * H];
    double s = 0.0;
    for (std::size_t h = 0; h < H; ++h) {
      a[h] = tanh_fast(ui[h] + vj[h]);
      s += W.data[h] * a[h];
    }
    out.data[p] = s;
  }
  const std::size_t iu = u.id, iv = v.id, iw = w.id;
  std::vector<std::pair<std::size_t, std::size_t>> pr(pairs.begin(), pairs.end());
  return u.tape->push(std::move(out), {iu, iv, iw},
                      [iu, iv, iw, H, P, act = std::move(act), pr = std::move(pr)](Tape& t, const Tensor& g) {
                        const Tensor& W = t.value(iw);
                        Tensor* gu = t.grad_for(iu);
                        Tensor* gv = t.grad_for(iv);
                        Tensor* gw = t.grad_for(iw);
                        for (std::size_t p = 0; p < P; ++p) {
                          const double gp = g.data[p];
                          if (gp == 0.0) continue;
                          const double* a = &act[p * H];
                          double* gui = gu ? &gu->data[pr[p].first * H] : nullptr;
                          double* gvj = gv ? &gv->data[pr[p].second * H] : nullptr;
                          for (std::size_t h = 0; h < H; ++h) {
                            if (gw) gw->data[h] += gp * a[h];
                            const double dz = gp * W.data[h] * (1.0 - a[h] * a[h]);
                            if (gui) gui[h] += dz;
                            if (gvj) gvj[h] += dz;
                          }
                        }
                      });
}

}  // namespace infobottle::ops
