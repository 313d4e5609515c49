#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fd3d/array.hpp"
#include "fd3d/rng.hpp"

namespace fd3d {

namespace detail {

// C(m,n) += A(m,k) * B(k,n)
template <class T>
void mm_nn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}

// C(m,n) += A(m,k) * B(n,k)^T
template <class T>
void mm_nt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const T* arow = a + i * k;
      const T* brow = b + j * k;
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
}

// C(k,n) += A(m,k)^T * B(m,n)
template <class T>
void mm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      const T* brow = b + i * n;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}

inline double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440)); }
inline double gelu_bwd(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
  const double pdf = std::exp(-0.5 * x * x) * 0.39894228040143267794;
  return cdf + x * pdf;
}

}  // namespace detail

// Eager reverse-mode tape. Every op computes its value when recorded;
// backward() replays the recording in reverse, accumulating gradients.
// Node values are immutable once recorded and a tape is single-threaded.
// Gradients are allocated lazily, so subgraphs that do not reach the
// backward target cost nothing.
template <class T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, int)>;

  int input(Arr<T> v) { return push(std::move(v), nullptr); }

  int size() const { return static_cast<int>(nodes_.size()); }

  const Arr<T>& val(int id) const { return nodes_.at(id).value; }

  // Gradient of the last backward() target w.r.t. node `id` (zeros if the
  // node does not influence the target).
  Arr<T> grad(int id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.numel() == 0) return Arr<T>::zeros(n.value.shape);
    return n.grad;
  }

  bool grad_nonzero(int id) const {
    const Node& n = nodes_.at(id);
    for (T v : n.grad.data)
      if (v != T(0)) return true;
    return false;
  }

  // Extension point for ops defined outside this header. `back` receives the
  // tape and the new node's id; it reads out_grad(id) and accumulates into
  // grad_buf(parent).
  int custom(Arr<T> value, BackFn back) { return push(std::move(value), std::move(back)); }

  const Arr<T>& out_grad(int id) const { return nodes_[id].grad; }

  Arr<T>& grad_buf(int id) {
    Node& n = nodes_[id];
    if (n.grad.numel() == 0) n.grad = Arr<T>::zeros(n.value.shape);
    return n.grad;
  }

  void backward(int target) {
    if (nodes_.at(target).value.numel() != 1)
      throw std::invalid_argument("backward: target must be scalar");
    for (Node& n : nodes_) n.grad = Arr<T>();
    grad_buf(target).data[0] = T(1);
    for (int id = target; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.back && n.grad.numel() != 0) n.back(*this, id);
    }
  }

  // ---- primitives ----

  int matmul(int a, int b) {
    const Arr<T>& A = val(a);
    const Arr<T>& B = val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
      throw std::invalid_argument("matmul: shape mismatch");
    const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
    Arr<T> C({m, n});
    detail::mm_nn_acc(A.data.data(), B.data.data(), C.data.data(), m, k, n);
    return push(std::move(C), [a, b, m, k, n](Tape& tp, int self) {
      const Arr<T>& G = tp.out_grad(self);
      detail::mm_nt_acc(G.data.data(), tp.val(b).data.data(), tp.grad_buf(a).data.data(), m, n, k);
      detail::mm_tn_acc(tp.val(a).data.data(), G.data.data(), tp.grad_buf(b).data.data(), m, k, n);
    });
  }

  // C = A * B^T, with A (m,k) and B (n,k).
  int matmul_nt(int a, int b) {
    const Arr<T>& A = val(a);
    const Arr<T>& B = val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[1])
      throw std::invalid_argument("matmul_nt: shape mismatch");
    const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[0];
    Arr<T> C({m, n});
    detail::mm_nt_acc(A.data.data(), B.data.data(), C.data.data(), m, k, n);
    return push(std::move(C), [a, b, m, k, n](Tape& tp, int self) {
      const Arr<T>& G = tp.out_grad(self);
      detail::mm_nn_acc(G.data.data(), tp.val(b).data.data(), tp.grad_buf(a).data.data(), m, n, k);
      detail::mm_tn_acc(G.data.data(), tp.val(a).data.data(), tp.grad_buf(b).data.data(), m, n, k);
    });
  }

  int add(int a, int b) { return binary("add", a, b, [](T x, T y) { return x + y; }, 1, 1); }
  int sub(int a, int b) { return binary("sub", a, b, [](T x, T y) { return x - y; }, 1, -1); }

  int mul(int a, int b) {
    const Arr<T>& A = val(a);
    const Arr<T>& B = val(b);
    if (!same_shape(A, B)) throw std::invalid_argument("mul: shape mismatch");
    Arr<T> C(A.shape);
    for (std::size_t i = 0; i < C.numel(); ++i) C.data[i] = A.data[i] * B.data[i];
    return push(std::move(C), [a, b](Tape& tp, int self) {
      const Arr<T>& G = tp.out_grad(self);
      const Arr<T>& A2 = tp.val(a);
      const Arr<T>& B2 = tp.val(b);
      Arr<T>& ga = tp.grad_buf(a);
      Arr<T>& gb = tp.grad_buf(b);
      for (std::size_t i = 0; i < G.numel(); ++i) {
        ga.data[i] += G.data[i] * B2.data[i];
        gb.data[i] += G.data[i] * A2.data[i];
      }
    });
  }

  int scale(int a, T s) {
    const Arr<T>& A = val(a);
    Arr<T> C(A.shape);
    for (std::size_t i = 0; i < C.numel(); ++i) C.data[i] = A.data[i] * s;
    return push(std::move(C), [a, s](Tape& tp, int self) {
      const Arr<T>& G = tp.out_grad(self);
      Arr<T>& ga = tp.grad_buf(a);
      for (std::size_t i = 0; i < G.numel(); ++i) ga.data[i] += G.data[i] * s;
    });
  }

  // Repeat a (1,C) or (C,) vector as n rows.
  int broadcast_rows(int v, std::size_t n) {
    const Arr<T>& Vv = val(v);
    if (Vv.rank() > 2 || (Vv.rank() == 2 && Vv.shape[0] != 1))
      throw std::invalid_argument("broadcast_rows: expects a single row");
    const std::size_t c = Vv.numel();
    Arr<T> C({n, c});
    for (std::size_t r = 0; r < n; ++r)
      std::copy(Vv.data.begin(), Vv.data.end(), C.data.begin() + r * c);
    return push(std::move(C), [v, n, c](Tape& tp, int self) {
      const Arr<T>& G = tp.out_grad(self);
      Arr<T>& gv = tp.grad_buf(v);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) gv.data[j] += G.data[r * c + j];
    });
  }

  // Scale row i of x (m,C) by v[i], where v has m elements.
  int mul_colvec(int x, int v) {
    const Arr<T>& X = val(x);
    const Arr<T>& Vv = val(v);
    if (X.rank() != 2 || Vv.numel() != X.shape[0])
      throw std::invalid_argument("mul_colvec: shape mismatch");
    const std::size_t m = X.shape[0], c = X.shape[1];
    Arr<T> C({m, c});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) C.data[i * c + j] = X.data[i * c + j] * Vv.data[i];
    return push(std::move(C), [x, v, m, c](Tape& tp, int self) {
      const Arr<T>& G = tp.out_grad(self);
      const Arr<T>& X2 = tp.val(x);
      const Arr<T>& V2 = tp.val(v);
      Arr<T>& gx = tp.grad_buf(x);
      Arr<T>& gv = tp.grad_buf(v);
      for (std::size_t i = 0; i < m; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < c; ++j) {
          gx.data[i * c + j] += G.data[i * c + j] * V2.data[i];
          acc += G.data[i * c + j] * X2.data[i * c + j];
        }
        gv.data[i] += acc;
      }
    });
  }

  // Row-wise softmax of a 2-D array, shifted by the row max for stability.
  int softmax(int x) {
    const Arr<T>& X = val(x);
    if (X.rank() != 2) throw std::invalid_argument("softmax: expects 2-D");
    const std::size_t m = X.shape[0], c = X.shape[1];
    Arr<T> Y({m, c});
    for (std::size_t i = 0; i < m; ++i) {
      const T* row = X.data.data() + i * c;
      T mx = row[0];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      T sum = 0;
      for (std::size_t j = 0; j < c; ++j) {
        const T e = std::exp(row[j] - mx);
        Y.data[i * c + j] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (std::size_t j = 0; j < c; ++j) Y.data[i * c + j] *= inv;
    }
    return push(std::move(Y), [x, m, c](Tape& tp, int self) {
      const Arr<T>& G = tp.out_grad(self);
      const Arr<T>& Y2 = tp.val(self);
      Arr<T>& gx = tp.grad_buf(x);
      for (std::size_t i = 0; i < m; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += G.data[i * c + j] * Y2.data[i * c + j];
        for (std::size_t j = 0; j < c; ++j)
          gx.data[i * c + j] += Y2.data[i * c + j] * (G.data[i * c + j] - dot);
      }
    });
  }

  // Row-wise layer norm (no affine part; scale/shift are separate ops).
  int layer_norm(int x, T eps = T(1e-5)) {
    const Arr<T>& X = val(x);
    if (X.rank() != 2) throw std::invalid_argument("layer_norm: expects 2-D");
    const std::size_t m = X.shape[0], c = X.shape[1];
    Arr<T> Y({m, c});
    std::vector<T> inv(m);
    for (std::size_t i = 0; i < m; ++i) {
      const T* row = X.data.data() + i * c;
      T mu = 0;
      for (std::size_t j = 0; j < c; ++j) mu += row[j];
      mu /= T(c);
      T var = 0;
      for (std::size_t j = 0; j < c; ++j) {
        const T d = row[j] - mu;
        var += d * d;
      }
      var /= T(c);
      inv[i] = T(1) / std::sqrt(var + eps);
      for (std::size_t j = 0; j < c; ++j) Y.data[i * c + j] = (row[j] - mu) * inv[i];
    }
    return push(std::move(Y), [x, m, c, inv = std::move(inv)](Tape& tp, int self) {
      const Arr<T>& G = tp.out_grad(self);
      const Arr<T>& Y2 = tp.val(self);
      Arr<T>& gx = tp.grad_buf(x);
      for (std::size_t i = 0; i < m; ++i) {
        T gmean = 0, gymean = 0;
        for (std::size_t j = 0; j < c; ++j) {
          gmean += G.data[i * c + j];
          gymean += G.data[i * c + j] * Y2.data[i * c + j];
        }
        gmean /= T(c);
        gymean /= T(c);
        for (std::size_t j = 0; j < c; ++j)
          gx.data[i * c + j] +=
              inv[i] * (G.data[i * c + j] - gmean - Y2.data[i * c + j] * gymean);
      }
    });
  }

  int gelu(int x) {
    const Arr<T>& X = val(x);
    Arr<T> Y(X.shape);
    for (std::size_t i = 0; i < Y.numel(); ++i)
      Y.data[i] = static_cast<T>(detail::gelu_fwd(static_cast<double>(X.data[i])));
    return push(std::move(Y), [x](Tape& tp, int self) {
      const Arr<T>& G = tp.out_grad(self);
      const Arr<T>& X2 = tp.val(x);
      Arr<T>& gx = tp.grad_buf(x);
      for (std::size_t i = 0; i < G.numel(); ++i)
        gx.data[i] += G.data[i] * static_cast<T>(detail::gelu_bwd(static_cast<double>(X2.data[i])));
    });
  }

  int reshape(int x, std::vector<std::size_t> s) {
    const Arr<T>& X = val(x);
    if (Arr<T>::count(s) != X.numel()) throw std::invalid_argument("reshape: element count mismatch");
    Arr<T> Y(std::move(s), X.data);
    return push(std::move(Y), [x](Tape& tp, int self) {
      const Arr<T>& G = tp.out_grad(self);
      Arr<T>& gx = tp.grad_buf(x);
      for (std::size_t i = 0; i < G.numel(); ++i) gx.data[i] += G.data[i];
    });
  }

  int gather_rows(int x, std::vector<std::size_t> idx) {
    const Arr<T>& X = val(x);
    if (X.rank() != 2) throw std::invalid_argument("gather_rows: expects 2-D");
    const std::size_t m = X.shape[0], c = X.shape[1];
    for (std::size_t r : idx)
      if (r >= m) throw std::invalid_argument("gather_rows: index out of range");
    Arr<T> Y({idx.size(), c});
    for (std::size_t r = 0; r < idx.size(); ++r)
      std::copy(X.data.begin() + idx[r] * c, X.data.begin() + (idx[r] + 1) * c,
                Y.data.begin() + r * c);
    return push(std::move(Y), [x, c, idx = std::move(idx)](Tape& tp, int self) {
      const Arr<T>& G = tp.out_grad(self);
      Arr<T>& gx = tp.grad_buf(x);
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < c; ++j) gx.data[idx[r] * c + j] += G.data[r * c + j];
    });
  }

  // Rows of x (m,C) land at idx[r] in an (n_rows,C) output; duplicate
  // destinations accumulate.
  int scatter_rows_add(int x, std::vector<std::size_t> idx, std::size_t n_rows) {
    const Arr<T>& X = val(x);
    if (X.rank() != 2 || idx.size() != X.shape[0])
      throw std::invalid_argument("scatter_rows_add: shape mismatch");
    const std::size_t c = X.shape[1];
    for (std::size_t r : idx)
      if (r >= n_rows) throw std::invalid_argument("scatter_rows_add: index out of range");
    Arr<T> Y({n_rows, c});
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < c; ++j) Y.data[idx[r] * c + j] += X.data[r * c + j];
    return push(std::move(Y), [x, c, idx = std::move(idx)](Tape& tp, int self) {
      const Arr<T>& G = tp.out_grad(self);
      Arr<T>& gx = tp.grad_buf(x);
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < c; ++j) gx.data[r * c + j] += G.data[idx[r] * c + j];
    });
  }

  int slice_cols(int x, std::size_t start, std::size_t len) {
    const Arr<T>& X = val(x);
    if (X.rank() != 2 || start + len > X.shape[1])
      throw std::invalid_argument("slice_cols: range out of bounds");
    const std::size_t m = X.shape[0], c = X.shape[1];
    Arr<T> Y({m, len});
    for (std::size_t i = 0; i < m; ++i)
      std::copy(X.data.begin() + i * c + start, X.data.begin() + i * c + start + len,
                Y.data.begin() + i * len);
    return push(std::move(Y), [x, start, len, m, c](Tape& tp, int self) {
      const Arr<T>& G = tp.out_grad(self);
      Arr<T>& gx = tp.grad_buf(x);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < len; ++j) gx.data[i * c + start + j] += G.data[i * len + j];
    });
  }

  int concat_cols(const std::vector<int>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const std::size_t m = val(xs[0]).shape[0];
    std::size_t total = 0;
    for (int x : xs) {
      const Arr<T>& X = val(x);
      if (X.rank() != 2 || X.shape[0] != m) throw std::invalid_argument("concat_cols: shape mismatch");
      total += X.shape[1];
    }
    Arr<T> Y({m, total});
    std::size_t off = 0;
    for (int x : xs) {
      const Arr<T>& X = val(x);
      const std::size_t c = X.shape[1];
      for (std::size_t i = 0; i < m; ++i)
        std::copy(X.data.begin() + i * c, X.data.begin() + (i + 1) * c,
                  Y.data.begin() + i * total + off);
      off += c;
    }
    return push(std::move(Y), [xs, m, total](Tape& tp, int self) {
      const Arr<T>& G = tp.out_grad(self);
      std::size_t off2 = 0;
      for (int x : xs) {
        const std::size_t c = tp.val(x).shape[1];
        Arr<T>& gx = tp.grad_buf(x);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j) gx.data[i * c + j] += G.data[i * total + off2 + j];
        off2 += c;
      }
    });
  }

  int mean_all(int x) {
    const Arr<T>& X = val(x);
    if (X.numel() == 0) throw std::invalid_argument("mean_all: empty input");
    T acc = 0;
    for (T v : X.data) acc += v;
    const std::size_t n = X.numel();
    return push(Arr<T>::scalar(acc / T(n)), [x, n](Tape& tp, int self) {
      const T g = tp.out_grad(self).data[0] / T(n);
      Arr<T>& gx = tp.grad_buf(x);
      for (std::size_t i = 0; i < gx.numel(); ++i) gx.data[i] += g;
    });
  }

  int sum_sq(int x) {
    const Arr<T>& X = val(x);
    T acc = 0;
    for (T v : X.data) acc += v * v;
    return push(Arr<T>::scalar(acc), [x](Tape& tp, int self) {
      const T g = tp.out_grad(self).data[0];
      const Arr<T>& X2 = tp.val(x);
      Arr<T>& gx = tp.grad_buf(x);
      for (std::size_t i = 0; i < gx.numel(); ++i) gx.data[i] += T(2) * g * X2.data[i];
    });
  }

 private:
  struct Node {
    Arr<T> value;
    Arr<T> grad;
    BackFn back;
  };

  int push(Arr<T> value, BackFn back) {
    nodes_.push_back(Node{std::move(value), Arr<T>(), std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  template <class F>
  int binary(const char* name, int a, int b, F&& f, T wa, T wb) {
    const Arr<T>& A = val(a);
    const Arr<T>& B = val(b);
    if (!same_shape(A, B)) throw std::invalid_argument(std::string(name) + ": shape mismatch");
    Arr<T> C(A.shape);
    for (std::size_t i = 0; i < C.numel(); ++i) C.data[i] = f(A.data[i], B.data[i]);
    return push(std::move(C), [a, b, wa, wb](Tape& tp, int self) {
      const Arr<T>& G = tp.out_grad(self);
      Arr<T>& ga = tp.grad_buf(a);
      Arr<T>& gb = tp.grad_buf(b);
      for (std::size_t i = 0; i < G.numel(); ++i) {
        ga.data[i] += wa * G.data[i];
        gb.data[i] += wb * G.data[i];
      }
    });
  }

  std::vector<Node> nodes_;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t coords = 0;
};

// Central-difference check of reverse-mode gradients. `loss_fn` recomputes
// the scalar loss from the current parameter values; `grad_fn` recomputes it
// and returns d(loss)/d(param) flattened, aligned with `params`. Relative
// error uses |a - n| / max(1, |a|, |n|).
inline GradCheckReport grad_check(const std::function<double()>& loss_fn,
                                  const std::function<std::vector<std::vector<double>>()>& grad_fn,
                                  const std::vector<Arr<double>*>& params,
                                  std::size_t coords_per_param = SIZE_MAX, double eps = 1e-5,
                                  Rng rng = Rng(0)) {
  const std::vector<std::vector<double>> analytic = grad_fn();
  if (analytic.size() != params.size())
    throw std::invalid_argument("grad_check: gradient count mismatch");
  GradCheckReport rep;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Arr<double>& a = *params[p];
    if (analytic[p].size() != a.numel())
      throw std::invalid_argument("grad_check: gradient size mismatch");
    std::vector<std::size_t> picks;
    if (a.numel() <= coords_per_param) {
      picks.resize(a.numel());
      for (std::size_t i = 0; i < a.numel(); ++i) picks[i] = i;
    } else {
      picks.resize(coords_per_param);
      for (std::size_t i = 0; i < coords_per_param; ++i) picks[i] = rng.next_below(a.numel());
    }
    for (std::size_t c : picks) {
      const double keep = a.data[c];
      a.data[c] = keep + eps;
      const double f1 = loss_fn();
      a.data[c] = keep - eps;
      const double f0 = loss_fn();
      a.data[c] = keep;
      const double num = (f1 - f0) / (2.0 * eps);
      const double ana = analytic[p][c];
      const double err = std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
      rep.max_rel_err = std::max(rep.max_rel_err, err);
      ++rep.coords;
    }
  }
  return rep;
}

}  // namespace fd3d
