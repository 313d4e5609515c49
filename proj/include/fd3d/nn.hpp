#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fd3d/array.hpp"
#include "fd3d/rng.hpp"
#include "fd3d/tape.hpp"

namespace fd3d {

// Named parameter set with stable (creation-order) iteration. Biases are
// stored as (1, C) rows so they can be broadcast directly.
template <class T>
class ParamStore {
 public:
  Arr<T>& create(const std::string& name, std::vector<std::size_t> shape) {
    if (map_.count(name)) throw std::logic_error("duplicate parameter: " + name);
    names_.push_back(name);
    auto [it, ok] = map_.emplace(name, Arr<T>(std::move(shape)));
    (void)ok;
    return it->second;
  }

  Arr<T>& at(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  const Arr<T>& at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return map_.count(name) != 0; }
  const std::vector<std::string>& names() const { return names_; }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& name : names_) n += at(name).numel();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, Arr<T>> map_;
};

// Truncated normal init: resample anything beyond two standard deviations.
template <class T>
void init_trunc_normal(Arr<T>& a, double sigma, Rng& rng) {
  for (T& v : a.data) {
    double z;
    do {
      z = rng.next_gaussian();
    } while (std::abs(z) > 2.0);
    v = static_cast<T>(z * sigma);
  }
}

// Leaf ids of every parameter on a tape, preserving store order.
struct NodeMap {
  std::vector<std::pair<std::string, int>> order;
  std::unordered_map<std::string, int> ids;

  int at(const std::string& name) const {
    auto it = ids.find(name);
    if (it == ids.end()) throw std::out_of_range("unbound parameter: " + name);
    return it->second;
  }
};

template <class T>
NodeMap bind_params(Tape<T>& tp, const ParamStore<T>& store) {
  NodeMap nm;
  for (const std::string& name : store.names()) {
    const int id = tp.input(store.at(name));
    nm.order.emplace_back(name, id);
    nm.ids.emplace(name, id);
  }
  return nm;
}

// Sinusoidal 3-D positional embedding over patch lattice coordinates. D must
// be divisible by 6: each axis gets D/6 sine and D/6 cosine channels with
// geometric frequencies.
template <class T>
Arr<T> pos_embed_3d(const std::vector<std::array<std::size_t, 3>>& origins, std::size_t D) {
  if (D == 0 || D % 6 != 0)
    throw std::invalid_argument("positional embedding width must be divisible by 6");
  const std::size_t per_axis = D / 3;
  const std::size_t half = per_axis / 2;
  Arr<T> out({origins.size(), D});
  for (std::size_t t = 0; t < origins.size(); ++t)
    for (int axis = 0; axis < 3; ++axis) {
      const double coord = static_cast<double>(origins[t][axis]);
      for (std::size_t j = 0; j < half; ++j) {
        const double freq =
            std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
        out.data[t * D + axis * per_axis + j] = static_cast<T>(std::sin(coord * freq));
        out.data[t * D + axis * per_axis + half + j] = static_cast<T>(std::cos(coord * freq));
      }
    }
  return out;
}

// Sinusoidal timestep embedding, one row of width D (D even).
template <class T>
Arr<T> timestep_sin_embed(std::size_t t, std::size_t D) {
  if (D == 0 || D % 2 != 0) throw std::invalid_argument("timestep embedding width must be even");
  const std::size_t half = D / 2;
  Arr<T> out({std::size_t(1), D});
  for (std::size_t j = 0; j < half; ++j) {
    const double freq =
        std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
    out.data[j] = static_cast<T>(std::sin(static_cast<double>(t) * freq));
    out.data[half + j] = static_cast<T>(std::cos(static_cast<double>(t) * freq));
  }
  return out;
}

struct AttnNodes {
  int wq = -1, bq = -1, wk = -1, bk = -1, wv = -1, bv = -1, wo = -1, bo = -1;
};

template <class T>
int linear_rows(Tape<T>& tp, int x, int w, int b) {
  return tp.add(tp.matmul(x, w), tp.broadcast_rows(b, tp.val(x).shape[0]));
}

// Multi-head self-attention over all rows of x: per head,
// softmax(Q K^T / sqrt(D_h)) V, heads concatenated then projected.
template <class T>
int mha_global(Tape<T>& tp, int x, const AttnNodes& an, std::size_t heads) {
  const std::size_t n = tp.val(x).shape[0];
  const std::size_t d = tp.val(x).shape[1];
  if (heads == 0 || d % heads != 0)
    throw std::invalid_argument("attention: head count must divide width");
  const std::size_t dh = d / heads;
  const int q = linear_rows(tp, x, an.wq, an.bq);
  const int k = linear_rows(tp, x, an.wk, an.bk);
  const int v = linear_rows(tp, x, an.wv, an.bv);
  std::vector<int> head_outs;
  head_outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const int qh = tp.slice_cols(q, h * dh, dh);
    const int kh = tp.slice_cols(k, h * dh, dh);
    const int vh = tp.slice_cols(v, h * dh, dh);
    const int scores =
        tp.scale(tp.matmul_nt(qh, kh), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    const int attn = tp.softmax(scores);
    head_outs.push_back(tp.matmul(attn, vh));
  }
  const int cat = heads == 1 ? head_outs[0] : tp.concat_cols(head_outs);
  (void)n;
  return linear_rows(tp, cat, an.wo, an.bo);
}

struct FfnNodes {
  int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
};

template <class T>
int ffn(Tape<T>& tp, int x, const FfnNodes& fn) {
  return linear_rows(tp, tp.gelu(linear_rows(tp, x, fn.w1, fn.b1)), fn.w2, fn.b2);
}

struct MoeNodes {
  int rw = -1, rb = -1;
  std::vector<FfnNodes> experts;
};

// Mixture-of-experts FFN. Gates are softmax(router(x)); each token keeps its
// top-k gates as-is (no renormalization) and the output is the gate-weighted
// sum of the selected expert MLPs. Ties break toward the lower expert index.
// Unselected experts never enter the graph, so perturbing their parameters
// cannot change the output.
template <class T>
int moe_ffn(Tape<T>& tp, int x, const MoeNodes& mn, std::size_t k,
            std::vector<std::uint32_t>* selection_counts = nullptr) {
  const std::size_t n_tok = tp.val(x).shape[0];
  const std::size_t n_exp = mn.experts.size();
  if (k == 0 || k > n_exp) throw std::invalid_argument("moe: k must be in [1, n_experts]");
  const int probs = tp.softmax(linear_rows(tp, x, mn.rw, mn.rb));
  const Arr<T>& P = tp.val(probs);

  if (selection_counts) selection_counts->assign(n_exp, 0);
  std::vector<std::vector<std::size_t>> routed(n_exp);
  std::vector<std::size_t> ord(n_exp);
  for (std::size_t t = 0; t < n_tok; ++t) {
    std::iota(ord.begin(), ord.end(), std::size_t(0));
    std::partial_sort(ord.begin(), ord.begin() + k, ord.end(), [&](std::size_t a, std::size_t b) {
      const T pa = P.data[t * n_exp + a], pb = P.data[t * n_exp + b];
      return pa > pb || (pa == pb && a < b);
    });
    for (std::size_t j = 0; j < k; ++j) {
      routed[ord[j]].push_back(t);
      if (selection_counts) ++(*selection_counts)[ord[j]];
    }
  }

  int out = -1;
  for (std::size_t e = 0; e < n_exp; ++e) {
    if (routed[e].empty()) continue;
    const int xs = tp.gather_rows(x, routed[e]);
    const int ys = ffn(tp, xs, mn.experts[e]);
    const int gate_col = tp.slice_cols(probs, e, 1);
    const int gates = tp.gather_rows(gate_col, routed[e]);
    const int weighted = tp.mul_colvec(ys, tp.reshape(gates, {routed[e].size()}));
    const int scattered = tp.scatter_rows_add(weighted, routed[e], n_tok);
    out = out < 0 ? scattered : tp.add(out, scattered);
  }
  return out;
}

// Window regrouping for 3-D window attention over a G^3 token lattice:
// perm lists tokens window-major (each run of R^3 entries is one R x R x R
// spatial window), tok2win maps a token to its window row.
struct WindowMaps {
  std::size_t R = 0, windows = 0;
  std::vector<std::size_t> perm, tok2win;
};

inline WindowMaps make_window_maps(std::size_t G, std::size_t R) {
  if (R == 0 || G % R != 0) throw std::invalid_argument("window size must divide token grid");
  WindowMaps wm;
  wm.R = R;
  const std::size_t W = G / R;
  wm.windows = W * W * W;
  const std::size_t L = G * G * G;
  wm.perm.resize(L);
  wm.tok2win.resize(L);
  std::size_t pos = 0;
  for (std::size_t wi = 0; wi < W; ++wi)
    for (std::size_t wj = 0; wj < W; ++wj)
      for (std::size_t wk = 0; wk < W; ++wk) {
        const std::size_t w = (wi * W + wj) * W + wk;
        for (std::size_t ei = 0; ei < R; ++ei)
          for (std::size_t ej = 0; ej < R; ++ej)
            for (std::size_t ek = 0; ek < R; ++ek) {
              const std::size_t t =
                  ((wi * R + ei) * G + (wj * R + ej)) * G + (wk * R + ek);
              wm.perm[pos++] = t;
              wm.tok2win[t] = w;
            }
      }
  return wm;
}

// Pure reshape (L, D) -> (L/R^3, D*R^3). Rows must already be window-major.
template <class T>
int window_fold(Tape<T>& tp, int x, std::size_t R) {
  const Arr<T>& X = tp.val(x);
  const std::size_t r3 = R * R * R;
  if (X.rank() != 2 || X.shape[0] % r3 != 0)
    throw std::invalid_argument("window_fold: rows not divisible by R^3");
  return tp.reshape(x, {X.shape[0] / r3, X.shape[1] * r3});
}

template <class T>
int window_unfold(Tape<T>& tp, int x, std::size_t R) {
  const Arr<T>& X = tp.val(x);
  const std::size_t r3 = R * R * R;
  if (X.rank() != 2 || X.shape[1] % r3 != 0)
    throw std::invalid_argument("window_unfold: cols not divisible by R^3");
  return tp.reshape(x, {X.shape[0] * r3, X.shape[1] / r3});
}

struct BlockNodes {
  AttnNodes attn;
  int mod_w = -1, mod_b = -1;
  bool use_moe = false;
  FfnNodes dense;
  MoeNodes moe;
  int win_w = -1, win_b = -1;  // set only for window-attention blocks
};

// Transformer block with adaptive layer-norm conditioning:
//   y = x + gate .* Sublayer(norm(x) .* (1 + scale) + shift)
// where (shift, scale, gate) for both sublayers come from one linear map of
// the conditioning row. With that map zero-initialized and gate biases at
// one, the block reduces to x + Sublayer(norm(x)).
//
// When `win` is given, the attention sublayer regroups rows window-major,
// folds each R^3 window into one row, projects back to width D, attends over
// the folded rows with a residual at that resolution, and broadcasts the
// result back to every member token on unfold.
template <class T>
int dit_block(Tape<T>& tp, int x, int cond, const BlockNodes& bn, std::size_t heads,
              std::size_t moe_k, const WindowMaps* win = nullptr,
              std::vector<std::uint32_t>* moe_counts = nullptr) {
  const std::size_t n = tp.val(x).shape[0];
  const std::size_t d = tp.val(x).shape[1];
  const int mod = linear_rows(tp, tp.gelu(cond), bn.mod_w, bn.mod_b);
  if (tp.val(mod).shape[1] != 6 * d) throw std::invalid_argument("dit_block: modulation width");
  const int shift1 = tp.slice_cols(mod, 0, d);
  const int scale1 = tp.slice_cols(mod, d, d);
  const int gate1 = tp.slice_cols(mod, 2 * d, d);
  const int shift2 = tp.slice_cols(mod, 3 * d, d);
  const int scale2 = tp.slice_cols(mod, 4 * d, d);
  const int gate2 = tp.slice_cols(mod, 5 * d, d);
  const int one = tp.input(Arr<T>::full({std::size_t(1), d}, T(1)));

  auto modulate = [&](int h, int shift, int scale) {
    const int scaled = tp.mul(h, tp.broadcast_rows(tp.add(one, scale), n));
    return tp.add(scaled, tp.broadcast_rows(shift, n));
  };

  const int h1 = modulate(tp.layer_norm(x), shift1, scale1);
  int attn_out;
  if (win) {
    const int grouped = tp.gather_rows(h1, win->perm);
    const int folded = window_fold(tp, grouped, win->R);
    const int proj = linear_rows(tp, folded, bn.win_w, bn.win_b);
    const int att = mha_global(tp, proj, bn.attn, heads);
    const int res = tp.add(proj, att);
    attn_out = tp.gather_rows(res, win->tok2win);
  } else {
    attn_out = mha_global(tp, h1, bn.attn, heads);
  }
  const int x1 = tp.add(x, tp.mul(attn_out, tp.broadcast_rows(gate1, n)));

  const int h2 = modulate(tp.layer_norm(x1), shift2, scale2);
  const int ffn_out = bn.use_moe ? moe_ffn(tp, h2, bn.moe, moe_k, moe_counts)
                                 : ffn(tp, h2, bn.dense);
  return tp.add(x1, tp.mul(ffn_out, tp.broadcast_rows(gate2, n)));
}

}  // namespace fd3d
