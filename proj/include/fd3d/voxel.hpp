#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fd3d/array.hpp"
#include "fd3d/geometry.hpp"
#include "fd3d/tape.hpp"

namespace fd3d {

// V x V x V grid of xyz features plus per-cell occupancy counts. Cell (i,j,k)
// covers [-1 + 2i/V, -1 + 2(i+1)/V) per axis; feat holds the mean coordinate
// of the member points and stays exactly zero for empty cells. Layout is
// row-major with k fastest, channels innermost.
template <class T>
struct VoxelGrid {
  std::size_t V = 0;
  std::vector<T> feat;             // V^3 * 3
  std::vector<std::uint32_t> count;  // V^3

  std::size_t cells() const { return V * V * V; }
};

inline void check_voxel_res(std::size_t V) {
  if (V < 2 || (V & (V - 1)) != 0)
    throw std::invalid_argument("voxel resolution must be a power of two >= 2");
}

// Per-axis cell index. Coordinates are clamped to [-1, 1) before bucketing,
// so x = 1 maps into the last cell.
inline std::size_t voxel_axis_index(float x, std::size_t V) {
  const float hi = std::nextafterf(1.0f, 0.0f);
  const float xc = std::min(std::max(x, -1.0f), hi);
  const auto idx = static_cast<std::size_t>((xc + 1.0f) * 0.5f * static_cast<float>(V));
  return idx >= V ? V - 1 : idx;
}

inline std::size_t voxel_cell_index(const std::array<float, 3>& p, std::size_t V) {
  const std::size_t i = voxel_axis_index(p[0], V);
  const std::size_t j = voxel_axis_index(p[1], V);
  const std::size_t k = voxel_axis_index(p[2], V);
  return (i * V + j) * V + k;
}

template <class T>
VoxelGrid<T> voxelize(const PointCloud& cloud, std::size_t V) {
  check_voxel_res(V);
  VoxelGrid<T> g;
  g.V = V;
  g.feat.assign(V * V * V * 3, T(0));
  g.count.assign(V * V * V, 0);
  std::vector<double> sum(V * V * V * 3, 0.0);
  for (const auto& p : cloud.points) {
    const std::size_t c = voxel_cell_index(p, V);
    for (int a = 0; a < 3; ++a) sum[c * 3 + a] += p[a];
    ++g.count[c];
  }
  for (std::size_t c = 0; c < g.count.size(); ++c) {
    if (g.count[c] == 0) continue;
    for (int a = 0; a < 3; ++a)
      g.feat[c * 3 + a] = static_cast<T>(sum[c * 3 + a] / g.count[c]);
  }
  return g;
}

// The 8 cells and weights of trilinear interpolation at q. Cell centers sit
// at -1 + 2(i + 0.5)/V; queries outside the center lattice clamp to it.
template <class U>
inline void trilinear_corners(std::size_t V, const std::array<float, 3>& q,
                              std::array<std::size_t, 8>& cells, std::array<U, 8>& w) {
  std::size_t i0[3], i1[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    double u = (static_cast<double>(q[a]) + 1.0) * 0.5 * static_cast<double>(V) - 0.5;
    u = std::min(std::max(u, 0.0), static_cast<double>(V - 1));
    const double fl = std::floor(u);
    i0[a] = static_cast<std::size_t>(fl);
    i1[a] = std::min(i0[a] + 1, V - 1);
    f[a] = u - fl;
  }
  int idx = 0;
  for (int di = 0; di < 2; ++di)
    for (int dj = 0; dj < 2; ++dj)
      for (int dk = 0; dk < 2; ++dk) {
        const std::size_t ci = di ? i1[0] : i0[0];
        const std::size_t cj = dj ? i1[1] : i0[1];
        const std::size_t ck = dk ? i1[2] : i0[2];
        cells[idx] = (ci * V + cj) * V + ck;
        const double wx = di ? f[0] : 1.0 - f[0];
        const double wy = dj ? f[1] : 1.0 - f[1];
        const double wz = dk ? f[2] : 1.0 - f[2];
        w[idx] = static_cast<U>(wx * wy * wz);
        ++idx;
      }
}

// Trilinear read-back of grid features at arbitrary query points.
template <class T>
std::vector<std::array<T, 3>> devoxelize(const VoxelGrid<T>& g,
                                         const std::vector<std::array<float, 3>>& queries) {
  std::vector<std::array<T, 3>> out(queries.size());
  std::array<std::size_t, 8> cells;
  std::array<double, 8> w;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    trilinear_corners(g.V, queries[q], cells, w);
    double acc[3] = {0.0, 0.0, 0.0};
    for (int c = 0; c < 8; ++c)
      for (int a = 0; a < 3; ++a) acc[a] += w[c] * static_cast<double>(g.feat[cells[c] * 3 + a]);
    for (int a = 0; a < 3; ++a) out[q][a] = static_cast<T>(acc[a]);
  }
  return out;
}

// Differentiable devoxelization: node `feat` has shape (V^3, 3); the result
// has shape (n_queries, 3). Linear in the features, so the backward pass is
// the transposed scatter of the same weights.
template <class T>
int tape_devox(Tape<T>& tp, int feat, std::vector<std::array<float, 3>> queries, std::size_t V) {
  const Arr<T>& F = tp.val(feat);
  if (F.rank() != 2 || F.shape[0] != V * V * V || F.shape[1] != 3)
    throw std::invalid_argument("tape_devox: feature shape mismatch");
  Arr<T> out({queries.size(), 3});
  std::array<std::size_t, 8> cells;
  std::array<T, 8> w;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    trilinear_corners(V, queries[q], cells, w);
    for (int c = 0; c < 8; ++c)
      for (int a = 0; a < 3; ++a) out.data[q * 3 + a] += w[c] * F.data[cells[c] * 3 + a];
  }
  return tp.custom(std::move(out), [feat, V, queries = std::move(queries)](Tape<T>& t, int self) {
    const Arr<T>& G = t.out_grad(self);
    Arr<T>& gf = t.grad_buf(feat);
    std::array<std::size_t, 8> cs;
    std::array<T, 8> ws;
    for (std::size_t q = 0; q < queries.size(); ++q) {
      trilinear_corners(V, queries[q], cs, ws);
      for (int c = 0; c < 8; ++c)
        for (int a = 0; a < 3; ++a) gf.data[cs[c] * 3 + a] += ws[c] * G.data[q * 3 + a];
    }
  });
}

// Patch decomposition of a V^3 grid into L = (V/p)^3 tokens of 3*p^3
// channels. Token order is lexicographic over patch coords (i,j,k) with k
// fastest; within a token, member cells are lexicographic over their local
// offset, xyz channels innermost.
struct PatchLayout {
  std::size_t V = 0, p = 0, G = 0, L = 0;
  std::vector<std::size_t> slot_to_cell;  // token-major slot -> grid cell
  std::vector<std::size_t> cell_to_slot;  // inverse permutation
  std::vector<std::array<std::size_t, 3>> origins;  // per-token patch coords
};

inline PatchLayout make_patch_layout(std::size_t V, std::size_t p) {
  check_voxel_res(V);
  if (p == 0 || V % p != 0) throw std::invalid_argument("patch size must divide voxel resolution");
  PatchLayout lay;
  lay.V = V;
  lay.p = p;
  lay.G = V / p;
  lay.L = lay.G * lay.G * lay.G;
  const std::size_t p3 = p * p * p;
  lay.slot_to_cell.resize(V * V * V);
  lay.cell_to_slot.resize(V * V * V);
  lay.origins.resize(lay.L);
  for (std::size_t ti = 0; ti < lay.G; ++ti)
    for (std::size_t tj = 0; tj < lay.G; ++tj)
      for (std::size_t tk = 0; tk < lay.G; ++tk) {
        const std::size_t t = (ti * lay.G + tj) * lay.G + tk;
        lay.origins[t] = {ti, tj, tk};
        for (std::size_t di = 0; di < p; ++di)
          for (std::size_t dj = 0; dj < p; ++dj)
            for (std::size_t dk = 0; dk < p; ++dk) {
              const std::size_t e = (di * p + dj) * p + dk;
              const std::size_t cell =
                  ((ti * p + di) * V + (tj * p + dj)) * V + (tk * p + dk);
              lay.slot_to_cell[t * p3 + e] = cell;
              lay.cell_to_slot[cell] = t * p3 + e;
            }
      }
  return lay;
}

template <class T>
Arr<T> patchify(const VoxelGrid<T>& g, const PatchLayout& lay) {
  if (g.V != lay.V) throw std::invalid_argument("patchify: grid/layout mismatch");
  const std::size_t p3 = lay.p * lay.p * lay.p;
  Arr<T> tokens({lay.L, 3 * p3});
  for (std::size_t s = 0; s < lay.slot_to_cell.size(); ++s) {
    const std::size_t cell = lay.slot_to_cell[s];
    for (int a = 0; a < 3; ++a) tokens.data[s * 3 + a] = g.feat[cell * 3 + a];
  }
  return tokens;
}

// Inverse of patchify; returns the flat (V^3 * 3) feature array.
template <class T>
std::vector<T> unpatchify(const Arr<T>& tokens, const PatchLayout& lay) {
  const std::size_t p3 = lay.p * lay.p * lay.p;
  if (tokens.rank() != 2 || tokens.shape[0] != lay.L || tokens.shape[1] != 3 * p3)
    throw std::invalid_argument("unpatchify: token shape mismatch");
  std::vector<T> feat(lay.V * lay.V * lay.V * 3);
  for (std::size_t cell = 0; cell < lay.cell_to_slot.size(); ++cell) {
    const std::size_t s = lay.cell_to_slot[cell];
    for (int a = 0; a < 3; ++a) feat[cell * 3 + a] = tokens.data[s * 3 + a];
  }
  return feat;
}

// Tape version: (L, 3p^3) tokens -> (V^3, 3) grid rows, as a reshape plus a
// row gather with the inverse slot permutation.
template <class T>
int tape_unpatchify(Tape<T>& tp, int tokens, const PatchLayout& lay) {
  const std::size_t p3 = lay.p * lay.p * lay.p;
  const Arr<T>& X = tp.val(tokens);
  if (X.rank() != 2 || X.shape[0] != lay.L || X.shape[1] != 3 * p3)
    throw std::invalid_argument("tape_unpatchify: token shape mismatch");
  const int rows = tp.reshape(tokens, {lay.L * p3, 3});
  return tp.gather_rows(rows, lay.cell_to_slot);
}

// Raw grid dump: u32 V then V^3*3 float32 features.
template <class T>
void save_grid_dump(const std::string& path, const VoxelGrid<T>& g) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  const std::uint32_t v32 = static_cast<std::uint32_t>(g.V);
  f.write(reinterpret_cast<const char*>(&v32), sizeof v32);
  for (T x : g.feat) {
    const float xf = static_cast<float>(x);
    f.write(reinterpret_cast<const char*>(&xf), sizeof xf);
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

}  // namespace fd3d
