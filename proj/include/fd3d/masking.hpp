#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fd3d/array.hpp"
#include "fd3d/geometry.hpp"
#include "fd3d/rng.hpp"
#include "fd3d/voxel.hpp"

namespace fd3d {

// Foreground/background split of the L patches of a grid: a patch is
// foreground iff any of its cells holds at least one point.
struct PatchLabels {
  std::vector<std::uint8_t> fg;
  std::size_t L_f = 0, L_b = 0;

  std::size_t L() const { return fg.size(); }
};

template <class T>
PatchLabels classify_patches(const VoxelGrid<T>& g, std::size_t p) {
  const PatchLayout lay = make_patch_layout(g.V, p);
  const std::size_t p3 = p * p * p;
  PatchLabels lab;
  lab.fg.assign(lay.L, 0);
  for (std::size_t t = 0; t < lay.L; ++t) {
    for (std::size_t e = 0; e < p3; ++e) {
      if (g.count[lay.slot_to_cell[t * p3 + e]] > 0) {
        lab.fg[t] = 1;
        break;
      }
    }
    if (lab.fg[t]) ++lab.L_f;
  }
  lab.L_b = lay.L - lab.L_f;
  return lab;
}

// Per-token mask; true = masked (dropped from the encoder).
struct MaskVector {
  std::vector<std::uint8_t> m;
  double r_f = 0.0, r_b = 0.0;
  std::size_t L_u = 0;

  std::size_t L() const { return m.size(); }
};

// floor(ratio * group), nudged so ratios with short decimal expansions hit
// their exact multiple (0.99 * 500 must count 495, not 494). Any decimal
// ratio with at most six fractional digits is safe under the 1e-9 nudge.
inline std::size_t masked_count(double ratio, std::size_t group) {
  if (ratio < 0.0 || ratio > 1.0) throw std::invalid_argument("mask ratio out of [0, 1]");
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(group) + 1e-9));
}

namespace detail {

// Mask `cnt` members of `pool` uniformly without replacement.
inline void mask_subset(std::vector<std::uint8_t>& m, std::vector<std::size_t>& pool,
                        std::size_t cnt, Rng& rng) {
  for (std::size_t i = 0; i < cnt; ++i) {
    const std::size_t j = i + rng.next_below(pool.size() - i);
    std::swap(pool[i], pool[j]);
    m[pool[i]] = 1;
  }
}

}  // namespace detail

// Foreground/background-aware masking: floor(r_f * L_f) foreground patches
// and floor(r_b * L_b) background patches are masked, each partition sampled
// independently, so L_u = L - floor(r_f*L_f) - floor(r_b*L_b) exactly.
inline MaskVector build_mask(const PatchLabels& lab, double r_f, double r_b, std::uint64_t seed) {
  MaskVector mv;
  mv.m.assign(lab.L(), 0);
  mv.r_f = r_f;
  mv.r_b = r_b;
  std::vector<std::size_t> fg_idx, bg_idx;
  for (std::size_t t = 0; t < lab.L(); ++t) (lab.fg[t] ? fg_idx : bg_idx).push_back(t);
  const std::size_t n_fg = masked_count(r_f, fg_idx.size());
  const std::size_t n_bg = masked_count(r_b, bg_idx.size());
  Rng rng(seed);
  detail::mask_subset(mv.m, fg_idx, n_fg, rng);
  detail::mask_subset(mv.m, bg_idx, n_bg, rng);
  mv.L_u = lab.L() - n_fg - n_bg;
  return mv;
}

// Label-blind masking at a single ratio.
inline MaskVector random_mask(std::size_t L, double r, std::uint64_t seed) {
  MaskVector mv;
  mv.m.assign(L, 0);
  mv.r_f = r;
  mv.r_b = r;
  std::vector<std::size_t> pool(L);
  for (std::size_t i = 0; i < L; ++i) pool[i] = i;
  const std::size_t cnt = masked_count(r, L);
  Rng rng(seed);
  detail::mask_subset(mv.m, pool, cnt, rng);
  mv.L_u = L - cnt;
  return mv;
}

inline std::vector<std::size_t> unmasked_indices(const MaskVector& mv) {
  std::vector<std::size_t> idx;
  idx.reserve(mv.L_u);
  for (std::size_t t = 0; t < mv.L(); ++t)
    if (!mv.m[t]) idx.push_back(t);
  return idx;
}

inline std::vector<std::size_t> masked_indices(const MaskVector& mv) {
  std::vector<std::size_t> idx;
  for (std::size_t t = 0; t < mv.L(); ++t)
    if (mv.m[t]) idx.push_back(t);
  return idx;
}

// Keep the unmasked token rows, in original order, with the index map back
// into the full sequence.
template <class T>
std::pair<Arr<T>, std::vector<std::size_t>> select_unmasked(const Arr<T>& tokens,
                                                            const MaskVector& mv) {
  if (tokens.rank() != 2 || tokens.shape[0] != mv.L())
    throw std::invalid_argument("select_unmasked: token/mask length mismatch");
  const std::vector<std::size_t> idx = unmasked_indices(mv);
  Arr<T> out({idx.size(), tokens.shape[1]});
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t j = 0; j < tokens.shape[1]; ++j) out(r, j) = tokens(idx[r], j);
  return {std::move(out), idx};
}

// Lift a patch mask to points: a point is masked iff the patch containing
// its voxel cell is masked. Uses the same clamped bucketing as voxelize.
inline std::vector<std::uint8_t> point_patch_mask(const PointCloud& cloud, std::size_t V,
                                                  std::size_t p, const MaskVector& mv) {
  const std::size_t G = V / p;
  if (mv.L() != G * G * G) throw std::invalid_argument("point_patch_mask: mask length mismatch");
  std::vector<std::uint8_t> out(cloud.n(), 0);
  for (std::size_t i = 0; i < cloud.n(); ++i) {
    const std::size_t ci = voxel_axis_index(cloud.points[i][0], V) / p;
    const std::size_t cj = voxel_axis_index(cloud.points[i][1], V) / p;
    const std::size_t ck = voxel_axis_index(cloud.points[i][2], V) / p;
    out[i] = mv.m[(ci * G + cj) * G + ck];
  }
  return out;
}

// Occupancy statistics in the style of a dataset summary table: per class,
// the mean percentage of occupied (foreground) patches.
struct OccupancyRow {
  int label = -1;  // -1 = all classes
  std::string name;
  std::size_t clouds = 0;
  double occupied_pct = 0.0;
  double non_occupied_pct = 0.0;
};

struct OccupancyStats {
  std::vector<OccupancyRow> per_class;
  OccupancyRow overall;
};

OccupancyStats occupancy_stats(const Dataset& ds, std::size_t V, std::size_t p,
                               const std::vector<std::string>& class_names = {});

}  // namespace fd3d
