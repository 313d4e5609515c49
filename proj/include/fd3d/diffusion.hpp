#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fd3d/array.hpp"
#include "fd3d/geometry.hpp"
#include "fd3d/rng.hpp"
#include "fd3d/tape.hpp"

namespace fd3d {

// Linear beta schedule. Index t runs 1..T; vectors are stored 0-based, so
// beta[t-1] belongs to step t. sigma_t = sqrt(beta_t) (fixed variance).
struct Schedule {
  std::size_t T = 0;
  std::vector<double> beta, alpha, alpha_bar;
};

inline Schedule make_schedule(std::size_t T, double beta_start = 1e-4, double beta_end = 0.02) {
  if (T < 1) throw std::invalid_argument("schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
    throw std::invalid_argument("schedule: invalid beta range");
  Schedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (std::size_t i = 0; i < T; ++i) {
    s.beta[i] = T == 1 ? beta_start
                       : beta_start + (beta_end - beta_start) * static_cast<double>(i) /
                                          static_cast<double>(T - 1);
    s.alpha[i] = 1.0 - s.beta[i];
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
  }
  return s;
}

// Forward diffusion: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
inline PointCloud q_sample(const PointCloud& x0, std::size_t t, const PointCloud& eps,
                           const Schedule& s) {
  if (t < 1 || t > s.T) throw std::invalid_argument("q_sample: timestep out of range");
  if (x0.n() != eps.n()) throw std::invalid_argument("q_sample: shape mismatch");
  const double a = std::sqrt(s.alpha_bar[t - 1]);
  const double b = std::sqrt(1.0 - s.alpha_bar[t - 1]);
  PointCloud out;
  out.points.resize(x0.n());
  for (std::size_t i = 0; i < x0.n(); ++i)
    for (int ax = 0; ax < 3; ++ax)
      out.points[i][ax] =
          static_cast<float>(a * x0.points[i][ax] + b * eps.points[i][ax]);
  return out;
}

// Dual training objective: mean squared error of the noise prediction over
// unmasked point-coordinates, plus lambda times the same mean over masked
// ones. An empty partition contributes exactly zero.
template <class T>
struct LossNodes {
  int denoise = -1, masked = -1, total = -1;
  double denoise_v = 0.0, masked_v = 0.0, total_v = 0.0;
  std::size_t unmasked_coords = 0, masked_coords = 0;
};

template <class T>
LossNodes<T> dual_loss(Tape<T>& tp, int eps_pred, const PointCloud& eps_target,
                       const std::vector<std::uint8_t>& point_mask, double lambda) {
  const Arr<T>& P = tp.val(eps_pred);
  if (P.rank() != 2 || P.shape[0] != eps_target.n() || P.shape[1] != 3)
    throw std::invalid_argument("dual_loss: prediction shape mismatch");
  if (point_mask.size() != eps_target.n())
    throw std::invalid_argument("dual_loss: mask length mismatch");

  const std::size_t n = eps_target.n();
  Arr<T> target({n, 3});
  Arr<T> w_unmasked({n, 3});
  Arr<T> w_masked({n, 3});
  std::size_t n_masked = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) target.data[i * 3 + a] = static_cast<T>(eps_target.points[i][a]);
    if (point_mask[i]) {
      ++n_masked;
      for (int a = 0; a < 3; ++a) w_masked.data[i * 3 + a] = T(1);
    } else {
      for (int a = 0; a < 3; ++a) w_unmasked.data[i * 3 + a] = T(1);
    }
  }

  LossNodes<T> out;
  out.unmasked_coords = 3 * (n - n_masked);
  out.masked_coords = 3 * n_masked;

  const int diff = tp.sub(eps_pred, tp.input(std::move(target)));
  const int du = tp.mul(diff, tp.input(std::move(w_unmasked)));
  const int dm = tp.mul(diff, tp.input(std::move(w_masked)));
  out.denoise = tp.scale(tp.sum_sq(du),
                         T(1) / static_cast<T>(std::max<std::size_t>(1, out.unmasked_coords)));
  out.masked = tp.scale(tp.sum_sq(dm),
                        T(1) / static_cast<T>(std::max<std::size_t>(1, out.masked_coords)));
  out.total = tp.add(out.denoise, tp.scale(out.masked, static_cast<T>(lambda)));
  out.denoise_v = static_cast<double>(tp.val(out.denoise).data[0]);
  out.masked_v = static_cast<double>(tp.val(out.masked).data[0]);
  out.total_v = static_cast<double>(tp.val(out.total).data[0]);
  return out;
}

// One ancestral DDPM step: x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) eps) /
// sqrt(alpha_t) + sigma_t z, with z = 0 at t = 1. EpsFn is
// PointCloud(const PointCloud& x_t, size_t t, int cls).
template <class EpsFn>
PointCloud p_sample_step(EpsFn&& eps_fn, const Schedule& s, const PointCloud& x_t, std::size_t t,
                         int cls, Rng& rng) {
  if (t < 1 || t > s.T) throw std::invalid_argument("p_sample_step: timestep out of range");
  const PointCloud eps = eps_fn(x_t, t, cls);
  if (eps.n() != x_t.n()) throw std::invalid_argument("p_sample_step: prediction size mismatch");
  for (const auto& p : eps.points)
    for (int a = 0; a < 3; ++a)
      if (!std::isfinite(p[a]))
        throw std::runtime_error("non-finite model output at step " + std::to_string(t));
  const double beta = s.beta[t - 1];
  const double coef = beta / std::sqrt(1.0 - s.alpha_bar[t - 1]);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha[t - 1]);
  const double sigma = std::sqrt(beta);
  PointCloud out;
  out.points.resize(x_t.n());
  for (std::size_t i = 0; i < x_t.n(); ++i)
    for (int a = 0; a < 3; ++a) {
      double v = inv_sqrt_alpha * (x_t.points[i][a] - coef * eps.points[i][a]);
      if (t > 1) v += sigma * rng.next_gaussian();
      out.points[i][a] = static_cast<float>(v);
    }
  return out;
}

// Full reverse chain from Gaussian noise, one independent RNG stream per
// cloud. Masking plays no role here; the caller's eps_fn must run the model
// unmasked.
template <class EpsFn>
std::vector<PointCloud> sample_clouds(EpsFn&& eps_fn, const Schedule& s, std::size_t count,
                                      std::size_t n_points, int cls, int num_classes,
                                      std::uint64_t seed) {
  if (cls < 0 || cls >= num_classes) throw std::invalid_argument("class id out of range");
  std::vector<PointCloud> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng chain = Rng(seed).split(0x5A11u).split(i);
    PointCloud x = sample_gaussian_cloud(n_points, chain.next_u64());
    for (std::size_t t = s.T; t >= 1; --t) x = p_sample_step(eps_fn, s, x, t, cls, chain);
    out.push_back(std::move(x));
  }
  return out;
}

}  // namespace fd3d
