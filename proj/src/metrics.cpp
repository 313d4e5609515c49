#include "fd3d/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace fd3d {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double sq_dist(const std::array<float, 3>& a, const std::array<float, 3>& b) {
  double acc = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc;
}

std::vector<double> euclidean_cost(const PointCloud& a, const PointCloud& b) {
  const std::size_t n = a.n();
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) cost[i * n + j] = std::sqrt(sq_dist(a.points[i], b.points[j]));
  return cost;
}

void check_emd_inputs(const PointCloud& a, const PointCloud& b) {
  if (a.n() == 0 || b.n() == 0) throw std::invalid_argument("empty point set");
  if (a.n() != b.n()) throw std::invalid_argument("point sets must be the same size");
}

double cloud_dist(const PointCloud& a, const PointCloud& b, CloudDist dist) {
  return dist == CloudDist::cd ? chamfer(a, b) : emd(a, b);
}

}  // namespace

double chamfer(const PointCloud& a, const PointCloud& b) {
  if (a.n() == 0 || b.n() == 0) throw std::invalid_argument("empty point set");
  double acc_a = 0.0;
  for (const auto& pa : a.points) {
    double best = kInf;
    for (const auto& pb : b.points) best = std::min(best, sq_dist(pa, pb));
    acc_a += best;
  }
  double acc_b = 0.0;
  for (const auto& pb : b.points) {
    double best = kInf;
    for (const auto& pa : a.points) best = std::min(best, sq_dist(pb, pa));
    acc_b += best;
  }
  return acc_a / static_cast<double>(a.n()) + acc_b / static_cast<double>(b.n());
}

// Shortest-augmenting-path Hungarian with row/column potentials (the classic
// O(n^3) formulation, 1-based internally).
double assignment_min_cost(const std::vector<double>& cost, std::size_t n) {
  if (n == 0) return 0.0;
  if (cost.size() != n * n) throw std::invalid_argument("assignment: cost matrix size mismatch");
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      std::size_t j1 = 0;
      double delta = kInf;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  double total = 0.0;
  for (std::size_t j = 1; j <= n; ++j) total += cost[(p[j] - 1) * n + (j - 1)];
  return total;
}

// Forward auction with epsilon scaling. Prices carry across phases, so each
// phase starts near-optimal for the previous epsilon. The final assignment
// is within n * eps_final of optimal, and eps_final is chosen so that bound
// stays under rel_gap relative to a per-row-minimum lower bound.
double assignment_auction(const std::vector<double>& cost, std::size_t n, double rel_gap) {
  if (n == 0) return 0.0;
  if (cost.size() != n * n) throw std::invalid_argument("assignment: cost matrix size mismatch");
  if (n == 1) return cost[0];

  double cmin = kInf, cmax = -kInf, lower_bound = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row_min = kInf;
    for (std::size_t j = 0; j < n; ++j) {
      const double c = cost[i * n + j];
      cmin = std::min(cmin, c);
      cmax = std::max(cmax, c);
      row_min = std::min(row_min, c);
    }
    lower_bound += row_min;
  }
  const double range = cmax - cmin;
  const double eps_final =
      std::max(rel_gap * lower_bound / static_cast<double>(n), 1e-9 * range + 1e-300);
  double eps = std::max(range / 2.0, eps_final);

  std::vector<double> price(n, 0.0);
  std::vector<std::ptrdiff_t> owner(n, -1), assigned(n, -1);
  for (int phase = 0; phase < 64; ++phase) {
    std::fill(owner.begin(), owner.end(), -1);
    std::fill(assigned.begin(), assigned.end(), -1);
    std::vector<std::size_t> pending(n);
    for (std::size_t i = 0; i < n; ++i) pending[i] = n - 1 - i;
    while (!pending.empty()) {
      const std::size_t i = pending.back();
      pending.pop_back();
      // Benefit of j for bidder i is -cost - price; bid up the best item by
      // its margin over the runner-up plus eps.
      double best = -kInf, second = -kInf;
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const double v = -cost[i * n + j] - price[j];
        if (v > best) {
          second = best;
          best = v;
          best_j = j;
        } else if (v > second) {
          second = v;
        }
      }
      price[best_j] += best - second + eps;
      const std::ptrdiff_t prev = owner[best_j];
      owner[best_j] = static_cast<std::ptrdiff_t>(i);
      assigned[i] = static_cast<std::ptrdiff_t>(best_j);
      if (prev >= 0) {
        assigned[prev] = -1;
        pending.push_back(static_cast<std::size_t>(prev));
      }
    }
    if (eps <= eps_final) break;
    eps = std::max(eps / 5.0, eps_final);
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += cost[i * n + static_cast<std::size_t>(assigned[i])];
  return total;
}

double emd_hungarian(const PointCloud& a, const PointCloud& b) {
  check_emd_inputs(a, b);
  return assignment_min_cost(euclidean_cost(a, b), a.n()) / static_cast<double>(a.n());
}

double emd_auction(const PointCloud& a, const PointCloud& b, double rel_gap) {
  check_emd_inputs(a, b);
  return assignment_auction(euclidean_cost(a, b), a.n(), rel_gap) / static_cast<double>(a.n());
}

double emd(const PointCloud& a, const PointCloud& b) {
  check_emd_inputs(a, b);
  return a.n() <= 512 ? emd_hungarian(a, b) : emd_auction(a, b, 0.01);
}

double one_nna(const std::vector<PointCloud>& gen, const std::vector<PointCloud>& ref,
               CloudDist dist) {
  const std::size_t ng = gen.size(), nr = ref.size();
  if (ng < 2 || nr < 2) throw std::invalid_argument("1-nna needs at least two samples per set");
  const std::size_t n = ng + nr;
  auto cloud_at = [&](std::size_t i) -> const PointCloud& {
    return i < ng ? gen[i] : ref[i - ng];
  };
  auto is_gen = [&](std::size_t i) { return i < ng; };

  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = cloud_dist(cloud_at(i), cloud_at(j), dist);
      d[i * n + j] = v;
      d[j * n + i] = v;
    }

  std::size_t correct = 0;
  for (std::size_t s = 0; s < n; ++s) {
    std::size_t best = n;
    double best_d = kInf;
    for (std::size_t t = 0; t < n; ++t) {
      if (t == s) continue;
      const double dv = d[s * n + t];
      const bool upgrade =
          dv < best_d ||
          (dv == best_d && best < n && is_gen(t) != is_gen(s) && is_gen(best) == is_gen(s));
      if (upgrade) {
        best_d = dv;
        best = t;
      }
    }
    if (is_gen(best) == is_gen(s)) ++correct;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(n);
}

double coverage(const std::vector<PointCloud>& gen, const std::vector<PointCloud>& ref,
                CloudDist dist) {
  if (gen.empty() || ref.empty()) throw std::invalid_argument("coverage needs nonempty sets");
  std::vector<char> covered(ref.size(), 0);
  for (const PointCloud& g : gen) {
    std::size_t best = 0;
    double best_d = kInf;
    for (std::size_t j = 0; j < ref.size(); ++j) {
      const double dv = cloud_dist(g, ref[j], dist);
      if (dv < best_d) {
        best_d = dv;
        best = j;
      }
    }
    covered[best] = 1;
  }
  std::size_t cnt = 0;
  for (char c : covered) cnt += c;
  return 100.0 * static_cast<double>(cnt) / static_cast<double>(ref.size());
}

}  // namespace fd3d
