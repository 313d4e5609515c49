#pragma once

#include <cstddef>
#include <vector>

#include "fd3d/geometry.hpp"

namespace fd3d {

// Symmetric Chamfer distance with the squared-distance convention:
// mean_x min_y ||x-y||^2 + mean_y min_x ||x-y||^2.
double chamfer(const PointCloud& a, const PointCloud& b);

// Earth mover's distance: (1/N) * min over bijections of the summed
// Euclidean distances. Exact Hungarian solver up to 512 points, epsilon-
// scaled auction (within 1% of optimal) above.
double emd(const PointCloud& a, const PointCloud& b);
double emd_hungarian(const PointCloud& a, const PointCloud& b);
double emd_auction(const PointCloud& a, const PointCloud& b, double rel_gap = 0.01);

// Exact minimum-cost perfect matching on a dense n x n cost matrix
// (row-major); returns the total cost. O(n^3).
double assignment_min_cost(const std::vector<double>& cost, std::size_t n);
// Approximate variant with bounded relative gap.
double assignment_auction(const std::vector<double>& cost, std::size_t n, double rel_gap);

enum class CloudDist { cd, emd };

// Leave-one-out 1-nearest-neighbor two-sample accuracy between generated set
// G and reference set R, in percent. 50% is ideal. Ties prefer the opposite
// set, then the lowest index.
double one_nna(const std::vector<PointCloud>& gen, const std::vector<PointCloud>& ref,
               CloudDist dist);

// Percentage of reference clouds that are the nearest reference of at least
// one generated cloud. Ties go to the lowest reference index.
double coverage(const std::vector<PointCloud>& gen, const std::vector<PointCloud>& ref,
                CloudDist dist);

}  // namespace fd3d
