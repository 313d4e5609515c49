#include "fd3d/masking.hpp"

#include <stdexcept>

namespace fd3d {

OccupancyStats occupancy_stats(const Dataset& ds, std::size_t V, std::size_t p,
                               const std::vector<std::string>& class_names) {
  if (ds.clouds.empty()) throw std::invalid_argument("empty dataset");
  if (ds.labels.size() != ds.clouds.size())
    throw std::invalid_argument("occupancy_stats: label count mismatch");

  OccupancyStats stats;
  stats.per_class.resize(ds.num_classes);
  for (int c = 0; c < ds.num_classes; ++c) {
    stats.per_class[c].label = c;
    stats.per_class[c].name =
        c < static_cast<int>(class_names.size()) ? class_names[c] : std::to_string(c);
  }
  stats.overall.label = -1;
  stats.overall.name = "all";

  std::vector<double> sum(ds.num_classes, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < ds.clouds.size(); ++i) {
    const int lab = ds.labels[i];
    if (lab < 0 || lab >= ds.num_classes)
      throw std::invalid_argument("occupancy_stats: label out of range");
    const VoxelGrid<float> g = voxelize<float>(ds.clouds[i], V);
    const PatchLabels pl = classify_patches(g, p);
    const double pct = 100.0 * static_cast<double>(pl.L_f) / static_cast<double>(pl.L());
    sum[lab] += pct;
    total += pct;
    ++stats.per_class[lab].clouds;
    ++stats.overall.clouds;
  }
  for (int c = 0; c < ds.num_classes; ++c) {
    OccupancyRow& row = stats.per_class[c];
    if (row.clouds > 0) row.occupied_pct = sum[c] / static_cast<double>(row.clouds);
    row.non_occupied_pct = 100.0 - row.occupied_pct;
  }
  stats.overall.occupied_pct = total / static_cast<double>(stats.overall.clouds);
  stats.overall.non_occupied_pct = 100.0 - stats.overall.occupied_pct;
  return stats;
}

}  // namespace fd3d
