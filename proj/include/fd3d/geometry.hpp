#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fd3d/rng.hpp"

namespace fd3d {

struct PointCloud {
  std::vector<std::array<float, 3>> points;

  std::size_t n() const { return points.size(); }
};

// Dataset-wide normalization: subtract the per-axis mean over all points,
// then divide by one global scale (the max post-centering L-inf norm), so
// every coordinate lands in [-1, 1].
struct NormStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  double scale = 1.0;
};

struct Dataset {
  std::vector<PointCloud> clouds;
  std::vector<int> labels;
  int num_classes = 0;
  NormStats norm;
};

enum class ShapeKind { sphere, box, cross, chairlike };

ShapeKind shape_kind_from_string(const std::string& name);
const char* shape_kind_name(ShapeKind kind);

NormStats normalize_clouds(std::vector<PointCloud>& clouds);
void denormalize(PointCloud& cloud, const NormStats& stats);

// Deterministic synthetic shapes, all inside [-1, 1]^3.
PointCloud synth_shape(ShapeKind kind, std::size_t n, std::uint64_t seed);
PointCloud synth_shape(const std::string& kind, std::size_t n, std::uint64_t seed);

// n i.i.d. standard-normal coordinates (the diffusion prior).
PointCloud sample_gaussian_cloud(std::size_t n, std::uint64_t seed);

// Uniform resampling to exactly n points: without replacement when the
// source is larger, with replacement when smaller.
PointCloud resample(const PointCloud& src, std::size_t n, Rng& rng);

// "FPC1" container: magic, u32 point count, u32 class id, then n xyz float
// triples, all little-endian.
void write_fpc(const std::string& path, const PointCloud& cloud, std::uint32_t cls);
std::pair<PointCloud, std::uint32_t> read_fpc(const std::string& path);

// Plain text, one "%.6f %.6f %.6f" line per point.
void write_xyz(const std::string& path, const PointCloud& cloud);

}  // namespace fd3d
