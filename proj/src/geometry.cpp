#include "fd3d/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace fd3d {

namespace {

struct Box3 {
  // min/max corners
  std::array<double, 3> lo, hi;

  double volume() const {
    return (hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]);
  }
};

std::array<float, 3> uniform_in_box(const Box3& b, Rng& rng) {
  std::array<float, 3> p;
  for (int a = 0; a < 3; ++a)
    p[a] = static_cast<float>(b.lo[a] + (b.hi[a] - b.lo[a]) * rng.next_double());
  return p;
}

// Volume-weighted union sampling. Overlaps are small and thin for the shapes
// below, so the slight double-counting there is acceptable.
PointCloud sample_box_union(const std::vector<Box3>& boxes, std::size_t n, Rng& rng) {
  std::vector<double> cum;
  double total = 0.0;
  for (const Box3& b : boxes) {
    total += b.volume();
    cum.push_back(total);
  }
  PointCloud out;
  out.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.next_double() * total;
    std::size_t pick = 0;
    while (pick + 1 < boxes.size() && u >= cum[pick]) ++pick;
    out.points.push_back(uniform_in_box(boxes[pick], rng));
  }
  return out;
}

PointCloud sample_sphere(std::size_t n, Rng& rng) {
  const double radius = 0.75;
  PointCloud out;
  out.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    double g[3], norm2 = 0.0;
    do {
      norm2 = 0.0;
      for (double& v : g) {
        v = rng.next_gaussian();
        norm2 += v * v;
      }
    } while (norm2 == 0.0);
    const double s = radius / std::sqrt(norm2);
    out.points.push_back({static_cast<float>(g[0] * s), static_cast<float>(g[1] * s),
                          static_cast<float>(g[2] * s)});
  }
  return out;
}

PointCloud sample_box_surface(std::size_t n, Rng& rng) {
  const std::array<double, 3> half{0.7, 0.45, 0.55};
  // Face areas per axis pair; each axis has two opposing faces.
  std::array<double, 3> area;
  area[0] = half[1] * half[2];  // faces with fixed x
  area[1] = half[0] * half[2];
  area[2] = half[0] * half[1];
  const double total = 2.0 * (area[0] + area[1] + area[2]);
  PointCloud out;
  out.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    double u = rng.next_double() * total;
    int axis = 0;
    for (; axis < 3; ++axis) {
      if (u < 2.0 * area[axis]) break;
      u -= 2.0 * area[axis];
    }
    if (axis == 3) axis = 2;
    const double side = (u < area[axis]) ? -1.0 : 1.0;
    std::array<float, 3> p;
    p[axis] = static_cast<float>(side * half[axis]);
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    p[a1] = static_cast<float>((2.0 * rng.next_double() - 1.0) * half[a1]);
    p[a2] = static_cast<float>((2.0 * rng.next_double() - 1.0) * half[a2]);
    out.points.push_back(p);
  }
  return out;
}

PointCloud sample_cross(std::size_t n, Rng& rng) {
  // Two orthogonal thin slabs crossing at the origin.
  const std::vector<Box3> slabs = {
      {{-0.9, -0.06, -0.2}, {0.9, 0.06, 0.2}},
      {{-0.25, -0.06, -0.9}, {0.25, 0.06, 0.9}},
  };
  return sample_box_union(slabs, n, rng);
}

PointCloud sample_chairlike(std::size_t n, Rng& rng) {
  const std::vector<Box3> parts = {
      {{-0.5, 0.0, -0.5}, {0.5, 0.12, 0.5}},     // seat
      {{-0.5, 0.12, 0.38}, {0.5, 0.95, 0.5}},    // back
      {{-0.5, -0.95, -0.5}, {-0.38, 0.0, 0.5}},  // left legs
      {{0.38, -0.95, -0.5}, {0.5, 0.0, 0.5}},    // right legs
  };
  return sample_box_union(parts, n, rng);
}

void write_u32(std::ofstream& f, std::uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::ifstream& f, const std::string& path) {
  std::uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!f) throw std::runtime_error("truncated fpc file: " + path);
  return v;
}

}  // namespace

ShapeKind shape_kind_from_string(const std::string& name) {
  if (name == "sphere") return ShapeKind::sphere;
  if (name == "box") return ShapeKind::box;
  if (name == "cross") return ShapeKind::cross;
  if (name == "chairlike") return ShapeKind::chairlike;
  throw std::invalid_argument("unknown shape kind: " + name);
}

const char* shape_kind_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::sphere: return "sphere";
    case ShapeKind::box: return "box";
    case ShapeKind::cross: return "cross";
    case ShapeKind::chairlike: return "chairlike";
  }
  return "?";
}

NormStats normalize_clouds(std::vector<PointCloud>& clouds) {
  std::size_t total = 0;
  for (const PointCloud& c : clouds) total += c.n();
  if (total == 0) throw std::invalid_argument("empty dataset");

  NormStats stats;
  std::array<double, 3> sum{0.0, 0.0, 0.0};
  for (const PointCloud& c : clouds)
    for (const auto& p : c.points)
      for (int a = 0; a < 3; ++a) sum[a] += p[a];
  for (int a = 0; a < 3; ++a) stats.mean[a] = sum[a] / static_cast<double>(total);

  double scale = 0.0;
  for (const PointCloud& c : clouds)
    for (const auto& p : c.points)
      for (int a = 0; a < 3; ++a) scale = std::max(scale, std::abs(p[a] - stats.mean[a]));
  if (scale == 0.0) throw std::invalid_argument("degenerate dataset: zero extent");
  stats.scale = scale;

  for (PointCloud& c : clouds)
    for (auto& p : c.points)
      for (int a = 0; a < 3; ++a)
        p[a] = static_cast<float>((p[a] - stats.mean[a]) / stats.scale);
  return stats;
}

void denormalize(PointCloud& cloud, const NormStats& stats) {
  for (auto& p : cloud.points)
    for (int a = 0; a < 3; ++a)
      p[a] = static_cast<float>(p[a] * stats.scale + stats.mean[a]);
}

PointCloud synth_shape(ShapeKind kind, std::size_t n, std::uint64_t seed) {
  Rng rng = Rng(seed).split(static_cast<std::uint64_t>(kind));
  switch (kind) {
    case ShapeKind::sphere: return sample_sphere(n, rng);
    case ShapeKind::box: return sample_box_surface(n, rng);
    case ShapeKind::cross: return sample_cross(n, rng);
    case ShapeKind::chairlike: return sample_chairlike(n, rng);
  }
  throw std::invalid_argument("unknown shape kind");
}

PointCloud synth_shape(const std::string& kind, std::size_t n, std::uint64_t seed) {
  return synth_shape(shape_kind_from_string(kind), n, seed);
}

PointCloud sample_gaussian_cloud(std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("sample_gaussian_cloud: n must be positive");
  Rng rng(seed);
  PointCloud out;
  out.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::array<float, 3> p;
    for (int a = 0; a < 3; ++a) p[a] = static_cast<float>(rng.next_gaussian());
    out.points.push_back(p);
  }
  return out;
}

PointCloud resample(const PointCloud& src, std::size_t n, Rng& rng) {
  if (src.n() == 0) throw std::invalid_argument("resample: empty source cloud");
  PointCloud out;
  out.points.reserve(n);
  if (src.n() == n) {
    out.points = src.points;
  } else if (src.n() > n) {
    // Partial Fisher-Yates over the index range: n distinct picks.
    std::vector<std::size_t> idx(src.n());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + rng.next_below(idx.size() - i);
      std::swap(idx[i], idx[j]);
      out.points.push_back(src.points[idx[i]]);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i)
      out.points.push_back(src.points[rng.next_below(src.n())]);
  }
  return out;
}

void write_fpc(const std::string& path, const PointCloud& cloud, std::uint32_t cls) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write("FPC1", 4);
  write_u32(f, static_cast<std::uint32_t>(cloud.n()));
  write_u32(f, cls);
  f.write(reinterpret_cast<const char*>(cloud.points.data()),
          static_cast<std::streamsize>(cloud.n() * 3 * sizeof(float)));
  if (!f) throw std::runtime_error("write failed: " + path);
}

std::pair<PointCloud, std::uint32_t> read_fpc(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  char magic[4] = {};
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "FPC1", 4) != 0)
    throw std::runtime_error("bad fpc magic: " + path);
  const std::uint32_t n = read_u32(f, path);
  const std::uint32_t cls = read_u32(f, path);
  PointCloud cloud;
  cloud.points.resize(n);
  f.read(reinterpret_cast<char*>(cloud.points.data()),
         static_cast<std::streamsize>(std::size_t(n) * 3 * sizeof(float)));
  if (!f) throw std::runtime_error("truncated fpc file: " + path);
  return {std::move(cloud), cls};
}

void write_xyz(const std::string& path, const PointCloud& cloud) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  for (const auto& p : cloud.points)
    std::fprintf(f, "%.6f %.6f %.6f\n", p[0], p[1], p[2]);
  std::fclose(f);
}

}  // namespace fd3d
