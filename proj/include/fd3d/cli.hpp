#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fd3d/trainer.hpp"

namespace fd3d {

// Command-line overrides. Precedence: built-in defaults, then the config
// file, then the FD3D_SEED environment variable, then flags.
struct CliOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> voxel, patch, topk;
  std::optional<double> rb, rf;
  std::optional<std::string> mask, moe, out;
};

TrainConfig resolve_config(const std::string& config_path, const CliOverrides& over);

// Per-class occupancy table for the configured dataset.
std::string stats_csv(const TrainConfig& cfg);

// Generative metrics between two directories of .fpc clouds: 1-NNA and COV,
// each under CD and EMD.
std::string eval_csv(const std::string& gen_dir, const std::string& ref_dir);

// Arithmetic-cost table across voxel resolutions and mask modes at a fixed
// assumed occupancy fraction.
std::string bench_csv(const TrainConfig& base, const std::vector<std::size_t>& voxel_sizes,
                      double occupancy);

struct SampleOptions {
  std::string ckpt, out_dir;
  std::size_t count = 1;
  int cls = 0;
  std::uint64_t seed = 0;
  std::optional<std::size_t> expect_voxel;
};

void run_sample(const SampleOptions& opt, std::ostream& status);

// Gradient-check suite (layer fixtures and the end-to-end micro model).
// Prints one line per check; returns 0 when every max relative error is
// below 1e-4. Profile: "layers", "micro" or "all".
int run_gradcheck(const std::string& profile, std::ostream& out);

}  // namespace fd3d
