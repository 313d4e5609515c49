#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fd3d/diffusion.hpp"
#include "fd3d/geometry.hpp"
#include "fd3d/model.hpp"

namespace fd3d {

// Source of training clouds: a directory of .fpc files, or deterministic
// synthetic shapes (one class per kind).
struct DataSpec {
  std::string dir;
  std::vector<std::string> kinds = {"sphere", "box", "cross", "chairlike"};
  std::size_t per_kind = 2;
  std::size_t points = 256;

  bool synthetic() const { return dir.empty(); }
};

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch = 128;
  std::size_t steps = 0;
  double lambda = 0.1;
  std::uint64_t seed = 0;
  std::size_t T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t ckpt_every = 0;  // 0 = final checkpoint only
  std::string out_dir;
  std::string resume;  // checkpoint path to continue from
  ModelConfig model;
  DataSpec data;
};

Dataset build_dataset(const DataSpec& spec, std::uint64_t seed);

// Strict JSON (de)serialization; field names match the struct members, and
// unknown keys are rejected.
nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Adam with bias correction; moments keyed by parameter name so they travel
// with checkpoints.
struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t step = 0;
  std::map<std::string, Arr<float>> m, v;
};

void adam_init(AdamState& st, const ParamStore<float>& params);
void adam_update(AdamState& st, ParamStore<float>& params,
                 const std::map<std::string, Arr<float>>& grads, double lr);

struct ItemDiag {
  std::size_t t = 0, L_f = 0, L_b = 0, L_u = 0;
};

struct StepStats {
  double denoise = 0.0, masked = 0.0, total = 0.0;
  std::uint64_t tokens_encoded = 0;
  std::vector<ItemDiag> items;
};

// One optimizer step over the given dataset items. Per-item randomness (the
// timestep, the noise, the mask seed) comes from a stream derived from
// (run_seed, step_index, slot), so a resumed run replays the identical
// sequence. Gradients are averaged over the batch in slot order.
StepStats train_step(Fd3dModel<float>& model, const Schedule& sched, const Dataset& ds,
                     const std::vector<std::size_t>& items, std::size_t step_index,
                     std::uint64_t run_seed, double lambda, AdamState& adam, double lr,
                     std::vector<std::vector<std::vector<std::uint64_t>>>* routing_by_class = nullptr);

struct TrainResult {
  std::string log_path, ckpt_path, routing_path;
  std::size_t steps_done = 0;
};

// Full training run: builds the dataset and model, iterates steps, writes
// loss_log.csv, routing.csv (when MoE is on) and model.fd3d under out_dir.
// With cfg.resume set, restores parameters, optimizer moments and progress
// from the checkpoint and continues to cfg.steps.
TrainResult train(const TrainConfig& cfg);

}  // namespace fd3d
