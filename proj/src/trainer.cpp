#include "fd3d/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace fd3d {

namespace {

constexpr std::uint64_t kDataTag = 0xDA7Au;
constexpr std::uint64_t kInitTag = 0x5EEDu;
constexpr std::uint64_t kStepTag = 0x57E9u;

nlohmann::json data_spec_to_json(const DataSpec& d) {
  nlohmann::json j;
  j["dir"] = d.dir;
  j["kinds"] = d.kinds;
  j["per_kind"] = d.per_kind;
  j["points"] = d.points;
  return j;
}

DataSpec data_spec_from_json(const nlohmann::json& j) {
  static const char* known[] = {"dir", "kinds", "per_kind", "points"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* n : known) ok = ok || it.key() == n;
    if (!ok) throw std::invalid_argument("unknown config key: data." + it.key());
  }
  DataSpec d;
  d.dir = j.value("dir", d.dir);
  d.kinds = j.value("kinds", d.kinds);
  d.per_kind = j.value("per_kind", d.per_kind);
  d.points = j.value("points", d.points);
  if (d.points == 0) throw std::invalid_argument("data.points must be positive");
  if (d.synthetic() && (d.kinds.empty() || d.per_kind == 0))
    throw std::invalid_argument("synthetic data needs kinds and per_kind");
  return d;
}

}  // namespace

nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["lr"] = c.lr;
  j["batch"] = c.batch;
  j["steps"] = c.steps;
  j["lambda"] = c.lambda;
  j["seed"] = c.seed;
  j["T"] = c.T;
  j["beta_start"] = c.beta_start;
  j["beta_end"] = c.beta_end;
  j["ckpt_every"] = c.ckpt_every;
  j["out_dir"] = c.out_dir;
  j["resume"] = c.resume;
  j["model"] = model_config_to_json(c.model);
  j["data"] = data_spec_to_json(c.data);
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  static const char* known[] = {"lr", "batch", "steps", "lambda", "seed", "T", "beta_start",
                                "beta_end", "ckpt_every", "out_dir", "resume", "model", "data"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* n : known) ok = ok || it.key() == n;
    if (!ok) throw std::invalid_argument("unknown config key: " + it.key());
  }
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.batch = j.value("batch", c.batch);
  c.steps = j.value("steps", c.steps);
  c.lambda = j.value("lambda", c.lambda);
  c.seed = j.value("seed", c.seed);
  c.T = j.value("T", c.T);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  c.ckpt_every = j.value("ckpt_every", c.ckpt_every);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.resume = j.value("resume", c.resume);
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("data")) c.data = data_spec_from_json(j.at("data"));
  if (c.batch == 0) throw std::invalid_argument("batch must be positive");
  c.model.validate();
  return c;
}

Dataset build_dataset(const DataSpec& spec, std::uint64_t seed) {
  Dataset ds;
  Rng rng = Rng(seed).split(kDataTag);
  if (spec.synthetic()) {
    for (std::size_t ki = 0; ki < spec.kinds.size(); ++ki) {
      const ShapeKind kind = shape_kind_from_string(spec.kinds[ki]);
      for (std::size_t rep = 0; rep < spec.per_kind; ++rep) {
        const std::uint64_t shape_seed = rng.split(ki).split(rep).next_u64();
        ds.clouds.push_back(synth_shape(kind, spec.points, shape_seed));
        ds.labels.push_back(static_cast<int>(ki));
      }
    }
    ds.num_classes = static_cast<int>(spec.kinds.size());
  } else {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(spec.dir))
      if (entry.is_regular_file() && entry.path().extension() == ".fpc")
        files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("no .fpc files in " + spec.dir);
    int max_label = 0;
    for (std::size_t i = 0; i < files.size(); ++i) {
      auto [cloud, cls] = read_fpc(files[i].string());
      Rng item_rng = rng.split(1000 + i);
      ds.clouds.push_back(resample(cloud, spec.points, item_rng));
      ds.labels.push_back(static_cast<int>(cls));
      max_label = std::max(max_label, static_cast<int>(cls));
    }
    ds.num_classes = max_label + 1;
  }
  ds.norm = normalize_clouds(ds.clouds);
  return ds;
}

void adam_init(AdamState& st, const ParamStore<float>& params) {
  st.step = 0;
  st.m.clear();
  st.v.clear();
  for (const std::string& name : params.names()) {
    st.m.emplace(name, Arr<float>(params.at(name).shape));
    st.v.emplace(name, Arr<float>(params.at(name).shape));
  }
}

void adam_update(AdamState& st, ParamStore<float>& params,
                 const std::map<std::string, Arr<float>>& grads, double lr) {
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (const std::string& name : params.names()) {
    auto git = grads.find(name);
    if (git == grads.end()) throw std::logic_error("adam: missing gradient for " + name);
    Arr<float>& p = params.at(name);
    Arr<float>& m = st.m.at(name);
    Arr<float>& v = st.v.at(name);
    const Arr<float>& g = git->second;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double gi = g.data[i];
      const double mi = st.beta1 * m.data[i] + (1.0 - st.beta1) * gi;
      const double vi = st.beta2 * v.data[i] + (1.0 - st.beta2) * gi * gi;
      m.data[i] = static_cast<float>(mi);
      v.data[i] = static_cast<float>(vi);
      p.data[i] -= static_cast<float>(lr * (mi / bc1) / (std::sqrt(vi / bc2) + st.eps));
    }
  }
}

StepStats train_step(Fd3dModel<float>& model, const Schedule& sched, const Dataset& ds,
                     const std::vector<std::size_t>& items, std::size_t step_index,
                     std::uint64_t run_seed, double lambda, AdamState& adam, double lr,
                     std::vector<std::vector<std::vector<std::uint64_t>>>* routing_by_class) {
  if (items.empty()) throw std::invalid_argument("train_step: empty batch");
  StepStats stats;
  std::map<std::string, Arr<float>> grads;
  for (const std::string& name : model.params().names())
    grads.emplace(name, Arr<float>(model.params().at(name).shape));

  for (std::size_t slot = 0; slot < items.size(); ++slot) {
    const std::size_t item = items[slot];
    const PointCloud& x0 = ds.clouds[item];
    const int label = ds.labels[item];

    // Per-item stream: draws, in order, the timestep, the noise, the mask
    // seed. Purely a function of (run_seed, step_index, slot).
    Rng rng = Rng(run_seed).split(kStepTag).split(step_index).split(slot);
    const std::size_t t = 1 + rng.next_below(sched.T);
    PointCloud eps;
    eps.points.resize(x0.n());
    for (auto& p : eps.points)
      for (int a = 0; a < 3; ++a) p[a] = static_cast<float>(rng.next_gaussian());
    const std::uint64_t mask_seed = rng.next_u64();

    const PointCloud x_t = q_sample(x0, t, eps, sched);
    auto fw = model.forward(x_t, t, label, mask_seed);
    const auto loss = dual_loss(fw.tape, fw.eps_pred, eps, fw.point_mask, lambda);
    if (!std::isfinite(loss.total_v))
      throw std::runtime_error("non-finite loss at step " + std::to_string(step_index) +
                               ", batch slot " + std::to_string(slot));
    fw.tape.backward(loss.total);
    for (const auto& [name, id] : fw.nodes.order) {
      const Arr<float> g = fw.tape.grad(id);
      Arr<float>& acc = grads.at(name);
      for (std::size_t i = 0; i < acc.numel(); ++i) acc.data[i] += g.data[i];
    }

    stats.denoise += loss.denoise_v;
    stats.masked += loss.masked_v;
    stats.total += loss.total_v;
    stats.tokens_encoded += fw.mask.L_u;
    stats.items.push_back({t, fw.labels.L_f, fw.labels.L_b, fw.mask.L_u});
    if (routing_by_class) {
      auto& rbc = *routing_by_class;
      for (std::size_t l = 0; l < fw.routing.size(); ++l)
        for (std::size_t e = 0; e < fw.routing[l].size(); ++e)
          rbc[l][static_cast<std::size_t>(label)][e] += fw.routing[l][e];
    }
  }

  const float inv = 1.0f / static_cast<float>(items.size());
  for (auto& [name, g] : grads)
    for (float& x : g.data) x *= inv;
  stats.denoise /= static_cast<double>(items.size());
  stats.masked /= static_cast<double>(items.size());
  stats.total /= static_cast<double>(items.size());

  adam_update(adam, model.params(), grads, lr);
  return stats;
}

TrainResult train(const TrainConfig& cfg) {
  if (cfg.out_dir.empty()) throw std::invalid_argument("train: out_dir is required");
  cfg.model.validate();
  std::filesystem::create_directories(cfg.out_dir);

  const Dataset ds = build_dataset(cfg.data, cfg.seed);
  if (static_cast<std::size_t>(ds.num_classes) > cfg.model.C)
    throw std::invalid_argument("model class count is smaller than the dataset's");
  const Schedule sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);

  Fd3dModel<float> model(cfg.model, Rng(cfg.seed).split(kInitTag).next_u64());
  AdamState adam;
  adam_init(adam, model.params());
  std::size_t start_step = 0;

  if (!cfg.resume.empty()) {
    const CheckpointData ck = read_checkpoint(cfg.resume);
    // Everything that shapes the trajectory must match; only the horizon and
    // output locations may differ.
    nlohmann::json a = train_config_to_json(cfg);
    nlohmann::json b = ck.meta.at("train");
    for (const char* key : {"steps", "ckpt_every", "out_dir", "resume"}) {
      a.erase(key);
      b.erase(key);
    }
    if (a != b) throw std::runtime_error("config mismatch: resume settings differ from checkpoint");
    for (const auto& [name, arr] : ck.records) {
      if (name.rfind("opt.m:", 0) == 0) {
        adam.m.at(name.substr(6)).data = arr.data;
      } else if (name.rfind("opt.v:", 0) == 0) {
        adam.v.at(name.substr(6)).data = arr.data;
      } else {
        Arr<float>& dst = model.params().at(name);
        if (dst.shape != arr.shape)
          throw std::runtime_error("config mismatch: parameter shape for " + name);
        dst.data = arr.data;
      }
    }
    adam.step = ck.meta.at("adam_step").get<std::uint64_t>();
    start_step = ck.meta.at("trained_steps").get<std::size_t>();
  }

  const nlohmann::json cfg_json = train_config_to_json(cfg);
  auto save = [&](const std::string& path, std::size_t steps_done) {
    nlohmann::json meta;
    meta["train"] = cfg_json;
    meta["trained_steps"] = steps_done;
    meta["adam_step"] = adam.step;
    meta["n_points"] = cfg.data.points;
    std::vector<std::pair<std::string, const Arr<float>*>> extra;
    for (const std::string& name : model.params().names()) {
      extra.emplace_back("opt.m:" + name, &adam.m.at(name));
      extra.emplace_back("opt.v:" + name, &adam.v.at(name));
    }
    save_checkpoint(path, model, meta, extra);
  };

  TrainResult res;
  res.log_path = cfg.out_dir + "/loss_log.csv";
  std::ofstream log(res.log_path, std::ios::binary);
  if (!log) throw std::runtime_error("cannot open for writing: " + res.log_path);
  log << "# config: " << cfg_json.dump() << "\n";
  log << "step,denoise,masked,total,tokens_encoded\n";

  std::vector<std::vector<std::vector<std::uint64_t>>> routing;
  if (cfg.model.use_moe)
    routing.assign(cfg.model.encoder_depth,
                   std::vector<std::vector<std::uint64_t>>(
                       cfg.model.C, std::vector<std::uint64_t>(cfg.model.n_experts, 0)));

  std::vector<std::size_t> items(cfg.batch);
  for (std::size_t step = start_step + 1; step <= cfg.steps; ++step) {
    // Round-robin batch assembly keeps coverage exact and needs no RNG.
    for (std::size_t s = 0; s < cfg.batch; ++s)
      items[s] = ((step - 1) * cfg.batch + s) % ds.clouds.size();
    const StepStats st = train_step(model, sched, ds, items, step, cfg.seed, cfg.lambda, adam,
                                    cfg.lr, cfg.model.use_moe ? &routing : nullptr);
    char row[160];
    std::snprintf(row, sizeof row, "%zu,%.9g,%.9g,%.9g,%llu\n", step, st.denoise, st.masked,
                  st.total, static_cast<unsigned long long>(st.tokens_encoded));
    log << row;
    if (cfg.ckpt_every > 0 && step % cfg.ckpt_every == 0 && step != cfg.steps)
      save(cfg.out_dir + "/ckpt_" + std::to_string(step) + ".fd3d", step);
    res.steps_done = step;
  }
  log.close();

  res.ckpt_path = cfg.out_dir + "/model.fd3d";
  save(res.ckpt_path, cfg.steps);

  if (cfg.model.use_moe) {
    res.routing_path = cfg.out_dir + "/routing.csv";
    std::ofstream rf(res.routing_path, std::ios::binary);
    rf << "layer,class,expert,selection_count\n";
    for (std::size_t l = 0; l < routing.size(); ++l)
      for (std::size_t c = 0; c < routing[l].size(); ++c)
        for (std::size_t e = 0; e < routing[l][c].size(); ++e)
          rf << l << "," << c << "," << e << "," << routing[l][c][e] << "\n";
  }
  return res;
}

}  // namespace fd3d
