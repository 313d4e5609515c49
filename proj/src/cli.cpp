#include "fd3d/cli.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "fd3d/gradcheck.hpp"
#include "fd3d/masking.hpp"
#include "fd3d/metrics.hpp"

namespace fd3d {

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<PointCloud> load_cloud_dir(const std::string& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".fpc")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no .fpc files in " + dir);
  std::vector<PointCloud> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(read_fpc(f.string()).first);
  return out;
}

}  // namespace

TrainConfig resolve_config(const std::string& config_path, const CliOverrides& over) {
  TrainConfig cfg;
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw std::runtime_error("cannot open: " + config_path);
    cfg = train_config_from_json(nlohmann::json::parse(f));
  }
  if (const char* env = std::getenv("FD3D_SEED")) {
    errno = 0;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (errno != 0 || end == env || *end != '\0')
      throw std::invalid_argument("invalid FD3D_SEED: " + std::string(env));
    cfg.seed = v;
  }
  if (over.seed) cfg.seed = *over.seed;
  if (over.voxel) cfg.model.V = *over.voxel;
  if (over.patch) cfg.model.p = *over.patch;
  if (over.topk) cfg.model.k = *over.topk;
  if (over.rb) cfg.model.r_b = *over.rb;
  if (over.rf) cfg.model.r_f = *over.rf;
  if (over.mask) cfg.model.mask_mode = mask_mode_from_string(*over.mask);
  if (over.moe) {
    if (*over.moe != "on" && *over.moe != "off")
      throw std::invalid_argument("invalid --moe value: " + *over.moe);
    cfg.model.use_moe = *over.moe == "on";
  }
  if (over.out) cfg.out_dir = *over.out;
  cfg.model.validate();
  return cfg;
}

std::string stats_csv(const TrainConfig& cfg) {
  const Dataset ds = build_dataset(cfg.data, cfg.seed);
  const std::vector<std::string> names = cfg.data.synthetic() ? cfg.data.kinds
                                                              : std::vector<std::string>{};
  const OccupancyStats st = occupancy_stats(ds, cfg.model.V, cfg.model.p, names);

  std::string out = "# config: " + train_config_to_json(cfg).dump() + "\n";
  out += "class,occupied_pct,non_occupied_pct\n";
  for (const OccupancyRow& row : st.per_class)
    out += row.name + "," + fmt("%.6g", row.occupied_pct) + "," +
           fmt("%.6g", row.non_occupied_pct) + "\n";
  if (st.per_class.size() > 1)
    out += "all," + fmt("%.6g", st.overall.occupied_pct) + "," +
           fmt("%.6g", st.overall.non_occupied_pct) + "\n";
  return out;
}

std::string eval_csv(const std::string& gen_dir, const std::string& ref_dir) {
  const std::vector<PointCloud> gen = load_cloud_dir(gen_dir);
  const std::vector<PointCloud> ref = load_cloud_dir(ref_dir);

  nlohmann::json hdr;
  hdr["gen_dir"] = gen_dir;
  hdr["ref_dir"] = ref_dir;
  std::string out = "# config: " + hdr.dump() + "\n";
  out += "metric,distance_kind,value\n";
  out += "1-NNA,CD," + fmt("%.6g", one_nna(gen, ref, CloudDist::cd)) + "\n";
  out += "1-NNA,EMD," + fmt("%.6g", one_nna(gen, ref, CloudDist::emd)) + "\n";
  out += "COV,CD," + fmt("%.6g", coverage(gen, ref, CloudDist::cd)) + "\n";
  out += "COV,EMD," + fmt("%.6g", coverage(gen, ref, CloudDist::emd)) + "\n";
  return out;
}

std::string bench_csv(const TrainConfig& base, const std::vector<std::size_t>& voxel_sizes,
                      double occupancy) {
  if (!(occupancy >= 0.0) || occupancy > 1.0)
    throw std::invalid_argument("bench: occupancy must be in [0, 1]");
  std::string out = "# config: " + train_config_to_json(base).dump() + "\n";
  out += "# occupancy: " + fmt("%.6g", occupancy) + "\n";
  out += "voxel,mask,L,L_f,L_u,encoder_reduction_pct,score_entries,total_macs\n";
  for (std::size_t V : voxel_sizes) {
    for (MaskMode mode : {MaskMode::fb, MaskMode::random, MaskMode::none}) {
      ModelConfig cfg = base.model;
      cfg.V = V;
      cfg.mask_mode = mode;
      cfg.validate();
      const std::size_t L = cfg.tokens();
      const std::size_t L_f =
          static_cast<std::size_t>(std::llround(occupancy * static_cast<double>(L)));
      const FlopLedger led = count_flops(cfg, L_f);
      const double reduction =
          100.0 * (1.0 - static_cast<double>(led.L_u) / static_cast<double>(led.L));
      out += std::to_string(V) + "," + mask_mode_name(mode) + "," + std::to_string(led.L) + "," +
             std::to_string(L_f) + "," + std::to_string(led.L_u) + "," +
             fmt("%.6g", reduction) + "," + fmt("%.6g", led.score_entries()) + "," +
             fmt("%.6g", led.total_macs()) + "\n";
    }
  }
  return out;
}

void run_sample(const SampleOptions& opt, std::ostream& status) {
  if (opt.out_dir.empty()) throw std::invalid_argument("sample: out_dir is required");
  const CheckpointData ck = read_checkpoint(opt.ckpt);
  const Fd3dModel<float> model = load_model(ck);
  const ModelConfig& mc = model.config();
  if (opt.expect_voxel && *opt.expect_voxel != mc.V)
    throw std::runtime_error("config mismatch: checkpoint voxel resolution is " +
                             std::to_string(mc.V));
  if (opt.cls < 0 || static_cast<std::size_t>(opt.cls) >= mc.C)
    throw std::invalid_argument("class id out of range");

  std::size_t T = 1000;
  double beta_start = 1e-4, beta_end = 0.02;
  if (ck.meta.contains("train")) {
    const nlohmann::json& tr = ck.meta.at("train");
    T = tr.value("T", T);
    beta_start = tr.value("beta_start", beta_start);
    beta_end = tr.value("beta_end", beta_end);
  }
  const std::size_t n_points = ck.meta.value("n_points", std::size_t(256));
  const Schedule sched = make_schedule(T, beta_start, beta_end);

  std::filesystem::create_directories(opt.out_dir);
  auto eps_fn = [&](const PointCloud& x_t, std::size_t t, int cls) {
    return model.predict_eps(x_t, t, cls);
  };
  const std::vector<PointCloud> clouds = sample_clouds(
      eps_fn, sched, opt.count, n_points, opt.cls, static_cast<int>(mc.C), opt.seed);

  nlohmann::json manifest;
  manifest["ckpt"] = opt.ckpt;
  manifest["count"] = opt.count;
  manifest["class"] = opt.cls;
  manifest["seed"] = opt.seed;
  manifest["n_points"] = n_points;
  manifest["T"] = T;
  manifest["model"] = model_config_to_json(mc);
  manifest["files"] = nlohmann::json::array();
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "sample_%03zu", i);
    const std::string fpc = opt.out_dir + "/" + stem + ".fpc";
    const std::string xyz = opt.out_dir + "/" + stem + ".xyz";
    write_fpc(fpc, clouds[i], static_cast<std::uint32_t>(opt.cls));
    write_xyz(xyz, clouds[i]);
    manifest["files"].push_back(std::string(stem) + ".fpc");
    status << "wrote " << fpc << "\n";
  }
  std::ofstream mf(opt.out_dir + "/manifest.json", std::ios::binary);
  mf << manifest.dump(2) << "\n";
  status << "wrote " << clouds.size() << " cloud(s) to " << opt.out_dir << "\n";
}

int run_gradcheck(const std::string& profile, std::ostream& out) {
  if (profile != "layers" && profile != "micro" && profile != "all")
    throw std::invalid_argument("unknown gradcheck profile: " + profile);
  std::vector<LayerCheck> checks;
  if (profile == "layers" || profile == "all") {
    auto layers = gradcheck_layers();
    checks.insert(checks.end(), layers.begin(), layers.end());
  }
  if (profile == "micro" || profile == "all") checks.push_back(gradcheck_end_to_end());

  const double tol = 1e-4;
  double worst = 0.0;
  for (const LayerCheck& c : checks) {
    worst = std::max(worst, c.report.max_rel_err);
    char line[160];
    std::snprintf(line, sizeof line, "%-18s max relative error %.3e over %zu coords: %s\n",
                  c.name.c_str(), c.report.max_rel_err, c.report.coords,
                  c.report.max_rel_err < tol ? "ok" : "FAIL");
    out << line;
  }
  out << "max relative error " << fmt("%.3e", worst) << (worst < tol ? " (ok)" : " (FAIL)")
      << "\n";
  return worst < tol ? 0 : 1;
}

}  // namespace fd3d
