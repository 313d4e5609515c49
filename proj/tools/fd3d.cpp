#include <cstdint>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fd3d/cli.hpp"

namespace {

struct CommonFlags {
  std::string config;
  fd3d::CliOverrides over;
};

void add_common(CLI::App* cmd, CommonFlags& cf) {
  cmd->add_option("--config", cf.config, "JSON config file");
  cmd->add_option("--seed", cf.over.seed, "RNG seed");
  cmd->add_option("--out", cf.over.out, "output directory");
  cmd->add_option("--voxel", cf.over.voxel, "voxel resolution V");
  cmd->add_option("--patch", cf.over.patch, "patch size p");
  cmd->add_option("--rb", cf.over.rb, "background mask ratio");
  cmd->add_option("--rf", cf.over.rf, "foreground mask ratio");
  cmd->add_option("--mask", cf.over.mask, "mask mode")
      ->check(CLI::IsMember({"fb", "random", "none"}));
  cmd->add_option("--moe", cf.over.moe, "mixture-of-experts on/off")
      ->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--topk", cf.over.topk, "experts per token");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fd3d: masked diffusion transformer for 3-D point clouds"};
  app.require_subcommand(1);

  CommonFlags stats_cf, train_cf, bench_cf;
  add_common(app.add_subcommand("stats", "per-class patch occupancy table"), stats_cf);
  add_common(app.add_subcommand("train", "train a model"), train_cf);

  auto* bench = app.add_subcommand("bench", "token and arithmetic-cost table");
  add_common(bench, bench_cf);
  std::vector<std::size_t> bench_voxels = {32, 64, 128};
  double bench_occupancy = 0.0234;
  bench->add_option("--voxels", bench_voxels, "voxel resolutions to tabulate");
  bench->add_option("--occupancy", bench_occupancy, "assumed foreground fraction");

  auto* sample = app.add_subcommand("sample", "draw clouds from a checkpoint");
  fd3d::SampleOptions sopt;
  sample->add_option("--ckpt", sopt.ckpt, "checkpoint path")->required();
  sample->add_option("--out", sopt.out_dir, "output directory")->required();
  sample->add_option("--count", sopt.count, "number of clouds");
  sample->add_option("--class", sopt.cls, "class id");
  sample->add_option("--seed", sopt.seed, "RNG seed");
  sample->add_option("--voxel", sopt.expect_voxel, "expected voxel resolution");

  auto* eval = app.add_subcommand("eval", "generative metrics between two cloud sets");
  std::string gen_dir, ref_dir;
  eval->add_option("--gen", gen_dir, "directory of generated .fpc clouds")->required();
  eval->add_option("--ref", ref_dir, "directory of reference .fpc clouds")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  std::string profile = "all";
  gradcheck->add_option("--profile", profile, "layers, micro or all")
      ->check(CLI::IsMember({"layers", "micro", "all"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("stats")) {
      std::cout << fd3d::stats_csv(fd3d::resolve_config(stats_cf.config, stats_cf.over));
    } else if (app.got_subcommand("train")) {
      const fd3d::TrainConfig cfg = fd3d::resolve_config(train_cf.config, train_cf.over);
      const fd3d::TrainResult res = fd3d::train(cfg);
      std::cout << "trained " << res.steps_done << " step(s); checkpoint " << res.ckpt_path
                << "\n";
    } else if (app.got_subcommand("bench")) {
      const fd3d::TrainConfig cfg = fd3d::resolve_config(bench_cf.config, bench_cf.over);
      std::cout << fd3d::bench_csv(cfg, bench_voxels, bench_occupancy);
    } else if (app.got_subcommand("sample")) {
      fd3d::run_sample(sopt, std::cout);
    } else if (app.got_subcommand("eval")) {
      std::cout << fd3d::eval_csv(gen_dir, ref_dir);
    } else if (app.got_subcommand("gradcheck")) {
      return fd3d::run_gradcheck(profile, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
