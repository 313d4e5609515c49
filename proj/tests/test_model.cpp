#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstddef>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fd3d/diffusion.hpp"
#include "fd3d/model.hpp"

using namespace fd3d;

static ModelConfig micro_cfg() {
  ModelConfig c;
  c.V = 8;
  c.p = 2;
  c.D = 12;
  c.encoder_depth = 1;
  c.encoder_heads = 2;
  c.decoder_depth = 1;
  c.decoder_width = 12;
  c.wa_layers = {};
  c.R = 2;
  c.n_experts = 2;
  c.k = 1;
  c.C = 2;
  return c;
}

template <class T>
static void perturb_all(Fd3dModel<T>& model, std::uint64_t seed) {
  Rng rng(seed);
  for (const std::string& name : model.params().names())
    init_trunc_normal(model.params().at(name), 0.05, rng);
}

// twelve occupied patches at V=32, p=4: one interior point per patch
static PointCloud twelve_patch_cloud() {
  auto center = [](std::size_t cell) {
    return -1.0f + 2.0f * (static_cast<float>(cell) + 0.5f) / 32.0f;
  };
  PointCloud c;
  for (std::size_t n = 0; n < 12; ++n) {
    const std::size_t pi = n / 8, pk = n % 8;
    c.points.push_back({center(4 * pi + 1), center(1), center(4 * pk + 2)});
  }
  return c;
}

TEST_CASE("mask mode names round-trip and reject junk") {
  for (MaskMode m : {MaskMode::fb, MaskMode::random, MaskMode::none})
    CHECK(mask_mode_from_string(mask_mode_name(m)) == m);
  CHECK_THROWS_WITH_AS(mask_mode_from_string("pyramid"), "unknown mask mode: pyramid",
                       std::invalid_argument);
}

TEST_CASE("model config json round-trips and rejects unknown keys") {
  ModelConfig c = micro_cfg();
  c.mask_mode = MaskMode::random;
  c.wa_layers = {0};
  c.r_b = 0.5;
  const ModelConfig back = model_config_from_json(model_config_to_json(c));
  CHECK(back == c);
  nlohmann::json j = model_config_to_json(c);
  j["zz"] = 1;
  CHECK_THROWS_WITH_AS(model_config_from_json(j), "unknown config key: model.zz",
                       std::invalid_argument);
}

TEST_CASE("config validation rejects inconsistent settings") {
  auto broken = [](auto&& tweak) {
    ModelConfig c = micro_cfg();
    tweak(c);
    return c;
  };
  CHECK_THROWS_AS(broken([](ModelConfig& c) { c.V = 6; }).validate(), std::invalid_argument);
  CHECK_THROWS_AS(broken([](ModelConfig& c) { c.p = 3; }).validate(), std::invalid_argument);
  CHECK_THROWS_AS(broken([](ModelConfig& c) { c.D = 10; }).validate(), std::invalid_argument);
  CHECK_THROWS_AS(broken([](ModelConfig& c) { c.encoder_heads = 5; }).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS(broken([](ModelConfig& c) { c.encoder_heads = 4; c.decoder_width = 6; }).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS(broken([](ModelConfig& c) { c.encoder_depth = 0; }).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS(broken([](ModelConfig& c) { c.wa_layers = {1}; }).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS(broken([](ModelConfig& c) { c.wa_layers = {0}; c.R = 3; }).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS(broken([](ModelConfig& c) { c.k = 3; }).validate(), std::invalid_argument);
  CHECK_THROWS_AS(broken([](ModelConfig& c) { c.C = 0; }).validate(), std::invalid_argument);
  CHECK_THROWS_AS(broken([](ModelConfig& c) { c.r_f = 1.5; }).validate(), std::invalid_argument);
  CHECK_NOTHROW(micro_cfg().validate());
  CHECK_NOTHROW(ModelConfig{}.validate());
}

TEST_CASE("forward drops masked tokens and keeps full decoder length") {
  ModelConfig cfg;
  cfg.V = 32;
  cfg.p = 4;
  cfg.D = 12;
  cfg.encoder_depth = 1;
  cfg.encoder_heads = 2;
  cfg.decoder_depth = 2;
  cfg.decoder_width = 12;
  cfg.wa_layers = {1};
  cfg.R = 2;
  cfg.n_experts = 2;
  cfg.k = 1;
  cfg.C = 2;
  Fd3dModel<float> model(cfg, 41);
  const PointCloud x_t = twelve_patch_cloud();
  const auto fw = model.forward(x_t, 5, 1, 7);

  CHECK(fw.labels.L_f == 12);
  CHECK(fw.labels.L_b == 500);
  CHECK(fw.mask.L_u == 6);  // 512 - floor(.95*12) - floor(.99*500)
  CHECK(fw.decoder_rows == 512);
  REQUIRE((fw.tape.val(fw.eps_pred).shape == std::vector<std::size_t>{12, 3}));

  // every encoder token picks k = 1 expert, so routing counts sum to L_u
  REQUIRE(fw.routing.size() == 1);
  std::uint32_t routed = 0;
  for (std::uint32_t c : fw.routing[0]) routed += c;
  CHECK(routed == 6);

  // eleven of the twelve foreground patches are masked, each holding one point
  std::size_t masked_pts = 0;
  for (auto b : fw.point_mask) masked_pts += b;
  CHECK(masked_pts == 11);
}

TEST_CASE("a freshly initialized model predicts exactly zero noise") {
  Fd3dModel<float> model(micro_cfg(), 9);
  const PointCloud x_t = sample_gaussian_cloud(25, 3);
  const auto fw = model.forward(x_t, 4, 0, 11);
  for (float v : fw.tape.val(fw.eps_pred).data) CHECK(v == 0.0f);
  const PointCloud pred = model.predict_eps(x_t, 4, 0);
  REQUIRE(pred.n() == 25);
  for (const auto& p : pred.points)
    for (int a = 0; a < 3; ++a) CHECK(p[a] == 0.0f);
}

TEST_CASE("mask mode none equals zero-ratio masking bitwise") {
  ModelConfig none_cfg = micro_cfg();
  none_cfg.mask_mode = MaskMode::none;
  ModelConfig zero_cfg = micro_cfg();
  zero_cfg.mask_mode = MaskMode::fb;
  zero_cfg.r_f = 0.0;
  zero_cfg.r_b = 0.0;
  Fd3dModel<float> a(none_cfg, 5);
  Fd3dModel<float> b(zero_cfg, 5);
  perturb_all(a, 77);
  perturb_all(b, 77);
  const PointCloud x_t = sample_gaussian_cloud(30, 6);
  const auto fa = a.forward(x_t, 3, 1, 123);
  const auto fb_ = b.forward(x_t, 3, 1, 456);  // seed is irrelevant at ratio zero
  CHECK(fa.mask.L_u == 64);
  CHECK(fb_.mask.L_u == 64);
  CHECK(fa.tape.val(fa.eps_pred).data == fb_.tape.val(fb_.eps_pred).data);
}

TEST_CASE("masking changes the prediction of a perturbed model") {
  ModelConfig cfg = micro_cfg();
  cfg.mask_mode = MaskMode::fb;  // defaults r_f=.95, r_b=.99
  Fd3dModel<float> model(cfg, 5);
  perturb_all(model, 78);
  const PointCloud x_t = sample_gaussian_cloud(30, 6);
  const auto masked = model.forward(x_t, 3, 1, 9, true);
  const auto open = model.forward(x_t, 3, 1, 9, false);
  CHECK(masked.mask.L_u < 64);
  CHECK(open.mask.L_u == 64);
  double diff = 0.0;
  for (std::size_t i = 0; i < masked.tape.val(masked.eps_pred).numel(); ++i)
    diff = std::max(diff, std::abs(static_cast<double>(masked.tape.val(masked.eps_pred).data[i]) -
                                   open.tape.val(open.eps_pred).data[i]));
  CHECK(diff > 0.0);
  // predict_eps is the unmasked path
  const PointCloud pe = model.predict_eps(x_t, 3, 1);
  for (std::size_t i = 0; i < pe.n(); ++i)
    for (int ax = 0; ax < 3; ++ax)
      CHECK(pe.points[i][ax] == open.tape.val(open.eps_pred)(i, ax));
}

TEST_CASE("forward validates timestep and class id") {
  Fd3dModel<float> model(micro_cfg(), 1);
  const PointCloud x_t = sample_gaussian_cloud(8, 2);
  CHECK_THROWS_WITH_AS(model.forward(x_t, 0, 0, 1), "timestep out of range",
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(model.forward(x_t, 1, 5, 1), "unknown class id: 5",
                       std::invalid_argument);
  CHECK_THROWS_AS(model.forward(x_t, 1, -1, 1), std::invalid_argument);
}

TEST_CASE("gradients reach the mask token and only the active class row") {
  ModelConfig cfg = micro_cfg();
  cfg.mask_mode = MaskMode::fb;
  cfg.r_f = 0.5;
  cfg.r_b = 0.9;
  Fd3dModel<double> model(cfg, 3);
  Rng prng(11);
  for (const std::string& name : model.params().names())
    if (name.find("mod_w") != std::string::npos || name == "final.w" || name == "final.b")
      init_trunc_normal(model.params().at(name), 0.05, prng);

  const PointCloud x0 = synth_shape(ShapeKind::sphere, 30, 1);
  const Schedule sched = make_schedule(10);
  const PointCloud eps = sample_gaussian_cloud(30, 2);
  const PointCloud x_t = q_sample(x0, 6, eps, sched);
  auto fw = model.forward(x_t, 6, 1, 17);
  REQUIRE(fw.mask.L_u < 64);
  const auto ln = dual_loss(fw.tape, fw.eps_pred, eps, fw.point_mask, 0.1);
  CHECK(ln.total_v > 0.0);
  fw.tape.backward(ln.total);
  CHECK(fw.tape.grad_nonzero(fw.nodes.at("mask_token")));
  CHECK(fw.tape.grad_nonzero(fw.nodes.at("embed.w")));
  CHECK(fw.tape.grad_nonzero(fw.nodes.at("final.w")));
  const Arr<double> g = fw.tape.grad(fw.nodes.at("cls.table"));
  double row0 = 0.0, row1 = 0.0;
  for (std::size_t j = 0; j < 12; ++j) {
    row0 += std::abs(g(0, j));
    row1 += std::abs(g(1, j));
  }
  CHECK(row0 == 0.0);
  CHECK(row1 > 0.0);
}

TEST_CASE("flop ledger tracks the unmasked token count quadratically") {
  ModelConfig cfg;  // full-size defaults: V=32, p=4, depth 12, heads 6
  const FlopLedger fb = count_flops(cfg, 12);
  CHECK(fb.L == 512);
  CHECK(fb.L_u == 6);
  CHECK(fb.enc_score_entries == 12.0 * 6.0 * 36.0);

  ModelConfig open = cfg;
  open.mask_mode = MaskMode::none;
  const FlopLedger full = count_flops(open, 12);
  CHECK(full.L_u == 512);
  CHECK(fb.enc_score_entries / full.enc_score_entries ==
        doctest::Approx((6.0 / 512.0) * (6.0 / 512.0)).epsilon(1e-12));
  CHECK(fb.total_macs() < full.total_macs());
  CHECK(1.0 - static_cast<double>(fb.L_u) / static_cast<double>(fb.L) >= 0.98);

  ModelConfig rnd = cfg;
  rnd.mask_mode = MaskMode::random;
  CHECK(count_flops(rnd, 12).L_u == 512 - 506);
  CHECK_THROWS_AS(count_flops(cfg, 513), std::invalid_argument);
}

TEST_CASE("at high resolution only a few hundred tokens stay unmasked") {
  ModelConfig big;
  big.V = 128;  // L = 32768 tokens at p=4
  const std::size_t L = big.tokens();
  CHECK(L == 32768);
  const auto L_f = static_cast<std::size_t>(std::llround(0.0234 * static_cast<double>(L)));
  const FlopLedger led = count_flops(big, L_f);
  CHECK(led.L_u == 360);
  CHECK(led.L_u >= 150);
  CHECK(led.L_u <= 650);
  ModelConfig rnd = big;
  rnd.mask_mode = MaskMode::random;
  const FlopLedger lrnd = count_flops(rnd, L_f);
  CHECK(lrnd.L_u == 328);
  // foreground-aware masking keeps the cost within the same order
  CHECK(static_cast<double>(led.L_u) / static_cast<double>(lrnd.L_u) < 1.2);
}

TEST_CASE("window layers cut decoder score entries by R^6") {
  ModelConfig wa;
  wa.V = 128;
  const FlopLedger lw = count_flops(wa, 700);
  ModelConfig glob = wa;
  glob.wa_layers = {};
  const FlopLedger lg = count_flops(glob, 700);
  const double per_global = lg.dec_score_entries / 4.0;
  const double wa_part = lw.dec_score_entries - 2.0 * per_global;
  CHECK(wa_part ==
        doctest::Approx(2.0 * per_global / std::pow(4.0, 6.0)).epsilon(1e-12));
  CHECK(lw.dec_attn_macs < lg.dec_attn_macs);
  CHECK(lw.proj_macs > lg.proj_macs);  // fold projections are extra
}

TEST_CASE("checkpoints restore parameters and predictions bitwise") {
  const std::string path = "tmp_model_roundtrip.fd3d";
  Fd3dModel<float> model(micro_cfg(), 5);
  perturb_all(model, 99);
  nlohmann::json extra;
  extra["n_points"] = 32;
  save_checkpoint(path, model, extra);

  const CheckpointData ck = read_checkpoint(path);
  CHECK(ck.meta.at("n_points") == 32);
  CHECK(model_config_from_json(ck.meta.at("model")) == micro_cfg());
  REQUIRE(ck.records.size() == model.params().names().size());
  CHECK(ck.records[0].first == "embed.w");

  Fd3dModel<float> restored = load_model_file(path);
  CHECK(restored.config() == micro_cfg());
  for (const std::string& name : model.params().names())
    CHECK(restored.params().at(name).data == model.params().at(name).data);

  const PointCloud x_t = sample_gaussian_cloud(20, 13);
  const auto fa = model.forward(x_t, 3, 1, 21);
  const auto fb_ = restored.forward(x_t, 3, 1, 21);
  CHECK(fa.tape.val(fa.eps_pred).data == fb_.tape.val(fb_.eps_pred).data);

  const ModelConfig same = micro_cfg();
  CHECK_NOTHROW(load_model_file(path, &same));
  ModelConfig other = micro_cfg();
  other.n_experts = 3;
  CHECK_THROWS_WITH_AS(load_model_file(path, &other),
                       "config mismatch: checkpoint was built with different settings",
                       std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("malformed checkpoint files are rejected") {
  const std::string good = "tmp_ck_good.fd3d";
  Fd3dModel<float> model(micro_cfg(), 5);
  save_checkpoint(good, model);

  const std::string junk = "tmp_ck_junk.fd3d";
  {
    std::ofstream f(junk, std::ios::binary);
    f.write("JUNKxxxxxxxxxxxx", 16);
  }
  CHECK_THROWS_AS(read_checkpoint(junk), std::runtime_error);

  const std::string vers = "tmp_ck_vers.fd3d";
  {
    std::ofstream f(vers, std::ios::binary);
    f.write("FD3D", 4);
    const std::uint32_t v = 2, j = 0;
    f.write(reinterpret_cast<const char*>(&v), 4);
    f.write(reinterpret_cast<const char*>(&j), 4);
  }
  CHECK_THROWS_WITH_AS(read_checkpoint(vers), "unsupported checkpoint version",
                       std::runtime_error);

  const std::string trunc = "tmp_ck_trunc.fd3d";
  {
    std::ifstream in(good, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(trunc, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 10));
  }
  CHECK_THROWS_WITH_AS(read_checkpoint(trunc), "truncated checkpoint", std::runtime_error);

  CHECK_THROWS_AS(read_checkpoint("no_such_file.fd3d"), std::runtime_error);
  for (const std::string& p : {junk, vers, trunc, good}) std::remove(p.c_str());
}

TEST_CASE("loading rejects record-level mismatches") {
  const std::string path = "tmp_ck_records.fd3d";
  Fd3dModel<float> model(micro_cfg(), 5);
  save_checkpoint(path, model);
  const CheckpointData base = read_checkpoint(path);
  std::remove(path.c_str());

  CheckpointData extra = base;
  extra.records.emplace_back("bogus", Arr<float>({1, 2}));
  CHECK_THROWS_WITH_AS(load_model(extra), "config mismatch: unexpected parameter bogus",
                       std::runtime_error);

  CheckpointData opt = base;
  opt.records.emplace_back("opt.m:embed.w", Arr<float>({1, 2}));
  CHECK_NOTHROW(load_model(opt));

  CheckpointData missing = base;
  missing.records.pop_back();
  CHECK_THROWS_WITH_AS(load_model(missing), "config mismatch: checkpoint is missing parameters",
                       std::runtime_error);

  CheckpointData reshaped = base;
  reshaped.records[0].second = Arr<float>({1, 1});
  CHECK_THROWS_WITH_AS(load_model(reshaped), "config mismatch: parameter shape for embed.w",
                       std::runtime_error);

  CheckpointData nometa = base;
  nometa.meta.erase("model");
  CHECK_THROWS_WITH_AS(load_model(nometa), "checkpoint missing model config",
                       std::runtime_error);
}

TEST_CASE("encoder-decoder width bridge only exists when widths differ") {
  ModelConfig wide = micro_cfg();
  wide.decoder_width = 24;
  Fd3dModel<float> bridged(wide, 2);
  CHECK(bridged.params().has("bridge.w"));
  Fd3dModel<float> flat(micro_cfg(), 2);
  CHECK(!flat.params().has("bridge.w"));
  // the bridged model still runs end to end
  const PointCloud x_t = sample_gaussian_cloud(10, 3);
  const auto fw = bridged.forward(x_t, 2, 0, 4);
  CHECK((fw.tape.val(fw.eps_pred).shape == std::vector<std::size_t>{10, 3}));
  const FlopLedger led = count_flops(wide, 4);
  const FlopLedger led_flat = count_flops(micro_cfg(), 4);
  CHECK(led.proj_macs > led_flat.proj_macs);
}
