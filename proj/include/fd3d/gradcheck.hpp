#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fd3d/diffusion.hpp"
#include "fd3d/model.hpp"
#include "fd3d/nn.hpp"
#include "fd3d/tape.hpp"
#include "fd3d/voxel.hpp"

namespace fd3d {

struct LayerCheck {
  std::string name;
  GradCheckReport report;
};

namespace gradcheck_detail {

// Rebuilds the tape from the live parameter arrays on every call; used both
// as the loss oracle and as the analytic-gradient source.
struct Fixture {
  std::vector<Arr<double>*> params;
  std::function<int(Tape<double>&, const std::vector<int>&)> build;

  double loss() const {
    Tape<double> tp;
    std::vector<int> ids;
    ids.reserve(params.size());
    for (const Arr<double>* p : params) ids.push_back(tp.input(*p));
    return tp.val(build(tp, ids)).data[0];
  }

  std::vector<std::vector<double>> grads() const {
    Tape<double> tp;
    std::vector<int> ids;
    ids.reserve(params.size());
    for (const Arr<double>* p : params) ids.push_back(tp.input(*p));
    const int l = build(tp, ids);
    tp.backward(l);
    std::vector<std::vector<double>> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(tp.grad(id).data);
    return out;
  }

  GradCheckReport run(std::size_t coords, double eps, Rng rng) const {
    return grad_check([this] { return loss(); }, [this] { return grads(); }, params, coords, eps,
                      rng);
  }
};

inline Arr<double> randn(std::vector<std::size_t> shape, double sigma, Rng& rng) {
  Arr<double> a(std::move(shape));
  for (double& v : a.data) v = sigma * rng.next_gaussian();
  return a;
}

}  // namespace gradcheck_detail

// Attention, MoE, adaLN blocks (global and windowed), the final projection
// and trilinear read-back, each as an isolated double-precision fixture.
std::vector<LayerCheck> gradcheck_layers();

// Dual loss of a micro model, differentiated through every parameter.
LayerCheck gradcheck_end_to_end();

inline std::vector<LayerCheck> gradcheck_layers() {
  using gradcheck_detail::Fixture;
  using gradcheck_detail::randn;
  std::vector<LayerCheck> out;
  Rng rng(20240811);

  auto scalar_loss = [](Tape<double>& tp, int node) {
    return tp.scale(tp.sum_sq(node), 1.0 / static_cast<double>(tp.val(node).numel()));
  };

  {  // multi-head attention
    std::vector<Arr<double>> store;
    store.push_back(randn({6, 12}, 0.7, rng));
    for (int i = 0; i < 4; ++i) {
      store.push_back(randn({12, 12}, 0.3, rng));
      store.push_back(randn({1, 12}, 0.1, rng));
    }
    Fixture fx;
    for (auto& a : store) fx.params.push_back(&a);
    fx.build = [&](Tape<double>& tp, const std::vector<int>& ids) {
      const AttnNodes an{ids[1], ids[2], ids[3], ids[4], ids[5], ids[6], ids[7], ids[8]};
      return scalar_loss(tp, mha_global(tp, ids[0], an, 3));
    };
    out.push_back({"attention", fx.run(40, 1e-5, rng.split(1))});
  }

  {  // mixture-of-experts FFN (k < n, margins checked to stay off routing ties)
    const std::size_t n_exp = 4, k = 2, d = 8, n_tok = 5;
    std::vector<Arr<double>> store;
    store.push_back(randn({n_tok, d}, 0.8, rng));
    store.push_back(randn({d, n_exp}, 0.5, rng));   // router.w
    store.push_back(randn({1, n_exp}, 0.1, rng));   // router.b
    for (std::size_t e = 0; e < n_exp; ++e) {
      store.push_back(randn({d, 4 * d}, 0.3, rng));
      store.push_back(randn({1, 4 * d}, 0.1, rng));
      store.push_back(randn({4 * d, d}, 0.3, rng));
      store.push_back(randn({1, d}, 0.1, rng));
    }
    Fixture fx;
    for (auto& a : store) fx.params.push_back(&a);
    fx.build = [&, n_exp, k](Tape<double>& tp, const std::vector<int>& ids) {
      MoeNodes mn;
      mn.rw = ids[1];
      mn.rb = ids[2];
      for (std::size_t e = 0; e < n_exp; ++e)
        mn.experts.push_back({ids[3 + 4 * e], ids[4 + 4 * e], ids[5 + 4 * e], ids[6 + 4 * e]});
      return scalar_loss(tp, moe_ffn(tp, ids[0], mn, k));
    };
    out.push_back({"moe-ffn", fx.run(30, 1e-5, rng.split(2))});
  }

  auto block_fixture = [&](bool windowed) {
    const std::size_t d = 12, heads = 2;
    auto store = std::make_shared<std::vector<Arr<double>>>();
    auto win = std::make_shared<WindowMaps>();
    const std::size_t n_tok = windowed ? 8 : 4;  // 2x2x2 token grid when windowed
    if (windowed) *win = make_window_maps(2, 2);
    store->push_back(randn({n_tok, d}, 0.6, rng));
    store->push_back(randn({1, d}, 0.5, rng));  // cond
    for (int i = 0; i < 4; ++i) {
      store->push_back(randn({d, d}, 0.25, rng));
      store->push_back(randn({1, d}, 0.1, rng));
    }
    store->push_back(randn({d, 6 * d}, 0.2, rng));  // mod_w
    store->push_back(randn({1, 6 * d}, 0.2, rng));  // mod_b
    store->push_back(randn({d, 4 * d}, 0.25, rng));
    store->push_back(randn({1, 4 * d}, 0.1, rng));
    store->push_back(randn({4 * d, d}, 0.25, rng));
    store->push_back(randn({1, d}, 0.1, rng));
    if (windowed) {
      store->push_back(randn({d * 8, d}, 0.15, rng));
      store->push_back(randn({1, d}, 0.1, rng));
    }
    Fixture fx;
    for (auto& a : *store) fx.params.push_back(&a);
    fx.build = [store, win, windowed, heads](Tape<double>& tp, const std::vector<int>& ids) {
      BlockNodes bn;
      bn.attn = {ids[2], ids[3], ids[4], ids[5], ids[6], ids[7], ids[8], ids[9]};
      bn.mod_w = ids[10];
      bn.mod_b = ids[11];
      bn.use_moe = false;
      bn.dense = {ids[12], ids[13], ids[14], ids[15]};
      if (windowed) {
        bn.win_w = ids[16];
        bn.win_b = ids[17];
      }
      const int y = dit_block(tp, ids[0], ids[1], bn, heads, 1, windowed ? win.get() : nullptr);
      return tp.scale(tp.sum_sq(y), 1.0 / static_cast<double>(tp.val(y).numel()));
    };
    return fx;
  };
  out.push_back({"adaln-block", block_fixture(false).run(40, 1e-5, rng.split(3))});
  out.push_back({"window-block", block_fixture(true).run(40, 1e-5, rng.split(4))});

  {  // final projection: layer norm, shift/scale modulation, linear head
    const std::size_t d = 12, ch = 9, n_tok = 5;
    std::vector<Arr<double>> store;
    store.push_back(randn({n_tok, d}, 0.7, rng));
    store.push_back(randn({1, d}, 0.4, rng));       // cond
    store.push_back(randn({d, 2 * d}, 0.2, rng));   // mod_w
    store.push_back(randn({1, 2 * d}, 0.2, rng));   // mod_b
    store.push_back(randn({d, ch}, 0.3, rng));      // head w
    store.push_back(randn({1, ch}, 0.1, rng));      // head b
    Fixture fx;
    for (auto& a : store) fx.params.push_back(&a);
    fx.build = [&, d, n_tok](Tape<double>& tp, const std::vector<int>& ids) {
      const int mod = linear_rows(tp, tp.gelu(ids[1]), ids[2], ids[3]);
      const int shift = tp.slice_cols(mod, 0, d);
      const int scl = tp.slice_cols(mod, d, d);
      const int one = tp.input(Arr<double>::full({std::size_t(1), d}, 1.0));
      const int h = tp.add(
          tp.mul(tp.layer_norm(ids[0]), tp.broadcast_rows(tp.add(one, scl), n_tok)),
          tp.broadcast_rows(shift, n_tok));
      return scalar_loss(tp, linear_rows(tp, h, ids[4], ids[5]));
    };
    out.push_back({"final-projection", fx.run(40, 1e-5, rng.split(5))});
  }

  {  // trilinear grid read-back
    const std::size_t V = 4;
    std::vector<Arr<double>> store;
    store.push_back(randn({V * V * V, 3}, 0.5, rng));
    std::vector<std::array<float, 3>> queries;
    Rng qr = rng.split(6);
    for (int i = 0; i < 20; ++i)
      queries.push_back({static_cast<float>(2.0 * qr.next_double() - 1.0),
                         static_cast<float>(2.0 * qr.next_double() - 1.0),
                         static_cast<float>(2.0 * qr.next_double() - 1.0)});
    Fixture fx;
    fx.params.push_back(&store[0]);
    fx.build = [&, V, queries](Tape<double>& tp, const std::vector<int>& ids) {
      return scalar_loss(tp, tape_devox(tp, ids[0], queries, V));
    };
    out.push_back({"devoxelize", fx.run(48, 1e-5, rng.split(7))});
  }

  return out;
}

inline LayerCheck gradcheck_end_to_end() {
  ModelConfig cfg;
  cfg.V = 8;
  cfg.p = 2;
  cfg.D = 24;
  cfg.encoder_depth = 1;
  cfg.encoder_heads = 2;
  cfg.decoder_depth = 2;
  cfg.decoder_width = 24;
  cfg.wa_layers = {1};
  cfg.R = 2;
  cfg.n_experts = 2;
  cfg.k = 2;  // k = n keeps routing fixed under perturbation
  cfg.C = 2;
  cfg.use_moe = true;
  cfg.mask_mode = MaskMode::fb;
  cfg.r_f = 0.5;
  cfg.r_b = 0.7;

  Fd3dModel<double> model(cfg, 99);
  // The head and modulation maps are zero at init, which would zero most
  // gradients; perturb them so the check exercises every path.
  Rng prng(424242);
  for (const std::string& name : model.params().names())
    if (name.find("mod_w") != std::string::npos || name == "final.w" || name == "final.b")
      init_trunc_normal(model.params().at(name), 0.05, prng);

  const PointCloud x0 = synth_shape(ShapeKind::sphere, 48, 7);
  const Schedule sched = make_schedule(10);
  const PointCloud eps = sample_gaussian_cloud(48, 11);
  const PointCloud x_t = q_sample(x0, 4, eps, sched);
  const std::uint64_t mask_seed = 31;

  auto run = [&](std::vector<std::vector<double>>* grads) {
    auto fw = model.forward(x_t, 4, 1, mask_seed);
    const auto loss = dual_loss(fw.tape, fw.eps_pred, eps, fw.point_mask, 0.1);
    if (grads) {
      fw.tape.backward(loss.total);
      grads->clear();
      for (const auto& [name, id] : fw.nodes.order) grads->push_back(fw.tape.grad(id).data);
    }
    return loss.total_v;
  };

  std::vector<Arr<double>*> params;
  for (const std::string& name : model.params().names())
    params.push_back(&model.params().at(name));

  LayerCheck chk;
  chk.name = "end-to-end-micro";
  chk.report = grad_check([&] { return run(nullptr); },
                          [&] {
                            std::vector<std::vector<double>> g;
                            run(&g);
                            return g;
                          },
                          params, 4, 1e-5, Rng(5150));
  return chk;
}

}  // namespace fd3d
