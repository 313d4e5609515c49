#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fd3d/diffusion.hpp"
#include "fd3d/masking.hpp"
#include "fd3d/nn.hpp"
#include "fd3d/voxel.hpp"

namespace fd3d {

enum class MaskMode { fb, random, none };

inline MaskMode mask_mode_from_string(const std::string& s) {
  if (s == "fb") return MaskMode::fb;
  if (s == "random") return MaskMode::random;
  if (s == "none") return MaskMode::none;
  throw std::invalid_argument("unknown mask mode: " + s);
}

inline const char* mask_mode_name(MaskMode m) {
  switch (m) {
    case MaskMode::fb: return "fb";
    case MaskMode::random: return "random";
    case MaskMode::none: return "none";
  }
  return "?";
}

// Architecture and masking settings. Defaults are the full-size training
// configuration; tests and the desk profile shrink from here.
struct ModelConfig {
  std::size_t V = 32;
  std::size_t p = 4;
  std::size_t D = 384;
  std::size_t encoder_depth = 12;
  std::size_t encoder_heads = 6;
  std::size_t decoder_depth = 4;
  std::size_t decoder_width = 384;
  std::vector<std::size_t> wa_layers = {1, 3};
  std::size_t R = 4;
  std::size_t n_experts = 6;
  std::size_t k = 2;
  std::size_t C = 3;
  bool use_moe = true;
  MaskMode mask_mode = MaskMode::fb;
  double r_f = 0.95;
  double r_b = 0.99;

  bool operator==(const ModelConfig&) const = default;

  std::size_t tokens() const {
    const std::size_t g = V / p;
    return g * g * g;
  }

  void validate() const {
    check_voxel_res(V);
    if (p == 0 || V % p != 0) throw std::invalid_argument("patch size must divide voxel resolution");
    if (D == 0 || D % 6 != 0) throw std::invalid_argument("model width must be divisible by 6");
    if (encoder_heads == 0 || D % encoder_heads != 0)
      throw std::invalid_argument("head count must divide model width");
    if (decoder_width == 0 || decoder_width % 6 != 0 || decoder_width % encoder_heads != 0)
      throw std::invalid_argument("head count must divide decoder width");
    if (encoder_depth == 0 || decoder_depth == 0)
      throw std::invalid_argument("depths must be positive");
    for (std::size_t l : wa_layers)
      if (l >= decoder_depth) throw std::invalid_argument("window layer index out of range");
    if (!wa_layers.empty()) {
      if (R == 0 || (V / p) % R != 0)
        throw std::invalid_argument("window size must divide token grid");
    }
    if (use_moe && (n_experts == 0 || k == 0 || k > n_experts))
      throw std::invalid_argument("moe: k must be in [1, n_experts]");
    if (C == 0) throw std::invalid_argument("class count must be positive");
    if (r_f < 0.0 || r_f > 1.0 || r_b < 0.0 || r_b > 1.0)
      throw std::invalid_argument("mask ratio out of [0, 1]");
  }
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["V"] = c.V;
  j["p"] = c.p;
  j["D"] = c.D;
  j["encoder_depth"] = c.encoder_depth;
  j["encoder_heads"] = c.encoder_heads;
  j["decoder_depth"] = c.decoder_depth;
  j["decoder_width"] = c.decoder_width;
  j["wa_layers"] = c.wa_layers;
  j["R"] = c.R;
  j["n_experts"] = c.n_experts;
  j["k"] = c.k;
  j["C"] = c.C;
  j["use_moe"] = c.use_moe;
  j["mask_mode"] = mask_mode_name(c.mask_mode);
  j["r_f"] = c.r_f;
  j["r_b"] = c.r_b;
  return j;
}

// Strict parser: defaults fill absent fields, unknown keys are an error.
inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  static const char* known[] = {"V", "p", "D", "encoder_depth", "encoder_heads",
                                "decoder_depth", "decoder_width", "wa_layers", "R",
                                "n_experts", "k", "C", "use_moe", "mask_mode", "r_f", "r_b"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* n : known) ok = ok || it.key() == n;
    if (!ok) throw std::invalid_argument("unknown config key: model." + it.key());
  }
  ModelConfig c;
  c.V = j.value("V", c.V);
  c.p = j.value("p", c.p);
  c.D = j.value("D", c.D);
  c.encoder_depth = j.value("encoder_depth", c.encoder_depth);
  c.encoder_heads = j.value("encoder_heads", c.encoder_heads);
  c.decoder_depth = j.value("decoder_depth", c.decoder_depth);
  c.decoder_width = j.value("decoder_width", c.decoder_width);
  c.wa_layers = j.value("wa_layers", c.wa_layers);
  c.R = j.value("R", c.R);
  c.n_experts = j.value("n_experts", c.n_experts);
  c.k = j.value("k", c.k);
  c.C = j.value("C", c.C);
  c.use_moe = j.value("use_moe", c.use_moe);
  if (j.contains("mask_mode")) c.mask_mode = mask_mode_from_string(j.at("mask_mode"));
  c.r_f = j.value("r_f", c.r_f);
  c.r_b = j.value("r_b", c.r_b);
  c.validate();
  return c;
}

// Arithmetic cost ledger (multiply-accumulates and raw attention-score
// entries), split by stage. Token masking enters through L_u.
struct FlopLedger {
  std::size_t L = 0, L_u = 0;
  double enc_score_entries = 0, enc_attn_macs = 0, enc_ffn_macs = 0;
  double dec_score_entries = 0, dec_attn_macs = 0, dec_ffn_macs = 0;
  double proj_macs = 0;

  double total_macs() const { return enc_attn_macs + enc_ffn_macs + dec_attn_macs + dec_ffn_macs + proj_macs; }
  double score_entries() const { return enc_score_entries + dec_score_entries; }
};

inline FlopLedger count_flops(const ModelConfig& cfg, std::size_t L_f) {
  const std::size_t L = cfg.tokens();
  if (L_f > L) throw std::invalid_argument("count_flops: L_f exceeds token count");
  FlopLedger led;
  led.L = L;
  switch (cfg.mask_mode) {
    case MaskMode::fb:
      led.L_u = L - masked_count(cfg.r_f, L_f) - masked_count(cfg.r_b, L - L_f);
      break;
    case MaskMode::random:
      led.L_u = L - masked_count(cfg.r_b, L);
      break;
    case MaskMode::none:
      led.L_u = L;
      break;
  }

  const double D = static_cast<double>(cfg.D);
  const double Dd = static_cast<double>(cfg.decoder_width);
  const double nu = static_cast<double>(led.L_u);
  const double nl = static_cast<double>(L);
  const double H = static_cast<double>(cfg.encoder_heads);
  const double p3 = static_cast<double>(cfg.p * cfg.p * cfg.p);

  // Encoder: global attention over L_u tokens.
  led.enc_score_entries = cfg.encoder_depth * H * nu * nu;
  led.enc_attn_macs = cfg.encoder_depth * (4.0 * nu * D * D + 2.0 * nu * nu * D);
  const double expert_macs = 8.0 * D * D;  // D->4D->D
  led.enc_ffn_macs =
      cfg.encoder_depth *
      (cfg.use_moe ? nu * (D * cfg.n_experts + cfg.k * expert_macs) : nu * expert_macs);
  led.proj_macs += cfg.encoder_depth * 6.0 * D * D;  // adaLN modulation

  // Decoder: full token count; window blocks attend over L/R^3 folded rows.
  const std::size_t n_wa = cfg.wa_layers.size();
  const std::size_t n_global = cfg.decoder_depth - n_wa;
  led.dec_score_entries += n_global * H * nl * nl;
  led.dec_attn_macs += n_global * (4.0 * nl * Dd * Dd + 2.0 * nl * nl * Dd);
  if (n_wa > 0) {
    const double r3 = static_cast<double>(cfg.R * cfg.R * cfg.R);
    const double nw = nl / r3;
    led.dec_score_entries += n_wa * H * nw * nw;
    led.dec_attn_macs += n_wa * (4.0 * nw * Dd * Dd + 2.0 * nw * nw * Dd);
    led.proj_macs += n_wa * nw * (Dd * r3) * Dd;  // fold projection
  }
  led.dec_ffn_macs = cfg.decoder_depth * nl * 8.0 * Dd * Dd;
  led.proj_macs += cfg.decoder_depth * 6.0 * Dd * Dd;

  // Token embed, conditioning MLP, bridge, final projection.
  led.proj_macs += nl * 3.0 * p3 * D;
  led.proj_macs += 2.0 * D * D;
  if (cfg.D != cfg.decoder_width) led.proj_macs += nu * D * Dd;
  led.proj_macs += 2.0 * D * Dd + nl * Dd * 3.0 * p3;
  return led;
}

// Masked diffusion transformer over voxelized point clouds. The forward pass
// voxelizes x_t, patchifies to L tokens, drops masked tokens before the
// encoder, restores the sequence with a learned mask token plus positional
// embeddings for the decoder, and reads the per-point noise prediction back
// off the output grid trilinearly.
template <class T>
class Fd3dModel {
 public:
  Fd3dModel(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    patch_ = make_patch_layout(cfg_.V, cfg_.p);
    if (!cfg_.wa_layers.empty()) win_ = make_window_maps(cfg_.V / cfg_.p, cfg_.R);
    pos_enc_ = pos_embed_3d<T>(patch_.origins, cfg_.D);
    pos_dec_ = pos_embed_3d<T>(patch_.origins, cfg_.decoder_width);
    build_params(init_seed);
  }

  const ModelConfig& config() const { return cfg_; }
  const PatchLayout& patch_layout() const { return patch_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  struct Forward {
    Tape<T> tape;
    NodeMap nodes;
    int eps_pred = -1;
    MaskVector mask;
    PatchLabels labels;
    std::vector<std::uint8_t> point_mask;
    std::vector<std::vector<std::uint32_t>> routing;  // encoder layer x expert
    std::size_t decoder_rows = 0;
  };

  Forward forward(const PointCloud& x_t, std::size_t t, int cls, std::uint64_t mask_seed,
                  bool enable_masking = true) const {
    if (t < 1) throw std::invalid_argument("timestep out of range");
    if (cls < 0 || static_cast<std::size_t>(cls) >= cfg_.C)
      throw std::invalid_argument("unknown class id: " + std::to_string(cls));

    Forward fw;
    const VoxelGrid<T> grid = voxelize<T>(x_t, cfg_.V);
    fw.labels = classify_patches(grid, cfg_.p);
    if (!enable_masking || cfg_.mask_mode == MaskMode::none) {
      fw.mask.m.assign(patch_.L, 0);
      fw.mask.L_u = patch_.L;
    } else if (cfg_.mask_mode == MaskMode::fb) {
      fw.mask = build_mask(fw.labels, cfg_.r_f, cfg_.r_b, mask_seed);
    } else {
      fw.mask = random_mask(patch_.L, cfg_.r_b, mask_seed);
    }
    fw.point_mask = point_patch_mask(x_t, cfg_.V, cfg_.p, fw.mask);

    Tape<T>& tp = fw.tape;
    fw.nodes = bind_params(tp, store_);
    const NodeMap& nm = fw.nodes;

    // Token embedding plus fixed positional encoding.
    const int tokens = tp.input(patchify(grid, patch_));
    int x = linear_rows(tp, tokens, nm.at("embed.w"), nm.at("embed.b"));
    x = tp.add(x, tp.input(pos_enc_));

    // Conditioning row: MLP of the sinusoidal timestep embedding plus the
    // class table row.
    const int ts = tp.input(timestep_sin_embed<T>(t, cfg_.D));
    const int temb = linear_rows(
        tp, tp.gelu(linear_rows(tp, ts, nm.at("temb.w1"), nm.at("temb.b1"))), nm.at("temb.w2"),
        nm.at("temb.b2"));
    const int crow = tp.gather_rows(nm.at("cls.table"), {static_cast<std::size_t>(cls)});
    const int cond = tp.add(temb, crow);

    // Encoder on the unmasked tokens only.
    const std::vector<std::size_t> keep = unmasked_indices(fw.mask);
    const std::vector<std::size_t> drop = masked_indices(fw.mask);
    int xe = tp.gather_rows(x, keep);
    fw.routing.assign(cfg_.encoder_depth, {});
    for (std::size_t i = 0; i < cfg_.encoder_depth; ++i) {
      const BlockNodes bn = block_nodes(nm, "enc" + std::to_string(i), cfg_.use_moe, false);
      xe = dit_block(tp, xe, cond, bn, cfg_.encoder_heads, cfg_.k, nullptr,
                     cfg_.use_moe ? &fw.routing[i] : nullptr);
    }
    if (cfg_.D != cfg_.decoder_width)
      xe = linear_rows(tp, xe, nm.at("bridge.w"), nm.at("bridge.b"));

    // Restore the full sequence: encoder outputs at their original slots,
    // mask token plus positional embedding at masked ones.
    const int pos_dec = tp.input(pos_dec_);
    int dec = tp.scatter_rows_add(xe, keep, patch_.L);
    if (!drop.empty()) {
      const int fill = tp.add(tp.broadcast_rows(nm.at("mask_token"), drop.size()),
                              tp.gather_rows(pos_dec, drop));
      dec = tp.add(dec, tp.scatter_rows_add(fill, drop, patch_.L));
    }
    fw.decoder_rows = tp.val(dec).shape[0];

    for (std::size_t i = 0; i < cfg_.decoder_depth; ++i) {
      const bool wa = std::find(cfg_.wa_layers.begin(), cfg_.wa_layers.end(), i) !=
                      cfg_.wa_layers.end();
      const BlockNodes bn = block_nodes(nm, "dec" + std::to_string(i), false, wa);
      dec = dit_block(tp, dec, cond, bn, cfg_.encoder_heads, cfg_.k, wa ? &win_ : nullptr,
                      nullptr);
    }

    // Final layer: shift/scale modulation only, zero-initialized projection.
    const std::size_t dd = cfg_.decoder_width;
    const int fmod = linear_rows(tp, tp.gelu(cond), nm.at("final.mod_w"), nm.at("final.mod_b"));
    const int fshift = tp.slice_cols(fmod, 0, dd);
    const int fscale = tp.slice_cols(fmod, dd, dd);
    const int one = tp.input(Arr<T>::full({std::size_t(1), dd}, T(1)));
    const int ln = tp.layer_norm(dec);
    const int h = tp.add(tp.mul(ln, tp.broadcast_rows(tp.add(one, fscale), patch_.L)),
                         tp.broadcast_rows(fshift, patch_.L));
    const int out_tokens = linear_rows(tp, h, nm.at("final.w"), nm.at("final.b"));

    const int grid_rows = tape_unpatchify(tp, out_tokens, patch_);
    fw.eps_pred = tape_devox(tp, grid_rows, x_t.points, cfg_.V);
    if (!all_finite(tp.val(fw.eps_pred))) throw std::runtime_error("non-finite model output");
    return fw;
  }

  // Inference-time noise prediction; masking disabled.
  PointCloud predict_eps(const PointCloud& x_t, std::size_t t, int cls) const {
    Forward fw = forward(x_t, t, cls, 0, false);
    const Arr<T>& P = fw.tape.val(fw.eps_pred);
    PointCloud out;
    out.points.resize(P.shape[0]);
    for (std::size_t i = 0; i < out.points.size(); ++i)
      for (int a = 0; a < 3; ++a) out.points[i][a] = static_cast<float>(P.data[i * 3 + a]);
    return out;
  }

 private:
  void build_params(std::uint64_t init_seed) {
    Rng rng = Rng(init_seed).split(0x1217u);
    const double sigma = 0.02;
    const std::size_t p3 = cfg_.p * cfg_.p * cfg_.p;
    const std::size_t D = cfg_.D, Dd = cfg_.decoder_width;

    auto weight = [&](const std::string& name, std::size_t r, std::size_t c) {
      init_trunc_normal(store_.create(name, {r, c}), sigma, rng);
    };
    auto bias = [&](const std::string& name, std::size_t c) { store_.create(name, {std::size_t(1), c}); };

    weight("embed.w", 3 * p3, D);
    bias("embed.b", D);
    weight("temb.w1", D, D);
    bias("temb.b1", D);
    weight("temb.w2", D, D);
    bias("temb.b2", D);
    weight("cls.table", cfg_.C, D);
    weight("mask_token", 1, Dd);

    auto attn = [&](const std::string& pre, std::size_t d) {
      weight(pre + ".wq", d, d);
      bias(pre + ".bq", d);
      weight(pre + ".wk", d, d);
      bias(pre + ".bk", d);
      weight(pre + ".wv", d, d);
      bias(pre + ".bv", d);
      weight(pre + ".wo", d, d);
      bias(pre + ".bo", d);
    };
    // Modulation maps start at zero with gate biases at one, so every block
    // begins as x + Sublayer(norm(x)) and conditioning has no effect until
    // training moves the weights.
    auto modulation = [&](const std::string& pre, std::size_t d) {
      store_.create(pre + ".mod_w", {D, 6 * d});
      Arr<T>& b = store_.create(pre + ".mod_b", {std::size_t(1), 6 * d});
      for (std::size_t j = 0; j < d; ++j) {
        b.data[2 * d + j] = T(1);
        b.data[5 * d + j] = T(1);
      }
    };
    auto mlp = [&](const std::string& pre, std::size_t d) {
      weight(pre + ".w1", d, 4 * d);
      bias(pre + ".b1", 4 * d);
      weight(pre + ".w2", 4 * d, d);
      bias(pre + ".b2", d);
    };

    for (std::size_t i = 0; i < cfg_.encoder_depth; ++i) {
      const std::string pre = "enc" + std::to_string(i);
      attn(pre + ".attn", D);
      modulation(pre, D);
      if (cfg_.use_moe) {
        weight(pre + ".router.w", D, cfg_.n_experts);
        bias(pre + ".router.b", cfg_.n_experts);
        for (std::size_t e = 0; e < cfg_.n_experts; ++e) mlp(pre + ".ex" + std::to_string(e), D);
      } else {
        mlp(pre + ".ffn", D);
      }
    }
    if (D != Dd) {
      weight("bridge.w", D, Dd);
      bias("bridge.b", Dd);
    }
    for (std::size_t i = 0; i < cfg_.decoder_depth; ++i) {
      const std::string pre = "dec" + std::to_string(i);
      attn(pre + ".attn", Dd);
      modulation(pre, Dd);
      mlp(pre + ".ffn", Dd);
      if (std::find(cfg_.wa_layers.begin(), cfg_.wa_layers.end(), i) != cfg_.wa_layers.end()) {
        const std::size_t r3 = cfg_.R * cfg_.R * cfg_.R;
        weight(pre + ".win.w", Dd * r3, Dd);
        bias(pre + ".win.b", Dd);
      }
    }
    // Zero-initialized output head: the model predicts zero noise at init.
    store_.create("final.mod_w", {D, 2 * Dd});
    store_.create("final.mod_b", {std::size_t(1), 2 * Dd});
    store_.create("final.w", {Dd, 3 * p3});
    store_.create("final.b", {std::size_t(1), 3 * p3});
  }

  BlockNodes block_nodes(const NodeMap& nm, const std::string& pre, bool moe, bool wa) const {
    BlockNodes bn;
    bn.attn = {nm.at(pre + ".attn.wq"), nm.at(pre + ".attn.bq"), nm.at(pre + ".attn.wk"),
               nm.at(pre + ".attn.bk"), nm.at(pre + ".attn.wv"), nm.at(pre + ".attn.bv"),
               nm.at(pre + ".attn.wo"), nm.at(pre + ".attn.bo")};
    bn.mod_w = nm.at(pre + ".mod_w");
    bn.mod_b = nm.at(pre + ".mod_b");
    bn.use_moe = moe;
    if (moe) {
      bn.moe.rw = nm.at(pre + ".router.w");
      bn.moe.rb = nm.at(pre + ".router.b");
      bn.moe.experts.resize(cfg_.n_experts);
      for (std::size_t e = 0; e < cfg_.n_experts; ++e) {
        const std::string ep = pre + ".ex" + std::to_string(e);
        bn.moe.experts[e] = {nm.at(ep + ".w1"), nm.at(ep + ".b1"), nm.at(ep + ".w2"),
                             nm.at(ep + ".b2")};
      }
    } else {
      bn.dense = {nm.at(pre + ".ffn.w1"), nm.at(pre + ".ffn.b1"), nm.at(pre + ".ffn.w2"),
                  nm.at(pre + ".ffn.b2")};
    }
    if (wa) {
      bn.win_w = nm.at(pre + ".win.w");
      bn.win_b = nm.at(pre + ".win.b");
    }
    return bn;
  }

  ModelConfig cfg_;
  ParamStore<T> store_;
  PatchLayout patch_;
  WindowMaps win_;
  Arr<T> pos_enc_, pos_dec_;
};

// ---- checkpoint container ----
//
// "FD3D", u32 version, u32 json length, meta JSON, then length-prefixed
// parameter records (u32 name length, name, u32 rank, u32 dims[], f32 data)
// until EOF. Model parameters come first in store order; optimizer state
// follows under "opt." names.

struct CheckpointData {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Arr<float>>> records;
};

namespace detail {

inline void write_u32(std::ofstream& f, std::uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint32_t read_u32_ck(std::ifstream& f) {
  std::uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!f) throw std::runtime_error("truncated checkpoint");
  return v;
}

inline void write_record(std::ofstream& f, const std::string& name, const Arr<float>& a) {
  write_u32(f, static_cast<std::uint32_t>(name.size()));
  f.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u32(f, static_cast<std::uint32_t>(a.rank()));
  for (std::size_t d : a.shape) write_u32(f, static_cast<std::uint32_t>(d));
  f.write(reinterpret_cast<const char*>(a.data.data()),
          static_cast<std::streamsize>(a.numel() * sizeof(float)));
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const nlohmann::json& meta,
                             const std::vector<std::pair<std::string, const Arr<float>*>>& records) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write("FD3D", 4);
  detail::write_u32(f, 1);
  const std::string js = meta.dump();
  detail::write_u32(f, static_cast<std::uint32_t>(js.size()));
  f.write(js.data(), static_cast<std::streamsize>(js.size()));
  for (const auto& [name, arr] : records) detail::write_record(f, name, *arr);
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline void save_checkpoint(const std::string& path, const Fd3dModel<float>& model,
                            nlohmann::json extra_meta = {},
                            const std::vector<std::pair<std::string, const Arr<float>*>>&
                                extra_records = {}) {
  nlohmann::json meta = std::move(extra_meta);
  meta["model"] = model_config_to_json(model.config());
  std::vector<std::pair<std::string, const Arr<float>*>> recs;
  for (const std::string& name : model.params().names())
    recs.emplace_back(name, &model.params().at(name));
  for (const auto& r : extra_records) recs.push_back(r);
  write_checkpoint(path, meta, recs);
}

inline CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  char magic[4] = {};
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "FD3D")
    throw std::runtime_error("bad checkpoint magic: " + path);
  const std::uint32_t version = detail::read_u32_ck(f);
  if (version != 1) throw std::runtime_error("unsupported checkpoint version");
  const std::uint32_t jlen = detail::read_u32_ck(f);
  std::string js(jlen, '\0');
  f.read(js.data(), jlen);
  if (!f) throw std::runtime_error("truncated checkpoint");
  CheckpointData ck;
  ck.meta = nlohmann::json::parse(js);
  while (true) {
    std::uint32_t nlen = 0;
    f.read(reinterpret_cast<char*>(&nlen), sizeof nlen);
    if (f.eof()) break;
    if (!f) throw std::runtime_error("truncated checkpoint");
    std::string name(nlen, '\0');
    f.read(name.data(), nlen);
    const std::uint32_t rank = detail::read_u32_ck(f);
    std::vector<std::size_t> shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d) shape[d] = detail::read_u32_ck(f);
    Arr<float> a(shape);
    f.read(reinterpret_cast<char*>(a.data.data()),
           static_cast<std::streamsize>(a.numel() * sizeof(float)));
    if (!f) throw std::runtime_error("truncated checkpoint");
    ck.records.emplace_back(std::move(name), std::move(a));
  }
  return ck;
}

// Rebuild a model from checkpoint data. When `expected` is given, any
// difference from the stored configuration is an error.
inline Fd3dModel<float> load_model(const CheckpointData& ck, const ModelConfig* expected = nullptr) {
  if (!ck.meta.contains("model")) throw std::runtime_error("checkpoint missing model config");
  const ModelConfig cfg = model_config_from_json(ck.meta.at("model"));
  if (expected && !(*expected == cfg))
    throw std::runtime_error("config mismatch: checkpoint was built with different settings");
  Fd3dModel<float> model(cfg, 0);
  std::size_t filled = 0;
  for (const auto& [name, arr] : ck.records) {
    if (!model.params().has(name)) {
      if (name.rfind("opt.", 0) == 0) continue;  // optimizer state, handled by the trainer
      throw std::runtime_error("config mismatch: unexpected parameter " + name);
    }
    Arr<float>& dst = model.params().at(name);
    if (dst.shape != arr.shape)
      throw std::runtime_error("config mismatch: parameter shape for " + name);
    dst.data = arr.data;
    ++filled;
  }
  if (filled != model.params().names().size())
    throw std::runtime_error("config mismatch: checkpoint is missing parameters");
  return model;
}

inline Fd3dModel<float> load_model_file(const std::string& path,
                                        const ModelConfig* expected = nullptr) {
  const CheckpointData ck = read_checkpoint(path);
  return load_model(ck, expected);
}

}  // namespace fd3d
