#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffx/checkpoint.hpp"
#include "diffx/config.hpp"
#include "diffx/data_synth.hpp"
#include "diffx/metrics.hpp"
#include "diffx/optim.hpp"
#include "diffx/png_io.hpp"
#include "diffx/tokenizer.hpp"

namespace diffx {

namespace fs = std::filesystem;

// Seed streams derived from the root seed.
namespace streams {
inline constexpr uint64_t kVaeInit = 1;
inline constexpr uint64_t kEmbedderInit = 2;
inline constexpr uint64_t kUNetInit = 3;
inline constexpr uint64_t kDiffusionOrder = 4;
inline constexpr uint64_t kVaeOrder = 5;
inline constexpr uint64_t kPosterior = 6;
inline constexpr uint64_t kSampler = 7;
inline constexpr uint64_t kDataSplit = 1'000'000;
inline constexpr uint64_t kVaeStep = 1'000'000'000;
inline constexpr uint64_t kDiffusionStep = 2'000'000'000;
}  // namespace streams

inline const std::array<std::string, 3> kSplits{"train", "val", "test"};

// ---------------------------------------------------------------- data

inline std::string record_id(const std::string& split, int64_t i) {
  std::string n = std::to_string(i);
  return split + "_" + std::string(n.size() < 5 ? 5 - n.size() : 0, '0') + n;
}

inline std::vector<DatasetRecord> synthesize_split(const RunConfig& cfg, size_t split, int64_t n) {
  std::vector<DatasetRecord> out;
  for (int64_t i = 0; i < n; ++i) {
    const uint64_t s = derive_seed(cfg.seed, streams::kDataSplit * (split + 1) + static_cast<uint64_t>(i));
    SceneSpec spec = random_scene_spec(s, cfg.image_size, static_cast<int>(cfg.min_objects), static_cast<int>(cfg.max_objects));
    out.push_back(generate_scene(spec, record_id(kSplits[split], i)));
  }
  return out;
}

inline std::string data_config_hash(const RunConfig& cfg) {
  std::string text = "seed = " + std::to_string(cfg.seed) + "\n";
  for (const auto& k : RunConfig::keys())
    if (k.rfind("data.", 0) == 0 && k != "data.path") text += k + " = " + cfg.get(k) + "\n";
  return hex64(fnv1a(text));
}

/// Writes train/val/test under the data directory and returns the combined
/// hash of the three manifests.
inline uint64_t cmd_datagen(const RunConfig& cfg, bool force, std::ostream& log) {
  cfg.validate();
  const fs::path dir = cfg.data_dir();
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw DataError("output directory " + dir.string() + " is not empty (use --force to overwrite)");
    fs::remove_all(dir);
  }
  const int64_t counts[3] = {cfg.data_train, cfg.data_val, cfg.data_test};
  const std::string chash = data_config_hash(cfg);
  std::string joined;
  for (size_t s = 0; s < 3; ++s) {
    const uint64_t h = write_dataset(synthesize_split(cfg, s, counts[s]), dir / kSplits[s], chash);
    log << "manifest " << kSplits[s] << " " << hex64(h) << " (" << counts[s] << " records)\n";
    joined += hex64(h);
  }
  const uint64_t total = fnv1a(joined);
  log << "dataset hash " << hex64(total) << "\n";
  return total;
}

inline std::vector<DatasetRecord> load_split(const RunConfig& cfg, const std::string& split) {
  auto recs = read_dataset(cfg.data_dir() / split);
  for (size_t i = 0; i < recs.size(); ++i) {
    const auto& r = recs[i];
    if (r.mask.height != cfg.image_size || r.mask.width != cfg.image_size)
      throw DataError("record " + std::to_string(i) + " (" + r.id + ") is " + std::to_string(r.mask.width) + " px, config expects data.image_size = " +
                      std::to_string(cfg.image_size));
    for (Modality m : cfg.modalities)
      if (!r.images.count(m)) throw DataError("record " + std::to_string(i) + " (" + r.id + ") has no " + to_string(m) + " image");
  }
  return recs;
}

inline ModalBundle<float> bundle_of(const std::vector<DatasetRecord>& recs, const std::vector<size_t>& idx,
                                    const std::vector<Modality>& mods) {
  std::vector<const DatasetRecord*> p;
  for (size_t i : idx) p.push_back(&recs[i]);
  return to_bundle<float>(p, mods);
}

inline std::vector<size_t> epoch_order(size_t n, uint64_t seed, int64_t epoch) {
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  Rng rng(derive_seed(seed, static_cast<uint64_t>(epoch)));
  for (size_t i = n; i-- > 1;) std::swap(idx[i], idx[static_cast<size_t>(rng.integer(0, static_cast<int64_t>(i)))]);
  return idx;
}

/// Indices of the minibatch for a global step: epochs are fresh permutations.
inline std::vector<size_t> batch_indices(size_t n, int64_t batch, uint64_t seed, int64_t step) {
  const int64_t spe = (static_cast<int64_t>(n) + batch - 1) / batch;
  const auto order = epoch_order(n, seed, step / spe);
  const size_t lo = static_cast<size_t>((step % spe) * batch);
  const size_t hi = std::min(n, lo + static_cast<size_t>(batch));
  return {order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi)};
}

inline std::vector<size_t> range_indices(size_t lo, size_t hi) {
  std::vector<size_t> v(hi - lo);
  std::iota(v.begin(), v.end(), lo);
  return v;
}

// ---------------------------------------------------------------- checkpoints

inline nlohmann::json vae_config_json(const VaeConfig& v) {
  std::vector<std::string> mods;
  for (Modality m : v.modalities) mods.push_back(to_string(m));
  return {{"modalities", mods},           {"image_size", v.image_size}, {"stem_width", v.stem_width},
          {"widths", v.widths},           {"latent_channels", v.latent_channels}, {"groups", v.groups},
          {"lp_levels", v.lp_levels},     {"use_lp", v.use_lp},         {"allow_unimodal", v.allow_unimodal}};
}

inline VaeConfig vae_config_from_json(const nlohmann::json& j) {
  try {
    VaeConfig v;
    v.modalities.clear();
    for (const auto& m : j.at("modalities")) v.modalities.push_back(parse_modality(m.get<std::string>()));
    v.image_size = j.at("image_size").get<int64_t>();
    v.stem_width = j.at("stem_width").get<int64_t>();
    v.widths = j.at("widths").get<std::vector<int64_t>>();
    v.latent_channels = j.at("latent_channels").get<int64_t>();
    v.groups = j.at("groups").get<int64_t>();
    v.lp_levels = j.at("lp_levels").get<int>();
    v.use_lp = j.at("use_lp").get<bool>();
    v.allow_unimodal = j.at("allow_unimodal").get<bool>();
    v.validate();
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt VAE config in checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("invalid VAE config in checkpoint: ") + e.what());
  }
}

template <class T>
void add_optimizer_state(Checkpoint& ck, const Adam<T>& opt) {
  for (auto& [name, t] : opt.state()) ck.tensors.emplace_back("adam/" + name, t.template cast<float>());
}

template <class T>
void load_optimizer_state(const Checkpoint& ck, Adam<T>& opt) {
  std::map<std::string, Tensor<T>> st;
  for (const auto& [name, t] : ck.tensors)
    if (name.rfind("adam/", 0) == 0) st.emplace(name.substr(5), t.template cast<T>());
  if (st.empty()) throw CheckpointError(ck.kind + " checkpoint has no optimizer state; resume from last.ckpt");
  try {
    opt.load_state(st);
  } catch (const ShapeError& e) {
    throw CheckpointError(std::string("geometry mismatch in optimizer state: ") + e.what());
  }
}

inline std::unique_ptr<DpVae<float>> load_vae(const fs::path& path) {
  const Checkpoint ck = load_checkpoint(path, "vae");
  auto vae = std::make_unique<DpVae<float>>(vae_config_from_json(ck.meta.at("vae")), 0);
  ck.load_module(*vae, "vae/");
  return vae;
}

inline void append_line(const fs::path& p, const std::string& line) {
  std::ofstream out(p, std::ios::app);
  if (!out) throw DataError("cannot write " + p.string());
  out << line << "\n";
}

// ---------------------------------------------------------------- STEP 1: DP-VAE

struct VaeTrainResult {
  int64_t steps = 0;
  double best_val_mse = 0;
  double last_loss = 0;
  fs::path best, last;
};

/// Mean over modalities of the reconstruction MSE, decoding the posterior mean.
inline std::vector<double> reconstruction_mse(const DpVae<float>& vae, const std::vector<DatasetRecord>& recs) {
  NoGradGuard ng;
  const auto& mods = vae.config().modalities;
  std::vector<double> sse(mods.size(), 0.0);
  std::vector<double> count(mods.size(), 0.0);
  for (size_t lo = 0; lo < recs.size(); lo += 16) {
    auto b = bundle_of(recs, range_indices(lo, std::min(recs.size(), lo + 16)), mods);
    auto rec = vae.decode(vae.encode(b).mu.value());
    for (size_t m = 0; m < mods.size(); ++m)
      for (int64_t i = 0; i < rec[m].image.numel(); ++i) {
        const double d = static_cast<double>(rec[m].image[i]) - b[m].image[i];
        sse[m] += d * d;
        count[m] += 1;
      }
  }
  for (size_t m = 0; m < mods.size(); ++m) sse[m] = count[m] > 0 ? sse[m] / count[m] : 0.0;
  return sse;
}

inline VaeTrainResult train_vae(const RunConfig& cfg, const std::vector<DatasetRecord>& train,
                                const std::vector<DatasetRecord>& val, const fs::path& dir, const fs::path& resume,
                                std::ostream& log) {
  cfg.validate();
  if (train.empty()) throw DataError("training split is empty");
  const VaeConfig vcfg = cfg.vae_config();
  DpVae<float> vae(vcfg, derive_seed(cfg.seed, streams::kVaeInit));
  FeatureExtractor<float> fx;
  Adam<float> opt(vae.named_parameters(), WarmupConstant{cfg.vae_lr, cfg.vae_warmup}, 0.9, 0.999, 1e-8, cfg.clip_norm);
  int64_t step = 0;
  double best = std::numeric_limits<double>::infinity();
  fs::create_directories(dir);
  const fs::path log_path = dir / "log.jsonl";
  if (!resume.empty()) {
    const Checkpoint ck = load_checkpoint(resume, "vae");
    if (ck.meta.at("vae") != vae_config_json(vcfg))
      throw CheckpointError("geometry mismatch: checkpoint VAE config " + ck.meta.at("vae").dump() + " differs from " +
                            vae_config_json(vcfg).dump());
    ck.load_module(vae, "vae/");
    load_optimizer_state(ck, opt);
    step = ck.meta.at("step").get<int64_t>();
    best = ck.meta.at("best_val_mse").get<double>();
    opt.set_step_count(step);
    log << "resumed VAE at step " << step << "\n";
  } else {
    fs::remove(log_path);
  }

  const size_t n = train.size();
  const int64_t spe = (static_cast<int64_t>(n) + cfg.vae_batch - 1) / cfg.vae_batch;
  const int64_t total = cfg.vae_steps > 0 ? cfg.vae_steps : cfg.vae_epochs * spe;
  const int64_t period = cfg.vae_steps > 0 ? std::max(spe, cfg.log_every) : spe;
  const uint64_t order_seed = derive_seed(cfg.seed, streams::kVaeOrder);
  const auto& val_set = val.empty() ? train : val;
  auto save = [&](const fs::path& p, bool with_state, double val_mse) {
    Checkpoint ck;
    ck.kind = "vae";
    ck.config = cfg.to_json();
    ck.meta = {{"step", step}, {"best_val_mse", best}, {"val_mse", val_mse}, {"vae", vae_config_json(vcfg)}};
    ck.add_module(vae, "vae/");
    if (with_state) add_optimizer_state(ck, opt);
    save_checkpoint(p, ck);
  };

  VaeTrainResult res;
  double acc_total = 0, acc_mse = 0, acc_feat = 0, acc_kl = 0;
  int64_t acc_n = 0;
  while (step < total) {
    const auto idx = batch_indices(n, cfg.vae_batch, order_seed, step);
    const auto b = bundle_of(train, idx, vcfg.modalities);
    opt.zero_grad();
    const auto dist = vae.encode(b);
    Rng rng(derive_seed(cfg.seed, streams::kVaeStep + static_cast<uint64_t>(step)));
    const auto z = reparameterize(dist, rng.normal_tensor<float>(dist.mu.shape()));
    const auto loss = dp_vae_loss(b, vae.decode_vars(z), dist, cfg.vae_weights(), fx);
    loss.total.backward();
    opt.step();
    ++step;
    acc_total += loss.total.value()[0];
    acc_mse += loss.mse;
    acc_feat += loss.feat;
    acc_kl += loss.kl;
    ++acc_n;
    if (!std::isfinite(loss.total.value()[0])) throw Error("VAE loss became non-finite at step " + std::to_string(step));
    if (step % period == 0 || step == total) {
      const auto per_mod = reconstruction_mse(vae, val_set);
      const double val_mse = std::accumulate(per_mod.begin(), per_mod.end(), 0.0) / static_cast<double>(per_mod.size());
      nlohmann::json line = {{"step", step},
                             {"epoch", static_cast<double>(step) / static_cast<double>(spe)},
                             {"loss", acc_total / acc_n},
                             {"mse", acc_mse / acc_n},
                             {"feat", acc_feat / acc_n},
                             {"kl", acc_kl / acc_n},
                             {"val_mse", val_mse},
                             {"lr", opt.current_lr()}};
      append_line(log_path, line.dump());
      log << line.dump() << "\n";
      res.last_loss = acc_total / acc_n;
      acc_total = acc_mse = acc_feat = acc_kl = 0;
      acc_n = 0;
      if (val_mse < best || !fs::exists(dir / "best.ckpt")) {
        best = std::min(best, val_mse);
        save(dir / "best.ckpt", false, val_mse);
      }
      save(dir / "last.ckpt", true, val_mse);
    }
  }
  if (!fs::exists(dir / "best.ckpt")) save(dir / "best.ckpt", false, best);
  if (!fs::exists(dir / "last.ckpt")) save(dir / "last.ckpt", true, best);
  res.steps = step;
  res.best_val_mse = best;
  res.best = dir / "best.ckpt";
  res.last = dir / "last.ckpt";
  return res;
}

inline VaeTrainResult cmd_train_vae(const RunConfig& cfg, const fs::path& resume, std::ostream& log) {
  cfg.validate();
  const auto train = load_split(cfg, "train");
  const auto val = load_split(cfg, "val");
  return train_vae(cfg, train, val, fs::path(cfg.out) / "vae", resume, log);
}

// ---------------------------------------------------------------- STEP 2: DiffX

/// Everything needed to sample: frozen VAE, joint embedder, UNet, and the
/// scale applied to VAE latents before diffusion.
struct DiffusionModel {
  RunConfig cfg;
  std::unique_ptr<DpVae<float>> vae;
  std::unique_ptr<Tokenizer> tok;
  std::unique_ptr<JointEmbedder<float>> je;
  std::unique_ptr<DiffXUNet<float>> unet;
  double latent_scale = 1.0;
};

struct DiffusionTrainResult {
  int64_t steps = 0;
  double last_loss = 0;
  double uncond_fraction = 0;
  double latent_scale = 1.0;
  fs::path last;
};

inline void check_geometry(const VaeConfig& v, const RunConfig& cfg) {
  const UNetConfig u = cfg.unet_config();
  if (v.latent_channels != u.latent_channels || v.latent_size() != u.latent_size)
    throw CheckpointError("geometry mismatch: VAE latent " + std::to_string(v.latent_channels) + "x" +
                          std::to_string(v.latent_size()) + "x" + std::to_string(v.latent_size()) + " vs UNet config " +
                          std::to_string(u.latent_channels) + "x" + std::to_string(u.latent_size) + "x" +
                          std::to_string(u.latent_size));
  if (v.modalities != cfg.modalities) throw CheckpointError("VAE checkpoint modalities do not match task.modalities");
}

/// Posterior means (or samples) of every record as one (N, C, h, w) tensor.
inline Tensor<float> encode_latents(const DpVae<float>& vae, const std::vector<DatasetRecord>& recs, bool sample_posterior,
                                    uint64_t seed) {
  NoGradGuard ng;
  std::vector<Tensor<float>> zs;
  Rng rng(derive_seed(seed, streams::kPosterior));
  for (size_t lo = 0; lo < recs.size(); lo += 16) {
    const auto b = bundle_of(recs, range_indices(lo, std::min(recs.size(), lo + 16)), vae.config().modalities);
    const auto d = vae.encode(b);
    Tensor<float> z = sample_posterior ? reparameterize(d, rng.normal_tensor<float>(d.mu.shape())).value() : d.mu.value();
    for (int64_t i = 0; i < z.dim(0); ++i) zs.push_back(unstack(z, i));
  }
  return stack(zs);
}

inline NamedParams<float> diffusion_parameters(const JointEmbedder<float>& je, const DiffXUNet<float>& unet) {
  NamedParams<float> ps;
  for (auto& [n, p] : je.named_parameters()) ps.emplace_back("je/" + n, p);
  for (auto& [n, p] : unet.named_parameters()) ps.emplace_back("unet/" + n, p);
  return ps;
}

inline DiffusionTrainResult train_diffusion(const RunConfig& cfg, const DpVae<float>& vae,
                                            const std::vector<DatasetRecord>& train, const fs::path& dir,
                                            const fs::path& resume, std::ostream& log) {
  cfg.validate();
  check_geometry(vae.config(), cfg);
  if (train.empty()) throw DataError("training split is empty");
  const size_t n = train.size();
  Tensor<float> z0 = encode_latents(vae, train, cfg.posterior == "sample", cfg.seed);

  Tokenizer tok(caption_vocabulary());
  JointEmbedder<float> je(cfg.cond_config(), tok.vocab_size(), derive_seed(cfg.seed, streams::kEmbedderInit));
  DiffXUNet<float> unet(cfg.unet_config(), derive_seed(cfg.seed, streams::kUNetInit));
  Adam<float> opt(diffusion_parameters(je, unet), WarmupConstant{cfg.lr, cfg.warmup}, 0.9, 0.999, 1e-8, cfg.clip_norm);
  int64_t step = 0;
  double scale = 0;
  fs::create_directories(dir);
  const fs::path log_path = dir / "log.jsonl";
  if (!resume.empty()) {
    const Checkpoint ck = load_checkpoint(resume, "diffusion");
    ck.load_module(je, "je/");
    ck.load_module(unet, "unet/");
    load_optimizer_state(ck, opt);
    step = ck.meta.at("step").get<int64_t>();
    scale = ck.meta.at("latent_scale").get<double>();
    opt.set_step_count(step);
    log << "resumed diffusion at step " << step << "\n";
  } else {
    fs::remove(log_path);
    double s2 = 0;
    for (float v : z0.vec()) s2 += static_cast<double>(v) * v;
    const double rms = std::sqrt(s2 / static_cast<double>(z0.numel()));
    scale = rms > 0 ? 1.0 / rms : 1.0;
  }
  for (auto& v : z0.vec()) v = static_cast<float>(v * scale);

  std::vector<LayoutCondition> layouts;
  std::vector<std::vector<int64_t>> ids;
  for (const auto& r : train) {
    layouts.push_back(r.layout(cfg.layout));
    ids.push_back(tok.encode(r.caption));
  }
  const NoiseSchedule sched = cfg.schedule();
  const uint64_t order_seed = derive_seed(cfg.seed, streams::kDiffusionOrder);
  const int64_t ckpt_every = std::max<int64_t>(cfg.log_every * 10, 500);

  auto save = [&]() {
    Checkpoint ck;
    ck.kind = "diffusion";
    ck.config = cfg.to_json();
    ck.meta = {{"step", step}, {"latent_scale", scale}, {"vae", vae_config_json(vae.config())}, {"vocab", tok.vocab_size()}};
    ck.add_module(vae, "vae/");
    ck.add_module(je, "je/");
    ck.add_module(unet, "unet/");
    add_optimizer_state(ck, opt);
    save_checkpoint(dir / "last.ckpt", ck);
  };

  DiffusionTrainResult res;
  double acc_loss = 0;
  int64_t acc_n = 0, acc_drop = 0, acc_elems = 0, all_drop = 0, all_elems = 0;
  while (step < cfg.steps) {
    const auto idx = batch_indices(n, cfg.batch, order_seed, step);
    Rng rng(derive_seed(cfg.seed, streams::kDiffusionStep + static_cast<uint64_t>(step)));
    std::vector<bool> drop;
    std::vector<LayoutCondition> bl;
    std::vector<std::vector<int64_t>> bids;
    std::vector<Tensor<float>> bz;
    for (size_t i : idx) {
      drop.push_back(rng.uniform() < cfg.caption_drop);
      bl.push_back(layouts[i]);
      bids.push_back(ids[i]);
      bz.push_back(unstack(z0, static_cast<int64_t>(i)));
    }
    opt.zero_grad();
    const auto lb = LayoutBatch<float>::from(bl, cfg.cond_config());
    const auto emb = je(lb, bids, drop);
    ConditioningBundle<float> cond{emb.caption, emb.grounding, 1.0, {}};
    Var<float> loss = training_loss(unet, stack(bz), cond, sched, rng);
    loss.backward();
    opt.step();
    ++step;
    const double lv = loss.value()[0];
    if (!std::isfinite(lv)) throw Error("diffusion loss became non-finite at step " + std::to_string(step));
    acc_loss += lv;
    ++acc_n;
    const auto dropped = std::count(drop.begin(), drop.end(), true);
    acc_drop += dropped;
    all_drop += dropped;
    acc_elems += static_cast<int64_t>(drop.size());
    all_elems += static_cast<int64_t>(drop.size());
    if (step % cfg.log_every == 0 || step == cfg.steps) {
      nlohmann::json line = {{"step", step},
                             {"loss", acc_loss / acc_n},
                             {"uncond_fraction", static_cast<double>(acc_drop) / static_cast<double>(acc_elems)},
                             {"lr", opt.current_lr()}};
      append_line(log_path, line.dump());
      log << line.dump() << "\n";
      res.last_loss = acc_loss / acc_n;
      acc_loss = 0;
      acc_n = acc_drop = acc_elems = 0;
    }
    if (step % ckpt_every == 0) save();
  }
  save();
  res.steps = step;
  res.uncond_fraction = all_elems ? static_cast<double>(all_drop) / static_cast<double>(all_elems) : 0.0;
  res.latent_scale = scale;
  res.last = dir / "last.ckpt";
  return res;
}

inline DiffusionTrainResult cmd_train_diffusion(const RunConfig& cfg, const fs::path& resume, std::ostream& log) {
  cfg.validate();
  const auto vae = load_vae(cfg.vae_path());
  check_geometry(vae->config(), cfg);
  const auto train = load_split(cfg, "train");
  return train_diffusion(cfg, *vae, train, fs::path(cfg.out) / "diffusion", resume, log);
}

inline DiffusionModel load_diffusion(const fs::path& path) {
  const Checkpoint ck = load_checkpoint(path, "diffusion");
  DiffusionModel m;
  try {
    m.cfg = config_from_json(ck.config);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config: ") + e.what());
  }
  const VaeConfig vcfg = vae_config_from_json(ck.meta.at("vae"));
  m.cfg.allow_unimodal = vcfg.allow_unimodal;
  m.vae = std::make_unique<DpVae<float>>(vcfg, 0);
  ck.load_module(*m.vae, "vae/");
  m.tok = std::make_unique<Tokenizer>(caption_vocabulary());
  if (ck.meta.at("vocab").get<int64_t>() != m.tok->vocab_size())
    throw CheckpointError("checkpoint vocabulary size differs from this build");
  m.je = std::make_unique<JointEmbedder<float>>(m.cfg.cond_config(), m.tok->vocab_size(), 0);
  m.unet = std::make_unique<DiffXUNet<float>>(m.cfg.unet_config(), 0);
  ck.load_module(*m.je, "je/");
  ck.load_module(*m.unet, "unet/");
  m.latent_scale = ck.meta.at("latent_scale").get<double>();
  return m;
}

// ---------------------------------------------------------------- sampling

struct GenerateOptions {
  double guidance_scale = 3.0;
  int steps = 50;
  uint64_t seed = 1;
};

/// Samples one bundle per layout/caption pair, in chunks of 8. The noise
/// stream depends only on the seed and the chunk index.
inline ModalBundle<float> generate(const DiffusionModel& m, const std::vector<LayoutCondition>& layouts,
                                   const std::vector<std::string>& captions, const GenerateOptions& opt) {
  if (layouts.size() != captions.size()) throw ShapeError("generate: layouts and captions differ in count");
  if (layouts.empty()) throw DataError("nothing to sample");
  NoGradGuard ng;
  const NoiseSchedule sched = m.cfg.schedule();
  const VaeConfig& vcfg = m.vae->config();
  std::vector<std::vector<Tensor<float>>> per_mod(vcfg.modalities.size());
  for (size_t lo = 0, chunk = 0; lo < layouts.size(); lo += 8, ++chunk) {
    const size_t hi = std::min(layouts.size(), lo + 8);
    std::vector<LayoutCondition> bl(layouts.begin() + static_cast<std::ptrdiff_t>(lo), layouts.begin() + static_cast<std::ptrdiff_t>(hi));
    std::vector<std::vector<int64_t>> ids;
    for (size_t i = lo; i < hi; ++i) ids.push_back(m.tok->encode(captions[i]));
    const auto lb = LayoutBatch<float>::from(bl, m.cfg.cond_config());
    const auto emb = (*m.je)(lb, ids);
    ConditioningBundle<float> cond{emb.caption, emb.grounding, opt.guidance_scale, {}};
    if (opt.guidance_scale != 1.0) cond.null_grounding = (*m.je)(lb, ids, std::vector<bool>(ids.size(), true)).grounding;
    Rng rng(derive_seed(derive_seed(opt.seed, streams::kSampler), chunk));
    Tensor<float> z = sample(*m.unet, vcfg.latent_shape(static_cast<int64_t>(hi - lo)), cond, sched, opt.steps, rng).z;
    for (auto& v : z.vec()) v = static_cast<float>(v / m.latent_scale);
    const auto dec = m.vae->decode(z);
    for (size_t k = 0; k < dec.size(); ++k)
      for (int64_t i = 0; i < dec[k].image.dim(0); ++i) per_mod[k].push_back(unstack(dec[k].image, i));
  }
  ModalBundle<float> out;
  for (size_t k = 0; k < per_mod.size(); ++k) out.push_back({vcfg.modalities[k], stack(per_mod[k])});
  return out;
}

inline GenerateOptions generate_options(const RunConfig& cfg) {
  return {cfg.guidance_scale, static_cast<int>(cfg.sampler_steps), cfg.seed};
}

inline void check_task(const DiffusionModel& m, const RunConfig& cfg) {
  if (m.cfg.layout != cfg.layout)
    throw ConfigError("config key 'task.layout': '" + to_string(cfg.layout) + "' but the checkpoint was trained on '" +
                      to_string(m.cfg.layout) + "'");
  if (cfg.sampler_steps > m.cfg.diffusion_T)
    throw ConfigError("config key 'sampler.steps': exceeds the checkpoint's diffusion.T = " + std::to_string(m.cfg.diffusion_T));
}

/// Writes <id>_<modality>.png per sample plus <id>_grid.png; returns the paths.
inline std::vector<fs::path> cmd_sample(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const DiffusionModel m = load_diffusion(cfg.diffusion_path());
  check_task(m, cfg);
  const auto recs = load_split(cfg, cfg.sample_split);
  if (cfg.sample_index < 0 || cfg.sample_count < 1 ||
      static_cast<size_t>(cfg.sample_index + cfg.sample_count) > recs.size())
    throw DataError("sample range [" + std::to_string(cfg.sample_index) + ", " +
                    std::to_string(cfg.sample_index + cfg.sample_count) + ") outside split '" + cfg.sample_split +
                    "' of " + std::to_string(recs.size()) + " records");
  std::vector<LayoutCondition> layouts;
  std::vector<std::string> captions;
  std::vector<std::string> ids;
  for (int64_t i = cfg.sample_index; i < cfg.sample_index + cfg.sample_count; ++i) {
    const auto& r = recs[static_cast<size_t>(i)];
    layouts.push_back(r.layout(cfg.layout));
    captions.push_back(cfg.sample_caption.empty() ? r.caption : cfg.sample_caption);
    ids.push_back(r.id);
  }
  const auto gen = generate(m, layouts, captions, generate_options(cfg));
  const fs::path dir = fs::path(cfg.out) / "samples";
  fs::create_directories(dir);
  std::vector<fs::path> written;
  for (size_t i = 0; i < ids.size(); ++i) {
    std::vector<Image8> row;
    for (const auto& mi : gen) {
      Image8 img = to_image(unstack(mi.image, static_cast<int64_t>(i)));
      const fs::path p = dir / (ids[i] + "_" + to_string(mi.tag) + ".png");
      write_png(p, img);
      written.push_back(p);
      row.push_back(std::move(img));
    }
    const fs::path g = dir / (ids[i] + "_grid.png");
    write_png(g, hconcat(row));
    written.push_back(g);
    log << "sampled " << ids[i] << " (" << captions[i] << ")\n";
  }
  return written;
}

// ---------------------------------------------------------------- evaluation

/// Scores generated bundles against ground truth. The first non-RGB modality
/// is X; layout alignment is measured on it.
inline EvalReport score(const ModalBundle<float>& gen, const ModalBundle<float>& truth,
                        const std::vector<LayoutCondition>& layouts, const FeatureExtractor<float>& fx) {
  EvalReport rep;
  const int64_t N = truth.front().image.dim(0);
  if (N < 2) throw DataError("evaluation needs at least 2 samples for the feature distance");
  rep.samples = N;
  size_t x = 0;
  for (size_t k = 0; k < truth.size(); ++k)
    if (truth[k].tag != Modality::rgb) {
      x = k;
      break;
    }
  for (size_t k = 0; k < truth.size(); ++k) {
    const std::string name = to_string(truth[k].tag);
    rep.modalities.push_back(name);
    double p = 0, s = 0;
    for (int64_t i = 0; i < N; ++i) {
      const auto a = unstack(gen[k].image, i), b = unstack(truth[k].image, i);
      p += psnr(a, b);
      s += ssim(a, b);
    }
    rep.psnr[name] = p / static_cast<double>(N);
    rep.ssim[name] = s / static_cast<double>(N);
  }
  rep.ssim_x = rep.ssim.at(to_string(truth[x].tag));
  const auto fd = feature_distance(gen[x].image, truth[x].image, fx);
  rep.feature_distance = fd.distance;
  rep.feature_distance_loading = fd.diagonal_loading;
  double la = 0;
  for (int64_t i = 0; i < N; ++i) la += layout_alignment(unstack(gen[x].image, i), layouts[static_cast<size_t>(i)]);
  rep.layout_alignment = la / static_cast<double>(N);
  return rep;
}

inline EvalReport cmd_eval(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto recs = load_split(cfg, cfg.eval_split);
  const size_t n = std::min(recs.size(), static_cast<size_t>(std::max<int64_t>(cfg.eval_samples, 0)));
  if (n == 0) throw DataError("evaluation split '" + cfg.eval_split + "' is empty");
  std::vector<LayoutCondition> layouts;
  std::vector<std::string> captions;
  for (size_t i = 0; i < n; ++i) {
    layouts.push_back(recs[i].layout(cfg.layout));
    captions.push_back(recs[i].caption);
  }
  const auto truth = bundle_of(recs, range_indices(0, n), cfg.modalities);
  ModalBundle<float> gen = truth;
  if (cfg.eval_mode == "generated") {
    const DiffusionModel m = load_diffusion(cfg.diffusion_path());
    check_task(m, cfg);
    if (m.vae->config().modalities != cfg.modalities)
      throw CheckpointError("checkpoint modalities do not match task.modalities");
    gen = generate(m, layouts, captions, generate_options(cfg));
  }
  FeatureExtractor<float> fx;
  EvalReport rep = score(gen, truth, layouts, fx);
  rep.config = cfg.to_json();
  const fs::path dir = fs::path(cfg.out) / "eval";
  fs::create_directories(dir);
  detail::write_text(dir / "report.json", rep.to_json().dump(2) + "\n");
  log << rep.table();
  return rep;
}

// ---------------------------------------------------------------- sweeps

inline double mean_rgb(const ModalBundle<float>& b) {
  for (const auto& m : b)
    if (m.tag == Modality::rgb) {
      double s = 0;
      for (float v : m.image.vec()) s += v;
      return s / static_cast<double>(m.image.numel());
    }
  throw ShapeError("bundle has no rgb image");
}

/// Mean over samples and modalities of the squared distance between pooled
/// extractor features of each generated image and its ground truth.
inline double paired_feature_distance(const ModalBundle<float>& gen, const ModalBundle<float>& truth,
                                      const FeatureExtractor<float>& fx) {
  double total = 0;
  for (size_t k = 0; k < truth.size(); ++k) {
    const auto fa = pooled_features(gen[k].image, fx), fb = pooled_features(truth[k].image, fx);
    total += (fa - fb).rowwise().squaredNorm().mean();
  }
  return total / static_cast<double>(truth.size());
}

inline std::string swap_lighting(const std::string& caption, bool to_day) {
  std::string s = caption;
  const std::string from = to_day ? "nighttime" : "daytime", to = to_day ? "daytime" : "nighttime";
  for (size_t p = s.find(from); p != std::string::npos; p = s.find(from, p + to.size())) s.replace(p, from.size(), to);
  return s;
}

inline size_t x_index(const std::vector<Modality>& mods) {
  for (size_t k = 0; k < mods.size(); ++k)
    if (mods[k] != Modality::rgb) return k;
  return 0;
}

inline size_t wins_needed(size_t seeds) { return (2 * seeds + 2) / 3; }

/// LP ablation: DP-VAE with and without Laplacian injection per seed, scored
/// on held-out X reconstructions.
inline nlohmann::json sweep_lp(const RunConfig& cfg, std::ostream& log) {
  const auto train = load_split(cfg, "train");
  const auto val = load_split(cfg, "val");
  const auto test = load_split(cfg, "test");
  if (test.size() < 1) throw DataError("test split is empty");
  const size_t x = x_index(cfg.modalities);
  const fs::path root = fs::path(cfg.out) / "sweep" / "lp";
  nlohmann::json runs = nlohmann::json::array();
  size_t wins = 0;
  for (int64_t seed : cfg.sweep_seeds) {
    nlohmann::json entry = {{"seed", seed}};
    for (bool lp : {true, false}) {
      RunConfig c = cfg;
      c.seed = static_cast<uint64_t>(seed);
      c.vae_use_lp = lp;
      const std::string tag = lp ? "lp" : "no_lp";
      train_vae(c, train, val, root / ("seed_" + std::to_string(seed)) / tag, {}, log);
      const auto vae = load_vae(root / ("seed_" + std::to_string(seed)) / tag / "best.ckpt");
      NoGradGuard ng;
      double p = 0, s = 0;
      for (size_t lo = 0; lo < test.size(); lo += 16) {
        const auto b = bundle_of(test, range_indices(lo, std::min(test.size(), lo + 16)), cfg.modalities);
        const auto rec = vae->decode(vae->encode(b).mu.value());
        for (int64_t i = 0; i < b[x].image.dim(0); ++i) {
          p += psnr(unstack(rec[x].image, i), unstack(b[x].image, i));
          s += ssim(unstack(rec[x].image, i), unstack(b[x].image, i));
        }
      }
      entry[tag] = {{"psnr_x", p / static_cast<double>(test.size())}, {"ssim_x", s / static_cast<double>(test.size())}};
    }
    const bool win = entry["lp"]["psnr_x"].get<double>() >= entry["no_lp"]["psnr_x"].get<double>() &&
                     entry["lp"]["ssim_x"].get<double>() >= entry["no_lp"]["ssim_x"].get<double>();
    entry["lp_wins"] = win;
    wins += win;
    log << entry.dump() << "\n";
    runs.push_back(entry);
  }
  return {{"kind", "lp"}, {"runs", runs}, {"wins", wins}, {"passed", wins >= wins_needed(cfg.sweep_seeds.size())}};
}

/// Shared latent vs two unimodal pipelines at equal total diffusion steps.
inline nlohmann::json sweep_shared(const RunConfig& cfg, std::ostream& log) {
  const auto train = load_split(cfg, "train");
  const auto val = load_split(cfg, "val");
  const auto test = load_split(cfg, cfg.eval_split);
  const size_t n = std::min(test.size(), static_cast<size_t>(cfg.eval_samples));
  if (n < 2) throw DataError("shared sweep needs at least 2 evaluation records");
  const size_t x = x_index(cfg.modalities);
  const Modality xm = cfg.modalities[x];
  std::vector<LayoutCondition> layouts;
  std::vector<std::string> captions;
  for (size_t i = 0; i < n; ++i) {
    layouts.push_back(test[i].layout(cfg.layout));
    captions.push_back(test[i].caption);
  }
  const Tensor<float> truth_x = bundle_of(test, range_indices(0, n), {xm}).front().image;
  FeatureExtractor<float> fx;
  const fs::path root = fs::path(cfg.out) / "sweep" / "shared";
  nlohmann::json runs = nlohmann::json::array();
  size_t wins = 0;
  auto pipeline = [&](RunConfig c, const fs::path& dir) {
    train_vae(c, train, val, dir / "vae", {}, log);
    const auto vae = load_vae(dir / "vae" / "best.ckpt");
    train_diffusion(c, *vae, train, dir / "diffusion", {}, log);
    return load_diffusion(dir / "diffusion" / "last.ckpt");
  };
  for (int64_t seed : cfg.sweep_seeds) {
    RunConfig c = cfg;
    c.seed = static_cast<uint64_t>(seed);
    const fs::path sd = root / ("seed_" + std::to_string(seed));
    const auto shared = pipeline(c, sd / "shared");
    const auto gs = generate(shared, layouts, captions, generate_options(c));
    const double d_shared = feature_distance(gs[x].image, truth_x, fx).distance;

    RunConfig u = c;
    u.allow_unimodal = true;
    u.steps = c.steps / 2;
    u.modalities = {Modality::rgb};
    pipeline(u, sd / "separate_rgb");
    u.modalities = {xm};
    const auto sep_x = pipeline(u, sd / "separate_x");
    const auto gx = generate(sep_x, layouts, captions, generate_options(c));
    const double d_sep = feature_distance(gx.front().image, truth_x, fx).distance;
    nlohmann::json entry = {{"seed", seed},
                            {"feature_distance_shared", d_shared},
                            {"feature_distance_separate", d_sep},
                            {"shared_wins", d_shared <= d_sep}};
    wins += d_shared <= d_sep;
    log << entry.dump() << "\n";
    runs.push_back(entry);
  }
  return {{"kind", "shared"}, {"runs", runs}, {"wins", wins}, {"passed", wins >= wins_needed(cfg.sweep_seeds.size())}};
}

/// Caption effect on a trained model: true vs zero caption, and daytime vs
/// nighttime lighting keywords, averaged over sampling seeds.
inline nlohmann::json sweep_caption(const RunConfig& cfg, std::ostream& log) {
  const DiffusionModel m = load_diffusion(cfg.diffusion_path());
  check_task(m, cfg);
  const auto recs = load_split(cfg, cfg.eval_split);
  const size_t n = std::min(recs.size(), static_cast<size_t>(cfg.eval_samples));
  if (n == 0) throw DataError("caption sweep split '" + cfg.eval_split + "' is empty");
  std::vector<LayoutCondition> layouts;
  std::vector<std::string> captions, day, night;
  for (size_t i = 0; i < n; ++i) {
    layouts.push_back(recs[i].layout(cfg.layout));
    captions.push_back(recs[i].caption);
    day.push_back(swap_lighting(recs[i].caption, true));
    night.push_back(swap_lighting(recs[i].caption, false));
  }
  const auto truth = bundle_of(recs, range_indices(0, n), m.vae->config().modalities);
  const size_t x = x_index(m.vae->config().modalities);
  FeatureExtractor<float> fx;
  auto alignment = [&](const ModalBundle<float>& g) {
    double a = 0;
    for (size_t i = 0; i < n; ++i) a += layout_alignment(unstack(g[x].image, static_cast<int64_t>(i)), layouts[i]);
    return a / static_cast<double>(n);
  };
  nlohmann::json runs = nlohmann::json::array();
  double la_true = 0, la_zero = 0, fd_true = 0, fd_zero = 0, b_day = 0, b_night = 0;
  for (int64_t seed : cfg.sweep_seeds) {
    GenerateOptions opt = generate_options(cfg);
    opt.seed = static_cast<uint64_t>(seed);
    const auto g_true = generate(m, layouts, captions, opt);
    GenerateOptions zero = opt;
    zero.guidance_scale = 0.0;
    const auto g_zero = generate(m, layouts, captions, zero);
    const double bd = mean_rgb(generate(m, layouts, day, opt));
    const double bn = mean_rgb(generate(m, layouts, night, opt));
    nlohmann::json e = {{"seed", seed},
                        {"layout_alignment_true", alignment(g_true)},
                        {"layout_alignment_zero", alignment(g_zero)},
                        {"paired_feature_distance_true", paired_feature_distance(g_true, truth, fx)},
                        {"paired_feature_distance_zero", paired_feature_distance(g_zero, truth, fx)},
                        {"brightness_daytime", bd},
                        {"brightness_nighttime", bn}};
    la_true += e["layout_alignment_true"].get<double>();
    la_zero += e["layout_alignment_zero"].get<double>();
    fd_true += e["paired_feature_distance_true"].get<double>();
    fd_zero += e["paired_feature_distance_zero"].get<double>();
    b_day += bd;
    b_night += bn;
    log << e.dump() << "\n";
    runs.push_back(e);
  }
  const double k = static_cast<double>(cfg.sweep_seeds.size());
  nlohmann::json mean = {{"layout_alignment_true", la_true / k}, {"layout_alignment_zero", la_zero / k},
                         {"paired_feature_distance_true", fd_true / k}, {"paired_feature_distance_zero", fd_zero / k},
                         {"brightness_daytime", b_day / k}, {"brightness_nighttime", b_night / k}};
  const bool caption_helps = la_true > la_zero && fd_true < fd_zero;
  const bool lighting_flips = b_day > b_night;
  return {{"kind", "caption"}, {"runs", runs}, {"mean", mean}, {"caption_helps", caption_helps},
          {"lighting_flips", lighting_flips}, {"passed", caption_helps && lighting_flips}};
}

inline nlohmann::json cmd_sweep(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  if (cfg.sweep_seeds.empty()) throw ConfigError("config key 'sweep.seeds': no seeds given");
  nlohmann::json summary;
  if (cfg.sweep_kind == "lp")
    summary = sweep_lp(cfg, log);
  else if (cfg.sweep_kind == "shared")
    summary = sweep_shared(cfg, log);
  else
    summary = sweep_caption(cfg, log);
  summary["config"] = cfg.to_json();
  const fs::path dir = fs::path(cfg.out) / "sweep" / cfg.sweep_kind;
  fs::create_directories(dir);
  detail::write_text(dir / "summary.json", summary.dump(2) + "\n");
  return summary;
}

}  // namespace diffx
