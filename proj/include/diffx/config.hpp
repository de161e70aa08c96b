#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffx/conditioning.hpp"
#include "diffx/diffusion.hpp"
#include "diffx/dp_vae.hpp"
#include "diffx/unet.hpp"

namespace diffx {

/// Every setting of a run. Defaults are the full-size recipe (learning rate
/// 5e-5, 10k warm-up steps, caption drop 0.5, T = 1000); the "desk" preset
/// shrinks everything to single-core scale.
struct RunConfig {
  uint64_t seed = 1;
  std::string out = "runs/default";

  std::string data_path;  // empty: <out>/data
  int64_t data_train = 500, data_val = 50, data_test = 50;
  int64_t image_size = 64;
  int64_t min_objects = 1, max_objects = 4;

  std::vector<Modality> modalities{Modality::rgb, Modality::depth};
  LayoutKind layout = LayoutKind::salient_map;

  int64_t vae_stem_width = 64;
  std::vector<int64_t> vae_widths{64, 128, 128};
  int64_t vae_latent_channels = 4;
  int64_t vae_groups = 16;
  int64_t vae_lp_levels = 3;
  bool vae_use_lp = true;
  double vae_w_mse = 1.0, vae_w_feat = 0.1, vae_w_kl = 1e-6;
  double vae_lr = 1e-4;
  int64_t vae_warmup = 500;
  int64_t vae_epochs = 20;
  int64_t vae_steps = 0;  // > 0 overrides epochs
  int64_t vae_batch = 8;

  int64_t d_ground = 256, d_text = 256, d_label = 64;
  int64_t fourier_freqs = 8;
  int64_t n_max = 30;
  std::vector<int64_t> mask_widths{32, 64, 128};
  int64_t text_layers = 1, text_heads = 4;
  bool truncate = false;
  double fuse_lambda = 1.0;

  std::vector<int64_t> unet_widths{128, 256, 256};
  int64_t unet_groups = 32, unet_heads = 8;

  int64_t diffusion_T = 1000;
  double beta_start = 1e-4, beta_end = 0.02;

  double lr = 5e-5;
  int64_t warmup = 10000;
  int64_t steps = 20000;
  int64_t batch = 8;
  double caption_drop = 0.5;
  std::string posterior = "mean";  // mean | sample
  int64_t log_every = 50;
  double clip_norm = 1.0;

  int64_t sampler_steps = 100;
  double guidance_scale = 3.0;

  std::string sample_split = "test";
  int64_t sample_index = 0;
  int64_t sample_count = 1;
  std::string sample_caption;  // empty: the record's caption

  std::string eval_split = "test";
  int64_t eval_samples = 16;
  std::string eval_mode = "generated";  // generated | ground_truth

  std::string sweep_kind = "lp";  // lp | shared | caption
  std::vector<int64_t> sweep_seeds{1, 2, 3};

  std::string vae_checkpoint;        // empty: <out>/vae/best.ckpt
  std::string diffusion_checkpoint;  // empty: <out>/diffusion/last.ckpt

  /// Set only by the separate-pipelines ablation; not a config key.
  bool allow_unimodal = false;

  std::filesystem::path data_dir() const {
    return data_path.empty() ? std::filesystem::path(out) / "data" : std::filesystem::path(data_path);
  }

  VaeConfig vae_config() const {
    VaeConfig v;
    v.modalities = modalities;
    v.image_size = image_size;
    v.stem_width = vae_stem_width;
    v.widths = vae_widths;
    v.latent_channels = vae_latent_channels;
    v.groups = vae_groups;
    v.lp_levels = static_cast<int>(vae_lp_levels);
    v.use_lp = vae_use_lp;
    v.allow_unimodal = allow_unimodal;
    return v;
  }

  VaeLossWeights vae_weights() const { return {vae_w_mse, vae_w_feat, vae_w_kl}; }

  ConditioningConfig cond_config() const {
    ConditioningConfig c;
    c.layout = layout;
    c.d_ground = d_ground;
    c.d_text = d_text;
    c.d_label = d_label;
    c.fourier_freqs = static_cast<int>(fourier_freqs);
    c.n_max = n_max;
    c.mask_widths = mask_widths;
    c.mask_size = image_size;
    c.truncate = truncate;
    c.text_layers = text_layers;
    c.text_heads = text_heads;
    c.lambda = fuse_lambda;
    return c;
  }

  UNetConfig unet_config() const {
    UNetConfig u;
    u.latent_channels = vae_latent_channels;
    u.latent_size = vae_config().latent_size();
    u.widths = unet_widths;
    u.groups = unet_groups;
    u.heads = unet_heads;
    u.d_ground = d_ground;
    u.d_text = d_text;
    return u;
  }

  NoiseSchedule schedule() const {
    return make_schedule(static_cast<int>(diffusion_T), beta_start, beta_end, ScheduleKind::linear);
  }

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  /// Effective config as sorted "key = value" lines.
  std::string to_text() const {
    std::ostringstream os;
    for (const auto& k : keys()) os << k << " = " << get(k) << "\n";
    return os.str();
  }
  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& k : keys()) j[k] = get(k);
    return j;
  }
  uint64_t hash() const { return fnv1a(to_text()); }

  std::filesystem::path vae_path() const {
    return vae_checkpoint.empty() ? std::filesystem::path(out) / "vae" / "best.ckpt" : std::filesystem::path(vae_checkpoint);
  }
  std::filesystem::path diffusion_path() const {
    return diffusion_checkpoint.empty() ? std::filesystem::path(out) / "diffusion" / "last.ckpt"
                                        : std::filesystem::path(diffusion_checkpoint);
  }

  void validate() const;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const std::string t = trim(v);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (ec != std::errc() || p != t.data() + t.size() || t.empty())
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a number");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

template <class N>
std::string join(const std::vector<N>& xs) {
  std::string s;
  for (size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class N>
Field int_field(N RunConfig::*m) {
  return {[m](RunConfig& c, const std::string& k, const std::string& v) { c.*m = parse_number<N>(k, v); },
          [m](const RunConfig& c) { return std::to_string(c.*m); }};
}
inline Field double_field(double RunConfig::*m) {
  return {[m](RunConfig& c, const std::string& k, const std::string& v) { c.*m = parse_number<double>(k, v); },
          [m](const RunConfig& c) { return fmt_double(c.*m); }};
}
inline Field bool_field(bool RunConfig::*m) {
  return {[m](RunConfig& c, const std::string& k, const std::string& v) { c.*m = parse_bool(k, v); },
          [m](const RunConfig& c) { return std::string(c.*m ? "true" : "false"); }};
}
inline Field string_field(std::string RunConfig::*m, std::vector<std::string> allowed = {}) {
  return {[m, allowed](RunConfig& c, const std::string& k, const std::string& v) {
            const std::string t = trim(v);
            if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), t) == allowed.end())
              throw ConfigError("config key '" + k + "': invalid value '" + t + "'");
            c.*m = t;
          },
          [m](const RunConfig& c) { return c.*m; }};
}
inline Field list_field(std::vector<int64_t> RunConfig::*m) {
  return {[m](RunConfig& c, const std::string& k, const std::string& v) {
            std::vector<int64_t> xs;
            for (const auto& s : split_list(v)) xs.push_back(parse_number<int64_t>(k, s));
            if (xs.empty()) throw ConfigError("config key '" + k + "': empty list");
            c.*m = xs;
          },
          [m](const RunConfig& c) { return join(c.*m); }};
}

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> f = [] {
    std::map<std::string, Field> m;
    m["seed"] = int_field(&RunConfig::seed);
    m["out"] = string_field(&RunConfig::out);
    m["data.path"] = string_field(&RunConfig::data_path);
    m["data.train"] = int_field(&RunConfig::data_train);
    m["data.val"] = int_field(&RunConfig::data_val);
    m["data.test"] = int_field(&RunConfig::data_test);
    m["data.image_size"] = int_field(&RunConfig::image_size);
    m["data.min_objects"] = int_field(&RunConfig::min_objects);
    m["data.max_objects"] = int_field(&RunConfig::max_objects);
    m["task.modalities"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                              std::vector<Modality> ms;
                              for (const auto& s : split_list(v)) {
                                try {
                                  ms.push_back(parse_modality(s));
                                } catch (const UnknownModalityError&) {
                                  throw ConfigError("config key '" + k + "': unknown modality '" + s + "'");
                                }
                              }
                              c.modalities = ms;
                            },
                            [](const RunConfig& c) {
                              std::string s;
                              for (size_t i = 0; i < c.modalities.size(); ++i) s += (i ? "," : "") + to_string(c.modalities[i]);
                              return s;
                            }};
    m["task.layout"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                          try {
                            c.layout = parse_layout_kind(trim(v));
                          } catch (const ConfigError&) {
                            throw ConfigError("config key '" + k + "': unknown layout kind '" + trim(v) + "'");
                          }
                        },
                        [](const RunConfig& c) { return to_string(c.layout); }};
    m["vae.stem_width"] = int_field(&RunConfig::vae_stem_width);
    m["vae.widths"] = list_field(&RunConfig::vae_widths);
    m["vae.latent_channels"] = int_field(&RunConfig::vae_latent_channels);
    m["vae.groups"] = int_field(&RunConfig::vae_groups);
    m["vae.lp_levels"] = int_field(&RunConfig::vae_lp_levels);
    m["vae.use_lp"] = bool_field(&RunConfig::vae_use_lp);
    m["vae.w_mse"] = double_field(&RunConfig::vae_w_mse);
    m["vae.w_feat"] = double_field(&RunConfig::vae_w_feat);
    m["vae.w_kl"] = double_field(&RunConfig::vae_w_kl);
    m["vae.lr"] = double_field(&RunConfig::vae_lr);
    m["vae.warmup"] = int_field(&RunConfig::vae_warmup);
    m["vae.epochs"] = int_field(&RunConfig::vae_epochs);
    m["vae.steps"] = int_field(&RunConfig::vae_steps);
    m["vae.batch_size"] = int_field(&RunConfig::vae_batch);
    m["cond.d_ground"] = int_field(&RunConfig::d_ground);
    m["cond.d_text"] = int_field(&RunConfig::d_text);
    m["cond.d_label"] = int_field(&RunConfig::d_label);
    m["cond.fourier_freqs"] = int_field(&RunConfig::fourier_freqs);
    m["cond.n_max"] = int_field(&RunConfig::n_max);
    m["cond.mask_widths"] = list_field(&RunConfig::mask_widths);
    m["cond.text_layers"] = int_field(&RunConfig::text_layers);
    m["cond.text_heads"] = int_field(&RunConfig::text_heads);
    m["cond.truncate"] = bool_field(&RunConfig::truncate);
    m["cond.lambda"] = double_field(&RunConfig::fuse_lambda);
    m["unet.widths"] = list_field(&RunConfig::unet_widths);
    m["unet.groups"] = int_field(&RunConfig::unet_groups);
    m["unet.heads"] = int_field(&RunConfig::unet_heads);
    m["diffusion.T"] = int_field(&RunConfig::diffusion_T);
    m["diffusion.beta_start"] = double_field(&RunConfig::beta_start);
    m["diffusion.beta_end"] = double_field(&RunConfig::beta_end);
    m["train.lr"] = double_field(&RunConfig::lr);
    m["train.warmup"] = int_field(&RunConfig::warmup);
    m["train.steps"] = int_field(&RunConfig::steps);
    m["train.batch_size"] = int_field(&RunConfig::batch);
    m["train.caption_drop"] = double_field(&RunConfig::caption_drop);
    m["train.posterior"] = string_field(&RunConfig::posterior, {"mean", "sample"});
    m["train.log_every"] = int_field(&RunConfig::log_every);
    m["train.clip_norm"] = double_field(&RunConfig::clip_norm);
    m["sampler.steps"] = int_field(&RunConfig::sampler_steps);
    m["sampler.guidance_scale"] = double_field(&RunConfig::guidance_scale);
    m["sample.split"] = string_field(&RunConfig::sample_split, {"train", "val", "test"});
    m["sample.index"] = int_field(&RunConfig::sample_index);
    m["sample.count"] = int_field(&RunConfig::sample_count);
    m["sample.caption"] = string_field(&RunConfig::sample_caption);
    m["eval.split"] = string_field(&RunConfig::eval_split, {"train", "val", "test"});
    m["eval.samples"] = int_field(&RunConfig::eval_samples);
    m["eval.mode"] = string_field(&RunConfig::eval_mode, {"generated", "ground_truth"});
    m["sweep.kind"] = string_field(&RunConfig::sweep_kind, {"lp", "shared", "caption"});
    m["sweep.seeds"] = list_field(&RunConfig::sweep_seeds);
    m["paths.vae_checkpoint"] = string_field(&RunConfig::vae_checkpoint);
    m["paths.diffusion_checkpoint"] = string_field(&RunConfig::diffusion_checkpoint);
    return m;
  }();
  return f;
}

}  // namespace config_detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& f = config_detail::fields();
  auto it = f.find(key);
  if (it == f.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(*this, key, value);
}

inline std::string RunConfig::get(const std::string& key) const {
  const auto& f = config_detail::fields();
  auto it = f.find(key);
  if (it == f.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.get(*this);
}

inline const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [name, _] : config_detail::fields()) out.push_back(name);
    return out;
  }();
  return k;
}

inline void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& key, const std::string& what) {
    if (!ok) throw ConfigError("config key '" + key + "': " + what);
  };
  need(data_train >= 0 && data_val >= 0 && data_test >= 0, "data.train", "record counts must be nonnegative");
  need(min_objects >= 0 && min_objects <= max_objects, "data.min_objects", "need 0 <= min_objects <= max_objects");
  need(max_objects <= n_max, "data.max_objects", "exceeds cond.n_max");
  need(!modalities.empty(), "task.modalities", "no modalities configured");
  if (!allow_unimodal) {
    need(modalities.size() >= 2, "task.modalities", "need RGB plus at least one X modality");
    need(modalities[0] == Modality::rgb, "task.modalities", "first modality must be rgb");
  }
  need(caption_drop >= 0 && caption_drop <= 1, "train.caption_drop", "must lie in [0, 1]");
  need(guidance_scale >= 0, "sampler.guidance_scale", "must be nonnegative");
  need(sampler_steps >= 1 && sampler_steps <= diffusion_T, "sampler.steps", "must lie in [1, diffusion.T]");
  need(batch >= 1 && vae_batch >= 1, "train.batch_size", "must be positive");
  need((image_size >> mask_widths.size()) >= 1 && image_size % (int64_t{1} << mask_widths.size()) == 0,
       "cond.mask_widths", "too many mask stages for the image size");
  need(d_text % text_heads == 0, "cond.text_heads", "must divide cond.d_text");
  try {
    vae_config().validate();
    unet_config().validate();
    (void)schedule();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

/// Preset values applied before the config file. "desk" is a single-core
/// scale; "paper-shape" mirrors the paper's resolutions and widths.
inline void apply_preset(RunConfig& c, const std::string& name) {
  std::vector<std::pair<std::string, std::string>> kv;
  if (name == "desk") {
    kv = {{"data.image_size", "32"},    {"vae.stem_width", "16"},       {"vae.widths", "16,32"},
          {"vae.groups", "8"},          {"vae.lp_levels", "2"},         {"vae.lr", "2e-3"},
          {"vae.warmup", "50"},         {"cond.d_ground", "64"},        {"cond.d_text", "64"},
          {"cond.d_label", "16"},       {"cond.mask_widths", "16,32,32"}, {"unet.widths", "32,64,64"},
          {"unet.groups", "8"},         {"unet.heads", "4"},            {"diffusion.T", "100"},
          {"diffusion.beta_start", "1e-3"}, {"diffusion.beta_end", "0.2"}, {"train.lr", "5e-4"},
          {"train.warmup", "500"},      {"train.steps", "3000"},        {"sampler.steps", "50"}};
  } else if (name == "paper-shape") {
    kv = {{"data.image_size", "512"},   {"vae.stem_width", "128"},      {"vae.widths", "128,256,512"},
          {"vae.groups", "32"},         {"vae.lp_levels", "3"},         {"cond.d_ground", "768"},
          {"cond.d_text", "768"},       {"cond.mask_widths", "64,128,256"}, {"cond.text_heads", "12"},
          {"cond.text_layers", "12"},   {"unet.widths", "320,640,1280"}, {"unet.heads", "8"},
          {"diffusion.T", "1000"},      {"train.lr", "5e-5"},           {"train.warmup", "10000"}};
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected desk or paper-shape)");
  }
  for (const auto& [k, v] : kv) c.set(k, v);
}

/// Reads "key = value" lines; '#' starts a comment.
inline void apply_config_text(RunConfig& c, const std::string& text, const std::string& origin = "config") {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    c.set(config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)));
  }
}

inline void apply_config_file(RunConfig& c, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  apply_config_text(c, os.str(), path.string());
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  for (const auto& [k, v] : j.items()) c.set(k, v.get<std::string>());
  return c;
}

}  // namespace diffx
