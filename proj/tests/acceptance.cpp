// Acceptance suite: one PASS/FAIL line per criterion. Criterion 6 runs only
// with --extended.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "diffx/pipeline.hpp"
#include "gradcheck.hpp"

using namespace diffx;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

fs::path g_work;
fs::path g_configs = DIFFX_CONFIG_DIR;

RunConfig desk_config(const std::string& file, const std::string& name) {
  RunConfig c;
  apply_preset(c, "desk");
  apply_config_file(c, g_configs / file);
  const fs::path out = g_work / name;
  fs::remove_all(out);
  c.out = out.string();
  c.validate();
  return c;
}

std::ofstream open_log(const RunConfig& c) {
  fs::create_directories(c.out);
  return std::ofstream(fs::path(c.out) / "acceptance.log");
}

// ---------------------------------------------------------------- 1

Outcome gate_closed_identity() {
  Rng rng(101);
  GatedFuser<double> fuser(rng, 16, 12, 1.0);
  GroundingFeature<double> H{constant(rng.normal_tensor<double>({2, 5, 16})), {5, 3}};
  CaptionEmbedding<double> c{constant(rng.normal_tensor<double>({2, 7, 12})), {7, 4}, {false, false}};
  const double d_fuse = max_abs_diff(fuser(H, c).tokens.value(), H.tokens.value());

  GatedAdapter<double> adapter(rng, 16, 12, 4);
  auto v = constant(rng.normal_tensor<double>({2, 9, 16}));
  GroundingFeature<double> g{constant(rng.normal_tensor<double>({2, 5, 12})), {5, 2}};
  const double d_adapter = max_abs_diff(adapter(v, g).value(), v.value());

  RunConfig cfg;
  apply_preset(cfg, "desk");
  const UNetConfig ucfg = cfg.unet_config();
  DiffXUNet<float> net(ucfg, 102);
  const auto plain = strip_gates(net);
  const int64_t S = ucfg.latent_size;
  auto z = constant(rng.normal_tensor<float>({2, ucfg.latent_channels, S, S}));
  CaptionEmbedding<float> cf{constant(rng.normal_tensor<float>({2, 6, ucfg.d_text})), {6, 4}, {false, false}};
  GroundingFeature<float> gf{constant(rng.normal_tensor<float>({2, 3, ucfg.d_ground})), {3, 1}};
  const double d_unet = max_abs_diff(net(z, {4, 77}, cf, gf).value(), (*plain)(z, {4, 77}, cf, gf).value());

  const bool ok = d_fuse == 0.0 && d_adapter == 0.0 && d_unet < 1e-6;
  return {ok, "fuse " + fmt(d_fuse) + ", adapter " + fmt(d_adapter) + ", predict_noise vs stripped " + fmt(d_unet) +
                  " (limit 1e-6)"};
}

// ---------------------------------------------------------------- 2

Outcome gradient_suite() {
  VaeConfig vcfg;
  vcfg.image_size = 8;
  vcfg.stem_width = 2;
  vcfg.widths = {2, 2};
  vcfg.latent_channels = 2;
  vcfg.groups = 1;
  vcfg.lp_levels = 2;
  DpVae<double> vae(vcfg, 201);
  Rng rng(202);
  ModalBundle<double> b;
  for (Modality m : vcfg.modalities) b.push_back({m, rng.uniform_tensor<double>({2, channels_of(m), 8, 8}, -1, 1)});
  auto eps = rng.normal_tensor<double>(vcfg.latent_shape(2));
  FeatureExtractor<double> fx;
  const VaeLossWeights w{1.0, 0.1, 1e-2};
  const auto r_vae = testing::grad_check(vae.named_parameters(), [&] {
    auto d = vae.encode(b);
    return dp_vae_loss(b, vae.decode_vars(reparameterize(d, eps)), d, w, fx).total;
  });

  GatedFuser<double> f(rng, 6, 5, 1.0);
  Var<double> g1 = f.gamma1(), g2 = f.gamma2();
  g1.mutable_value()[0] = 0.3;
  g2.mutable_value()[0] = -0.4;
  Var<double> H = parameter(rng.normal_tensor<double>({2, 3, 6}));
  Var<double> c = parameter(rng.normal_tensor<double>({2, 4, 5}));
  auto fparams = f.named_parameters();
  fparams.emplace_back("H", H);
  fparams.emplace_back("c", c);
  const auto r_fuse = testing::grad_check(fparams, [&] {
    return ops::sum(ops::square(f({H, {3, 2}}, {c, {4, 3}, {false, false}}).tokens));
  });

  UNetConfig ucfg;
  ucfg.latent_channels = 2;
  ucfg.latent_size = 4;
  ucfg.widths = {8, 8, 8};
  ucfg.groups = 4;
  ucfg.heads = 2;
  ucfg.d_ground = 6;
  ucfg.d_text = 5;
  DiffXUNet<double> net(ucfg, 203);
  for (const auto* a : net.adapters()) {
    Var<double> d1 = a->delta1(), d2 = a->delta2();
    d1.mutable_value()[0] = 0.4;
    d2.mutable_value()[0] = -0.2;
  }
  auto z = constant(rng.normal_tensor<double>({2, 2, 4, 4}));
  CaptionEmbedding<double> cap{constant(rng.normal_tensor<double>({2, 3, 5})), {3, 2}, {false, false}};
  GroundingFeature<double> gr{constant(rng.normal_tensor<double>({2, 2, 6})), {2, 1}};
  auto target = rng.normal_tensor<double>({2, 2, 4, 4});
  const auto r_unet = testing::grad_check(
      net.named_parameters(), [&] { return ops::mse(net(z, {7, 300}, cap, gr), constant(target)); }, 3);

  const bool ok = r_vae.max_rel_err < 1e-4 && r_fuse.max_rel_err < 1e-4 && r_unet.max_rel_err < 1e-3;
  return {ok, "dp_vae_loss " + fmt(r_vae.max_rel_err) + " (" + std::to_string(r_vae.checked) + " entries), fuse " +
                  fmt(r_fuse.max_rel_err) + ", micro-UNet " + fmt(r_unet.max_rel_err) + " (" + std::to_string(r_unet.checked) +
                  " entries)"};
}

// ---------------------------------------------------------------- 3

Outcome diffusion_statistics() {
  const auto s = make_schedule(100, 1e-4, 0.02);
  long double ref = 1.0L;
  for (int i = 0; i < 100; ++i) ref *= 1.0L - (1e-4L + (0.02L - 1e-4L) * i / 99);
  const double rel = static_cast<double>(std::abs((s.alpha_bars.back() - ref) / ref));

  Rng rng(301);
  const int t = 60, draws = 10000, D = 8;
  const Tensor<double> z0 = rng.normal_tensor<double>({D});
  const double mean_scale = std::sqrt(s.alpha_bar(t)), var = 1 - s.alpha_bar(t);
  std::vector<double> sum(D), sumsq(D);
  for (int d = 0; d < draws; ++d) {
    const auto zt = forward_noise(LatentState<double>{z0, 0}, t, rng.normal_tensor<double>({D}), s).z;
    for (int i = 0; i < D; ++i) {
      sum[static_cast<size_t>(i)] += zt[i];
      sumsq[static_cast<size_t>(i)] += zt[i] * zt[i];
    }
  }
  const double se = std::sqrt(var / draws);
  double worst_sigma = 0, worst_var = 0;
  for (int i = 0; i < D; ++i) {
    const double m = sum[static_cast<size_t>(i)] / draws;
    const double v = sumsq[static_cast<size_t>(i)] / draws - m * m;
    worst_sigma = std::max(worst_sigma, std::abs(m - mean_scale * z0[i]) / se);
    worst_var = std::max(worst_var, std::abs(v - var) / var);
  }
  const bool ok = rel < 1e-12 && worst_sigma < 3 && worst_var < 0.05;
  return {ok, "product oracle rel " + fmt(rel) + ", mean " + fmt(worst_sigma, 3) + " sigma, variance " +
                  fmt(100 * worst_var, 3) + "%"};
}

// ---------------------------------------------------------------- 4

Outcome laplacian_reconstruction() {
  Rng rng(401);
  double worst = 0;
  for (int K = 1; K <= 3; ++K)
    for (int i = 0; i < 100; ++i) {
      const auto img = rng.uniform_tensor<float>({3, 32, 32}, -1, 1);
      worst = std::max(worst, static_cast<double>(max_abs_diff(reconstruct(laplacian_pyramid(img, K)), img)));
    }
  return {worst < 1e-6, "max abs error " + fmt(worst) + " over 300 pyramids (limit 1e-6)"};
}

// ---------------------------------------------------------------- 5

Outcome lp_ablation() {
  const RunConfig cfg = desk_config("lp_ablation.cfg", "lp_ablation");
  auto log = open_log(cfg);
  cmd_datagen(cfg, true, log);
  const auto s = cmd_sweep(cfg, log);
  std::string d = std::to_string(s["wins"].get<size_t>()) + "/" + std::to_string(cfg.sweep_seeds.size()) + " seeds:";
  for (const auto& r : s["runs"])
    d += " [seed " + std::to_string(r["seed"].get<int64_t>()) + " psnr " + fmt(r["lp"]["psnr_x"].get<double>()) + " vs " +
         fmt(r["no_lp"]["psnr_x"].get<double>()) + ", ssim " + fmt(r["lp"]["ssim_x"].get<double>()) + " vs " +
         fmt(r["no_lp"]["ssim_x"].get<double>()) + "]";
  return {s["passed"].get<bool>(), d};
}

// ---------------------------------------------------------------- 6

Outcome shared_latent() {
  const RunConfig cfg = desk_config("shared.cfg", "shared");
  auto log = open_log(cfg);
  cmd_datagen(cfg, true, log);
  const auto s = cmd_sweep(cfg, log);
  std::string d = std::to_string(s["wins"].get<size_t>()) + "/" + std::to_string(cfg.sweep_seeds.size()) + " seeds:";
  for (const auto& r : s["runs"])
    d += " [seed " + std::to_string(r["seed"].get<int64_t>()) + " shared " +
         fmt(r["feature_distance_shared"].get<double>()) + " vs separate " + fmt(r["feature_distance_separate"].get<double>()) +
         "]";
  return {s["passed"].get<bool>(), d};
}

// ---------------------------------------------------------------- 7, 8

struct OverfitRun {
  RunConfig cfg;
  EvalReport report;
};

OverfitRun& overfit_run() {
  static std::optional<OverfitRun> run;
  if (!run) {
    RunConfig cfg = desk_config("overfit.cfg", "overfit");
    auto log = open_log(cfg);
    cmd_datagen(cfg, true, log);
    cmd_train_vae(cfg, {}, log);
    cmd_train_diffusion(cfg, {}, log);
    EvalReport rep = cmd_eval(cfg, log);
    run = OverfitRun{cfg, rep};
  }
  return *run;
}

Outcome caption_effect() {
  const RunConfig& cfg = overfit_run().cfg;
  std::ofstream log(fs::path(cfg.out) / "acceptance.log", std::ios::app);
  const auto s = cmd_sweep(cfg, log);
  const auto& m = s["mean"];
  const bool ok = s["caption_helps"].get<bool>() && s["lighting_flips"].get<bool>();
  return {ok, "alignment " + fmt(m["layout_alignment_true"].get<double>()) + " vs zero caption " +
                  fmt(m["layout_alignment_zero"].get<double>()) + ", paired feature distance " +
                  fmt(m["paired_feature_distance_true"].get<double>()) + " vs " +
                  fmt(m["paired_feature_distance_zero"].get<double>()) + ", brightness daytime " +
                  fmt(m["brightness_daytime"].get<double>(), 5) + " vs nighttime " +
                  fmt(m["brightness_nighttime"].get<double>(), 5)};
}

Outcome overfit_end_to_end() {
  const EvalReport& r = overfit_run().report;
  const bool ok = r.layout_alignment > 0.7 && r.ssim_x > 0.5;
  return {ok, "layout_alignment " + fmt(r.layout_alignment) + " (> 0.7), ssim_x " + fmt(r.ssim_x) + " (> 0.5) over " +
                  std::to_string(r.samples) + " training layouts"};
}

// ---------------------------------------------------------------- 9

std::map<std::string, uint64_t> tree_hashes(const fs::path& root) {
  std::map<std::string, uint64_t> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = fnv1a(detail::read_text(e.path()));
  return out;
}

Outcome cli_determinism() {
  const fs::path dir = g_work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path cfg = dir / "tiny.cfg";
  detail::write_text(cfg, R"(data.train = 8
data.val = 2
data.test = 4
data.image_size = 16
vae.stem_width = 8
vae.widths = 8,16
vae.groups = 4
vae.lp_levels = 2
vae.epochs = 2
cond.d_ground = 32
cond.d_text = 32
cond.d_label = 8
cond.mask_widths = 8,8,8
unet.widths = 16,16,32
unet.groups = 4
unet.heads = 2
diffusion.T = 20
train.warmup = 5
train.steps = 20
train.log_every = 5
sampler.steps = 5
sample.count = 2
eval.samples = 4
sweep.seeds = 1
)");
  const fs::path out = dir / "run";
  const std::vector<std::string> commands = {"datagen --force", "train-vae", "train-diffusion", "sample", "eval",
                                             "sweep --set sweep.kind=lp", "sweep --set sweep.kind=caption",
                                             "sweep --set sweep.kind=shared"};
  std::vector<std::map<std::string, uint64_t>> runs;
  for (int pass = 0; pass < 2; ++pass) {
    fs::remove_all(out);
    for (const auto& c : commands) {
      const std::string cmd = std::string("\"") + DIFFX_CLI + "\" " + c + " --preset desk --config \"" + cfg.string() +
                              "\" --seed 5 --out \"" + out.string() + "\" >> \"" + (dir / "cli.log").string() + "\" 2>&1";
      if (std::system(cmd.c_str()) != 0) return {false, "command failed: diffx " + c};
    }
    runs.push_back(tree_hashes(out));
  }
  size_t differ = 0;
  std::string first;
  for (const auto& [name, h] : runs[0]) {
    auto it = runs[1].find(name);
    if (it == runs[1].end() || it->second != h) {
      ++differ;
      if (first.empty()) first = name;
    }
  }
  const bool ok = differ == 0 && runs[0].size() == runs[1].size();
  return {ok, std::to_string(commands.size()) + " commands, " + std::to_string(runs[0].size()) + " artifacts, " +
                  std::to_string(differ) + " differ" + (first.empty() ? "" : " (first: " + first + ")")};
}

// ---------------------------------------------------------------- 10

template <class M>
bool same_parameters(const M& a, const M& b) {
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  if (pa.size() != pb.size()) return false;
  for (size_t i = 0; i < pa.size(); ++i)
    if (pa[i].first != pb[i].first || !(pa[i].second.value() == pb[i].second.value())) return false;
  return true;
}

Outcome format_round_trips() {
  const fs::path dir = g_work / "round_trip";
  fs::remove_all(dir);
  RunConfig cfg;
  apply_preset(cfg, "desk");
  const auto recs = synthesize_split(cfg, 0, 100);
  write_dataset(recs, dir / "data", data_config_hash(cfg));
  const bool data_ok = read_dataset(dir / "data") == recs;

  const Tokenizer tok(caption_vocabulary());
  DpVae<float> vae(cfg.vae_config(), 1);
  JointEmbedder<float> je(cfg.cond_config(), tok.vocab_size(), 2);
  DiffXUNet<float> unet(cfg.unet_config(), 3);
  Checkpoint ck;
  ck.kind = "diffusion";
  ck.add_module(vae, "vae/");
  ck.add_module(je, "je/");
  ck.add_module(unet, "unet/");
  save_checkpoint(dir / "model.ckpt", ck);
  DpVae<float> vae2(cfg.vae_config(), 11);
  JointEmbedder<float> je2(cfg.cond_config(), tok.vocab_size(), 12);
  DiffXUNet<float> unet2(cfg.unet_config(), 13);
  const Checkpoint back = load_checkpoint(dir / "model.ckpt", "diffusion");
  back.load_module(vae2, "vae/");
  back.load_module(je2, "je/");
  back.load_module(unet2, "unet/");
  const bool ckpt_ok = same_parameters(vae, vae2) && same_parameters(je, je2) && same_parameters(unet, unet2);

  auto caption = [](int words) {
    std::string s;
    for (int i = 0; i < words; ++i) s += i % 2 ? "red " : "circle ";
    return s;
  };
  const auto ids248 = tok.encode(caption(248)), ids249 = tok.encode(caption(249));
  bool accepted = false, rejected = false;
  try {
    accepted = je.embed_caption({ids248}).lengths[0] == 248;
  } catch (const OverlengthError&) {
  }
  try {
    je.embed_caption({ids249});
  } catch (const OverlengthError&) {
    rejected = true;
  }
  const bool tok_ok = ids248.size() == 248 && ids249.size() == 249 && accepted && rejected;
  return {data_ok && ckpt_ok && tok_ok, std::string("dataset 100 records ") + (data_ok ? "lossless" : "differs") +
                                            ", checkpoint " + (ckpt_ok ? "bit-exact" : "differs") + ", 248 tokens " +
                                            (accepted ? "accepted" : "rejected") + ", 249 tokens " +
                                            (rejected ? "rejected" : "accepted")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diffx acceptance suite"};
  bool extended = false;
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "diffx_acceptance").string();
  app.add_flag("--extended", extended, "also run the extended criterion 6");
  app.add_option("--only", only, "run only these criteria")->check(CLI::Range(1, 10));
  app.add_option("--work", work, "scratch directory for datasets and checkpoints");
  CLI11_PARSE(app, argc, argv);
  g_work = work;
  fs::create_directories(g_work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gate-closed identity", gate_closed_identity},
      {"gradient suite", gradient_suite},
      {"diffusion statistics", diffusion_statistics},
      {"laplacian reconstruction", laplacian_reconstruction},
      {"lp ablation", lp_ablation},
      {"shared latent vs separate", shared_latent},
      {"caption effect", caption_effect},
      {"overfit end-to-end", overfit_end_to_end},
      {"cli determinism", cli_determinism},
      {"format round-trips", format_round_trips}};

  int failed = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    const auto& [name, run] = criteria[i];
    const bool selected = only.empty() ? (n != 6 || extended) : std::find(only.begin(), only.end(), n) != only.end();
    if (!selected) {
      std::cout << "criterion " << n << " SKIP  " << name << (n == 6 && only.empty() ? ": extended, pass --extended" : ": not selected")
                << "\n";
      continue;
    }
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << "criterion " << n << " " << (o.pass ? "PASS" : "FAIL") << "  " << name << ": " << o.detail << " ["
              << fmt(secs, 3) << " s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
