#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffx/conditioning.hpp"
#include "diffx/modality.hpp"
#include "diffx/png_io.hpp"

namespace diffx {

enum class ShapeKind { circle, rectangle, triangle };
enum class SizeClass { small, medium, large };
enum class Emissivity { cold, warm, hot };
enum class Lighting { daytime, nighttime };

inline const std::array<std::string, 3> kShapeNames{"circle", "rectangle", "triangle"};
inline const std::array<std::string, 3> kSizeNames{"small", "medium", "large"};
inline const std::array<std::string, 4> kColorNames{"red", "green", "blue", "yellow"};
inline const std::array<std::array<double, 3>, 4> kColorValues{
    {{0.90, 0.15, 0.10}, {0.15, 0.80, 0.20}, {0.15, 0.30, 0.95}, {0.95, 0.85, 0.10}}};

inline std::string to_string(Lighting l) { return l == Lighting::daytime ? "daytime" : "nighttime"; }

/// Mask class id of a shape; 0 is background.
inline uint8_t class_id(ShapeKind s) { return static_cast<uint8_t>(static_cast<int>(s) + 1); }

struct SceneObject {
  ShapeKind shape = ShapeKind::circle;
  int color = 0;
  SizeClass size = SizeClass::medium;
  double cx = 0, cy = 0;  // center, pixels
  double extent = 0;      // half width, pixels
  int depth_rank = 0;     // 0 is nearest
  Emissivity emissivity = Emissivity::warm;

  /// Exact geometric bounds (x0, y0, x1, y1) in pixels.
  std::array<double, 4> bounds() const {
    const double hy = shape == ShapeKind::rectangle ? 0.7 * extent : extent;
    return {cx - extent, cy - hy, cx + extent, cy + hy};
  }

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    switch (shape) {
      case ShapeKind::circle: return dx * dx + dy * dy <= extent * extent;
      case ShapeKind::rectangle: return std::abs(dx) <= extent && std::abs(dy) <= 0.7 * extent;
      case ShapeKind::triangle:
        // apex at (cx, cy - e), base from (cx - e, cy + e) to (cx + e, cy + e)
        return dy <= extent && dy >= -extent && std::abs(dx) <= (dy + extent) / 2.0;
    }
    return false;
  }
};

struct SceneSpec {
  uint64_t seed = 0;
  int64_t size = 64;
  std::vector<SceneObject> objects;
  int background = 0;  // style index in [0, 3)
  Lighting lighting = Lighting::daytime;
};

struct DatasetRecord {
  std::string id;
  uint64_t seed = 0;
  std::map<Modality, Image8> images;  // every modality, 8-bit levels
  std::vector<Box> boxes;
  Image8 mask;  // class ids
  std::string caption;

  LayoutCondition layout(LayoutKind kind) const {
    switch (kind) {
      case LayoutKind::boxes: return {kind, boxes, {}};
      case LayoutKind::semantic_mask: return {kind, {}, mask};
      case LayoutKind::salient_map: return {kind, {}, images.at(Modality::salient)};
      case LayoutKind::edge_map: return {kind, {}, images.at(Modality::edge)};
    }
    return {};
  }
  bool operator==(const DatasetRecord&) const = default;
};

inline double size_fraction(SizeClass s) {
  static constexpr double f[3] = {0.09, 0.13, 0.18};
  return f[static_cast<int>(s)];
}

inline std::string region_name(double cx, double cy, int64_t size) {
  static const char* rows[3] = {"top", "", "bottom"};
  static const char* cols[3] = {"left", "", "right"};
  const int r = std::clamp(static_cast<int>(3.0 * cy / static_cast<double>(size)), 0, 2);
  const int c = std::clamp(static_cast<int>(3.0 * cx / static_cast<double>(size)), 0, 2);
  if (r == 1 && c == 1) return "center";
  if (r == 1) return cols[c];
  if (c == 1) return rows[r];
  return std::string(rows[r]) + " " + cols[c];
}

inline std::string make_caption(const SceneSpec& spec) {
  std::ostringstream os;
  const size_t n = spec.objects.size();
  os << "A " << to_string(spec.lighting) << " scene with " << n << (n == 1 ? " object" : " objects");
  if (n == 0) {
    os << '.';
    return os.str();
  }
  os << ':';
  for (size_t i = 0; i < n; ++i) {
    const auto& o = spec.objects[i];
    os << (i ? ", a " : " a ") << kSizeNames[static_cast<int>(o.size)] << ' ' << kColorNames[static_cast<size_t>(o.color)]
       << ' ' << kShapeNames[static_cast<int>(o.shape)] << " at the " << region_name(o.cx, o.cy, spec.size);
  }
  os << '.';
  return os.str();
}

/// Every word the caption template can produce.
inline std::vector<std::string> caption_vocabulary() {
  std::vector<std::string> w{"a", "scene", "with", "object", "objects", "at", "the", "daytime", "nighttime",
                             "top", "bottom", "left", "right", "center"};
  for (const auto& s : kShapeNames) w.push_back(s);
  for (const auto& s : kSizeNames) w.push_back(s);
  for (const auto& s : kColorNames) w.push_back(s);
  for (int i = 0; i <= 30; ++i) w.push_back(std::to_string(i));
  return w;
}

inline void validate_spec(const SceneSpec& spec) {
  if (spec.size < 8) throw DataError("scene canvas must be at least 8 pixels");
  std::vector<int> ranks;
  for (const auto& o : spec.objects) {
    auto b = o.bounds();
    if (b[0] < 0 || b[1] < 0 || b[2] > static_cast<double>(spec.size) || b[3] > static_cast<double>(spec.size))
      throw DataError("scene object outside the canvas");
    if (o.color < 0 || o.color >= static_cast<int>(kColorNames.size())) throw DataError("unknown object color");
    ranks.push_back(o.depth_rank);
  }
  std::sort(ranks.begin(), ranks.end());
  if (std::adjacent_find(ranks.begin(), ranks.end()) != ranks.end()) throw DataError("depth ranks must be unique");
}

/// Random scene with n objects in [min_objects, max_objects] placed without
/// bounding-box overlap (1 pixel apart). Each object gets `attempts` random
/// positions; a failed layout is redrawn up to `rerolls` times from the same
/// stream before PlacementError is thrown.
inline SceneSpec random_scene_spec(uint64_t seed, int64_t size, int min_objects, int max_objects, int attempts = 100,
                                   int rerolls = 20) {
  Rng rng(seed);
  SceneSpec spec;
  spec.seed = seed;
  spec.size = size;
  spec.lighting = rng.uniform() < 0.5 ? Lighting::daytime : Lighting::nighttime;
  spec.background = static_cast<int>(rng.integer(0, 2));
  const int n = static_cast<int>(rng.integer(min_objects, max_objects));
  const double S = static_cast<double>(size);
  for (int roll = 0; roll <= rerolls; ++roll) {
    spec.objects.clear();
    std::vector<int> ranks(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) ranks[static_cast<size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i) std::swap(ranks[static_cast<size_t>(i)], ranks[static_cast<size_t>(rng.integer(0, i))]);
    bool ok = true;
    for (int i = 0; i < n && ok; ++i) {
      SceneObject o;
      o.shape = static_cast<ShapeKind>(rng.integer(0, 2));
      o.color = static_cast<int>(rng.integer(0, 3));
      o.size = static_cast<SizeClass>(rng.integer(0, 2));
      o.emissivity = static_cast<Emissivity>(rng.integer(0, 2));
      o.depth_rank = ranks[static_cast<size_t>(i)];
      o.extent = size_fraction(o.size) * S;
      bool placed = false;
      for (int a = 0; a < attempts && !placed; ++a) {
        o.cx = rng.uniform(o.extent, S - o.extent);
        o.cy = rng.uniform(o.extent, S - o.extent);
        const auto b = o.bounds();
        placed = true;
        for (const auto& p : spec.objects) {
          const auto q = p.bounds();
          if (b[0] < q[2] + 1 && q[0] < b[2] + 1 && b[1] < q[3] + 1 && q[1] < b[3] + 1) placed = false;
        }
      }
      if (placed)
        spec.objects.push_back(o);
      else
        ok = false;
    }
    if (ok) return spec;
  }
  throw PlacementError("could not place " + std::to_string(n) + " objects without overlap on a " + std::to_string(size) +
                       " pixel canvas (seed " + std::to_string(seed) + ")");
}

namespace detail {

inline double background_level(const SceneSpec& spec, double y) {
  static constexpr double base[3] = {0.55, 0.45, 0.65};
  return base[spec.background] + 0.1 * (y / static_cast<double>(spec.size) - 0.5);
}

inline double lighting_gain(Lighting l) { return l == Lighting::daytime ? 1.0 : 0.3; }

inline double emissivity_level(Emissivity e) {
  static constexpr double v[3] = {-0.2, 0.4, 0.9};
  return v[static_cast<int>(e)];
}

}  // namespace detail

/// Renders every modality, the layouts and the caption for a scene. Pixel
/// (x, y) belongs to an object when its center (x + 0.5, y + 0.5) lies inside
/// the object's geometry.
inline DatasetRecord generate_scene(const SceneSpec& spec, std::string id = "") {
  validate_spec(spec);
  const int64_t S = spec.size;
  const size_t n = spec.objects.size();
  const double gain = detail::lighting_gain(spec.lighting);
  std::vector<double> rgb(static_cast<size_t>(3 * S * S)), thermal(static_cast<size_t>(S * S)),
      depth(static_cast<size_t>(S * S), -1.0);
  Image8 mask(1, S, S, 0), salient(1, S, S, to_level(-1.0));
  const double night_bg = spec.lighting == Lighting::daytime ? 0.0 : -0.6;

  for (int64_t y = 0; y < S; ++y)
    for (int64_t x = 0; x < S; ++x) {
      const int64_t i = y * S + x;
      const double bg = detail::background_level(spec, static_cast<double>(y) + 0.5) * gain;
      for (int c = 0; c < 3; ++c) rgb[static_cast<size_t>(c * S * S + i)] = 2.0 * bg - 1.0;
      thermal[static_cast<size_t>(i)] = night_bg;
      for (const auto& o : spec.objects) {
        if (!o.contains(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) continue;
        const auto& col = kColorValues[static_cast<size_t>(o.color)];
        for (int c = 0; c < 3; ++c) rgb[static_cast<size_t>(c * S * S + i)] = 2.0 * col[static_cast<size_t>(c)] * gain - 1.0;
        thermal[static_cast<size_t>(i)] = detail::emissivity_level(o.emissivity);
        const double far = n > 1 ? static_cast<double>(o.depth_rank) / static_cast<double>(n - 1) : 0.0;
        depth[static_cast<size_t>(i)] = 1.0 - 0.7 * far;
        mask.pixels[static_cast<size_t>(i)] = class_id(o.shape);
        salient.pixels[static_cast<size_t>(i)] = to_level(1.0);
      }
    }

  DatasetRecord r;
  r.id = std::move(id);
  r.seed = spec.seed;
  Image8 rgb8(3, S, S), th8(1, S, S), d8(1, S, S), edge(1, S, S);
  for (size_t k = 0; k < rgb.size(); ++k) rgb8.pixels[k] = to_level(rgb[k]);
  for (size_t k = 0; k < thermal.size(); ++k) {
    th8.pixels[k] = to_level(thermal[k]);
    d8.pixels[k] = to_level(depth[k]);
  }
  // Sobel gradient magnitude (normalized to step height), max over channels.
  auto px = [&](int c, int64_t y, int64_t x) {
    y = std::clamp<int64_t>(y, 0, S - 1);
    x = std::clamp<int64_t>(x, 0, S - 1);
    return rgb[static_cast<size_t>(c * S * S + y * S + x)];
  };
  for (int64_t y = 0; y < S; ++y)
    for (int64_t x = 0; x < S; ++x) {
      double mag = 0;
      for (int c = 0; c < 3; ++c) {
        const double gx = (px(c, y - 1, x + 1) + 2 * px(c, y, x + 1) + px(c, y + 1, x + 1) - px(c, y - 1, x - 1) -
                           2 * px(c, y, x - 1) - px(c, y + 1, x - 1)) / 4.0;
        const double gy = (px(c, y + 1, x - 1) + 2 * px(c, y + 1, x) + px(c, y + 1, x + 1) - px(c, y - 1, x - 1) -
                           2 * px(c, y - 1, x) - px(c, y - 1, x + 1)) / 4.0;
        mag = std::max(mag, std::hypot(gx, gy));
      }
      edge.at(0, y, x) = to_level(mag > 0.1 ? 1.0 : -1.0);
    }
  r.images[Modality::rgb] = std::move(rgb8);
  r.images[Modality::thermal] = std::move(th8);
  r.images[Modality::depth] = std::move(d8);
  r.images[Modality::edge] = std::move(edge);
  r.images[Modality::salient] = std::move(salient);
  r.mask = std::move(mask);
  const double Sd = static_cast<double>(S);
  for (const auto& o : spec.objects) {
    const auto b = o.bounds();
    r.boxes.push_back({b[0] / Sd, b[1] / Sd, b[2] / Sd, b[3] / Sd, kShapeNames[static_cast<int>(o.shape)]});
  }
  r.caption = make_caption(spec);
  return r;
}

/// (B, c, H, W) tensors of the requested modalities for a batch of records.
template <class T>
ModalBundle<T> to_bundle(const std::vector<const DatasetRecord*>& recs, const std::vector<Modality>& mods) {
  ModalBundle<T> out;
  for (Modality m : mods) {
    std::vector<Tensor<T>> items;
    for (const auto* r : recs) {
      auto it = r->images.find(m);
      if (it == r->images.end()) throw DataError("record " + r->id + " has no " + to_string(m) + " image");
      if (it->second.channels != channels_of(m))
        throw DataError("record " + r->id + ": " + to_string(m) + " image has " + std::to_string(it->second.channels) +
                        " channels");
      items.push_back(to_tensor<T>(it->second));
    }
    out.push_back({m, stack(items)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory format (one directory per split):
//   manifest.json          {"format", "version", "config_hash", "image_size",
//                           "records": [{"id", "seed", "hash"}]}
//   {id}_{modality}.png    rgb (3 channels), thermal/depth/edge/salient (1)
//   {id}_mask.png          class ids (0 background)
//   {id}_boxes.json        {"boxes": [{"x0","y0","x1","y1","label"}]}
//   {id}_caption.txt       caption text, no trailing newline
// ---------------------------------------------------------------------------

inline constexpr int kDatasetVersion = 1;

inline uint64_t record_hash(const DatasetRecord& r) {
  std::string blob = r.caption;
  for (const auto& [m, img] : r.images) blob.append(img.pixels.begin(), img.pixels.end());
  blob.append(r.mask.pixels.begin(), r.mask.pixels.end());
  for (const auto& b : r.boxes) {
    std::ostringstream os;
    os.precision(17);
    os << b.x0 << ',' << b.y0 << ',' << b.x1 << ',' << b.y1 << ',' << b.label << ';';
    blob += os.str();
  }
  return fnv1a(blob);
}

namespace detail {

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
  if (!out) throw DataError("cannot write " + p.string());
}

inline nlohmann::json boxes_json(const std::vector<Box>& boxes) {
  nlohmann::json j = {{"boxes", nlohmann::json::array()}};
  for (const auto& b : boxes) j["boxes"].push_back({{"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}, {"label", b.label}});
  return j;
}

inline std::vector<Box> parse_boxes(const nlohmann::json& j) {
  std::vector<Box> out;
  for (const auto& b : j.at("boxes"))
    out.push_back({b.at("x0").get<double>(), b.at("y0").get<double>(), b.at("x1").get<double>(), b.at("y1").get<double>(),
                   b.at("label").get<std::string>()});
  return out;
}

}  // namespace detail

/// Writes one split. Returns the manifest hash (FNV-1a of manifest.json).
inline uint64_t write_dataset(const std::vector<DatasetRecord>& records, const std::filesystem::path& dir,
                              const std::string& config_hash = "") {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest = {{"format", "diffx-synth"},
                             {"version", kDatasetVersion},
                             {"config_hash", config_hash},
                             {"image_size", records.empty() ? 0 : records[0].mask.height},
                             {"records", nlohmann::json::array()}};
  for (const auto& r : records) {
    if (r.id.empty()) throw DataError("record without id");
    for (const auto& [m, img] : r.images) write_png(dir / (r.id + "_" + to_string(m) + ".png"), img);
    write_png(dir / (r.id + "_mask.png"), r.mask);
    detail::write_text(dir / (r.id + "_boxes.json"), detail::boxes_json(r.boxes).dump(2));
    detail::write_text(dir / (r.id + "_caption.txt"), r.caption);
    manifest["records"].push_back({{"id", r.id}, {"seed", r.seed}, {"hash", hex64(record_hash(r))}});
  }
  const std::string text = manifest.dump(2) + "\n";
  detail::write_text(dir / "manifest.json", text);
  return fnv1a(text);
}

inline uint64_t manifest_hash(const std::filesystem::path& dir) {
  return fnv1a(detail::read_text(dir / "manifest.json"));
}

inline std::vector<DatasetRecord> read_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw DataError("no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(detail::read_text(mpath));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt manifest " + mpath.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "diffx-synth") throw DataError("not a dataset manifest: " + mpath.string());
  if (manifest.value("version", -1) != kDatasetVersion)
    throw DataError("dataset version " + manifest["version"].dump() + " unsupported (expected " +
                    std::to_string(kDatasetVersion) + ")");
  std::vector<DatasetRecord> out;
  size_t index = 0;
  for (const auto& entry : manifest.at("records")) {
    DatasetRecord r;
    r.id = entry.at("id").get<std::string>();
    r.seed = entry.at("seed").get<uint64_t>();
    const std::string where = "record " + std::to_string(index) + " (" + r.id + ")";
    auto need = [&](const std::string& suffix) {
      fs::path p = dir / (r.id + suffix);
      if (!fs::exists(p)) throw DataError(where + ": missing " + p.filename().string());
      return p;
    };
    try {
      for (Modality m : {Modality::rgb, Modality::thermal, Modality::depth, Modality::edge, Modality::salient}) {
        Image8 img = read_png(need("_" + to_string(m) + ".png"));
        if (img.channels != channels_of(m))
          throw DataError(where + ": " + to_string(m) + " image has " + std::to_string(img.channels) + " channels");
        r.images[m] = std::move(img);
      }
      r.mask = read_png(need("_mask.png"));
      r.boxes = detail::parse_boxes(nlohmann::json::parse(detail::read_text(need("_boxes.json"))));
      r.caption = detail::read_text(need("_caption.txt"));
    } catch (const DataError& e) {
      const std::string msg = e.what();
      if (msg.rfind("record ", 0) == 0) throw;
      throw DataError(where + ": " + msg);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": corrupt boxes file: " + e.what());
    }
    if (hex64(record_hash(r)) != entry.value("hash", "")) throw DataError(where + ": content hash mismatch");
    out.push_back(std::move(r));
    ++index;
  }
  return out;
}

/// External paired data. Convention: a flat directory holding
/// {id}_rgb.png (3 channels) and {id}_{x}.png (1 channel) for one auxiliary
/// modality x, with optional {id}_caption.txt, {id}_boxes.json and
/// {id}_mask.png. Ids are taken from the *_rgb.png files in sorted order.
/// Missing salient/edge maps are derived from the mask when present.
inline std::vector<DatasetRecord> read_external(const std::filesystem::path& dir, Modality x, int64_t image_size) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("external dataset directory not found: " + dir.string());
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.size() > 8 && name.ends_with("_rgb.png")) ids.push_back(name.substr(0, name.size() - 8));
  }
  std::sort(ids.begin(), ids.end());
  std::vector<DatasetRecord> out;
  for (size_t i = 0; i < ids.size(); ++i) {
    DatasetRecord r;
    r.id = ids[i];
    const std::string where = "external record " + std::to_string(i) + " (" + r.id + ")";
    auto load = [&](Modality m) {
      const fs::path p = dir / (r.id + "_" + to_string(m) + ".png");
      if (!fs::exists(p)) throw DataError(where + ": missing " + p.filename().string());
      Image8 img = read_png(p);
      if (img.channels != channels_of(m))
        throw DataError(where + ": " + to_string(m) + " must have " + std::to_string(channels_of(m)) + " channel(s), found " +
                        std::to_string(img.channels));
      if (img.height != image_size || img.width != image_size)
        throw DataError(where + ": expected " + std::to_string(image_size) + "x" + std::to_string(image_size) + " images");
      r.images[m] = std::move(img);
    };
    load(Modality::rgb);
    load(x);
    if (fs::exists(dir / (r.id + "_caption.txt"))) r.caption = detail::read_text(dir / (r.id + "_caption.txt"));
    if (fs::exists(dir / (r.id + "_boxes.json")))
      r.boxes = detail::parse_boxes(nlohmann::json::parse(detail::read_text(dir / (r.id + "_boxes.json"))));
    if (fs::exists(dir / (r.id + "_mask.png"))) {
      r.mask = read_png(dir / (r.id + "_mask.png"));
      Image8 sal(1, image_size, image_size);
      for (size_t k = 0; k < sal.pixels.size(); ++k) sal.pixels[k] = to_level(r.mask.pixels[k] ? 1.0 : -1.0);
      r.images.emplace(Modality::salient, std::move(sal));
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace diffx
