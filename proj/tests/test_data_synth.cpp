#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <regex>

#include "diffx/data_synth.hpp"

using namespace diffx;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("diffx_test_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<DatasetRecord> random_records(int n, int64_t size, uint64_t root) {
  std::vector<DatasetRecord> out;
  for (int i = 0; i < n; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "r%05d", i);
    out.push_back(generate_scene(random_scene_spec(derive_seed(root, static_cast<uint64_t>(i)), size, 0, 4), id));
  }
  return out;
}

}  // namespace

TEST(Scene, EmptyObjectList) {
  SceneSpec spec;
  spec.size = 32;
  auto r = generate_scene(spec);
  EXPECT_TRUE(r.boxes.empty());
  EXPECT_EQ(r.caption, "A daytime scene with 0 objects.");
  for (uint8_t v : r.mask.pixels) EXPECT_EQ(v, 0);
  for (uint8_t v : r.images.at(Modality::salient).pixels) EXPECT_EQ(v, 0);
  for (uint8_t v : r.images.at(Modality::depth).pixels) EXPECT_EQ(v, 0);
  for (uint8_t v : r.images.at(Modality::edge).pixels) EXPECT_EQ(v, 0);
  spec.lighting = Lighting::nighttime;
  EXPECT_EQ(generate_scene(spec).caption, "A nighttime scene with 0 objects.");
}

TEST(Scene, CenteredCircleGeometry) {
  SceneSpec spec;
  spec.size = 64;
  SceneObject o;
  o.shape = ShapeKind::circle;
  o.size = SizeClass::large;
  o.cx = 32;
  o.cy = 32;
  o.extent = 12;
  spec.objects.push_back(o);
  auto r = generate_scene(spec);
  int64_t count = 0, x0 = 64, y0 = 64, x1 = -1, y1 = -1;
  for (int64_t y = 0; y < 64; ++y)
    for (int64_t x = 0; x < 64; ++x)
      if (r.mask.at(0, y, x) == class_id(ShapeKind::circle)) {
        ++count;
        x0 = std::min(x0, x), y0 = std::min(y0, y), x1 = std::max(x1, x + 1), y1 = std::max(y1, y + 1);
      }
  const double area = std::numbers::pi * 144.0;
  EXPECT_NEAR(count, area, 0.05 * area);
  ASSERT_EQ(r.boxes.size(), 1u);
  EXPECT_NEAR(r.boxes[0].x0 * 64, x0, 1.0);
  EXPECT_NEAR(r.boxes[0].y0 * 64, y0, 1.0);
  EXPECT_NEAR(r.boxes[0].x1 * 64, x1, 1.0);
  EXPECT_NEAR(r.boxes[0].y1 * 64, y1, 1.0);
  EXPECT_EQ(r.caption, "A daytime scene with 1 object: a large red circle at the center.");
}

TEST(Scene, SameSeedIsBitIdentical) {
  auto a = generate_scene(random_scene_spec(42, 32, 1, 4), "x");
  auto b = generate_scene(random_scene_spec(42, 32, 1, 4), "x");
  EXPECT_EQ(a, b);
  auto c = generate_scene(random_scene_spec(43, 32, 1, 4), "x");
  EXPECT_NE(a, c);
}

TEST(Scene, LayoutAndCaptionConsistency) {
  const std::regex item("(small|medium|large) (red|green|blue|yellow) (circle|rectangle|triangle) at the ([a-z ]+)");
  for (uint64_t seed = 0; seed < 60; ++seed) {
    auto spec = random_scene_spec(seed, 32, 0, 5);
    auto r = generate_scene(spec);
    ASSERT_EQ(r.boxes.size(), spec.objects.size());
    // Every labelled pixel lies inside a box with the matching label.
    for (int64_t y = 0; y < 32; ++y)
      for (int64_t x = 0; x < 32; ++x) {
        const uint8_t c = r.mask.at(0, y, x);
        EXPECT_EQ(c != 0, r.images.at(Modality::salient).at(0, y, x) == 255);
        if (!c) continue;
        bool covered = false;
        for (const auto& b : r.boxes)
          covered = covered || (b.label == kShapeNames[c - 1] && b.x0 * 32 <= x + 0.5 && x + 0.5 <= b.x1 * 32 &&
                                b.y0 * 32 <= y + 0.5 && y + 0.5 <= b.y1 * 32);
        EXPECT_TRUE(covered) << "seed " << seed << " pixel " << x << "," << y;
      }
    // Caption lists exactly the objects, in order.
    std::vector<std::string> mentioned;
    for (auto it = std::sregex_iterator(r.caption.begin(), r.caption.end(), item); it != std::sregex_iterator(); ++it)
      mentioned.push_back((*it)[1].str() + " " + (*it)[2].str() + " " + (*it)[3].str());
    ASSERT_EQ(mentioned.size(), spec.objects.size()) << r.caption;
    for (size_t i = 0; i < mentioned.size(); ++i) {
      const auto& o = spec.objects[i];
      EXPECT_EQ(mentioned[i], kSizeNames[static_cast<int>(o.size)] + " " + kColorNames[static_cast<size_t>(o.color)] + " " +
                                  kShapeNames[static_cast<int>(o.shape)]);
    }
    EXPECT_NE(r.caption.find(to_string(spec.lighting)), std::string::npos);
    Tokenizer tok(caption_vocabulary());
    for (int64_t id : tok.encode(r.caption)) EXPECT_NE(id, Tokenizer::kUnk) << r.caption;
  }
}

TEST(Scene, DepthThermalAndLighting) {
  SceneSpec spec;
  spec.size = 32;
  SceneObject near, far;
  near.cx = 8, near.cy = 8, near.extent = 4, near.depth_rank = 0, near.emissivity = Emissivity::hot;
  far.cx = 24, far.cy = 24, far.extent = 4, far.depth_rank = 1, far.emissivity = Emissivity::cold;
  spec.objects = {near, far};
  auto day = generate_scene(spec);
  const auto& d = day.images.at(Modality::depth);
  EXPECT_GT(d.at(0, 8, 8), d.at(0, 24, 24));
  EXPECT_GT(from_level(d.at(0, 24, 24)), 0.2);
  EXPECT_EQ(d.at(0, 0, 31), 0);
  const auto& t = day.images.at(Modality::thermal);
  EXPECT_GT(t.at(0, 8, 8), t.at(0, 0, 31));
  EXPECT_LT(t.at(0, 24, 24), t.at(0, 0, 31));

  spec.lighting = Lighting::nighttime;
  auto night = generate_scene(spec);
  EXPECT_LT(night.images.at(Modality::thermal).at(0, 0, 31), t.at(0, 0, 31));
  double sd = 0, sn = 0;
  for (uint8_t v : day.images.at(Modality::rgb).pixels) sd += v;
  for (uint8_t v : night.images.at(Modality::rgb).pixels) sn += v;
  EXPECT_LT(sn, sd);
  EXPECT_EQ(night.mask, day.mask);
  // Edges trace the object outlines, not the interiors.
  const auto& e = day.images.at(Modality::edge);
  EXPECT_EQ(e.at(0, 8, 8), 0);
  EXPECT_EQ(e.at(0, 8, 4), 255);
}

TEST(Scene, InvalidSpecsAndPlacementFailure) {
  EXPECT_THROW(random_scene_spec(1, 16, 30, 30), PlacementError);
  SceneSpec spec;
  spec.size = 32;
  SceneObject o;
  o.cx = 2, o.cy = 2, o.extent = 4;
  spec.objects = {o};
  EXPECT_THROW(generate_scene(spec), DataError);
  o.cx = 10, o.cy = 10;
  spec.objects = {o, o};
  EXPECT_THROW(generate_scene(spec), DataError);  // duplicate depth ranks
}

TEST(Dataset, RoundTripHundredRecords) {
  auto dir = scratch("roundtrip");
  auto recs = random_records(100, 32, 7);
  const uint64_t h = write_dataset(recs, dir, "cfg");
  EXPECT_EQ(manifest_hash(dir), h);
  auto back = read_dataset(dir);
  ASSERT_EQ(back.size(), recs.size());
  for (size_t i = 0; i < recs.size(); ++i) EXPECT_EQ(back[i], recs[i]) << i;
  auto dir2 = scratch("roundtrip2");
  EXPECT_EQ(write_dataset(back, dir2, "cfg"), h);
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST(Dataset, EmptySplit) {
  auto dir = scratch("empty");
  write_dataset({}, dir);
  EXPECT_TRUE(read_dataset(dir).empty());
  fs::remove_all(dir);
}

TEST(Dataset, TypedErrors) {
  auto dir = scratch("errors");
  auto recs = random_records(3, 16, 9);
  write_dataset(recs, dir);
  fs::remove(dir / "r00001_boxes.json");
  try {
    read_dataset(dir);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("record 1 (r00001)"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("boxes"), std::string::npos) << e.what();
    EXPECT_EQ(e.exit_code(), 3);
  }
  write_dataset(recs, dir);
  detail::write_text(dir / "r00002_depth.png", "not a png");
  try {
    read_dataset(dir);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("record 2"), std::string::npos) << e.what();
  }
  write_dataset(recs, dir);
  auto text = detail::read_text(dir / "manifest.json");
  text.replace(text.find("\"version\": 1"), 12, "\"version\": 9");
  detail::write_text(dir / "manifest.json", text);
  EXPECT_THROW(read_dataset(dir), DataError);
  EXPECT_THROW(read_dataset(dir / "nope"), DataError);
  fs::remove_all(dir);
}

TEST(Dataset, ExternalAdapterValidatesChannels) {
  auto dir = scratch("external");
  fs::create_directories(dir);
  auto recs = random_records(2, 16, 11);
  for (const auto& r : recs) {
    write_png(dir / (r.id + "_rgb.png"), r.images.at(Modality::rgb));
    write_png(dir / (r.id + "_thermal.png"), r.images.at(Modality::thermal));
  }
  detail::write_text(dir / (recs[0].id + "_caption.txt"), "A nighttime street.");
  auto ext = read_external(dir, Modality::thermal, 16);
  ASSERT_EQ(ext.size(), 2u);
  EXPECT_EQ(ext[0].images.at(Modality::thermal), recs[0].images.at(Modality::thermal));
  EXPECT_EQ(ext[0].caption, "A nighttime street.");
  EXPECT_THROW(read_external(dir, Modality::thermal, 32), DataError);
  write_png(dir / (recs[1].id + "_thermal.png"), recs[1].images.at(Modality::rgb));
  EXPECT_THROW(read_external(dir, Modality::thermal, 16), DataError);
  EXPECT_THROW(read_external(dir, Modality::depth, 16), DataError);
  fs::remove_all(dir);
}

TEST(Dataset, BundleFromRecords) {
  auto recs = random_records(3, 16, 13);
  std::vector<const DatasetRecord*> ptrs{&recs[0], &recs[2]};
  auto b = to_bundle<float>(ptrs, {Modality::rgb, Modality::depth});
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[0].image.shape(), (Shape{2, 3, 16, 16}));
  EXPECT_EQ(b[1].image.shape(), (Shape{2, 1, 16, 16}));
  EXPECT_EQ(b[1].image[16 * 16 + 5], static_cast<float>(from_level(recs[2].images.at(Modality::depth).pixels[5])));
}
