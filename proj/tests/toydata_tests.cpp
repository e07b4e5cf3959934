#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "maskseg/toydata.hpp"

using namespace maskseg;

TEST_CASE("ground-truth masks are disjoint and cover the grid") {
  SceneConfig cfg;
  Rng root(101);
  std::vector<long long> class_counts(cfg.num_classes(), 0);
  for (int s = 0; s < 10000; ++s) {
    Rng rng = root.split(s);
    GroundTruthScene scene = generate_scene(cfg, rng);
    size_t hw = static_cast<size_t>(scene.height) * scene.width;
    std::vector<int> hits(hw, 0);
    for (const auto& seg : scene.segments) {
      REQUIRE(seg.mask.v.size() == hw);
      long long area = 0;
      for (size_t p = 0; p < hw; ++p) {
        hits[p] += seg.mask.v[p];
        area += seg.mask.v[p];
      }
      CHECK(area > 0);
      ++class_counts[seg.class_id];
    }
    for (size_t p = 0; p < hw; ++p) CHECK(hits[p] <= 1);  // pairwise disjoint
    // union of masks plus void is the full grid by construction; with the
    // background stuff region the void is empty
    long long covered = 0;
    for (size_t p = 0; p < hw; ++p) covered += hits[p];
    CHECK(covered == static_cast<long long>(hw));
  }

  // chi-square sanity on thing-class frequencies
  long long things_total = 0;
  for (int c = 0; c < cfg.thing_classes; ++c) things_total += class_counts[c];
  REQUIRE(things_total > 1000);
  double expected = static_cast<double>(things_total) / cfg.thing_classes;
  double chi2 = 0;
  for (int c = 0; c < cfg.thing_classes; ++c) {
    double d = class_counts[c] - expected;
    chi2 += d * d / expected;
  }
  // 3 degrees of freedom; 16.27 is the 0.001 quantile
  CHECK(chi2 < 16.27);
  // both stuff classes appear
  CHECK(class_counts[4] == 10000);  // background present in every scene
  CHECK(class_counts[5] > 1000);
}

TEST_CASE("same seed gives a bitwise-identical scene") {
  SceneConfig cfg;
  Rng a(7), b(7);
  GroundTruthScene s1 = generate_scene(cfg, a);
  GroundTruthScene s2 = generate_scene(cfg, b);
  CHECK(s1.image.vec() == s2.image.vec());
  REQUIRE(s1.segments.size() == s2.segments.size());
  for (size_t i = 0; i < s1.segments.size(); ++i) {
    CHECK(s1.segments[i].mask.v == s2.segments[i].mask.v);
    CHECK(s1.segments[i].class_id == s2.segments[i].class_id);
    CHECK(s1.segments[i].is_thing == s2.segments[i].is_thing);
  }
}

TEST_CASE("occlusion disabled keeps thing masks disjoint") {
  SceneConfig cfg;
  cfg.allow_occlusion = false;
  Rng root(55);
  for (int s = 0; s < 50; ++s) {
    Rng rng = root.split(s);
    GroundTruthScene scene = generate_scene(cfg, rng);
    size_t hw = static_cast<size_t>(scene.height) * scene.width;
    std::vector<int> thing_hits(hw, 0);
    for (const auto& seg : scene.segments)
      if (seg.is_thing)
        for (size_t p = 0; p < hw; ++p) thing_hits[p] += seg.mask.v[p];
    for (size_t p = 0; p < hw; ++p) CHECK(thing_hits[p] <= 1);
  }
}

TEST_CASE("dataset container round trip") {
  SceneConfig cfg;
  cfg.height = cfg.width = 32;
  auto scenes = generate_dataset(cfg, 5, 9);
  save_dataset(scenes, "ds_test.bin");
  auto loaded = load_dataset("ds_test.bin");
  REQUIRE(loaded.size() == scenes.size());
  for (size_t s = 0; s < scenes.size(); ++s) {
    CHECK(loaded[s].image.vec() == scenes[s].image.vec());
    REQUIRE(loaded[s].segments.size() == scenes[s].segments.size());
    for (size_t i = 0; i < scenes[s].segments.size(); ++i) {
      CHECK(loaded[s].segments[i].mask.v == scenes[s].segments[i].mask.v);
      CHECK(loaded[s].segments[i].class_id == scenes[s].segments[i].class_id);
      CHECK(loaded[s].segments[i].is_thing == scenes[s].segments[i].is_thing);
    }
  }

  save_dataset({}, "ds_empty.bin");
  CHECK(load_dataset("ds_empty.bin").empty());
  std::remove("ds_empty.bin");

  // corrupt magic
  {
    std::ofstream f("ds_test.bin", std::ios::binary | std::ios::trunc);
    f << "BADMAGIC" << std::string(8, '\0');
  }
  CHECK_THROWS_AS(load_dataset("ds_test.bin"), std::runtime_error);

  // truncated payload
  save_dataset(scenes, "ds_test.bin");
  {
    std::ifstream in("ds_test.bin", std::ios::binary);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out("ds_test.bin", std::ios::binary | std::ios::trunc);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size() / 2));
  }
  CHECK_THROWS_AS(load_dataset("ds_test.bin"), std::runtime_error);
  std::remove("ds_test.bin");
}
