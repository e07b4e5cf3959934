#pragma once
#include <string>
#include <vector>

#include "maskseg/rng.hpp"
#include "maskseg/scene.hpp"

namespace maskseg {

// Thing classes 0..3: rectangle, disk, triangle, ring.
// Stuff classes follow: 4 background, 5 band.
struct SceneConfig {
  int height = 64, width = 64;
  int thing_classes = 4;
  int stuff_classes = 2;
  int max_instances = 6;
  bool allow_occlusion = true;
  double noise_sigma = 0.05;

  int num_classes() const { return thing_classes + stuff_classes; }
  void validate() const;
};

std::vector<bool> thing_class_flags(const SceneConfig& cfg);

// Renders stuff first (full background, optionally a band), then thing
// instances front to back; ground-truth masks are the visible pixels, so
// panoptic masks are disjoint and cover the grid together with void.
GroundTruthScene generate_scene(const SceneConfig& cfg, Rng& rng);

std::vector<GroundTruthScene> generate_dataset(const SceneConfig& cfg, int count, uint64_t seed);

// Binary dataset container:
//   magic  "M2FDATA1" (8 bytes)
//   u32    version (1), u32 scene count
//   scene  u32 height, u32 width, f64 image payload (3*H*W),
//          u32 segment count, then per segment:
//            u32 class id, u8 thing flag,
//            u32 run count, u32 runs (alternating 0/1 lengths, starting at 0)
void save_dataset(const std::vector<GroundTruthScene>& scenes, const std::string& path);
std::vector<GroundTruthScene> load_dataset(const std::string& path);

}  // namespace maskseg
