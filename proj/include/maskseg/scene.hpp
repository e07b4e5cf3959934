#pragma once
#include <cstdint>
#include <vector>

#include "maskseg/tensor.hpp"

namespace maskseg {

struct BinaryMask {
  int h = 0, w = 0;
  std::vector<uint8_t> v;  // row-major, 0/1

  BinaryMask() = default;
  BinaryMask(int h_, int w_) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, 0) {}
  uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
  void set(int y, int x, uint8_t val) { v[static_cast<size_t>(y) * w + x] = val; }
  long long area() const {
    long long a = 0;
    for (uint8_t b : v) a += b;
    return a;
  }
};

struct GtSegment {
  BinaryMask mask;  // visible pixels only; panoptic GT masks are disjoint
  int class_id = 0;
  bool is_thing = true;
};

struct GroundTruthScene {
  Tensor image;  // [3 x H x W]
  std::vector<GtSegment> segments;
  int height = 0, width = 0;
};

}  // namespace maskseg
