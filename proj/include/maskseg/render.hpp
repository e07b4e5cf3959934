#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "maskseg/inference.hpp"
#include "maskseg/tensor.hpp"

namespace maskseg {

// Alpha-blended mask overlays with a fixed palette keyed by segment id or
// class; output is deterministic byte-for-byte.
std::vector<uint8_t> render_panoptic(const Tensor& image, const PanopticOutput& out);
std::vector<uint8_t> render_instances(const Tensor& image, const InstanceOutput& dets);
std::vector<uint8_t> render_labels(const Tensor& image, const std::vector<int>& labels, int h,
                                   int w);
std::vector<uint8_t> render_plain(const Tensor& image);

// Binary PPM (P6).
void write_ppm(const std::string& path, int h, int w, const std::vector<uint8_t>& rgb);

}  // namespace maskseg
