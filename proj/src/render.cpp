#include "maskseg/render.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace maskseg {

namespace {

constexpr double kAlpha = 0.45;

constexpr uint8_t kPalette[16][3] = {
    {230, 57, 70},   {60, 180, 75},   {0, 114, 178},   {240, 180, 30},
    {145, 30, 180},  {70, 240, 240},  {245, 130, 48},  {210, 245, 60},
    {250, 100, 190}, {0, 128, 128},   {160, 110, 220}, {170, 110, 40},
    {128, 0, 0},     {100, 160, 255}, {128, 128, 0},   {0, 180, 120}};

std::vector<uint8_t> base_image(const Tensor& image, int& h, int& w) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw std::invalid_argument("render: image must be [3 x H x W]");
  h = image.dim(1);
  w = image.dim(2);
  size_t hw = static_cast<size_t>(h) * w;
  std::vector<uint8_t> rgb(3 * hw);
  const double* d = image.data();
  for (size_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) {
      double v = std::clamp(d[c * hw + p], 0.0, 1.0);
      rgb[3 * p + c] = static_cast<uint8_t>(v * 255.0 + 0.5);
    }
  return rgb;
}

void blend(std::vector<uint8_t>& rgb, size_t pixel, const uint8_t* color) {
  for (int c = 0; c < 3; ++c) {
    double v = (1.0 - kAlpha) * rgb[3 * pixel + c] + kAlpha * color[c];
    rgb[3 * pixel + c] = static_cast<uint8_t>(v + 0.5);
  }
}

}  // namespace

std::vector<uint8_t> render_plain(const Tensor& image) {
  int h, w;
  return base_image(image, h, w);
}

std::vector<uint8_t> render_panoptic(const Tensor& image, const PanopticOutput& out) {
  int h, w;
  std::vector<uint8_t> rgb = base_image(image, h, w);
  if (out.h != h || out.w != w) throw std::invalid_argument("render: size mismatch");
  size_t hw = static_cast<size_t>(h) * w;
  for (size_t p = 0; p < hw; ++p)
    if (out.segment_ids[p] >= 0) blend(rgb, p, kPalette[out.segment_ids[p] % 16]);
  return rgb;
}

std::vector<uint8_t> render_instances(const Tensor& image, const InstanceOutput& dets) {
  int h, w;
  std::vector<uint8_t> rgb = base_image(image, h, w);
  // Low-confidence first so the strongest detections end up on top.
  for (size_t i = dets.size(); i-- > 0;) {
    const auto& d = dets[i];
    if (d.mask.h != h || d.mask.w != w) throw std::invalid_argument("render: size mismatch");
    for (size_t p = 0; p < d.mask.v.size(); ++p)
      if (d.mask.v[p]) blend(rgb, p, kPalette[i % 16]);
  }
  return rgb;
}

std::vector<uint8_t> render_labels(const Tensor& image, const std::vector<int>& labels, int h,
                                   int w) {
  int ih, iw;
  std::vector<uint8_t> rgb = base_image(image, ih, iw);
  if (ih != h || iw != w || labels.size() != static_cast<size_t>(h) * w)
    throw std::invalid_argument("render: size mismatch");
  for (size_t p = 0; p < labels.size(); ++p)
    if (labels[p] >= 0) blend(rgb, p, kPalette[labels[p] % 16]);
  return rgb;
}

void write_ppm(const std::string& path, int h, int w, const std::vector<uint8_t>& rgb) {
  if (rgb.size() != static_cast<size_t>(h) * w * 3)
    throw std::invalid_argument("write_ppm: buffer size mismatch");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_ppm: cannot open for write: " + path);
  f << "P6\n" << w << " " << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!f) throw std::runtime_error("write_ppm: write failed: " + path);
}

}  // namespace maskseg
