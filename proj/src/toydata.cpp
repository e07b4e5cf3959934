#include "maskseg/toydata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace maskseg {

namespace {

constexpr char kMagic[8] = {'M', '2', 'F', 'D', 'A', 'T', 'A', '1'};
constexpr uint32_t kVersion = 1;
constexpr long long kMinVisible = 8;  // placement rejected below this

struct Rgb {
  double r, g, b;
};

// One base color per class; instances jitter around it.
Rgb class_base_color(int class_id) {
  switch (class_id) {
    case 0: return {0.85, 0.25, 0.20};  // rectangle
    case 1: return {0.20, 0.75, 0.30};  // disk
    case 2: return {0.25, 0.35, 0.90};  // triangle
    case 3: return {0.90, 0.80, 0.20};  // ring
    case 4: return {0.45, 0.45, 0.50};  // background
    default: return {0.75, 0.25, 0.80}; // band
  }
}

Rgb jitter(Rgb c, Rng& rng, double amp = 0.08) {
  return {c.r + rng.uniform(-amp, amp), c.g + rng.uniform(-amp, amp),
          c.b + rng.uniform(-amp, amp)};
}

struct Instance {
  BinaryMask mask;   // full (amodal) footprint at draw time
  int class_id = 0;
  bool is_thing = true;
  Rgb color{};
  Rgb color2{};      // background gradient bottom color
};

BinaryMask rasterize_thing(int class_id, int h, int w, Rng& rng) {
  BinaryMask m(h, w);
  double cx = rng.uniform(0.12, 0.88) * w;
  double cy = rng.uniform(0.12, 0.88) * h;
  switch (class_id) {
    case 0: {  // axis-aligned rectangle
      double hw = rng.uniform(4.0, 12.0), hh = rng.uniform(4.0, 12.0);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          if (std::abs(x - cx) <= hw && std::abs(y - cy) <= hh) m.set(y, x, 1);
      break;
    }
    case 1: {  // disk
      double r = rng.uniform(4.0, 9.0);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) m.set(y, x, 1);
      break;
    }
    case 2: {  // small isoceles triangle, random orientation
      double r = rng.uniform(4.5, 8.0);
      double a0 = rng.uniform(0.0, 2.0 * M_PI);
      double px[3], py[3];
      for (int v = 0; v < 3; ++v) {
        px[v] = cx + r * std::cos(a0 + v * 2.0 * M_PI / 3.0);
        py[v] = cy + r * std::sin(a0 + v * 2.0 * M_PI / 3.0);
      }
      auto edge = [](double ax, double ay, double bx, double by, double x, double y) {
        return (bx - ax) * (y - ay) - (by - ay) * (x - ax);
      };
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double e0 = edge(px[0], py[0], px[1], py[1], x, y);
          double e1 = edge(px[1], py[1], px[2], py[2], x, y);
          double e2 = edge(px[2], py[2], px[0], py[0], x, y);
          if ((e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0)) m.set(y, x, 1);
        }
      break;
    }
    default: {  // small ring
      double ro = rng.uniform(4.5, 8.0);
      double ri = ro * rng.uniform(0.40, 0.55);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          if (d2 <= ro * ro && d2 >= ri * ri) m.set(y, x, 1);
        }
      break;
    }
  }
  return m;
}

BinaryMask rasterize_band(int h, int w, Rng& rng) {
  BinaryMask m(h, w);
  double angle = rng.uniform(0.0, M_PI);
  double nx = std::cos(angle), ny = std::sin(angle);
  double offset = rng.uniform(0.25, 0.75) * (nx * w + ny * h);
  double half_width = rng.uniform(3.0, 7.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (std::abs(nx * x + ny * y - offset) <= half_width) m.set(y, x, 1);
  return m;
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  uint64_t u = std::bit_cast<uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  explicit Reader(const std::string& b) : buf(b) {}
  void need(size_t n) const {
    if (pos + n > buf.size()) throw std::runtime_error("dataset: truncated file");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(buf[pos++]);
  }
  double f64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return std::bit_cast<double>(v);
  }
};

}  // namespace

void SceneConfig::validate() const {
  if (height < 8 || width < 8) throw std::invalid_argument("scene: image too small");
  if (thing_classes < 1 || thing_classes > 4)
    throw std::invalid_argument("scene: thing_classes must be in 1..4");
  if (stuff_classes < 1 || stuff_classes > 2)
    throw std::invalid_argument("scene: stuff_classes must be in 1..2");
  if (max_instances < 0) throw std::invalid_argument("scene: max_instances must be >= 0");
  if (noise_sigma < 0.0) throw std::invalid_argument("scene: noise_sigma must be >= 0");
}

std::vector<bool> thing_class_flags(const SceneConfig& cfg) {
  std::vector<bool> flags(cfg.num_classes(), false);
  for (int c = 0; c < cfg.thing_classes; ++c) flags[c] = true;
  return flags;
}

GroundTruthScene generate_scene(const SceneConfig& cfg, Rng& rng) {
  cfg.validate();
  int h = cfg.height, w = cfg.width;
  size_t hw = static_cast<size_t>(h) * w;

  std::vector<Instance> drawn;
  {
    Instance bg;
    bg.mask = BinaryMask(h, w);
    std::fill(bg.mask.v.begin(), bg.mask.v.end(), 1);
    bg.class_id = cfg.thing_classes;  // background stuff class
    bg.is_thing = false;
    bg.color = jitter(class_base_color(4), rng, 0.05);
    bg.color2 = jitter(class_base_color(4), rng, 0.12);
    drawn.push_back(std::move(bg));
  }
  if (cfg.stuff_classes >= 2 && rng.uniform() < 0.8) {
    Instance band;
    band.mask = rasterize_band(h, w, rng);
    band.class_id = cfg.thing_classes + 1;
    band.is_thing = false;
    band.color = jitter(class_base_color(5), rng);
    drawn.push_back(std::move(band));
  }

  int want = rng.uniform_int(cfg.max_instances + 1);
  std::vector<int> owner(hw, 0);  // index into drawn
  for (size_t i = 0; i < drawn.size(); ++i)
    for (size_t p = 0; p < hw; ++p)
      if (drawn[i].mask.v[p]) owner[p] = static_cast<int>(i);

  auto visible_area = [&](int idx) {
    long long a = 0;
    for (size_t p = 0; p < hw; ++p) a += owner[p] == idx;
    return a;
  };

  for (int inst = 0; inst < want; ++inst) {
    // Class drawn once per slot so shape-dependent placement rejection does
    // not skew class frequencies.
    int cls = rng.uniform_int(cfg.thing_classes);
    for (int attempt = 0; attempt < 20; ++attempt) {
      BinaryMask m = rasterize_thing(cls, h, w, rng);
      if (m.area() < kMinVisible) continue;
      // Occlusion bookkeeping: placing this instance must leave every earlier
      // thing with enough visible pixels (or not touch things at all when
      // occlusion is disabled).
      bool ok = true;
      std::vector<long long> loss(drawn.size(), 0);
      for (size_t p = 0; p < hw; ++p)
        if (m.v[p]) ++loss[owner[p]];
      for (size_t i = 0; i < drawn.size() && ok; ++i) {
        if (!drawn[i].is_thing || loss[i] == 0) continue;
        if (!cfg.allow_occlusion) ok = false;
        else if (visible_area(static_cast<int>(i)) - loss[i] < kMinVisible) ok = false;
      }
      if (!ok) continue;
      Instance it;
      it.mask = std::move(m);
      it.class_id = cls;
      it.is_thing = true;
      it.color = jitter(class_base_color(cls), rng);
      int idx = static_cast<int>(drawn.size());
      drawn.push_back(std::move(it));
      for (size_t p = 0; p < hw; ++p)
        if (drawn[idx].mask.v[p]) owner[p] = idx;
      break;
    }
  }

  GroundTruthScene scene;
  scene.height = h;
  scene.width = w;
  scene.image = Tensor::zeros({3, h, w});
  double* img = scene.image.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      size_t p = static_cast<size_t>(y) * w + x;
      const Instance& it = drawn[owner[p]];
      Rgb c = it.color;
      if (owner[p] == 0) {  // vertical gradient on the background
        double t = h > 1 ? static_cast<double>(y) / (h - 1) : 0.0;
        c = {it.color.r + t * (it.color2.r - it.color.r),
             it.color.g + t * (it.color2.g - it.color.g),
             it.color.b + t * (it.color2.b - it.color.b)};
      }
      img[p] = c.r;
      img[hw + p] = c.g;
      img[2 * hw + p] = c.b;
    }
  if (cfg.noise_sigma > 0.0)
    for (size_t i = 0; i < 3 * hw; ++i) img[i] += cfg.noise_sigma * rng.normal();

  for (size_t i = 0; i < drawn.size(); ++i) {
    GtSegment seg;
    seg.mask = BinaryMask(h, w);
    long long area = 0;
    for (size_t p = 0; p < hw; ++p)
      if (owner[p] == static_cast<int>(i)) {
        seg.mask.v[p] = 1;
        ++area;
      }
    if (area == 0) continue;  // fully occluded stuff region
    seg.class_id = drawn[i].class_id;
    seg.is_thing = drawn[i].is_thing;
    scene.segments.push_back(std::move(seg));
  }
  return scene;
}

std::vector<GroundTruthScene> generate_dataset(const SceneConfig& cfg, int count, uint64_t seed) {
  std::vector<GroundTruthScene> scenes;
  scenes.reserve(count);
  Rng root(seed);
  for (int i = 0; i < count; ++i) {
    Rng scene_rng = root.split(i);
    scenes.push_back(generate_scene(cfg, scene_rng));
  }
  return scenes;
}

void save_dataset(const std::vector<GroundTruthScene>& scenes, const std::string& path) {
  std::string out;
  out.append(kMagic, 8);
  put_u32(out, kVersion);
  put_u32(out, static_cast<uint32_t>(scenes.size()));
  for (const auto& s : scenes) {
    put_u32(out, static_cast<uint32_t>(s.height));
    put_u32(out, static_cast<uint32_t>(s.width));
    for (size_t i = 0; i < s.image.size(); ++i) put_f64(out, s.image.data()[i]);
    put_u32(out, static_cast<uint32_t>(s.segments.size()));
    for (const auto& seg : s.segments) {
      put_u32(out, static_cast<uint32_t>(seg.class_id));
      out.push_back(seg.is_thing ? 1 : 0);
      // Alternating run lengths over the row-major mask, starting with zeros.
      std::vector<uint32_t> runs;
      uint8_t cur = 0;
      uint32_t len = 0;
      for (size_t p = 0; p < seg.mask.v.size(); ++p) {
        if (seg.mask.v[p] == cur) ++len;
        else {
          runs.push_back(len);
          cur = seg.mask.v[p];
          len = 1;
        }
      }
      runs.push_back(len);
      put_u32(out, static_cast<uint32_t>(runs.size()));
      for (uint32_t r : runs) put_u32(out, r);
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("dataset: cannot open for write: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("dataset: write failed: " + path);
}

std::vector<GroundTruthScene> load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("dataset: cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(buf);
  r.need(8);
  if (std::memcmp(buf.data(), kMagic, 8) != 0)
    throw std::runtime_error("dataset: bad magic bytes");
  r.pos = 8;
  if (r.u32() != kVersion) throw std::runtime_error("dataset: unsupported version");
  uint32_t count = r.u32();
  std::vector<GroundTruthScene> scenes;
  scenes.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    GroundTruthScene s;
    s.height = static_cast<int>(r.u32());
    s.width = static_cast<int>(r.u32());
    if (s.height <= 0 || s.width <= 0 || s.height > 1 << 14 || s.width > 1 << 14)
      throw std::runtime_error("dataset: implausible scene extents");
    size_t hw = static_cast<size_t>(s.height) * s.width;
    std::vector<double> img(3 * hw);
    for (size_t p = 0; p < img.size(); ++p) img[p] = r.f64();
    s.image = Tensor::from({3, s.height, s.width}, std::move(img));
    uint32_t nseg = r.u32();
    for (uint32_t j = 0; j < nseg; ++j) {
      GtSegment seg;
      seg.class_id = static_cast<int>(r.u32());
      seg.is_thing = r.u8() != 0;
      seg.mask = BinaryMask(s.height, s.width);
      uint32_t nruns = r.u32();
      size_t p = 0;
      uint8_t cur = 0;
      for (uint32_t k = 0; k < nruns; ++k) {
        uint32_t len = r.u32();
        if (p + len > hw) throw std::runtime_error("dataset: mask runs overflow the grid");
        if (cur)
          for (uint32_t q = 0; q < len; ++q) seg.mask.v[p + q] = 1;
        p += len;
        cur = 1 - cur;
      }
      if (p != hw) throw std::runtime_error("dataset: mask runs do not cover the grid");
      s.segments.push_back(std::move(seg));
    }
    scenes.push_back(std::move(s));
  }
  return scenes;
}

}  // namespace maskseg
