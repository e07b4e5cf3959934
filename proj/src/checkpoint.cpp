#include "maskseg/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace maskseg {

namespace {

constexpr char kMagic[8] = {'M', '2', 'F', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<uint64_t>(v)); }

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  explicit Reader(const std::string& b) : buf(b) {}
  void need(size_t n) const {
    if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated file");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const std::string& header_text,
                     const std::vector<CheckpointEntry>& entries) {
  std::string out;
  out.append(kMagic, 8);
  put_u32(out, kVersion);
  put_u32(out, static_cast<uint32_t>(header_text.size()));
  out += header_text;
  put_u32(out, static_cast<uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put_u32(out, static_cast<uint32_t>(e.name.size()));
    out += e.name;
    put_u32(out, static_cast<uint32_t>(e.value.rank()));
    for (size_t i = 0; i < e.value.rank(); ++i) put_u64(out, static_cast<uint64_t>(e.value.dim(i)));
    for (size_t i = 0; i < e.value.size(); ++i) put_f64(out, e.value.data()[i]);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(buf);
  std::string magic = r.bytes(8);
  if (std::memcmp(magic.data(), kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic bytes");
  uint32_t version = r.u32();
  if (version != kVersion) throw std::runtime_error("checkpoint: unsupported version");
  Checkpoint ck;
  ck.header_text = r.bytes(r.u32());
  uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.bytes(r.u32());
    uint32_t rank = r.u32();
    Shape shape(rank);
    size_t n = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<int>(r.u64());
      n *= static_cast<size_t>(shape[d]);
    }
    std::vector<double> data(n);
    for (size_t j = 0; j < n; ++j) data[j] = r.f64();
    e.value = Tensor::from(std::move(shape), std::move(data));
    ck.entries.push_back(std::move(e));
  }
  return ck;
}

}  // namespace maskseg
