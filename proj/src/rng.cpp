#include "maskseg/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace maskseg {

namespace {

constexpr uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

uint64_t mix64(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

Rng::Rng(uint64_t seed) : key_(mix64(seed + kGolden)) {}

Rng Rng::split(uint64_t label) const {
  Rng child(0);
  child.key_ = mix64(key_ ^ mix64((label + 1) * kGolden));
  child.counter_ = 0;
  child.has_cached_normal_ = false;
  return child;
}

uint64_t Rng::next_u64() {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int n) {
  if (n < 1) throw std::invalid_argument("uniform_int: n must be >= 1");
  // Modulo bias is < 2^-32 for any n that fits in an int.
  return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
}

double Rng::normal() {
  if (has_cached_normal_) {
    has_cached_normal_ = false;
    return cached_normal_;
  }
  double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * M_PI * u2;
  cached_normal_ = r * std::sin(theta);
  has_cached_normal_ = true;
  return r * std::cos(theta);
}

}  // namespace maskseg
