#pragma once
#include <cstdint>

namespace maskseg {

// Counter-based splittable PRNG built on the SplitMix64 finalizer.
//
// Draw i of a stream with key k is mix64(k + (i+1) * GOLDEN), i.e. the
// SplitMix64 sequence seeded at k. split(label) derives an independent child
// key from (key, label), so every stream in the tree is reproducible from the
// root seed and the path of split labels alone. No state is shared between a
// parent and its children.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  // Independent child stream; deterministic in (current key, label).
  // Does not advance this generator.
  Rng split(uint64_t label) const;

  uint64_t next_u64();
  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  int uniform_int(int n);                 // [0, n), n >= 1
  double normal();                        // standard normal, Box-Muller

 private:
  uint64_t key_ = 0;
  uint64_t counter_ = 0;
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

}  // namespace maskseg
