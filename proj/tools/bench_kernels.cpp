// Timing comparison between the serial reference kernels and the OpenMP
// variants, plus a bitwise-equality check on each measured case.
#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "maskseg/kernels.hpp"
#include "maskseg/rng.hpp"
#include "maskseg/tensor.hpp"

namespace {

using namespace maskseg;

std::vector<double> random_vec(size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm up
  auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void report(const char* name, double serial_ms, double parallel_ms, bool identical) {
  std::printf("%-28s serial %9.3f ms   parallel %9.3f ms   speedup %5.2fx   %s\n", name,
              serial_ms, parallel_ms, serial_ms / parallel_ms,
              identical ? "bitwise-equal" : "MISMATCH");
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("OpenMP threads: %d\n", omp_get_max_threads());
#else
  std::printf("built without OpenMP; parallel variants run serially\n");
#endif
  Rng rng(7);
  const int reps = 5;

  {
    int m = 256, k = 256, n = 256;
    auto a = random_vec(static_cast<size_t>(m) * k, rng);
    auto b = random_vec(static_cast<size_t>(k) * n, rng);
    std::vector<double> c1(static_cast<size_t>(m) * n), c2(c1.size());
    double ts = time_ms([&] { kernels::matmul_nn_serial(a.data(), b.data(), c1.data(), m, k, n); }, reps);
    double tp = time_ms([&] { kernels::matmul_nn_parallel(a.data(), b.data(), c2.data(), m, k, n); }, reps);
    report("matmul_nn 256^3", ts, tp, std::memcmp(c1.data(), c2.data(), c1.size() * 8) == 0);
  }
  {
    int ci = 32, h = 64, w = 64, co = 64;
    auto x = random_vec(static_cast<size_t>(ci) * h * w, rng);
    auto wt = random_vec(static_cast<size_t>(co) * ci * 9, rng);
    auto b = random_vec(co, rng);
    int oh = (h + 2 - 3) / 1 + 1, ow = oh;
    std::vector<double> o1(static_cast<size_t>(co) * oh * ow), o2(o1.size());
    double ts = time_ms(
        [&] { kernels::conv2d_forward_serial(x.data(), wt.data(), b.data(), o1.data(), ci, h, w, co, 3, 3, 1, 1, oh, ow); },
        reps);
    double tp = time_ms(
        [&] { kernels::conv2d_forward_parallel(x.data(), wt.data(), b.data(), o2.data(), ci, h, w, co, 3, 3, 1, 1, oh, ow); },
        reps);
    report("conv2d 3x3 32->64 @64x64", ts, tp, std::memcmp(o1.data(), o2.data(), o1.size() * 8) == 0);
  }
  {
    int c = 64, h = 32, w = 32, oh = 128, ow = 128;
    auto x = random_vec(static_cast<size_t>(c) * h * w, rng);
    std::vector<double> o1(static_cast<size_t>(c) * oh * ow), o2(o1.size());
    double ts = time_ms([&] { kernels::bilinear_resize_serial(x.data(), o1.data(), c, h, w, oh, ow); }, reps);
    double tp = time_ms([&] { kernels::bilinear_resize_parallel(x.data(), o2.data(), c, h, w, oh, ow); }, reps);
    report("bilinear 32->128 x64ch", ts, tp, std::memcmp(o1.data(), o2.data(), o1.size() * 8) == 0);
  }
  {
    int rows = 2048, cols = 256;
    auto x = random_vec(static_cast<size_t>(rows) * cols, rng);
    std::vector<double> o1(x.size()), o2(x.size());
    double ts = time_ms([&] { kernels::softmax_rows_serial(x.data(), o1.data(), rows, cols, kMaskSentinel); }, reps);
    double tp = time_ms([&] { kernels::softmax_rows_parallel(x.data(), o2.data(), rows, cols, kMaskSentinel); }, reps);
    report("softmax 2048x256", ts, tp, std::memcmp(o1.data(), o2.data(), o1.size() * 8) == 0);
  }
  return 0;
}
