#pragma once

// Elementwise kernels over flattened weight vectors.
//
// Every kernel has a scalar reference implementation and optional AVX2 / NEON
// variants chosen once at startup. All variants are bitwise identical: fused
// multiply-adds are used explicitly where a product is accumulated, and dot()
// reduces in a fixed 8-lane striped order that the scalar reference replays.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace mevo::kernels {

struct KernelTable {
  const char* name;
  // out = fma(a, x, y)
  void (*axpy)(float a, const float* x, const float* y, float* out, std::size_t n);
  // out = fma(f, r1 - r2, base)
  void (*diff_axpy)(float f, const float* base, const float* r1, const float* r2, float* out,
                    std::size_t n);
  // out = mask ? b : a
  void (*blend)(const std::uint8_t* mask, const float* a, const float* b, float* out,
                std::size_t n);
  // out = x - y
  void (*sub)(const float* x, const float* y, float* out, std::size_t n);
  // acc = fma(w, double(x), acc)
  void (*accumulate)(double w, const float* x, double* acc, std::size_t n);
  // wf = w * fisher; num = fma(wf, double(theta), num); den += wf
  void (*weighted_accumulate)(double w, const float* fisher, const float* theta, double* num,
                              double* den, std::size_t n);
  // out = float(num / (den + floor))
  void (*ratio)(const double* num, const double* den, double floor, float* out, std::size_t n);
  // out = float(acc / denom)
  void (*scale_div)(const double* acc, double denom, float* out, std::size_t n);
  float (*dot)(const float* x, const float* y, std::size_t n);
};

const KernelTable& scalar_table();
/// nullptr when the variant was not compiled in or the CPU lacks the features.
const KernelTable* avx2_table();
const KernelTable* neon_table();

/// The table used by the span API. Honors MEVO_FORCE_SCALAR=1 in the environment.
const KernelTable& active();
std::string_view active_name();

void axpy(float a, std::span<const float> x, std::span<const float> y, std::span<float> out);
void diff_axpy(float f, std::span<const float> base, std::span<const float> r1,
               std::span<const float> r2, std::span<float> out);
void blend(std::span<const std::uint8_t> mask, std::span<const float> a, std::span<const float> b,
           std::span<float> out);
void sub(std::span<const float> x, std::span<const float> y, std::span<float> out);
void accumulate(double w, std::span<const float> x, std::span<double> acc);
void weighted_accumulate(double w, std::span<const float> fisher, std::span<const float> theta,
                         std::span<double> num, std::span<double> den);
void ratio(std::span<const double> num, std::span<const double> den, double floor,
           std::span<float> out);
void scale_div(std::span<const double> acc, double denom, std::span<float> out);
float dot(std::span<const float> x, std::span<const float> y);

}  // namespace mevo::kernels
