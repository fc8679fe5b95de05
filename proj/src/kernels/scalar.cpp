#include <cmath>

#include "mevo/kernels.hpp"

namespace mevo::kernels {
namespace {

void axpy_ref(float a, const float* x, const float* y, float* out, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) out[j] = std::fma(a, x[j], y[j]);
}

void diff_axpy_ref(float f, const float* base, const float* r1, const float* r2, float* out,
                   std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) out[j] = std::fma(f, r1[j] - r2[j], base[j]);
}

void blend_ref(const std::uint8_t* mask, const float* a, const float* b, float* out,
               std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) out[j] = mask[j] ? b[j] : a[j];
}

void sub_ref(const float* x, const float* y, float* out, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) out[j] = x[j] - y[j];
}

void accumulate_ref(double w, const float* x, double* acc, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) acc[j] = std::fma(w, static_cast<double>(x[j]), acc[j]);
}

void weighted_accumulate_ref(double w, const float* fisher, const float* theta, double* num,
                             double* den, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    const double wf = w * static_cast<double>(fisher[j]);
    num[j] = std::fma(wf, static_cast<double>(theta[j]), num[j]);
    den[j] = den[j] + wf;
  }
}

void ratio_ref(const double* num, const double* den, double floor, float* out, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<float>(num[j] / (den[j] + floor));
}

void scale_div_ref(const double* acc, double denom, float* out, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<float>(acc[j] / denom);
}

// Lane-striped reduction: lane l accumulates x[8k+l]*y[8k+l] with fma, lanes
// are folded as (l, l+4), then (l, l+2), then (0, 1); the tail is added last.
float dot_ref(const float* x, const float* y, std::size_t n) {
  float lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  const std::size_t body = n - n % 8;
  for (std::size_t j = 0; j < body; j += 8) {
    for (int l = 0; l < 8; ++l) lane[l] = std::fma(x[j + l], y[j + l], lane[l]);
  }
  for (int l = 0; l < 4; ++l) lane[l] = lane[l] + lane[l + 4];
  for (int l = 0; l < 2; ++l) lane[l] = lane[l] + lane[l + 2];
  float s = lane[0] + lane[1];
  for (std::size_t j = body; j < n; ++j) s = std::fma(x[j], y[j], s);
  return s;
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{
      "scalar",      axpy_ref,  diff_axpy_ref, blend_ref,     sub_ref, accumulate_ref,
      weighted_accumulate_ref, ratio_ref, scale_div_ref, dot_ref,
  };
  return table;
}

}  // namespace mevo::kernels
