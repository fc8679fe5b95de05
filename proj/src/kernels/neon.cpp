// NEON variants for aarch64 (Advanced SIMD and fused multiply-add are baseline there).

#include "mevo/kernels.hpp"

#if defined(__aarch64__)

#include <arm_neon.h>

#include <cmath>

namespace mevo::kernels {
namespace {

void axpy_neon(float a, const float* x, const float* y, float* out, std::size_t n) {
  const float32x4_t va = vdupq_n_f32(a);
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) vst1q_f32(out + j, vfmaq_f32(vld1q_f32(y + j), va, vld1q_f32(x + j)));
  for (; j < n; ++j) out[j] = std::fma(a, x[j], y[j]);
}

void diff_axpy_neon(float f, const float* base, const float* r1, const float* r2, float* out,
                    std::size_t n) {
  const float32x4_t vf = vdupq_n_f32(f);
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    const float32x4_t diff = vsubq_f32(vld1q_f32(r1 + j), vld1q_f32(r2 + j));
    vst1q_f32(out + j, vfmaq_f32(vld1q_f32(base + j), vf, diff));
  }
  for (; j < n; ++j) out[j] = std::fma(f, r1[j] - r2[j], base[j]);
}

void blend_neon(const std::uint8_t* mask, const float* a, const float* b, float* out,
                std::size_t n) {
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    const uint16x8_t m16 = vmovl_u8(vld1_u8(mask + j));
    const uint32x4_t lo = vcgtq_u32(vmovl_u16(vget_low_u16(m16)), vdupq_n_u32(0));
    const uint32x4_t hi = vcgtq_u32(vmovl_u16(vget_high_u16(m16)), vdupq_n_u32(0));
    vst1q_f32(out + j, vbslq_f32(lo, vld1q_f32(b + j), vld1q_f32(a + j)));
    vst1q_f32(out + j + 4, vbslq_f32(hi, vld1q_f32(b + j + 4), vld1q_f32(a + j + 4)));
  }
  for (; j < n; ++j) out[j] = mask[j] ? b[j] : a[j];
}

void sub_neon(const float* x, const float* y, float* out, std::size_t n) {
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) vst1q_f32(out + j, vsubq_f32(vld1q_f32(x + j), vld1q_f32(y + j)));
  for (; j < n; ++j) out[j] = x[j] - y[j];
}

void accumulate_neon(double w, const float* x, double* acc, std::size_t n) {
  const float64x2_t vw = vdupq_n_f64(w);
  std::size_t j = 0;
  for (; j + 2 <= n; j += 2) {
    const float64x2_t vx = vcvt_f64_f32(vld1_f32(x + j));
    vst1q_f64(acc + j, vfmaq_f64(vld1q_f64(acc + j), vw, vx));
  }
  for (; j < n; ++j) acc[j] = std::fma(w, static_cast<double>(x[j]), acc[j]);
}

void weighted_accumulate_neon(double w, const float* fisher, const float* theta, double* num,
                              double* den, std::size_t n) {
  const float64x2_t vw = vdupq_n_f64(w);
  std::size_t j = 0;
  for (; j + 2 <= n; j += 2) {
    const float64x2_t wf = vmulq_f64(vw, vcvt_f64_f32(vld1_f32(fisher + j)));
    const float64x2_t th = vcvt_f64_f32(vld1_f32(theta + j));
    vst1q_f64(num + j, vfmaq_f64(vld1q_f64(num + j), wf, th));
    vst1q_f64(den + j, vaddq_f64(vld1q_f64(den + j), wf));
  }
  for (; j < n; ++j) {
    const double wf = w * static_cast<double>(fisher[j]);
    num[j] = std::fma(wf, static_cast<double>(theta[j]), num[j]);
    den[j] = den[j] + wf;
  }
}

void ratio_neon(const double* num, const double* den, double floor, float* out, std::size_t n) {
  const float64x2_t vfloor = vdupq_n_f64(floor);
  std::size_t j = 0;
  for (; j + 2 <= n; j += 2) {
    const float64x2_t q = vdivq_f64(vld1q_f64(num + j), vaddq_f64(vld1q_f64(den + j), vfloor));
    vst1_f32(out + j, vcvt_f32_f64(q));
  }
  for (; j < n; ++j) out[j] = static_cast<float>(num[j] / (den[j] + floor));
}

void scale_div_neon(const double* acc, double denom, float* out, std::size_t n) {
  const float64x2_t vd = vdupq_n_f64(denom);
  std::size_t j = 0;
  for (; j + 2 <= n; j += 2) vst1_f32(out + j, vcvt_f32_f64(vdivq_f64(vld1q_f64(acc + j), vd)));
  for (; j < n; ++j) out[j] = static_cast<float>(acc[j] / denom);
}

float dot_neon(const float* x, const float* y, std::size_t n) {
  float32x4_t lo = vdupq_n_f32(0.0f);
  float32x4_t hi = vdupq_n_f32(0.0f);
  const std::size_t body = n - n % 8;
  for (std::size_t j = 0; j < body; j += 8) {
    lo = vfmaq_f32(lo, vld1q_f32(x + j), vld1q_f32(y + j));
    hi = vfmaq_f32(hi, vld1q_f32(x + j + 4), vld1q_f32(y + j + 4));
  }
  const float32x4_t v = vaddq_f32(lo, hi);
  const float32x2_t t = vadd_f32(vget_low_f32(v), vget_high_f32(v));
  float s = vget_lane_f32(t, 0) + vget_lane_f32(t, 1);
  for (std::size_t j = body; j < n; ++j) s = std::fma(x[j], y[j], s);
  return s;
}

}  // namespace

const KernelTable* neon_table() {
  static const KernelTable table{
      "neon",           axpy_neon,  diff_axpy_neon,     blend_neon, sub_neon, accumulate_neon,
      weighted_accumulate_neon, ratio_neon, scale_div_neon, dot_neon,
  };
  return &table;
}

}  // namespace mevo::kernels

#else

namespace mevo::kernels {
const KernelTable* neon_table() { return nullptr; }
}  // namespace mevo::kernels

#endif
