// AVX2 + FMA variants. This translation unit is compiled with -mavx2 -mfma and
// only entered after a runtime CPU check.

#include "mevo/kernels.hpp"

#if defined(__x86_64__) && defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

#include <cmath>
#include <cstring>

namespace mevo::kernels {
namespace {

void axpy_avx2(float a, const float* x, const float* y, float* out, std::size_t n) {
  const __m256 va = _mm256_set1_ps(a);
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    _mm256_storeu_ps(out + j, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + j), _mm256_loadu_ps(y + j)));
  }
  for (; j < n; ++j) out[j] = std::fma(a, x[j], y[j]);
}

void diff_axpy_avx2(float f, const float* base, const float* r1, const float* r2, float* out,
                    std::size_t n) {
  const __m256 vf = _mm256_set1_ps(f);
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    const __m256 diff = _mm256_sub_ps(_mm256_loadu_ps(r1 + j), _mm256_loadu_ps(r2 + j));
    _mm256_storeu_ps(out + j, _mm256_fmadd_ps(vf, diff, _mm256_loadu_ps(base + j)));
  }
  for (; j < n; ++j) out[j] = std::fma(f, r1[j] - r2[j], base[j]);
}

void blend_avx2(const std::uint8_t* mask, const float* a, const float* b, float* out,
                std::size_t n) {
  const __m256i zero = _mm256_setzero_si256();
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    std::uint64_t bytes;
    std::memcpy(&bytes, mask + j, sizeof(bytes));
    const __m256i wide = _mm256_cvtepu8_epi32(_mm_cvtsi64_si128(static_cast<long long>(bytes)));
    const __m256 sel = _mm256_castsi256_ps(_mm256_cmpgt_epi32(wide, zero));
    _mm256_storeu_ps(out + j, _mm256_blendv_ps(_mm256_loadu_ps(a + j), _mm256_loadu_ps(b + j), sel));
  }
  for (; j < n; ++j) out[j] = mask[j] ? b[j] : a[j];
}

void sub_avx2(const float* x, const float* y, float* out, std::size_t n) {
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    _mm256_storeu_ps(out + j, _mm256_sub_ps(_mm256_loadu_ps(x + j), _mm256_loadu_ps(y + j)));
  }
  for (; j < n; ++j) out[j] = x[j] - y[j];
}

void accumulate_avx2(double w, const float* x, double* acc, std::size_t n) {
  const __m256d vw = _mm256_set1_pd(w);
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    const __m256d vx = _mm256_cvtps_pd(_mm_loadu_ps(x + j));
    _mm256_storeu_pd(acc + j, _mm256_fmadd_pd(vw, vx, _mm256_loadu_pd(acc + j)));
  }
  for (; j < n; ++j) acc[j] = std::fma(w, static_cast<double>(x[j]), acc[j]);
}

void weighted_accumulate_avx2(double w, const float* fisher, const float* theta, double* num,
                              double* den, std::size_t n) {
  const __m256d vw = _mm256_set1_pd(w);
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    const __m256d wf = _mm256_mul_pd(vw, _mm256_cvtps_pd(_mm_loadu_ps(fisher + j)));
    const __m256d th = _mm256_cvtps_pd(_mm_loadu_ps(theta + j));
    _mm256_storeu_pd(num + j, _mm256_fmadd_pd(wf, th, _mm256_loadu_pd(num + j)));
    _mm256_storeu_pd(den + j, _mm256_add_pd(_mm256_loadu_pd(den + j), wf));
  }
  for (; j < n; ++j) {
    const double wf = w * static_cast<double>(fisher[j]);
    num[j] = std::fma(wf, static_cast<double>(theta[j]), num[j]);
    den[j] = den[j] + wf;
  }
}

void ratio_avx2(const double* num, const double* den, double floor, float* out, std::size_t n) {
  const __m256d vfloor = _mm256_set1_pd(floor);
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    const __m256d q =
        _mm256_div_pd(_mm256_loadu_pd(num + j), _mm256_add_pd(_mm256_loadu_pd(den + j), vfloor));
    _mm_storeu_ps(out + j, _mm256_cvtpd_ps(q));
  }
  for (; j < n; ++j) out[j] = static_cast<float>(num[j] / (den[j] + floor));
}

void scale_div_avx2(const double* acc, double denom, float* out, std::size_t n) {
  const __m256d vd = _mm256_set1_pd(denom);
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    _mm_storeu_ps(out + j, _mm256_cvtpd_ps(_mm256_div_pd(_mm256_loadu_pd(acc + j), vd)));
  }
  for (; j < n; ++j) out[j] = static_cast<float>(acc[j] / denom);
}

float dot_avx2(const float* x, const float* y, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  const std::size_t body = n - n % 8;
  for (std::size_t j = 0; j < body; j += 8) {
    acc = _mm256_fmadd_ps(_mm256_loadu_ps(x + j), _mm256_loadu_ps(y + j), acc);
  }
  __m128 v = _mm_add_ps(_mm256_castps256_ps128(acc), _mm256_extractf128_ps(acc, 1));
  v = _mm_add_ps(v, _mm_movehl_ps(v, v));
  v = _mm_add_ss(v, _mm_shuffle_ps(v, v, 0x1));
  float s = _mm_cvtss_f32(v);
  for (std::size_t j = body; j < n; ++j) s = std::fma(x[j], y[j], s);
  return s;
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable table{
      "avx2",           axpy_avx2,  diff_axpy_avx2,     blend_avx2, sub_avx2, accumulate_avx2,
      weighted_accumulate_avx2, ratio_avx2, scale_div_avx2, dot_avx2,
  };
  static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return supported ? &table : nullptr;
}

}  // namespace mevo::kernels

#else

namespace mevo::kernels {
const KernelTable* avx2_table() { return nullptr; }
}  // namespace mevo::kernels

#endif
