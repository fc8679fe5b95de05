#include <cassert>
#include <cstdlib>
#include <string>

#include "mevo/error.hpp"
#include "mevo/kernels.hpp"

namespace mevo::kernels {
namespace {

const KernelTable& select_table() {
  if (const char* force = std::getenv("MEVO_FORCE_SCALAR"); force && std::string(force) == "1") {
    return scalar_table();
  }
  if (const KernelTable* t = avx2_table()) return *t;
  if (const KernelTable* t = neon_table()) return *t;
  return scalar_table();
}

template <typename... Spans>
void require_sizes(std::size_t n, const Spans&... spans) {
  if (((spans.size() != n) || ...)) {
    throw InvalidArgument("kernel operands have mismatched lengths");
  }
}

}  // namespace

const KernelTable& active() {
  static const KernelTable& table = select_table();
  return table;
}

std::string_view active_name() { return active().name; }

void axpy(float a, std::span<const float> x, std::span<const float> y, std::span<float> out) {
  require_sizes(x.size(), y, out);
  active().axpy(a, x.data(), y.data(), out.data(), x.size());
}

void diff_axpy(float f, std::span<const float> base, std::span<const float> r1,
               std::span<const float> r2, std::span<float> out) {
  require_sizes(base.size(), r1, r2, out);
  active().diff_axpy(f, base.data(), r1.data(), r2.data(), out.data(), base.size());
}

void blend(std::span<const std::uint8_t> mask, std::span<const float> a, std::span<const float> b,
           std::span<float> out) {
  require_sizes(a.size(), mask, b, out);
  active().blend(mask.data(), a.data(), b.data(), out.data(), a.size());
}

void sub(std::span<const float> x, std::span<const float> y, std::span<float> out) {
  require_sizes(x.size(), y, out);
  active().sub(x.data(), y.data(), out.data(), x.size());
}

void accumulate(double w, std::span<const float> x, std::span<double> acc) {
  require_sizes(x.size(), acc);
  active().accumulate(w, x.data(), acc.data(), x.size());
}

void weighted_accumulate(double w, std::span<const float> fisher, std::span<const float> theta,
                         std::span<double> num, std::span<double> den) {
  require_sizes(fisher.size(), theta, num, den);
  active().weighted_accumulate(w, fisher.data(), theta.data(), num.data(), den.data(),
                               fisher.size());
}

void ratio(std::span<const double> num, std::span<const double> den, double floor,
           std::span<float> out) {
  require_sizes(num.size(), den, out);
  active().ratio(num.data(), den.data(), floor, out.data(), num.size());
}

void scale_div(std::span<const double> acc, double denom, std::span<float> out) {
  require_sizes(acc.size(), out);
  active().scale_div(acc.data(), denom, out.data(), acc.size());
}

float dot(std::span<const float> x, std::span<const float> y) {
  require_sizes(x.size(), y);
  return active().dot(x.data(), y.data(), x.size());
}

}  // namespace mevo::kernels
