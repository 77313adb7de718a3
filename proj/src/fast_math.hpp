#pragma once

#include <cmath>
#include <cstdint>

namespace sacnet::detail {

// Cephes-style expd: 2^n * rational(r) after range reduction with a split
// ln(2). Accurate to about 1 ulp, several times faster than libm under the
// softmax-heavy attention loops.
inline double fast_exp(double x) {
  if (x > 709.0) return HUGE_VAL;
  if (x < -709.0) return 0.0;
  static constexpr double kLog2E = 1.4426950408889634073599;
  static constexpr double kC1 = 6.93145751953125e-1;
  static constexpr double kC2 = 1.42860682030941723212e-6;
  const double n = std::floor(kLog2E * x + 0.5);
  x -= n * kC1;
  x -= n * kC2;
  const double xx = x * x;
  double px = 1.26177193074810590878e-4;
  px = px * xx + 3.02994407707441961300e-2;
  px = px * xx + 9.99999999999999999910e-1;
  px *= x;
  double qx = 3.00198505138664455042e-6;
  qx = qx * xx + 2.52448340349684104192e-3;
  qx = qx * xx + 2.27265548208155028766e-1;
  qx = qx * xx + 2.0;
  const double r = 1.0 + 2.0 * (px / (qx - px));
  return std::ldexp(r, static_cast<int>(n));
}

}  // namespace sacnet::detail
