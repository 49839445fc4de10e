#pragma once

#include <bit>
#include <cmath>
#include <cstdint>

namespace prf {

// Branchless float transcendentals, accurate to a few ulp over the ranges the
// pipeline uses (|x| < ~4e3 for sin/cos args, exp args clamped). They exist so
// the elementwise hot loops vectorize; results are identical regardless of
// thread count or libm version. Double falls through to std.

inline float fastExp(float x) {
  constexpr float kLog2e = 1.44269504088896341f;
  constexpr float kC1 = 0.693359375f;
  constexpr float kC2 = -2.12194440e-4f;
  x = x < -87.0f ? -87.0f : (x > 88.0f ? 88.0f : x);
  float n = std::nearbyintf(x * kLog2e);
  float r = x - n * kC1 - n * kC2;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  float y = 1.0f + r + r * r * p;
  int32_t e = static_cast<int32_t>(n);
  float scale = std::bit_cast<float>((e + 127) << 23);
  return y * scale;
}

inline void fastSinCos(float x, float& s, float& c) {
  constexpr float kTwoOverPi = 0.63661977236758134f;
  constexpr float kDP1 = 0.78515625f;
  constexpr float kDP2 = 2.4187564849853515625e-4f;
  constexpr float kDP3 = 3.77489497744594108e-8f;
  float q = std::nearbyintf(x * kTwoOverPi);
  float r = ((x - q * kDP1) - q * kDP2) - q * kDP3;
  int32_t iq = static_cast<int32_t>(q);
  float r2 = r * r;
  float ps = -1.9515295891e-4f;
  ps = ps * r2 + 8.3321608736e-3f;
  ps = ps * r2 - 1.6666654611e-1f;
  float sinr = r + r * r2 * ps;
  float pc = 2.443315711809948e-5f;
  pc = pc * r2 - 1.388731625493765e-3f;
  pc = pc * r2 + 4.166664568298827e-2f;
  float cosr = 1.0f - 0.5f * r2 + r2 * r2 * pc;
  // Quadrant selection without branches.
  bool swap = iq & 1;
  float ss = swap ? cosr : sinr;
  float cc = swap ? sinr : cosr;
  float ssign = (iq & 2) ? -1.0f : 1.0f;
  float csign = ((iq + 1) & 2) ? -1.0f : 1.0f;
  s = ss * ssign;
  c = cc * csign;
}

inline float fastSin(float x) {
  float s, c;
  fastSinCos(x, s, c);
  return s;
}

inline float fastCos(float x) {
  float s, c;
  fastSinCos(x, s, c);
  return c;
}

template <typename T>
inline T tExp(T x) { return std::exp(x); }
template <>
inline float tExp<float>(float x) { return fastExp(x); }

template <typename T>
inline void tSinCos(T x, T& s, T& c) {
  s = std::sin(x);
  c = std::cos(x);
}
template <>
inline void tSinCos<float>(float x, float& s, float& c) { fastSinCos(x, s, c); }

template <typename T>
inline T tSin(T x) { return std::sin(x); }
template <>
inline float tSin<float>(float x) { return fastSin(x); }

template <typename T>
inline T tCos(T x) { return std::cos(x); }
template <>
inline float tCos<float>(float x) { return fastCos(x); }

}  // namespace prf
