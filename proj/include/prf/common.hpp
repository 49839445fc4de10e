#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace prf {

template <typename T>
struct Vec3T {
  T x = 0, y = 0, z = 0;

  Vec3T() = default;
  Vec3T(T x_, T y_, T z_) : x(x_), y(y_), z(z_) {}

  T& operator[](int i) { return (&x)[i]; }
  T operator[](int i) const { return (&x)[i]; }
  bool operator==(const Vec3T&) const = default;

  Vec3T operator+(const Vec3T& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3T operator-(const Vec3T& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3T operator*(T s) const { return {x * s, y * s, z * s}; }
  Vec3T operator/(T s) const { return {x / s, y / s, z / s}; }
  Vec3T operator-() const { return {-x, -y, -z}; }
  Vec3T& operator+=(const Vec3T& o) { x += o.x; y += o.y; z += o.z; return *this; }
  Vec3T& operator-=(const Vec3T& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
  Vec3T& operator*=(T s) { x *= s; y *= s; z *= s; return *this; }

  T dot(const Vec3T& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3T cross(const Vec3T& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  T norm2() const { return dot(*this); }
  T norm() const { return std::sqrt(norm2()); }
  Vec3T normalized() const {
    T n = norm();
    return n > 0 ? *this / n : Vec3T{0, 0, 0};
  }
  Vec3T cwiseMul(const Vec3T& o) const { return {x * o.x, y * o.y, z * o.z}; }
  Vec3T cwiseMin(const Vec3T& o) const {
    return {std::min(x, o.x), std::min(y, o.y), std::min(z, o.z)};
  }
  Vec3T cwiseMax(const Vec3T& o) const {
    return {std::max(x, o.x), std::max(y, o.y), std::max(z, o.z)};
  }
  T minCoeff() const { return std::min(x, std::min(y, z)); }
  T maxCoeff() const { return std::max(x, std::max(y, z)); }

  template <typename U>
  Vec3T<U> cast() const { return {static_cast<U>(x), static_cast<U>(y), static_cast<U>(z)}; }
};

template <typename T>
inline Vec3T<T> operator*(T s, const Vec3T<T>& v) { return v * s; }

using Vec3 = Vec3T<double>;
using Vec3f = Vec3T<float>;
using Vec3i = Vec3T<int>;

// Axis-aligned box; the scene bound everything is expressed in.
struct AABB {
  Vec3 min{-1, -1, -1};
  Vec3 max{1, 1, 1};

  Vec3 extent() const { return max - min; }
  Vec3 center() const { return (min + max) * 0.5; }
  bool contains(const Vec3& p) const {
    return p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y &&
           p.z >= min.z && p.z <= max.z;
  }
  Vec3 clampPoint(const Vec3& p) const { return p.cwiseMax(min).cwiseMin(max); }

  // Slab test. Returns false on miss; tnear clamped to >= 0.
  bool intersectRay(const Vec3& o, const Vec3& d, double& tnear, double& tfar) const {
    double t0 = 0, t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      double inv = 1.0 / d[a];
      double ta = (min[a] - o[a]) * inv;
      double tb = (max[a] - o[a]) * inv;
      if (inv < 0) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
      if (t0 > t1) return false;
    }
    tnear = t0;
    tfar = t1;
    return true;
  }
};

template <typename T>
inline T clampv(T v, T lo, T hi) { return v < lo ? lo : (v > hi ? hi : v); }

inline std::runtime_error err(const std::string& msg) { return std::runtime_error(msg); }

}  // namespace prf
